"""
Checkpoint files: one ``.npz`` archive with

    theta   binary64 copy of the flat parameter vector
    meta    JSON string {"version", "architecture", "seed", "precision", ...}

The architecture descriptor is enough to rebuild the network.
"""

import json
import logging
import os

import numpy as np
from pydantic import ValidationError

from surrogate_services.errors import UsageError
from surrogate_services.networks.resnet import build_network
from surrogate_services.networks.schemas import ArchitectureSpec

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "surrogate-checkpoint/1"


def save_checkpoint(path: str, arch: ArchitectureSpec, theta: np.ndarray, seed: int,
                    precision: str, **extra) -> str:
    """Writes theta (as binary64) and its descriptor; returns the path written."""
    theta = np.asarray(theta)
    if theta.shape != (build_network(arch).param_count,):
        raise UsageError(f"theta has shape {theta.shape}, architecture needs {build_network(arch).param_count}")
    meta = {
        "version": CHECKPOINT_VERSION,
        "architecture": arch.model_dump(mode="json"),
        "seed": int(seed),
        "precision": precision,
        **extra,
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as handle:
        np.savez(handle, theta=theta.astype(np.float64), meta=np.array(json.dumps(meta, sort_keys=True)))
    logger.info("checkpoint written to %s", path)
    return path


def load_checkpoint(path: str) -> tuple[ArchitectureSpec, np.ndarray, dict]:
    """
    Reads a checkpoint.

    Returns:
        (architecture, theta in binary64, meta dictionary)

    Raises:
        UsageError: unknown version tag, broken descriptor or parameter count mismatch.
    """
    with np.load(path, allow_pickle=False) as archive:
        theta = archive["theta"]
        meta = json.loads(str(archive["meta"]))
    if meta.get("version") != CHECKPOINT_VERSION:
        raise UsageError(f"unsupported checkpoint version {meta.get('version')!r} in {path}")
    try:
        arch = ArchitectureSpec(**meta["architecture"])
    except (KeyError, ValidationError) as e:
        raise UsageError(f"checkpoint {path} has an invalid architecture descriptor: {e}") from e
    if theta.shape != (build_network(arch).param_count,):
        raise UsageError(f"checkpoint {path} holds {theta.size} parameters, "
                         f"architecture needs {build_network(arch).param_count}")
    return arch, theta, meta
