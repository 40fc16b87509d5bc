import configparser
import os
from enum import Enum
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from config import settings
from surrogate_services.discretization.stable_op import Formulation
from surrogate_services.errors import UsageError
from surrogate_services.networks.schemas import ArchitectureKind, ArchitectureSpec
from surrogate_services.numerics.precision import ScalarKind
from surrogate_services.training import optim
from surrogate_services.training.objective import Preconditioning


class OptimizerName(str, Enum):
    adam = "adam"
    sgd = "sgd"
    lbfgs = "lbfgs"
    ngd = "ngd"


# 1. [run] section: what is trained, in which precision, for how long.
class RunSection(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = "run"
    formulation: Formulation = Formulation.fosls
    preconditioning: Preconditioning = Preconditioning.frame_stable
    precision: Literal["f16", "f32", "f64"] = "f32"
    J: int = Field(default=10, ge=1, le=16)
    epochs: int = Field(default=6000, ge=0)
    seed: int = settings.DEFAULT_SEED
    metric_every: int = Field(default=settings.METRIC_EVERY, ge=1)
    output_dir: Optional[str] = None

    @property
    def kind(self) -> ScalarKind:
        return ScalarKind.parse(self.precision)


# 2. [model] section: the coefficient network.
class ModelSection(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    kind: ArchitectureKind = ArchitectureKind.full
    blocks: int = Field(default=8, ge=0)
    rank: int = Field(default=8, ge=1)
    subnet_blocks: int = Field(default=8, ge=0)
    level_blocks: int = Field(default=4, ge=0)
    output_bias: bool = False


# 3. [optimizer] section. Unset values take the per-precision protocol defaults.
class OptimizerSection(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: OptimizerName = OptimizerName.adam
    lr: Optional[float] = Field(default=None, gt=0)
    eta_min: Optional[float] = Field(default=None, ge=0)
    t_max: int = Field(default=5000, ge=1)
    adam_epsilon: Optional[float] = Field(default=None, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    history_size: int = Field(default=100, ge=1)
    max_iters: int = Field(default=20, ge=1)
    max_evals: int = Field(default=25, ge=1)
    tolerance_grad: Optional[float] = Field(default=None, ge=0)
    tolerance_change: Optional[float] = Field(default=None, ge=0)
    ngd_epsilon: Optional[float] = Field(default=None, gt=0)
    cg_tol: Optional[float] = Field(default=None, gt=0)
    cg_max_iters: int = Field(default=20, ge=1)
    line_search_iters: int = Field(default=20, ge=1)

    def schedule(self, kind: ScalarKind) -> optim.CosineSchedule:
        eta0 = 1e-3 if self.lr is None else self.lr
        eta_min = optim.ETA_MIN[kind] if self.eta_min is None else self.eta_min
        return optim.CosineSchedule(eta0=eta0, eta_min=min(eta_min, eta0), t_max=self.t_max)

    def adam_eps(self, kind: ScalarKind) -> float:
        return optim.ADAM_EPSILON[kind] if self.adam_epsilon is None else self.adam_epsilon

    def lbfgs_state(self, kind: ScalarKind) -> optim.LbfgsState:
        tol = optim.LBFGS_TOLERANCE[kind]
        return optim.LbfgsState(
            history_size=self.history_size,
            lr=1.0 if self.lr is None else self.lr,
            max_iters=self.max_iters,
            max_evals=self.max_evals,
            tolerance_grad=tol if self.tolerance_grad is None else self.tolerance_grad,
            tolerance_change=tol if self.tolerance_change is None else self.tolerance_change,
        )

    def ngd_config(self, kind: ScalarKind) -> optim.NgdConfig:
        tol = optim.NGD_TOLERANCE[kind]
        return optim.NgdConfig(
            epsilon=tol if self.ngd_epsilon is None else self.ngd_epsilon,
            cg_tol=tol if self.cg_tol is None else self.cg_tol,
            cg_max_iters=self.cg_max_iters,
            step=1.0 if self.lr is None else self.lr,
            line_search_iters=self.line_search_iters,
        )


# 4. [data] section: parameter samples and the source term.
class DataSection(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    k_train: int = Field(default=settings.K_TRAIN, ge=1)
    n_test: int = Field(default=settings.N_TEST, ge=1)
    f: float = 1.0


# 5. A complete run description. Config files map one-to-one onto its sections.
class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    run: RunSection = RunSection()
    model: ModelSection = ModelSection()
    optimizer: OptimizerSection = OptimizerSection()
    data: DataSection = DataSection()

    @model_validator(mode="after")
    def _compatible(self):
        if self.optimizer.name is OptimizerName.ngd and self.run.formulation is not Formulation.fosls:
            raise ValueError("ngd needs the least-squares (fosls) formulation")
        if self.run.preconditioning is Preconditioning.none and self.model.kind is ArchitectureKind.separate_frame:
            raise ValueError("separate_frame networks need frame preconditioning")
        return self

    def architecture(self) -> ArchitectureSpec:
        output = "nodal" if self.run.preconditioning is Preconditioning.none else "frame"
        return ArchitectureSpec(J=self.run.J, formulation=self.run.formulation, output=output,
                                **self.model.model_dump())

    def output_path(self) -> str:
        return self.run.output_dir or os.path.join(settings.OUTPUT_DIR, self.run.name)


# 6. One row of the metrics CSV.
class MetricsRecord(BaseModel):
    model_config = ConfigDict(frozen=True, ser_json_inf_nan="constants")

    epoch: int
    train_loss: float
    test_loss: float
    mre: float
    mse: float
    wall_time: float


# 7. What a run leaves behind.
class RunReport(BaseModel):
    config: ExperimentConfig
    parameter_count: int
    records: List[MetricsRecord] = []
    status: Literal["completed", "diverged"] = "completed"
    events: List[str] = []
    metrics_csv: Optional[str] = None
    checkpoint: Optional[str] = None

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    @property
    def final(self) -> Optional[MetricsRecord]:
        return self.records[-1] if self.records else None


SECTIONS = ("run", "model", "optimizer", "data")

PRESETS = {
    "desk": {"run": {"J": 6, "epochs": 1500}, "data": {"k_train": 128, "n_test": 32}},
    "full_scale": {"run": {"J": 10, "epochs": 6000}, "data": {"k_train": 512, "n_test": 128}},
}


def _validation_message(e: ValidationError) -> str:
    first = e.errors()[0]
    key = ".".join(str(part) for part in first["loc"]) or "config"
    return f"{key}: {first['msg']}"


def build_config(sections: dict, preset: Optional[str] = None) -> ExperimentConfig:
    """Validates nested ``{section: {key: value}}`` data, optionally overlaid by a preset."""
    merged = {name: dict(values) for name, values in sections.items()}
    if preset is not None:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset {preset!r}, choose from {sorted(PRESETS)}")
        for name, values in PRESETS[preset].items():
            merged.setdefault(name, {}).update(values)
    try:
        return ExperimentConfig(**merged)
    except ValidationError as e:
        raise UsageError(f"invalid experiment config: {_validation_message(e)}") from e


def load_config(path: str, preset: Optional[str] = None) -> ExperimentConfig:
    """
    Reads an INI experiment file with sections [run], [model], [optimizer], [data].

    Raises:
        UsageError: missing file, unknown section or key, invalid value.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        read = parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise UsageError(f"cannot parse {path}: {e}") from e
    if not read:
        raise UsageError(f"config file {path} not found")
    unknown = [name for name in parser.sections() if name not in SECTIONS]
    if unknown:
        raise UsageError(f"{path}: unknown section(s) {unknown}, expected {list(SECTIONS)}")
    sections = {name: dict(parser.items(name)) for name in parser.sections()}
    sections.setdefault("run", {}).setdefault("name", os.path.splitext(os.path.basename(path))[0])
    return build_config(sections, preset)
