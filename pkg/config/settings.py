import os
from dotenv import load_dotenv

# --- Locate project root ---
# settings.py sits in <root>/config; runs and presets are resolved from <root>.
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
dotenv_path = os.path.join(PROJECT_ROOT, ".env")

# --- Load variables from .env at project root ---
load_dotenv(dotenv_path)

# --- Run artifacts ---
OUTPUT_DIR = os.getenv("SURROGATE_OUTPUT_DIR", os.path.join(PROJECT_ROOT, "runs"))
CONFIG_DIR = os.path.join(PROJECT_ROOT, "configs")

# --- Logging ---
LOG_LEVEL = os.getenv("SURROGATE_LOG_LEVEL", "INFO").upper()
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# --- Experiment defaults (overridable per config file) ---
DEFAULT_SEED = int(os.getenv("SURROGATE_SEED", "0"))
WORKERS = int(os.getenv("SURROGATE_WORKERS", "1"))
METRIC_EVERY = int(os.getenv("SURROGATE_METRIC_EVERY", "10"))
K_TRAIN = int(os.getenv("SURROGATE_K_TRAIN", "512"))
N_TEST = int(os.getenv("SURROGATE_N_TEST", "128"))

if WORKERS < 1:
    print("⚠️ WARNING: SURROGATE_WORKERS must be >= 1, falling back to 1")
    WORKERS = 1
