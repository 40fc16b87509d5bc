import os
import sys

# --- Path Configuration ---
PROJECT_ROOT = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, PROJECT_ROOT)

from surrogate_services.cli import main  # noqa: E402

if __name__ == "__main__":
    raise SystemExit(main())
