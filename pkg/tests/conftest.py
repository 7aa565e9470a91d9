import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

sys.path.insert(0, str(Path(__file__).resolve().parent))


def config_path(name: str) -> str:
    return str(CONFIGS / name)
