"""Session orchestration: configuration, pipelines, CLI-facing runners."""

from .config import SessionConfig, load_config, save_config
from .offline import run_offline
from .bench import bench

__all__ = ["SessionConfig", "load_config", "save_config", "run_offline", "bench"]
