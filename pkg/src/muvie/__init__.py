"""Multi-task view synthesis with cross-view and cross-task attention on toy scenes."""

from .config import TASKS, Config, load_config
from .model import MTVSModel, ModelPredictor

__all__ = ["TASKS", "Config", "load_config", "MTVSModel", "ModelPredictor"]
__version__ = "0.1.0"
