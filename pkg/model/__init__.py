from .config import ModelConfig, PRESETS, get_preset, load_model_config
from .backbone import Model, build_model, forward
from .checkpoint import save_checkpoint, load_checkpoint

__all__ = ['ModelConfig', 'PRESETS', 'get_preset', 'load_model_config',
           'Model', 'build_model', 'forward', 'save_checkpoint', 'load_checkpoint']
