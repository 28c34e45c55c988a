from .optim import OptimConfig, OptimState, AdamW, CosineSchedule
from .trainer import Trainer, train, evaluate
from .session import TrainingSession

__all__ = ['OptimConfig', 'OptimState', 'AdamW', 'CosineSchedule', 'Trainer', 'train', 'evaluate',
           'TrainingSession']
