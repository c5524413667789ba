"""Core-behavior and interest-distribution CTR model on a small numpy autodiff engine."""

from .config import TrainConfig, load_config
from .data import SampleSet, Schema, SynthConfig, batches, build_samples, parse_log, synth_generate
from .metrics import auc, gauc, logloss
from .model import CTRModel, build_variant
from .trainer import evaluate, load_checkpoint, save_checkpoint, sweep, train

__all__ = ["TrainConfig", "load_config", "SampleSet", "Schema", "SynthConfig", "batches", "build_samples",
           "parse_log", "synth_generate", "auc", "gauc", "logloss", "CTRModel", "build_variant", "evaluate",
           "load_checkpoint", "save_checkpoint", "sweep", "train"]
__version__ = "0.1.0"
