"""Masked contrastive reconstruction for paired image-report pretraining, at desk scale."""

from .config import ConfigError, ExperimentConfig, load_config
from .data import DataError, StudyPair, SyntheticSpec, generate_corpus, load_manifest
from .evaluation import RetrievalIndex, recall_at_k
from .experiments import ARMS, run_arm
from .training import build_model, init_state, train

__version__ = "0.1.0"
