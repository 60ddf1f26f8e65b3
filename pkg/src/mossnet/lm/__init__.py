"""Toy byte-level language model built from MossNet blocks."""

from .config import MossNetConfig, RunConfig, ablation_variants, desk_config, published_config
from .model import BOS, MossNetLM, count_parameters
