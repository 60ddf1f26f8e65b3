"""Mixture-of-state-space-experts blocks, an attention-equivalence oracle, a toy LM and a profiler."""

from . import attention_oracle, block, moe, numerics, profiler, ssm_kernel
from .block import BlockConfig, BlockState, MossNetBlockParams, block_forward, block_step, init_block
from .errors import (ConfigError, ContractError, DimensionError, ParameterDomainError, SingularityError,
                     TrainingDiverged)
from .numerics import Rng, Tensor, backward

__version__ = "0.1.0"
