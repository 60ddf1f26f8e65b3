import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mossnet.block import BlockConfig, block_param_shapes, params_from_dict
from mossnet.numerics import Rng, Tensor

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def random_block(cfg: BlockConfig, seed: int = 0, scale: float = 0.5):
    """Block with O(1) random weights so every path contributes visibly.

    Router logits are spread widely, A stays negative through A_log and the
    delta bias keeps steps in a moderate range.
    """
    rng = Rng(seed)
    tensors = {}
    for path, shape, init, _ in block_param_shapes(cfg):
        if path == "A_log":
            data = rng.uniform(shape, -1.0, 1.0)
        elif path == "dt_bias":
            data = rng.uniform(shape, -1.5, 0.5)
        elif path.startswith("router"):
            data = rng.normal(shape, std=1.0)
        else:
            data = rng.normal(shape, std=scale / np.sqrt(shape[0]) * 2)
        tensors[path] = Tensor(data, requires_grad=True, name=path)
    return params_from_dict(cfg, tensors)


@pytest.fixture
def rng():
    return Rng(1234)
