import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fnetar import numerics as nx  # noqa: E402
from fnetar.model import ModelConfig, init_model  # noqa: E402


@pytest.fixture(autouse=True)
def fresh_tape():
    nx.new_tape()
    yield
    nx.new_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(pattern="AF", l_seq=4, l_mem=4, d_model=16, vocab_size=11, **kw):
    return ModelConfig(vocab_size=vocab_size, d_model=d_model, n_heads=2, d_ff=2 * d_model,
                       n_layers=len(pattern), layer_pattern=pattern, l_seq=l_seq, l_mem=l_mem, **kw)


@pytest.fixture
def small_model():
    return init_model(small_config())
