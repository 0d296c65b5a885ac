import sys

import numpy as np
import pytest

import reference_runs
from rawlm.model import ModelConfig, ModelParams, init_params
from rawlm.numerics import (
    Tensor, add, attention, conv1d_same, dropout, index, layer_norm, linear, matmul, mean, mul,
    relu, reshape, scale, softmax, softmax_xent, square, sub, transpose, tsum,
)


def tiny_config(**overrides) -> ModelConfig:
    """The small architecture used for full-model gradient checks."""
    kw = dict(chunk_len=20, conv_channels=[8, 8, 8, 8, 8], embed_dim=16, n_layers=1, n_heads=2,
              ff_dim=16, head_dims=[16, 256], n_tokens_train=3)
    kw.update(overrides)
    return ModelConfig(**kw)


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def tiny_params(tiny):
    return init_params(tiny, np.random.default_rng(0), zero_head=False)


# -- per-op finite-difference cases ---------------------------------------------

def op_cases(rng) -> dict:
    """Scalar functions of a (3, 5) input, one per differentiable op."""
    w, b = Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=4))
    k, cb = Tensor(rng.normal(size=(4, 3, 3))), Tensor(rng.normal(size=4))
    gain, shift = Tensor(rng.normal(size=5)), Tensor(rng.normal(size=5))
    weights = Tensor(rng.normal(size=(3, 5)))
    other = Tensor(rng.normal(size=(5, 3)))
    target = rng.integers(0, 5, size=3)
    mask_seed = int(rng.integers(2**31))

    def weighted(t):
        return tsum(mul(t, weights))

    def attn(x, p=0.0):
        q = reshape(x, (1, 3, 5))
        out = attention(q, reshape(scale(x, 0.7), (1, 3, 5)), reshape(square(x), (1, 3, 5)),
                        dropout_p=p, rng=np.random.default_rng(mask_seed), training=p > 0)
        return weighted(reshape(out, (3, 5)))

    return {
        "add": lambda x: weighted(square(add(x, Tensor(np.arange(5.0))))),
        "sub": lambda x: weighted(square(sub(Tensor(np.ones((3, 1))), x))),
        "mul": lambda x: tsum(mul(mul(x, x), weights)),
        "mean": lambda x: mean(square(x)),
        "transpose": lambda x: tsum(mul(transpose(square(x), (1, 0)), other)),
        "index": lambda x: tsum(square(index(x, (slice(0, 2), 3)))),
        "matmul": lambda x: tsum(square(matmul(x, w))),
        "linear": lambda x: tsum(mul(linear(x, w, b), Tensor(np.ones((3, 4))))),
        "relu": lambda x: weighted(relu(x)),
        "layer_norm": lambda x: weighted(layer_norm(x, gain, shift)),
        "conv1d_same": lambda x: tsum(square(conv1d_same(x, k, cb, 2))),
        "softmax": lambda x: weighted(softmax(x)),
        "softmax_xent": lambda x: softmax_xent(x, target),
        "attention": attn,
        "attention_dropout": lambda x: attn(x, 0.3),
        "dropout": lambda x: weighted(dropout(square(x), 0.4, np.random.default_rng(mask_seed), True)),
        "square": lambda x: weighted(square(x)),
    }


OP_NAMES = list(op_cases(np.random.default_rng(0)))


# -- model helpers ---------------------------------------------------------------

def with_tensor(params: ModelParams, name: str, t: Tensor) -> ModelParams:
    tensors = dict(params.tensors)
    tensors[name] = t
    return ModelParams(params.config, tensors)


def generic_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Random init with jittered biases and norm shifts.

    Zero biases let a pre-activation sit exactly on the ReLU kink (a channel
    whose whole input window is dead outputs exactly 0.0), where one-sided
    and central differences disagree by construction.
    """
    params = init_params(cfg, np.random.default_rng(seed), zero_head=False)
    rng = np.random.default_rng(1000 + seed)
    for name, t in params.items():
        if name.endswith((".b", ".shift")):
            t.data[...] = rng.uniform(-0.1, 0.1, t.shape)
    return params


# -- shared trained models -------------------------------------------------------

@pytest.fixture(scope="session")
def overfit_trainer():
    return reference_runs.overfit_trainer()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
