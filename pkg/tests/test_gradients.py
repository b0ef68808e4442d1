"""Autodiff versus central finite differences for every layer kind.

Each case uses float64, h = 1e-4, and asserts a worst relative error of at
most 1e-3. Entries whose magnitude is below 1e-8 are compared absolutely at
1e-6. Inputs are kept at least 1e-2 away from the ReLU and max-pool kinks.
"""

import numpy as np
import pytest

from underpass.engine import (
    Conv2d,
    Dense,
    Dropout,
    InstanceNorm,
    MaxPool2x2,
    ReLU,
    ResidualBlock,
    Sequential,
    Softmax,
    Tanh,
    Tensor,
    TransposeConv2d,
    cross_entropy,
    forward,
    l1,
    mse,
    no_grad,
)
from underpass.engine.gradcheck import error_split, numeric_grad

CASES = 20
H = 1e-4
REL_TOL = 1e-3
ABS_TOL = 1e-6


def _away_from_zero(x: np.ndarray, margin: float = 1e-2) -> np.ndarray:
    return np.sign(x) * (np.abs(x) + margin) + (x == 0) * margin


def _distinct(shape, rng) -> np.ndarray:
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.02 - n * 0.01 + rng.uniform(0, 0.005, n)).reshape(shape)


def _layer_case(seed: int):
    """(layer, input shape, input generator) for one randomized case per kind."""
    rng = np.random.default_rng(seed)
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    hw = tuple(int(v) for v in rng.integers(3, 7, size=2))
    c = int(rng.integers(1, 4))
    f = int(rng.integers(1, 4))
    normal = lambda shape: rng.normal(size=shape)  # noqa: E731
    return {
        "conv2d": (Conv2d(f, kernel=k, stride=stride), (*hw, c), normal),
        "transpose_conv2d": (TransposeConv2d(f, kernel=k, stride=stride), (*hw, c), normal),
        "maxpool": (MaxPool2x2(), (2 * hw[0], 2 * hw[1], c), lambda s: _distinct(s, rng)),
        "dense": (Dense(f + 2), (*hw, c), normal),
        "relu": (ReLU(), (*hw, c), lambda s: _away_from_zero(rng.normal(size=s))),
        "tanh": (Tanh(), (*hw, c), normal),
        "softmax": (Softmax(), (f + 3,), lambda s: 3 * rng.normal(size=s)),
        "dropout": (Dropout(float(rng.uniform(0.1, 0.7))), (*hw, c), normal),
        "instance_norm": (InstanceNorm(), (*hw, c), lambda s: rng.normal(1.0, 2.0, size=s)),
        "residual_block": (ResidualBlock(c), (4, 4, c), normal),
    }


def _perturb_params(net: Sequential, rng: np.random.Generator) -> None:
    # non-trivial norm scales and biases so every parameter path is exercised
    for p in net.params:
        p.data = p.data + rng.normal(0, 0.3, size=p.shape)


def _layer_errors(kind: str, seed: int) -> tuple[float, float]:
    layer, in_shape, gen = _layer_case(seed)[kind]
    rng = np.random.default_rng(1000 + seed)
    net = Sequential([layer], in_shape, seed=seed, dtype=np.float64)
    _perturb_params(net, rng)
    x = gen((2, *in_shape)).astype(np.float64)
    proj = rng.normal(size=(2, *net.output_shape))

    def run(inp: Tensor) -> Tensor:
        # dropout draws its mask from a freshly seeded generator every call
        return forward(layer, inp, net.params, "train", np.random.default_rng(seed))

    def value() -> float:
        with no_grad():
            return float((run(Tensor(x)).data * proj).sum())

    xt = Tensor(x, requires_grad=True)
    (run(xt) * Tensor(proj)).sum().backward()
    worst_rel, worst_abs = 0.0, 0.0
    for arr, grad in [(x, xt.grad)] + [(p.data, p.grad) for p in net.params]:
        rel, small = error_split(grad, numeric_grad(value, arr, H))
        worst_rel, worst_abs = max(worst_rel, rel), max(worst_abs, small)
    return worst_rel, worst_abs


LAYER_KINDS = list(_layer_case(0))


@pytest.mark.parametrize("kind", LAYER_KINDS)
def test_layer_gradients(kind):
    for seed in range(CASES):
        rel, small = _layer_errors(kind, seed)
        assert rel <= REL_TOL, f"{kind} case {seed}: relative error {rel:.2e}"
        assert small <= ABS_TOL, f"{kind} case {seed}: tiny-entry error {small:.2e}"


def _loss_errors(kind: str, seed: int) -> tuple[float, float]:
    rng = np.random.default_rng(seed)
    n, c = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    a = rng.normal(size=(n, c))
    b = rng.normal(size=(n, c))
    if kind == "l1":
        b = a + _away_from_zero(rng.normal(size=(n, c)))
    labels = rng.integers(0, c, size=n)
    fn = {
        "cross_entropy": lambda t: cross_entropy(t, labels),
        "mse": lambda t: mse(t, Tensor(b)),
        "l1": lambda t: l1(t, Tensor(b)),
    }[kind]
    at = Tensor(a, requires_grad=True)
    fn(at).backward()

    def value() -> float:
        with no_grad():
            return fn(Tensor(a)).item()

    return error_split(at.grad, numeric_grad(value, a, H))


@pytest.mark.parametrize("kind", ["cross_entropy", "mse", "l1"])
def test_loss_gradients(kind):
    for seed in range(CASES):
        rel, small = _loss_errors(kind, seed)
        assert rel <= REL_TOL and small <= ABS_TOL, f"{kind} case {seed}: {rel:.2e} / {small:.2e}"


def test_small_conv_net_end_to_end():
    rng = np.random.default_rng(7)
    net = Sequential([Conv2d(3), Tanh(), MaxPool2x2(), Conv2d(2, stride=2), Dense(4)], (6, 6, 2), seed=7, dtype=np.float64)
    x = rng.normal(size=(3, 6, 6, 2))
    labels = [0, 3, 1]
    cross_entropy(net(Tensor(x)), labels).backward()

    def value() -> float:
        with no_grad():
            return cross_entropy(net(Tensor(x)), labels).item()

    for p in net.params:
        rel, small = error_split(p.grad, numeric_grad(value, p.data, H))
        assert rel <= REL_TOL and small <= ABS_TOL, p.name
