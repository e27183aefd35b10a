import numpy as np
import pytest

from cnngruskip import tensor as T
from cnngruskip.model import ModelConfig


def weighted_sum(out: T.Tensor, rng: np.random.Generator) -> T.Tensor:
    """Scalar probe ``sum(out * w)`` with fixed random weights."""
    w = T.Tensor(rng.normal(size=out.shape))
    return T.sum_(out * w)


def gradcheck(fn, inputs, h=1e-5):
    """Max relative error between backprop and central differences over ``inputs``."""
    for x in inputs:
        x.grad = None
    loss = fn()
    T.backward(loss)
    worst = 0.0
    for x in inputs:
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
        numeric = T.numerical_grad(fn, x, h)
        worst = max(worst, T.relative_error(analytic, numeric))
    return worst


def directional_check(fn, params, rng, h=1e-5):
    """Compare grad . v with a central difference along a random direction v."""
    for p in params:
        p.grad = None
    T.backward(fn())
    dirs = [rng.normal(size=p.shape) for p in params]
    analytic = sum(float(np.sum(p.grad * d)) for p, d in zip(params, dirs) if p.grad is not None)
    with T.no_grad():
        for p, d in zip(params, dirs):
            p.data += h * d
        fp = float(fn().data)
        for p, d in zip(params, dirs):
            p.data -= 2 * h * d
        fm = float(fn().data)
        for p, d in zip(params, dirs):
            p.data += h * d
    numeric = (fp - fm) / (2 * h)
    return T.relative_error(np.array(analytic), np.array(numeric))


def tiny_config(**kw) -> ModelConfig:
    base = dict(window_len=10, horizons=(10,), skip_step=4, n_periods=3,
                conv_channels=(2, 2, 2, 2, 2, 2), conv_kernels=(5, 3, 3, 3, 3, 3),
                gru_widths=(4, 4), gru_skip=2, dropout=0.0, d_model=8, heads=2,
                n_encoder=1, n_decoder=1, ff_width=8, head_widths=(8, 1))
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance report ---------------------------------------------------------------
ACCEPTANCE_LINES: list = []


def record_acceptance(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
