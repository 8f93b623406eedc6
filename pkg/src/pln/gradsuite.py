"""Registry of finite-difference checks for every differentiable op and the micro model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, grad_check, ops

OP_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tol


def _lstm(x, h, c, W, b):
    h2, c2 = ops.lstm_cell(x, h, c, {"W": W, "b": b})
    return ops.concat([h2, c2], axis=-1)


def _bce(z, rng):
    y = rng.uniform(size=z.shape)
    m = rng.uniform(size=z.shape) < 0.7
    m.flat[0] = True
    return lambda t: ops.bce(ops.sigmoid(t), y, m)


# name -> (builder(rng) -> (fn, inputs))
def _cases() -> dict[str, Callable]:
    n = lambda rng, *shape: Tensor(rng.standard_normal(shape))  # noqa: E731

    def pos_maps(rng):
        m = rng.uniform(size=(3, 4)) < 0.6
        return m

    return {
        "affine": lambda r: (ops.affine, [n(r, 3, 4), n(r, 4, 5), n(r, 5)]),
        "mul": lambda r: (ops.mul, [n(r, 3, 4), n(r, 3, 4)]),
        "add": lambda r: (ops.add, [n(r, 3, 4), n(r, 3, 4)]),
        "maximum": lambda r: (ops.maximum, [n(r, 3, 4), n(r, 3, 4)]),
        "sub": lambda r: (ops.sub, [n(r, 3, 4), n(r, 3, 4)]),
        "scale": lambda r: (lambda x: ops.scale(x, 1.7), [n(r, 3, 4)]),
        "mask": lambda r: ((lambda m: lambda x: ops.mask(x, m))(pos_maps(r)), [n(r, 3, 4)]),
        "add_const": lambda r: ((lambda c: lambda x: ops.add_const(x, c))(r.standard_normal((3, 4))), [n(r, 3, 4)]),
        "broadcast_to": lambda r: (lambda x: ops.broadcast_to(x, (2, 3, 4)), [n(r, 3, 1)]),
        "reshape": lambda r: (lambda x: ops.reshape(x, (4, 3)), [n(r, 3, 4)]),
        "transpose": lambda r: (lambda x: ops.transpose(x, (2, 0, 1)), [n(r, 2, 3, 4)]),
        "getitem": lambda r: (lambda x: ops.getitem(x, np.array([0, 2, 2, 1])), [n(r, 3, 4)]),
        "concat": lambda r: (lambda a, b: ops.concat([a, b], axis=1), [n(r, 3, 2), n(r, 3, 4)]),
        "stack": lambda r: (lambda a, b: ops.stack([a, b], axis=1), [n(r, 3, 4), n(r, 3, 4)]),
        "sum": lambda r: (lambda x: ops.sum(x, axis=1), [n(r, 3, 4)]),
        "mean": lambda r: (lambda x: ops.mean(x, axis=0), [n(r, 3, 4)]),
        "add_n": lambda r: (lambda a, b, c: ops.add_n([a, b, c]), [n(r, 3, 4), n(r, 3, 4), n(r, 3, 4)]),
        "sigmoid": lambda r: (ops.sigmoid, [n(r, 3, 4)]),
        "relu": lambda r: (ops.relu, [n(r, 3, 4)]),
        "tanh": lambda r: (ops.tanh, [n(r, 3, 4)]),
        "conv2d": lambda r: (lambda x, w, b: ops.conv2d(x, w, b, 1), [n(r, 2, 2, 5, 5), n(r, 3, 2, 3, 3), n(r, 3)]),
        "pool2d_max": lambda r: (lambda x: ops.pool2d(x, "max", 2, 1), [n(r, 2, 5, 5)]),
        "pool2d_mean": lambda r: (lambda x: ops.pool2d(x, "mean", 3, 2), [n(r, 2, 5, 5)]),
        "upsample2x": lambda r: (ops.upsample2x, [n(r, 2, 3, 3)]),
        "range_max": lambda r: (ops.range_max, [n(r, 2, 5, 3)]),
        "lstm_cell": lambda r: (_lstm, [n(r, 2, 3), n(r, 2, 4), n(r, 2, 4), Tensor(r.standard_normal((7, 16)) * 0.5),
                                        n(r, 16)]),
        "bce": lambda r: ((lambda z: (_bce(z.data, r), [z]))(n(r, 3, 4))),
    }


OP_NAMES = tuple(_cases())


def check_op(name: str, seed: int) -> CheckResult:
    """Central-difference check of one op, scalarised with fixed random weights."""
    rng = np.random.default_rng(seed)
    fn, inputs = _cases()[name](rng)
    for t in inputs:
        t.data = t.data.astype(np.float64)
    out = fn(*inputs)
    if out.size == 1:
        scalar = fn
    else:
        w = Tensor(np.random.default_rng(1000 + seed).standard_normal(out.shape))
        scalar = lambda *xs: ops.sum(ops.mul(fn(*xs), w))  # noqa: E731
    return CheckResult(name, seed, grad_check(scalar, inputs), OP_TOL)


def check_ops(seeds=range(5)) -> list[CheckResult]:
    """One row per registered op: the worst error over ``seeds``."""
    return [max((check_op(name, s) for s in seeds), key=lambda r: r.error) for name in OP_NAMES]


def check_model(seed: int = 0, max_elements: int | None = None) -> CheckResult:
    """Two-stage micro model (d=4, N=4/8, one sample) against finite differences."""
    from .branch import PLN, Batch
    from .config import ModelConfig, make_stages
    from .training import LabelCache

    cfg = ModelConfig(d_raw=3, d=4, vocab_size=6, embed_dim=3, query_hidden=4, stages=make_stages([4, 8]),
                      conv_kernel=3, init_seed=seed, dtype="float64")
    model = PLN(cfg)
    rng = np.random.default_rng(seed)
    batch = Batch(rng.standard_normal((1, 8, 3)), [[0, 3, 1]], np.array([8.0]), np.array([[2.0, 5.0]]))

    class _S:
        gt = (2.0, 5.0)
        duration_seconds = 8.0

    cache = LabelCache(model, [_S()], tau=0.5)
    idx = np.array([0])

    def loss(*_params):
        from .training import joint_loss
        return joint_loss(cache.batch_losses(model.forward(batch), idx), cfg.lambdas)

    err = grad_check(loss, model.parameters(), max_elements=max_elements, seed=seed)
    return CheckResult("pln_micro_model", seed, err, MODEL_TOL)


def format_table(results: list[CheckResult]) -> str:
    lines = [f"{'check':<18} {'seed':>4} {'rel.err':>10} {'tol':>8}  status"]
    for r in results:
        lines.append(f"{r.name:<18} {r.seed:>4} {r.error:>10.2e} {r.tol:>8.0e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
