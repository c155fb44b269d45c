"""Central finite-difference checks for every differentiable tensor op."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T

H = 1e-5
REL_TOL = 1e-4


@dataclass
class CheckResult:
    op: str
    instances: int
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < REL_TOL


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(num / den)


def check_gradients(fn: Callable[..., T.Tensor], arrays: list[np.ndarray], rng: np.random.Generator,
                    h: float = H) -> float:
    """Compare tape gradients of ``sum(fn(*xs) * R)`` with central differences.

    ``R`` is a fixed random projection so every output element matters.
    Returns the worst relative error over the inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = fn(*[T.Tensor(a) for a in arrays]).data
    proj = rng.standard_normal(probe.shape)

    def scalar(*xs):
        with T.no_grad():
            return float((fn(*[T.Tensor(a) for a in xs]).data * proj).sum())

    T.reset_tape()
    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    loss = T.sum_(T.mul(out, T.Tensor(proj)))
    T.backward(loss)

    worst = 0.0
    for k, a in enumerate(arrays):
        numeric = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = a[idx]
            a[idx] = orig + h
            fp = scalar(*arrays)
            a[idx] = orig - h
            fm = scalar(*arrays)
            a[idx] = orig
            numeric[idx] = (fp - fm) / (2 * h)
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(a)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable, list[np.ndarray]]]]:
    def attention_graph(rng):
        # small self-attention block: exercises matmul/softmax/reshape/transpose chains
        t, d = 3, 4
        mask = np.triu(np.full((t, t), -1e9), k=1)

        def fn(x, wq, wk, wv):
            q, k, v = T.matmul(x, wq), T.matmul(x, wk), T.matmul(x, wv)
            s = T.add(T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 0.5), T.Tensor(mask))
            return T.matmul(T.softmax(s), v)

        return fn, [rng.standard_normal((2, t, d)), *(rng.standard_normal((d, d)) * 0.5 for _ in range(3))]

    def mlp_graph(rng):
        def fn(x, w1, b1, w2):
            h = T.relu(T.linear(x, w1, b1))
            return T.sigmoid(T.matmul(h, w2))

        return fn, [_away_from_zero(rng, (4, 3)), rng.standard_normal((3, 5)), rng.standard_normal(5),
                    rng.standard_normal((5, 2))]

    def dropout_case(rng):
        seed = int(rng.integers(1 << 30))

        def fn(x):
            return T.dropout(x, 0.3, np.random.default_rng(seed), training=True)

        return fn, [rng.standard_normal((3, 4))]

    def ce_case(rng):
        tgt = rng.integers(0, 5, size=6)
        tgt[0] = -100

        return (lambda z: T.softmax_cross_entropy(z, tgt, ignore_index=-100)), [rng.standard_normal((6, 5))]

    def bce_case(rng):
        y = rng.integers(0, 2, size=(4, 3))
        return (lambda z: T.bce_with_logits(z, y)), [rng.standard_normal((4, 3)) * 2]

    def conv_case(stride, padding, k, c=2):
        def build(rng):
            return (lambda x, w, b: T.conv2d(x, w, stride=stride, padding=padding, bias=b)), [
                rng.standard_normal((2, c, 5, 5)), rng.standard_normal((3, c, k, k)), rng.standard_normal(3)]
        return build

    def maxpool_case(rng):
        return (lambda x: T.maxpool2d(x, 3, 2, padding=1)), [rng.standard_normal((2, 2, 6, 6))]

    def embed_case(rng):
        ids = rng.integers(0, 6, size=(2, 4))
        return (lambda tab: T.embedding(ids, tab)), [rng.standard_normal((6, 3))]

    def bn_case(training):
        def build(rng):
            rm, rv = rng.standard_normal(3), rng.random(3) + 0.5

            def fn(x, g, b):
                return T.batch_norm(x, g, b, rm.copy(), rv.copy(), training=training)

            return fn, [rng.standard_normal((3, 3, 2, 2)), rng.standard_normal(3), rng.standard_normal(3)]
        return build

    return {
        "add": lambda r: (T.add, [r.standard_normal((3, 4)), r.standard_normal((4,))]),
        "sub": lambda r: (T.sub, [r.standard_normal((2, 3)), r.standard_normal((2, 1))]),
        "mul": lambda r: (T.mul, [r.standard_normal((3, 4)), r.standard_normal((3, 4))]),
        "div": lambda r: (T.div, [r.standard_normal((3, 4)), r.random((3, 4)) + 0.5]),
        "exp": lambda r: (T.exp, [r.standard_normal((3, 3))]),
        "log": lambda r: (T.log, [r.random((3, 3)) + 0.5]),
        "relu": lambda r: (T.relu, [_away_from_zero(r, (4, 4))]),
        "sigmoid": lambda r: (T.sigmoid, [r.standard_normal((4, 4)) * 3]),
        "dropout": dropout_case,
        "sum": lambda r: ((lambda x: T.sum_(x, axis=1)), [r.standard_normal((3, 4))]),
        "mean": lambda r: ((lambda x: T.mean(x, axis=(0, 2), keepdims=True)), [r.standard_normal((2, 3, 4))]),
        "reshape": lambda r: ((lambda x: T.reshape(x, (6, 2))), [r.standard_normal((3, 4))]),
        "transpose": lambda r: ((lambda x: T.transpose(x, (2, 0, 1))), [r.standard_normal((2, 3, 4))]),
        "concat": lambda r: ((lambda a, b: T.concat([a, b], axis=1)), [r.standard_normal((2, 3)),
                                                                         r.standard_normal((2, 2))]),
        "getitem": lambda r: ((lambda x: T.getitem(x, (slice(None), slice(None, None, -1)))),
                              [r.standard_normal((3, 4))]),
        "matmul": lambda r: (T.matmul, [r.standard_normal((3, 4)), r.standard_normal((4, 2))]),
        "matmul_batched": lambda r: (T.matmul, [r.standard_normal((2, 3, 4)), r.standard_normal((4, 5))]),
        "embedding": embed_case,
        "softmax": lambda r: (T.softmax, [r.standard_normal((3, 5))]),
        "layer_norm": lambda r: ((lambda x, g, b: T.layer_norm(x, g, b)), [
            r.standard_normal((2, 3, 5)), r.standard_normal(5), r.standard_normal(5)]),
        "batch_norm_train": bn_case(True),
        "batch_norm_eval": bn_case(False),
        "softmax_cross_entropy": ce_case,
        "bce_with_logits": bce_case,
        "conv2d": conv_case(1, 1, 3),
        "conv2d_strided": conv_case(2, 0, 3),
        "conv2d_1x1_strided": conv_case(2, 0, 1),
        "conv2d_wide": conv_case(1, 1, 3, c=4),
        "conv2d_wide_strided": conv_case(2, 1, 3, c=5),
        "maxpool2d": maxpool_case,
        "global_avg_pool": lambda r: (T.global_avg_pool, [r.standard_normal((2, 3, 3, 2))]),
        "graph_attention": attention_graph,
        "graph_mlp": mlp_graph,
    }


OPS = tuple(_cases())


def run_suite(instances: int = 20, seed: int = 0, ops=None) -> list[CheckResult]:
    cases = _cases()
    results = []
    for name in ops or OPS:
        rng = np.random.default_rng([seed, OPS.index(name)])
        worst = 0.0
        for _ in range(instances):
            fn, arrays = cases[name](rng)
            worst = max(worst, check_gradients(fn, arrays, rng))
        results.append(CheckResult(name, instances, worst))
    return results
