"""Finite-difference verification of every differentiable op and the SAM block.

The error for one input is ``|g_auto - g_fd| / max(|g_auto|, |g_fd|)`` in the
L2 norm over that input; a case's error is the maximum over its inputs.  The
scalar probed is ``sum(output * R)`` with a fixed random ``R`` so every output
element contributes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .features import FeatureMap
from .sam import SamBlock, SamConfig, sam_forward
from .tensor import Tensor

STEP = 1e-5
TOLERANCE = 1e-5

CaseBuilder = Callable[[np.random.Generator], tuple[Callable[..., Tensor], list[np.ndarray]]]


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    passed: bool
    seconds: float

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag}  {self.name:<34s} max_rel_err={self.max_rel_error:.3e}"


def relative_error(auto: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(auto), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(auto - numeric) / scale)


def _probe(out: Tensor, weights: np.ndarray) -> float:
    return float((out.data * weights).sum())


def check_function(fn: Callable[..., Tensor], inputs: list[np.ndarray], seed: int = 0, step: float = STEP) -> float:
    """Max relative error of autodiff vs central differences over all inputs."""
    rng = np.random.default_rng(seed)
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    out = fn(*leaves)
    weights = rng.uniform(-1.0, 1.0, out.shape)
    loss = T.sum(T.mul(out, weights))
    T.backward(loss)
    worst = 0.0
    with T.no_grad():
        for i, x in enumerate(inputs):
            num = np.zeros_like(x, dtype=np.float64)
            flat = num.reshape(-1)
            for j in range(x.size):
                xp = x.astype(np.float64).copy()
                xm = xp.copy()
                xp.reshape(-1)[j] += step
                xm.reshape(-1)[j] -= step
                args_p = [Tensor(xp) if k == i else Tensor(inputs[k]) for k in range(len(inputs))]
                args_m = [Tensor(xm) if k == i else Tensor(inputs[k]) for k in range(len(inputs))]
                flat[j] = (_probe(fn(*args_p), weights) - _probe(fn(*args_m), weights)) / (2 * step)
            auto = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(num)
            worst = max(worst, relative_error(auto, num))
    return worst


def check_module(module, forward: Callable[[], Tensor], seed: int = 0, step: float = STEP,
                 extra: list[Tensor] | None = None) -> float:
    """Like :func:`check_function` but perturbs a module's parameters in place."""
    rng = np.random.default_rng(seed)
    params = list(module.parameters()) + list(extra or [])
    for p in params:
        p.requires_grad = True
        p.grad = None
    out = forward()
    weights = rng.uniform(-1.0, 1.0, out.shape)
    T.backward(T.sum(T.mul(out, weights)))
    worst = 0.0
    with T.no_grad():
        for p in params:
            num = np.zeros_like(p.data)
            flat = num.reshape(-1)
            base = p.data.copy()
            for j in range(p.size):
                p.data = base.copy()
                p.data.reshape(-1)[j] += step
                fp = _probe(forward(), weights)
                p.data = base.copy()
                p.data.reshape(-1)[j] -= step
                fm = _probe(forward(), weights)
                flat[j] = (fp - fm) / (2 * step)
            p.data = base
            auto = p.grad if p.grad is not None else np.zeros_like(num)
            worst = max(worst, relative_error(auto, num))
    return worst


# -- registered cases ------------------------------------------------------


def _u(rng, *shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, shape)


def _away_from_zero(rng, *shape, gap=0.05):
    x = rng.uniform(gap, 1.0, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def _separated(rng, *shape):
    """Values with pairwise gaps of >= 0.02 so argmax is stable under FD steps."""
    n = int(np.prod(shape))
    vals = np.linspace(-1.0, 1.0, n) + rng.uniform(-0.002, 0.002, n)
    return rng.permutation(vals).reshape(shape)


def _probs(rng, *shape, axis=1):
    p = rng.uniform(0.1, 1.0, shape)
    return p / p.sum(axis=axis, keepdims=True)


def _cases() -> dict[str, CaseBuilder]:
    c: dict[str, CaseBuilder] = {}
    c["add"] = lambda r: (T.add, [_u(r, 3, 4), _u(r, 4)])
    c["sub"] = lambda r: (T.sub, [_u(r, 3, 4), _u(r, 3, 1)])
    c["mul"] = lambda r: (T.mul, [_u(r, 2, 3, 4), _u(r, 3, 4)])
    c["div"] = lambda r: (T.div, [_u(r, 3, 4), _u(r, 3, 4, lo=0.5, hi=1.5)])
    c["neg"] = lambda r: (T.neg, [_u(r, 5)])
    c["power"] = lambda r: (lambda x: T.power(x, 2.5), [_u(r, 4, 3, lo=0.2, hi=1.0)])
    c["exp"] = lambda r: (T.exp, [_u(r, 4, 3)])
    c["log"] = lambda r: (T.log, [_u(r, 4, 3, lo=0.2, hi=1.0)])
    c["sqrt"] = lambda r: (T.sqrt, [_u(r, 4, 3, lo=0.2, hi=1.0)])
    c["abs"] = lambda r: (T.abs, [_away_from_zero(r, 4, 3)])
    c["relu"] = lambda r: (T.relu, [_away_from_zero(r, 4, 3)])
    c["sigmoid"] = lambda r: (T.sigmoid, [_u(r, 4, 3)])
    c["softplus"] = lambda r: (T.softplus, [_u(r, 4, 3)])

    def where_case(r):
        mask = r.uniform(size=(3, 4)) > 0.5
        return (lambda a, b: T.where(mask, a, b)), [_u(r, 3, 4), _u(r, 4)]

    c["where"] = where_case
    c["matmul"] = lambda r: (T.matmul, [_u(r, 2, 3, 4), _u(r, 4, 5)])
    c["sum"] = lambda r: (lambda x: T.sum(x, axis=(0, 2), keepdims=True), [_u(r, 2, 3, 4)])
    c["mean"] = lambda r: (lambda x: T.mean(x, axis=1), [_u(r, 2, 3, 4)])
    c["reshape"] = lambda r: (lambda x: T.reshape(x, (4, 6)), [_u(r, 2, 3, 4)])
    c["transpose"] = lambda r: (lambda x: T.transpose(x, (2, 0, 1)), [_u(r, 2, 3, 4)])
    c["concat"] = lambda r: (lambda a, b: T.concat([a, b], axis=1), [_u(r, 2, 3), _u(r, 2, 4)])

    def take_case(r):
        idx = np.array([2, 0, 2, 1])
        return (lambda x: T.take(x, idx, axis=1)), [_u(r, 2, 3, 4)]

    c["take"] = take_case

    def emb_case(r):
        idx = np.array([[1, 4], [0, 1]])
        return (lambda w: T.embedding(w, idx)), [_u(r, 5, 3)]

    c["embedding"] = emb_case
    c["softmax"] = lambda r: (lambda x: T.softmax(x, axis=1), [_u(r, 3, 5, 2)])
    c["log_softmax"] = lambda r: (lambda x: T.log_softmax(x, axis=-1), [_u(r, 3, 5)])
    c["max_reduce"] = lambda r: (lambda x: T.max_reduce(x, axis=1)[0], [_separated(r, 4, 6)])
    c["cosine_similarity"] = lambda r: (T.cosine_similarity, [_u(r, 3, 6), _u(r, 3, 6)])
    c["cosine_matrix"] = lambda r: (T.cosine_matrix, [_u(r, 2, 4, 6), _u(r, 2, 5, 6)])

    def hinge_case(r):
        mask = r.random((2, 4, 5)) < 0.8
        return (lambda s: T.margin_hinge(s, mask, 0.3)), [_u(r, 2, 4, 5)]

    c["margin_hinge"] = hinge_case
    c["layer_norm"] = lambda r: (T.layer_norm, [_u(r, 3, 6), _u(r, 6), _u(r, 6)])

    def conv_case(r):
        def f(x, w, b):
            y2 = T.conv(x, w, b, stride=2, padding=1)
            return y2

        return f, [_u(r, 2, 2, 5, 6), _u(r, 3, 2, 3, 3), _u(r, 3)]

    c["conv"] = conv_case
    c["conv_stride1"] = lambda r: (
        lambda x, w, b: T.conv(x, w, b, 1, (1, 0)), [_u(r, 2, 3, 4, 5), _u(r, 2, 3, 3, 2), _u(r, 2)]
    )
    c["conv_pointwise"] = lambda r: (lambda x, w, b: T.conv(x, w, b, 2, 0), [_u(r, 2, 3, 5, 4), _u(r, 2, 3, 1, 1), _u(r, 2)])
    c["conv1d"] = lambda r: (lambda x, w: T.conv(x, w, None, 2, 1), [_u(r, 2, 3, 7), _u(r, 2, 3, 3)])
    c["conv3d"] = lambda r: (lambda x, w, b: T.conv(x, w, b, 1, 1), [_u(r, 1, 2, 3, 4, 3), _u(r, 2, 2, 3, 3, 3), _u(r, 2)])
    c["upsample_nearest"] = lambda r: (lambda x: T.upsample_nearest(x, (2, 3)), [_u(r, 2, 2, 3, 2)])
    c["interp_linear_axis"] = lambda r: (lambda x: T.interp_linear_axis(x, 2, 7), [_u(r, 2, 2, 3, 2)])
    c["upsample_linear"] = lambda r: (lambda x: T.upsample_linear(x, (4, 6)), [_u(r, 1, 2, 2, 3)])
    c["trilinear"] = lambda r: (lambda x: T.upsample_linear(x, (4, 4, 4)), [_u(r, 1, 1, 2, 2, 2)])

    def ce_case(r):
        tgt = _probs(r, 2, 4, 3, axis=1)
        return (lambda z: T.cross_entropy_with_logits(z, tgt, axis=1)), [_u(r, 2, 4, 3)]

    c["cross_entropy_with_logits"] = ce_case

    def bce_case(r):
        tgt = r.uniform(0.0, 1.0, (3, 4))
        return (lambda z: T.binary_cross_entropy_with_logits(z, tgt)), [_u(r, 3, 4, lo=-3, hi=3)]

    c["binary_cross_entropy_with_logits"] = bce_case
    return c


OP_CASES: dict[str, CaseBuilder] = _cases()


def sam_block_case(seed: int = 0, audio=(5, 1), visual=(2, 2), channels=8, k=3, heads=2):
    """A SAM block with every parameter (including the output projection) random."""
    rng = np.random.default_rng(seed)
    cfg = SamConfig(4, audio, visual, channels, k, heads)
    block = SamBlock(cfg, rng)
    for p in block.parameters():
        p.data = rng.uniform(-1.0, 1.0, p.shape)
    n_audio = int(np.prod(audio))
    a = Tensor(rng.uniform(-1.0, 1.0, (2, n_audio, channels)), requires_grad=True)
    return block, a, lambda: sam_forward(block, FeatureMap(a, audio)).values


def run_gradcheck(selector: str | None = None, extra_cases: dict[str, CaseBuilder] | None = None,
                  tolerance: float = TOLERANCE, seed: int = 0) -> list[GradcheckResult]:
    """Check every registered op (optionally filtered by substring) plus the SAM block."""
    cases = dict(OP_CASES)
    cases.update(extra_cases or {})
    results = []
    for name, build in cases.items():
        if selector and selector not in name:
            continue
        t0 = time.perf_counter()
        fn, inputs = build(np.random.default_rng(seed))
        err = check_function(fn, inputs, seed=seed)
        results.append(GradcheckResult(name, err, err < tolerance, time.perf_counter() - t0))
    if not selector or selector in "sam_block":
        t0 = time.perf_counter()
        block, a, fwd = sam_block_case(seed)
        err = check_module(block, fwd, seed=seed, extra=[a])
        results.append(GradcheckResult("sam_block", err, err < tolerance, time.perf_counter() - t0))
    return results
