"""Finite-difference checks for every layer and the full contrastive pipeline."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .model import BackboneSpec, Mode, build_bundle
from .preprocessing import OverlapSample, SamplerSpec
from .training import PairBatch, _contrastive

THRESHOLD = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    op: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < THRESHOLD


def _projection_loss(out: np.ndarray, proj: np.ndarray) -> tuple[float, np.ndarray]:
    # random linear read-out turns any tensor into a scalar with dense upstream grads
    return float(np.sum(out * proj)), proj


def _check_conv(rng) -> float:
    x = T.Parameter(rng.standard_normal((2, 2, 5, 5)), name="input")
    w = T.Parameter(rng.standard_normal((3, 2, 3, 3)), name="weight")
    b = T.Parameter(rng.standard_normal(3), name="bias")
    proj = rng.standard_normal((2, 3, 3, 3))

    def fn():
        out, cache = T.conv2d_forward(x.value, w.value, b.value, stride=1)
        loss, dout = _projection_loss(out, proj)
        dx, dw, db = T.conv2d_backward(dout, cache)
        x.grad += dx
        w.grad += dw
        b.grad += db
        return loss

    err = T.gradcheck(fn, [x, w, b], STEP)
    # strided, padded variant
    proj2 = rng.standard_normal((2, 3, 3, 3))

    def fn2():
        out, cache = T.conv2d_forward(x.value, w.value, b.value, stride=2, padding=1)
        loss, dout = _projection_loss(out, proj2)
        dx, dw, db = T.conv2d_backward(dout, cache)
        x.grad += dx
        w.grad += dw
        b.grad += db
        return loss

    return max(err, T.gradcheck(fn2, [x, w, b], STEP))


def _check_relu(rng) -> float:
    vals = rng.standard_normal((2, 3, 4))
    vals = np.where(np.abs(vals) < 0.05, 0.5, vals)  # keep away from the kink
    x = T.Parameter(vals, name="input")
    proj = rng.standard_normal(vals.shape)

    def fn():
        out, mask = T.relu_forward(x.value)
        loss, dout = _projection_loss(out, proj)
        x.grad += T.relu_backward(dout, mask)
        return loss

    return T.gradcheck(fn, [x], STEP)


def _check_maxpool(rng) -> float:
    # a permutation guarantees distinct values, spaced far wider than the FD step
    vals = rng.permutation(2 * 4 * 4).reshape(2, 4, 4).astype(np.float64) * 0.1
    x = T.Parameter(vals, name="input")
    proj = rng.standard_normal((2, 2, 2))

    def fn():
        out, cache = T.maxpool2_forward(x.value)
        loss, dout = _projection_loss(out, proj)
        x.grad += T.maxpool2_backward(dout, cache)
        return loss

    return T.gradcheck(fn, [x], STEP)


def _check_gap(rng) -> float:
    x = T.Parameter(rng.standard_normal((2, 3, 4, 5)), name="input")
    proj = rng.standard_normal((2, 3))

    def fn():
        out, cache = T.global_avg_pool_forward(x.value)
        loss, dout = _projection_loss(out, proj)
        x.grad += T.global_avg_pool_backward(dout, cache)
        return loss

    return T.gradcheck(fn, [x], STEP)


def _check_fc(rng) -> float:
    x = T.Parameter(rng.standard_normal(8), name="input")
    w = T.Parameter(rng.standard_normal((4, 8)), name="weight")
    b = T.Parameter(rng.standard_normal(4), name="bias")
    proj = rng.standard_normal(4)

    def fn():
        out, cache = T.fully_connected_forward(x.value, w.value, b.value)
        loss, dout = _projection_loss(out, proj)
        dx, dw, db = T.fully_connected_backward(dout, cache)
        x.grad += dx
        w.grad += dw
        b.grad += db
        return loss

    return T.gradcheck(fn, [x, w, b], STEP)


def _check_mse(rng) -> float:
    pred = T.Parameter(rng.standard_normal(6), name="pred")
    target = rng.standard_normal(6)

    def fn():
        loss, dpred = T.mse_loss(pred.value, target)
        pred.grad += dpred
        return loss

    return T.gradcheck(fn, [pred], STEP)


def _tiny_pair(rng, side=16):
    imgs = [rng.uniform(0, 1, size=(3, side, side)) for _ in range(2)]
    return PairBatch([0, 1], [1, 0], imgs, imgs[::-1], np.array([4.0, 1.5]), np.array([1.5, 4.0]))


def _check_head(rng) -> float:
    bundle = build_bundle(BackboneSpec(), OverlapSample(SamplerSpec((0, 8), 8)), Mode.CONTRASTIVE,
                          seed=int(rng.integers(1 << 31)))
    head = bundle.head
    x = rng.standard_normal((3, head.in_width))
    target = rng.standard_normal(3)

    def fn():
        pred, cache = head.forward(x)
        loss, dpred = T.mse_loss(pred, target)
        head.backward(dpred, cache)
        return loss

    return T.gradcheck(fn, head.parameters(), STEP)


def _check_pipeline(rng) -> float:
    # full FR_PSCR path: overlap sampling -> shared SmallCNN -> mean pool -> concat -> head -> MSE
    bundle = build_bundle(BackboneSpec(), OverlapSample(SamplerSpec((0, 4, 8), 8)), Mode.CONTRASTIVE,
                          seed=int(rng.integers(1 << 31)))
    batch = _tiny_pair(rng)

    def fn():
        return _contrastive(batch, bundle, True, True)[0]

    return T.gradcheck(fn, bundle.parameters(), STEP, max_coords=24, seed=int(rng.integers(1 << 31)))


CHECKS: dict[str, Callable[[np.random.Generator], float]] = {
    "conv2d": _check_conv,
    "relu": _check_relu,
    "maxpool2": _check_maxpool,
    "global_avg_pool": _check_gap,
    "fully_connected": _check_fc,
    "mse_loss": _check_mse,
    "regression_head": _check_head,
    "pipeline_fr_pscr": _check_pipeline,
}


def run_suite(seed: int = 0, checks: dict[str, Callable] | None = None) -> list[CheckResult]:
    results = []
    for name, check in (checks or CHECKS).items():
        start = time.perf_counter()
        err = check(np.random.default_rng([seed, len(results)]))
        results.append(CheckResult(name, err, time.perf_counter() - start))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'op':<20} {'max rel err':>12}  status"]
    for r in results:
        lines.append(f"{r.op:<20} {r.max_rel_error:>12.3e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
