"""Float64 layer primitives with explicit backward passes, Adam, and a finite-difference checker.

Every ``*_forward`` function is pure: it returns ``(output, cache)`` and never
touches parameter state. The matching ``*_backward`` consumes the cache and the
upstream gradient and returns gradients for its inputs. Layer classes wrap the
functional ops around :class:`Parameter` objects and accumulate into their
``grad`` fields.

Batched inputs are accepted throughout: ``conv2d`` and the pooling ops take
either ``[C, H, W]`` or ``[N, C, H, W]``; ``fully_connected`` takes ``[d]`` or
``[B, d]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NonFiniteError, ValidationError

DTYPE = np.float64


@dataclass(eq=False)
class Parameter:
    """A trainable array plus its gradient and Adam moment buffers."""

    value: np.ndarray
    name: str = ""
    grad: np.ndarray = None
    adam_m: np.ndarray = None
    adam_v: np.ndarray = None
    step_count: int = 0

    def __post_init__(self):
        self.value = np.array(self.value, dtype=DTYPE)
        for attr in ("grad", "adam_m", "adam_v"):
            buf = getattr(self, attr)
            if buf is None:
                setattr(self, attr, np.zeros_like(self.value))
            else:
                buf = np.array(buf, dtype=DTYPE)
                if buf.shape != self.value.shape:
                    raise DimensionError(
                        f"{self.name or 'parameter'}: {attr} shape {buf.shape} "
                        f"!= value shape {self.value.shape}"
                    )
                setattr(self, attr, buf)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------- conv2d

def _as_batch(x: np.ndarray, op: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"{op}: expected [C,H,W] or [N,C,H,W] input, got rank {x.ndim}")


def conv2d_forward(x, weight, bias, stride: int = 1, padding: int = 0):
    """Cross-correlation of ``x`` with ``weight`` plus per-channel ``bias``.

    Output spatial size is ``floor((H + 2*padding - k) / stride) + 1``.
    """
    xb, squeezed = _as_batch(x, "conv2d")
    weight = np.asarray(weight, dtype=DTYPE)
    bias = np.asarray(bias, dtype=DTYPE)
    if weight.ndim != 4:
        raise DimensionError(f"conv2d: weight must be [C_out,C_in,k,k], got rank {weight.ndim}")
    c_out, c_in, kh, kw = weight.shape
    if kh != kw:
        raise DimensionError(f"conv2d: kernel axes differ ({kh} vs {kw}); square kernels only")
    if xb.shape[1] != c_in:
        raise DimensionError(
            f"conv2d: input channel axis has {xb.shape[1]} entries, weight expects {c_in}"
        )
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match output channels {c_out}")
    if stride < 1:
        raise ValidationError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValidationError(f"conv2d: padding must be >= 0, got {padding}")
    k = kh
    n, _, h, w = xb.shape
    if k > h + 2 * padding:
        raise DimensionError(f"conv2d: kernel {k} exceeds height axis {h} (padding {padding})")
    if k > w + 2 * padding:
        raise DimensionError(f"conv2d: kernel {k} exceeds width axis {w} (padding {padding})")
    if padding:
        xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xb
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # rows: (n, ho, wo); cols: (c_in, ki, kj)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * k * k)
    wmat = weight.reshape(c_out, c_in * k * k)
    out = cols @ wmat.T + bias
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    cache = (cols, weight, xp.shape, stride, padding, squeezed)
    return (out[0] if squeezed else out), cache


def conv2d_backward(dout, cache, need_input_grad: bool = True):
    """Returns ``(dx, dweight, dbias)``; ``dx`` is None when not requested."""
    cols, weight, padded_shape, stride, padding, squeezed = cache
    dout = np.asarray(dout, dtype=DTYPE)
    if squeezed:
        dout = dout[None]
    n, c_out, ho, wo = dout.shape
    _, c_in, k, _ = weight.shape
    dflat = dout.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
    dweight = (dflat.T @ cols).reshape(weight.shape)
    dbias = dflat.sum(axis=0)
    if not need_input_grad:
        return None, dweight, dbias
    dcols = (dflat @ weight.reshape(c_out, -1)).reshape(n, ho, wo, c_in, k, k)
    dxp = np.zeros(padded_shape, dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    dx = np.ascontiguousarray(dxp)
    return (dx[0] if squeezed else dx), dweight, dbias


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> np.ndarray:
    return conv2d_forward(x, weight, bias, stride, padding)[0]


# ---------------------------------------------------------------- activations / pooling

def relu_forward(x):
    x = np.asarray(x, dtype=DTYPE)
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(dout, mask):
    # subgradient at exactly 0 is 0
    return np.where(mask, dout, 0.0)


def relu(x) -> np.ndarray:
    return relu_forward(x)[0]


def maxpool2_forward(x):
    """2x2 stride-2 max pooling; ties route to the first element in row-major order."""
    xb, squeezed = _as_batch(x, "maxpool2")
    n, c, h, w = xb.shape
    if h % 2:
        raise DimensionError(f"maxpool2: height axis {h} is odd")
    if w % 2:
        raise DimensionError(f"maxpool2: width axis {w} is odd")
    blocks = xb.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    cache = (arg, xb.shape, squeezed)
    return (out[0] if squeezed else out), cache


def maxpool2_backward(dout, cache):
    arg, shape, squeezed = cache
    dout = np.asarray(dout, dtype=DTYPE)
    if squeezed:
        dout = dout[None]
    n, c, h, w = shape
    dblocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=DTYPE)
    np.put_along_axis(dblocks, arg[..., None], dout[..., None], axis=-1)
    dx = dblocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)
    return dx[0] if squeezed else dx


def maxpool2(x) -> np.ndarray:
    return maxpool2_forward(x)[0]


def global_avg_pool_forward(x):
    xb, squeezed = _as_batch(x, "global_avg_pool")
    n, c, h, w = xb.shape
    if h < 1 or w < 1:
        raise DimensionError(f"global_avg_pool: empty spatial axes ({h}x{w})")
    out = xb.mean(axis=(2, 3))
    cache = (xb.shape, squeezed)
    return (out[0] if squeezed else out), cache


def global_avg_pool_backward(dout, cache):
    shape, squeezed = cache
    dout = np.asarray(dout, dtype=DTYPE)
    if squeezed:
        dout = dout[None]
    n, c, h, w = shape
    dx = np.broadcast_to(dout[:, :, None, None] / (h * w), shape).copy()
    return dx[0] if squeezed else dx


def global_avg_pool(x) -> np.ndarray:
    return global_avg_pool_forward(x)[0]


# ---------------------------------------------------------------- fully connected

def fully_connected_forward(x, weight, bias):
    x = np.asarray(x, dtype=DTYPE)
    weight = np.asarray(weight, dtype=DTYPE)
    bias = np.asarray(bias, dtype=DTYPE)
    if weight.ndim != 2:
        raise DimensionError(f"fully_connected: weight must be [d_out,d_in], got rank {weight.ndim}")
    d_out, d_in = weight.shape
    if x.ndim not in (1, 2):
        raise DimensionError(f"fully_connected: expected [d] or [B,d] input, got rank {x.ndim}")
    if x.shape[-1] != d_in:
        raise DimensionError(
            f"fully_connected: input feature axis has {x.shape[-1]} entries, weight expects {d_in}"
        )
    if bias.shape != (d_out,):
        raise DimensionError(f"fully_connected: bias shape {bias.shape} != ({d_out},)")
    return x @ weight.T + bias, (x, weight)


def fully_connected_backward(dout, cache):
    x, weight = cache
    dout = np.asarray(dout, dtype=DTYPE)
    if x.ndim == 1:
        dweight = np.outer(dout, x)
        dbias = dout.copy()
    else:
        dweight = dout.T @ x
        dbias = dout.sum(axis=0)
    return dout @ weight, dweight, dbias


def fully_connected(x, weight, bias) -> np.ndarray:
    return fully_connected_forward(x, weight, bias)[0]


# ---------------------------------------------------------------- loss

def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to ``pred``."""
    pred = np.asarray(pred, dtype=DTYPE).reshape(-1)
    target = np.asarray(target, dtype=DTYPE).reshape(-1)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: pred length {pred.size} != target length {target.size}")
    if pred.size == 0:
        raise DimensionError("mse_loss: empty batch")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, 2.0 * diff / pred.size


# ---------------------------------------------------------------- layers

class Conv2d:
    def __init__(self, in_channels: int, out_channels: int, kernel: int, *, stride: int = 1,
                 padding: int = 0, rng: np.random.Generator | None = None, name: str = "conv"):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        fan_out = out_channels * kernel * kernel
        self.weight = Parameter(
            glorot_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, fan_out),
            name=f"{name}.weight",
        )
        self.bias = Parameter(np.zeros(out_channels), name=f"{name}.bias")
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return conv2d_forward(x, self.weight.value, self.bias.value, self.stride, self.padding)

    def backward(self, dout, cache, need_input_grad: bool = True):
        dx, dw, db = conv2d_backward(dout, cache, need_input_grad)
        self.weight.grad += dw
        self.bias.grad += db
        return dx

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


class Linear:
    def __init__(self, d_in: int, d_out: int, *, rng: np.random.Generator | None = None,
                 name: str = "fc"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(glorot_uniform(rng, (d_out, d_in), d_in, d_out), name=f"{name}.weight")
        self.bias = Parameter(np.zeros(d_out), name=f"{name}.bias")

    def forward(self, x):
        return fully_connected_forward(x, self.weight.value, self.bias.value)

    def backward(self, dout, cache):
        dx, dw, db = fully_connected_backward(dout, cache)
        self.weight.grad += dw
        self.bias.grad += db
        return dx

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValidationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not self.weight_decay >= 0:
            raise ValidationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        for label in ("beta1", "beta2"):
            beta = getattr(self, label)
            if not 0 < beta < 1:
                raise ValidationError(f"{label} must lie in (0, 1), got {beta}")
        if not self.epsilon > 0:
            raise ValidationError(f"epsilon must be > 0, got {self.epsilon}")


def adam_step(params: Sequence[Parameter], cfg: AdamConfig, *, zero_grad: bool = False) -> None:
    """One in-place Adam update.

    Weight decay is the coupled L2 form: ``weight_decay * value`` is added to
    the gradient before the moment updates.
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter {p.name or '<unnamed>'}")
    for p in params:
        g = p.grad + cfg.weight_decay * p.value if cfg.weight_decay else p.grad
        p.step_count += 1
        t = p.step_count
        p.adam_m *= cfg.beta1
        p.adam_m += (1.0 - cfg.beta1) * g
        p.adam_v *= cfg.beta2
        p.adam_v += (1.0 - cfg.beta2) * (g * g)
        m_hat = p.adam_m / (1.0 - cfg.beta1 ** t)
        v_hat = p.adam_v / (1.0 - cfg.beta2 ** t)
        p.value -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        if zero_grad:
            p.zero_grad()


# ---------------------------------------------------------------- gradient check

def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def gradcheck(fn: Callable[[], float], params: Sequence[Parameter], h: float = 1e-5, *,
              max_coords: int | None = None, seed: int = 0) -> float:
    """Compare analytic gradients against central differences.

    ``fn`` evaluates the scalar objective at the current parameter values and
    accumulates its gradient into each ``Parameter.grad``; the checker zeroes
    grads before every call. With ``max_coords`` set, at most that many
    coordinates per parameter are sampled (seeded). Returns the largest
    relative error seen. Parameter values and grads are left as the analytic
    evaluation produced them.
    """
    if not h > 0:
        raise ValidationError(f"gradcheck: step h must be > 0, got {h}")
    rng = np.random.default_rng(seed)
    zero_grads(params)
    fn()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        else:
            coords = range(flat.size)
        gflat = grad.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            zero_grads(params)
            f_plus = fn()
            flat[i] = orig - h
            zero_grads(params)
            f_minus = fn()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, relative_error(float(gflat[i]), numeric))
    for p, grad in zip(params, analytic):
        p.grad[...] = grad
    return worst
