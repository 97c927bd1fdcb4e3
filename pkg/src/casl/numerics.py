"""Dense float64 numerical core.

Every trainable network in the package is built from the layer functions here.
Each forward function returns its output plus whatever the matching backward
function needs; gradients are derived by hand per layer and certified with
:func:`grad_check`.

Layouts: affine inputs are ``(rows, features)``; images and feature maps are
channels-last ``(batch, height, width, channels)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .errors import ContractError, DimensionError

DTYPE = np.float64


def as_array(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class ParamStore:
    """Named parameters, each paired with a gradient buffer of the same shape."""

    def __init__(self, entries: dict[str, np.ndarray] | None = None):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> np.ndarray:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        arr = as_array(value).copy()
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        if grad.shape != self.params[name].shape:
            raise DimensionError(f"gradient for {name!r} has shape {grad.shape}, expected {self.params[name].shape}")
        self.grads[name] += grad

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.params.items()})

    def to_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}

    def count(self) -> int:
        return int(sum(v.size for v in self.params.values()))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, lr: float, **kw) -> "AdamState":
        state = cls(lr=lr, **kw)
        for name, value in params.params.items():
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        return state


def adam_step(params: ParamStore, state: AdamState) -> ParamStore:
    """One bias-corrected Adam update of every parameter, in place.

    Gradients are left untouched; the caller zeroes them.
    """
    for name in params.params:
        if name not in params.grads or name not in state.m:
            raise ContractError(f"no gradient/optimizer slot for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.params.items():
        g = params.grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass
class SgdState:
    """Heavy-ball momentum SGD; unlike Adam, step sizes keep the gradient's relative scale."""

    lr: float = 1e-2
    momentum: float = 0.9
    step: int = 0
    buf: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, lr: float, **kw) -> "SgdState":
        state = cls(lr=lr, **kw)
        for name, value in params.params.items():
            state.buf[name] = np.zeros_like(value)
        return state


def sgd_step(params: ParamStore, state: SgdState) -> ParamStore:
    for name in params.params:
        if name not in params.grads or name not in state.buf:
            raise ContractError(f"no gradient/optimizer slot for parameter {name!r}")
    state.step += 1
    for name, p in params.params.items():
        b = state.buf[name]
        b *= state.momentum
        b += params.grads[name]
        p -= state.lr * b
    return params


# ---------------------------------------------------------------- layers


def affine_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Row i of the result is ``W @ x[i] (+ b)``."""
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1]:
        raise DimensionError(f"affine: x {x.shape} incompatible with W {W.shape}")
    out = x @ W.T
    if b is not None:
        if b.shape != (W.shape[0],):
            raise DimensionError(f"affine: bias {b.shape} does not match W {W.shape}")
        out = out + b
    return out


def affine_backward(dout: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Returns (dx, dW, db)."""
    return dout @ W, dout.T @ x, dout.sum(axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 1):
    """Channels-last convolution. ``W`` has shape ``(k, k, Cin, Cout)``.

    Returns ``(out, cols)``; ``cols`` is the im2col matrix the backward pass needs.
    """
    if x.ndim != 4 or W.ndim != 4 or x.shape[3] != W.shape[2]:
        raise DimensionError(f"conv2d: x {x.shape} incompatible with W {W.shape}")
    B, H, Wd, C = x.shape
    k = W.shape[0]
    Ho, Wo = _conv_out(H, k, stride, pad), _conv_out(Wd, k, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    cols = np.empty((B, Ho, Wo, k, k, C), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :]
    cols = cols.reshape(B * Ho * Wo, k * k * C)
    out = cols @ W.reshape(k * k * C, -1) + b
    return out.reshape(B, Ho, Wo, W.shape[3]), cols


def conv2d_backward(dout: np.ndarray, cols: np.ndarray, x_shape: tuple, W: np.ndarray, stride: int = 1, pad: int = 1, need_dx: bool = True):
    """Returns (dx, dW, db); dx is None when ``need_dx`` is false."""
    B, H, Wd, C = x_shape
    k, Cout = W.shape[0], W.shape[3]
    _, Ho, Wo, _ = dout.shape
    d2 = dout.reshape(-1, Cout)
    dW = (cols.T @ d2).reshape(W.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dW, db
    dcols = (d2 @ W.reshape(k * k * C, Cout).T).reshape(B, Ho, Wo, k, k, C)
    dxp = np.zeros((B, H + 2 * pad, Wd + 2 * pad, C), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, pad : pad + H, pad : pad + Wd, :] if pad else dxp
    return dx, dW, db


def upsample2x(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling of a channels-last map."""
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2x_backward(dout: np.ndarray) -> np.ndarray:
    B, H, W, C = dout.shape
    return dout.reshape(B, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4))


# ---------------------------------------------------------------- gradient checking


def grad_check(
    loss_fn: Callable[[ParamStore], float],
    params: ParamStore,
    h_fd: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(params)`` must return the scalar loss and leave the analytic
    gradient in ``params.grads`` (it is called once for that, then repeatedly
    on perturbed parameters). The error for one entry is
    ``|analytic - numeric| / max(1, |numeric|)``. With ``max_entries`` only a
    seeded random subset of entries per parameter is probed.
    """
    if not (1e-7 <= h_fd <= 1e-4):
        raise ContractError(f"h_fd={h_fd} outside [1e-7, 1e-4]")
    params.zero_grad()
    base = loss_fn(params)
    if not np.isfinite(base):
        raise FloatingPointError("loss is not finite")
    analytic = {k: g.copy() for k, g in params.grads.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        ga = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h_fd
            lp = loss_fn(params)
            flat[i] = orig - h_fd
            lm = loss_fn(params)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise FloatingPointError(f"loss not finite while perturbing {name}[{i}]")
            num = (lp - lm) / (2.0 * h_fd)
            worst = max(worst, abs(ga[i] - num) / max(1.0, abs(num)))
    params.zero_grad()
    for k, g in analytic.items():
        params.grads[k][...] = g
    return float(worst)
