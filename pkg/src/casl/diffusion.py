"""Toy diffusion backbone with an addressable bottleneck (h-space).

The denoiser is a small convolutional encoder/decoder. The encoder downsamples
an ``S x S`` image to ``n x n`` spatial positions with ``C`` channels, a
sinusoidal timestep embedding is added there, and one more convolution produces
the bottleneck activation ``h``. The decoder upsamples back, taking skips only
from the shallowest encoder stage and from the input, so ``h`` itself is never
bypassed by a skip from its own level.

``h`` is exposed as ``(batch, N, C)`` tokens with ``N = n*n`` in row-major
spatial order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, TrainingError
from .numerics import (
    AdamState,
    ParamStore,
    adam_step,
    affine_backward,
    affine_forward,
    conv2d_backward,
    conv2d_forward,
    init_uniform,
    relu,
    relu_backward,
    upsample2x,
    upsample2x_backward,
)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if self.T < 2:
            raise ContractError("T must be at least 2")

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.T)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def grid(self, n_points: int) -> np.ndarray:
        """Strictly decreasing DDIM timestep grid from T-1 down to 0."""
        if n_points < 2:
            raise ContractError("a DDIM grid needs at least two points")
        g = np.unique(np.round(np.linspace(0, self.T - 1, n_points)).astype(np.int64))
        if len(g) != n_points:
            raise ContractError(f"cannot place {n_points} distinct grid points in T={self.T}")
        return g[::-1].copy()


def window(grid: np.ndarray, t_edit: int) -> np.ndarray:
    """Grid timesteps inside the editing window [t_edit, T-1], in grid order."""
    return grid[grid >= t_edit]


# ---------------------------------------------------------------- denoiser


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    bottleneck_size: int = 4
    channels: int = 32
    enc_widths: tuple[int, ...] = (8, 16)
    dec_widths: tuple[int, ...] = (32, 8)
    temb_dim: int = 16
    T: int = 100

    @property
    def levels(self) -> int:
        ratio = self.image_size // self.bottleneck_size
        lv = int(round(np.log2(ratio)))
        if 2**lv != ratio or self.image_size % self.bottleneck_size:
            raise ContractError("image_size / bottleneck_size must be a power of two")
        return lv

    @property
    def n_tokens(self) -> int:
        return self.bottleneck_size**2

    def validate(self) -> None:
        lv = self.levels
        if len(self.enc_widths) != lv - 1 or len(self.dec_widths) != lv - 1:
            raise ContractError(f"need {lv - 1} encoder and decoder widths for {lv} levels")


def timestep_embedding(t: np.ndarray, dim: int, T: int) -> np.ndarray:
    """Low-frequency sinusoidal features of t/T, shape (len(t), dim)."""
    tau = np.asarray(t, dtype=np.float64).reshape(-1, 1) / T
    half = dim // 2
    freqs = np.pi * 2.0 ** np.linspace(0.0, 1.5, half)
    ang = tau * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


Hook = Callable[[np.ndarray], np.ndarray]


class Denoiser:
    """Noise predictor eps(x_t, t) with an interceptable bottleneck."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig(), seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        p = ParamStore()
        cin = 1
        enc = list(cfg.enc_widths) + [cfg.channels]
        for i, w in enumerate(enc):
            p.add(f"enc{i}.W", init_uniform(rng, (3, 3, cin, w), 9 * cin))
            p.add(f"enc{i}.b", init_uniform(rng, (w,), 9 * cin))
            cin = w
        C = cfg.channels
        p.add("temb.W", init_uniform(rng, (C, cfg.temb_dim), cfg.temb_dim))
        p.add("temb.b", init_uniform(rng, (C,), cfg.temb_dim))
        p.add("mid.W", init_uniform(rng, (3, 3, C, C), 9 * C))
        p.add("mid.b", init_uniform(rng, (C,), 9 * C))
        cin = C
        for i, w in enumerate(cfg.dec_widths):
            cskip = self._skip_width(i)
            p.add(f"dec{i}.W", init_uniform(rng, (3, 3, cin + cskip, w), 9 * (cin + cskip)))
            p.add(f"dec{i}.b", init_uniform(rng, (w,), 9 * (cin + cskip)))
            cin = w
        p.add("out.W", init_uniform(rng, (3, 3, cin + 1, 1), 9 * (cin + 1)))
        p.add("out.b", np.zeros(1))
        self.params = p

    # decoder stage i runs at resolution bottleneck * 2**(i+1); the stage at
    # image_size/2 takes the shallowest encoder output as a skip, the final
    # output conv takes the input image.
    def _skip_width(self, i: int) -> int:
        return self.cfg.enc_widths[0] if i == len(self.cfg.dec_widths) - 1 else 0

    @property
    def n_tokens(self) -> int:
        return self.cfg.n_tokens

    @property
    def channels(self) -> int:
        return self.cfg.channels

    def _check_image(self, x: np.ndarray) -> np.ndarray:
        S = self.cfg.image_size
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != (S, S):
            raise DimensionError(f"expected images of shape ({S},{S}), got {x.shape}")
        return x

    # -- encoder half: x, t -> h tokens

    def encode(self, x: np.ndarray, t) -> tuple[np.ndarray, dict]:
        x = self._check_image(np.asarray(x, dtype=np.float64))
        B = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (B,))
        P = self.params
        a = x[..., None]
        cache: dict = {"x": a, "t": t, "enc": []}
        n_enc = len(self.cfg.enc_widths) + 1
        for i in range(n_enc):
            pre, cols = conv2d_forward(a, P[f"enc{i}.W"], P[f"enc{i}.b"], stride=2)
            cache["enc"].append((a.shape, cols, pre))
            a = relu(pre)
        temb_in = timestep_embedding(t, self.cfg.temb_dim, self.cfg.T)
        temb = affine_forward(temb_in, P["temb.W"], P["temb.b"])
        m = a + temb[:, None, None, :]
        h, cols = conv2d_forward(m, P["mid.W"], P["mid.b"], stride=1)
        cache["temb_in"] = temb_in
        cache["mid"] = (m.shape, cols)
        cache["skip"] = relu(cache["enc"][0][2])
        n = self.cfg.bottleneck_size
        return h.reshape(B, n * n, self.cfg.channels), cache

    # -- decoder half: h tokens -> eps

    def decode(self, h_tokens: np.ndarray, cache: dict) -> tuple[np.ndarray, dict]:
        B = cache["x"].shape[0]
        n, C = self.cfg.bottleneck_size, self.cfg.channels
        if h_tokens.shape != (B, n * n, C):
            raise DimensionError(f"bottleneck tokens must be {(B, n * n, C)}, got {h_tokens.shape}")
        P = self.params
        h = h_tokens.reshape(B, n, n, C)
        d = relu(h)
        dcache: dict = {"h": h, "dec": []}
        for i in range(len(self.cfg.dec_widths)):
            u = upsample2x(d)
            if self._skip_width(i):
                u = np.concatenate([u, cache["skip"]], axis=3)
            pre, cols = conv2d_forward(u, P[f"dec{i}.W"], P[f"dec{i}.b"], stride=1)
            dcache["dec"].append((u.shape, cols, pre))
            d = relu(pre)
        u = np.concatenate([upsample2x(d), cache["x"]], axis=3)
        out, cols = conv2d_forward(u, P["out.W"], P["out.b"], stride=1)
        dcache["out"] = (u.shape, cols)
        return out[..., 0], dcache

    def forward(self, x: np.ndarray, t, hooks: Sequence[Hook] = ()) -> np.ndarray:
        """eps prediction; each hook maps bottleneck tokens to new tokens, in order."""
        h, cache = self.encode(x, t)
        for hook in hooks:
            h = hook(h)
        eps, _ = self.decode(h, cache)
        return eps

    # -- backward passes

    def decode_backward(self, deps: np.ndarray, dcache: dict, param_grads: bool = True):
        """Backprop through the decoder half.

        Returns ``(dh_tokens, dskip)``; ``dskip`` is the gradient reaching the
        shallow encoder skip and is only needed to finish a full backward pass.
        """
        P = self.params
        ushape, cols = dcache["out"]
        du, dW, db = conv2d_backward(deps[..., None], cols, ushape, P["out.W"])
        if param_grads:
            P.accumulate("out.W", dW)
            P.accumulate("out.b", db)
        cd = ushape[3] - 1
        dd = upsample2x_backward(du[..., :cd])
        dskip = None
        for i in reversed(range(len(self.cfg.dec_widths))):
            ushape, cols, pre = dcache["dec"][i]
            dpre = relu_backward(dd, pre)
            du, dW, db = conv2d_backward(dpre, cols, ushape, P[f"dec{i}.W"])
            if param_grads:
                P.accumulate(f"dec{i}.W", dW)
                P.accumulate(f"dec{i}.b", db)
            cu = ushape[3] - self._skip_width(i)
            if self._skip_width(i):
                dskip = du[..., cu:]
            dd = upsample2x_backward(du[..., :cu])
        h = dcache["h"]
        dh = relu_backward(dd, h)
        return dh.reshape(h.shape[0], -1, h.shape[3]), dskip

    def encode_backward(self, dh_tokens: np.ndarray, cache: dict, dskip: np.ndarray | None = None) -> None:
        P = self.params
        B = cache["x"].shape[0]
        n, C = self.cfg.bottleneck_size, self.cfg.channels
        mshape, cols = cache["mid"]
        dm, dW, db = conv2d_backward(dh_tokens.reshape(B, n, n, C), cols, mshape, P["mid.W"])
        P.accumulate("mid.W", dW)
        P.accumulate("mid.b", db)
        dtemb = dm.sum(axis=(1, 2))
        _, dW, db = affine_backward(dtemb, cache["temb_in"], P["temb.W"])
        P.accumulate("temb.W", dW)
        P.accumulate("temb.b", db)
        da = dm
        for i in reversed(range(len(cache["enc"]))):
            ashape, cols, pre = cache["enc"][i]
            dpre = relu_backward(da, pre)
            if i == 0 and dskip is not None:
                dpre = dpre + relu_backward(dskip, pre)
            da, dW, db = conv2d_backward(dpre, cols, ashape, P[f"enc{i}.W"], stride=2, need_dx=i > 0)
            P.accumulate(f"enc{i}.W", dW)
            P.accumulate(f"enc{i}.b", db)

    def loss_and_grad(self, x_t: np.ndarray, t, eps: np.ndarray) -> float:
        """Mean squared noise-prediction error; accumulates parameter gradients."""
        h, cache = self.encode(x_t, t)
        pred, dcache = self.decode(h, cache)
        diff = pred - eps
        loss = float(np.mean(diff**2))
        deps = 2.0 * diff / diff.size
        dh, dskip = self.decode_backward(deps, dcache)
        self.encode_backward(dh, cache, dskip)
        return loss


# ---------------------------------------------------------------- training


def noise_batch(schedule: DiffusionSchedule, x0: np.ndarray, t: np.ndarray, eps: np.ndarray) -> np.ndarray:
    ab = schedule.alpha_bar[t][:, None, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def noise_prediction_mse(den: Denoiser, schedule: DiffusionSchedule, images: np.ndarray, seed: int, batch: int = 64) -> float:
    """Held-out DDPM objective with fixed noise draws (zero predictor scores ~1)."""
    rng = np.random.default_rng(seed)
    t = rng.integers(0, schedule.T, size=len(images))
    eps = rng.standard_normal(images.shape)
    total = 0.0
    for s in range(0, len(images), batch):
        sl = slice(s, s + batch)
        x_t = noise_batch(schedule, images[sl], t[sl], eps[sl])
        total += float(np.sum((den.forward(x_t, t[sl]) - eps[sl]) ** 2))
    return total / eps.size


def train_backbone(
    images: np.ndarray,
    schedule: DiffusionSchedule,
    epochs: int = 30,
    lr: float = 2e-3,
    seed: int = 0,
    batch: int = 32,
    cfg: DenoiserConfig | None = None,
    lr_decay: bool = True,
) -> Denoiser:
    """DDPM noise-prediction training, ``E || eps - eps_theta(x_t, t) ||^2``.

    With ``lr_decay`` the learning rate follows a cosine from ``lr`` to zero.
    """
    if len(images) == 0:
        raise ContractError("corpus is empty")
    S = images.shape[1]
    if cfg is None:
        cfg = DenoiserConfig(image_size=S, T=schedule.T)
    den = Denoiser(cfg, seed=seed)
    opt = AdamState.for_params(den.params, lr=lr)
    rng = np.random.default_rng(seed + 1)
    n = len(images)
    total = epochs * -(-n // batch)
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, batch):
            idx = order[s : s + batch]
            x0 = images[idx]
            t = rng.integers(0, schedule.T, size=len(idx))
            eps = rng.standard_normal(x0.shape)
            if lr_decay:
                opt.lr = lr * 0.5 * (1.0 + np.cos(np.pi * opt.step / total))
            den.params.zero_grad()
            loss = den.loss_and_grad(noise_batch(schedule, x0, t, eps), t, eps)
            if not np.isfinite(loss):
                raise TrainingError(f"backbone loss diverged at epoch {epoch}")
            adam_step(den.params, opt)
            losses.append(loss)
        log.info("backbone epoch %d loss %.4f", epoch, np.mean(losses))
    return den


# ---------------------------------------------------------------- DDIM


def _move(x, ab_from, ab_to, eps_p, eps_d):
    x0_pred = (x - np.sqrt(1.0 - ab_from) * eps_p) / np.sqrt(ab_from)
    return np.sqrt(ab_to) * x0_pred + np.sqrt(1.0 - ab_to) * eps_d


def ddim_step(
    x_t: np.ndarray,
    t: int,
    t_prev: int,
    eps_injected: np.ndarray,
    eps_plain: np.ndarray,
    schedule: DiffusionSchedule,
) -> np.ndarray:
    """Deterministic DDIM update where only the x0-prediction branch sees the shift.

    ``sqrt(ab_prev) * P_t(eps_injected) + sqrt(1 - ab_prev) * eps_plain`` with
    ``P_t(e) = (x_t - sqrt(1 - ab_t) e) / sqrt(ab_t)``. Passing the same array
    twice gives the ordinary DDIM step.
    """
    if not t > t_prev >= 0:
        raise ContractError(f"DDIM step needs t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if eps_injected.shape != x_t.shape or eps_plain.shape != x_t.shape:
        raise DimensionError("noise predictions must match x_t in shape")
    ab = schedule.alpha_bar
    return _move(x_t, ab[t], ab[t_prev], eps_injected, eps_plain)


def predict_x0(den: Denoiser, schedule: DiffusionSchedule, x_t: np.ndarray, t: int, delta_h: np.ndarray | float = 0.0) -> np.ndarray:
    """One-shot clean-image estimate with ``delta_h`` added at the bottleneck."""
    h, cache = den.encode(x_t, t)
    if not np.isscalar(delta_h):
        delta_h = np.asarray(delta_h, dtype=np.float64)
        if delta_h.shape[-2:] != h.shape[-2:]:
            raise DimensionError(f"delta_h must have token shape {h.shape[-2:]}, got {delta_h.shape}")
    eps, _ = den.decode(h + delta_h, cache)
    ab = schedule.alpha_bar[t]
    x = den._check_image(np.asarray(x_t, dtype=np.float64))
    return (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


@dataclass
class Inversion:
    """DDIM inversion of a batch: states per grid point, bottleneck tokens in the window.

    ``states[i]`` is x at ``grid[::-1][i]`` (ascending time); ``activations`` maps a
    window timestep to its ``(B, N, C)`` tokens.
    """

    grid: np.ndarray
    states: list[np.ndarray]
    activations: dict[int, np.ndarray]

    @property
    def x_T(self) -> np.ndarray:
        return self.states[-1]

    def state_at(self, t: int) -> np.ndarray:
        asc = self.grid[::-1]
        return self.states[int(np.searchsorted(asc, t))]


def ddim_invert(den: Denoiser, schedule: DiffusionSchedule, x0: np.ndarray, grid: np.ndarray, t_edit: int | None = None) -> Inversion:
    """Run DDIM backwards from x0 to x_{T-1}, evaluating eps at the current state."""
    x = den._check_image(np.asarray(x0, dtype=np.float64)).copy()
    asc = np.asarray(grid)[::-1]
    lo = asc[0] if t_edit is None else t_edit
    ab = schedule.alpha_bar
    states = [x]
    acts: dict[int, np.ndarray] = {}
    for i in range(len(asc) - 1):
        t, t_next = int(asc[i]), int(asc[i + 1])
        h, cache = den.encode(x, t)
        if t >= lo:
            acts[t] = h
        eps, _ = den.decode(h, cache)
        x = _move(x, ab[t], ab[t_next], eps, eps)
        states.append(x)
    t_last = int(asc[-1])
    if t_last >= lo:
        acts[t_last] = den.encode(x, t_last)[0]
    return Inversion(np.asarray(grid), states, acts)


ShiftFn = Callable[[int, int, np.ndarray], "np.ndarray | None"]


def ddim_generate(
    den: Denoiser,
    schedule: DiffusionSchedule,
    x_T: np.ndarray,
    grid: np.ndarray,
    shift: ShiftFn | None = None,
    symmetric: bool = False,
    trajectory: list | None = None,
) -> np.ndarray:
    """Deterministic DDIM sampling along ``grid`` (decreasing).

    ``shift(step, t, h)`` may return a bottleneck shift for that step; the shifted
    prediction drives only the x0 branch unless ``symmetric`` is set. States
    visited are appended to ``trajectory`` when given.
    """
    x = np.asarray(x_T, dtype=np.float64)
    if trajectory is not None:
        trajectory.append(x)
    for i in range(len(grid) - 1):
        t, t_prev = int(grid[i]), int(grid[i + 1])
        h, cache = den.encode(x, t)
        eps_plain, _ = den.decode(h, cache)
        dh = shift(i, t, h) if shift is not None else None
        if dh is None:
            eps_inj = eps_plain
        else:
            eps_inj, _ = den.decode(h + dh, cache)
            if symmetric:
                eps_plain = eps_inj
        x = ddim_step(x, t, t_prev, eps_inj, eps_plain, schedule)
        if trajectory is not None:
            trajectory.append(x)
    return x
