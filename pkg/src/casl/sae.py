"""Token-wise sparse autoencoder over bottleneck activations.

    z     = relu(W_enc (h + e(t) - b_pre) + b_lat)
    h_hat = W_dec z + b_pre

Encoder and decoder weights are untied. ``e(t)`` is a learnable embedding with
one row per timestep of the editing window, indexed by the timestep's position
in that window.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, TrainingError
from .numerics import AdamState, ParamStore, adam_step, init_uniform, relu

log = logging.getLogger(__name__)


@dataclass
class ActivationCache:
    """Bottleneck tokens for a set of images at the window timesteps.

    ``acts`` has shape ``(n_images, n_timesteps, N, C)``; ``timesteps`` follow
    grid order (descending); ``labels`` are the images' attribute labels.
    """

    acts: np.ndarray
    timesteps: np.ndarray
    image_ids: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.acts.ndim != 4 or self.acts.shape[1] != len(self.timesteps):
            raise DimensionError(f"activation cache shape {self.acts.shape} inconsistent with {len(self.timesteps)} timesteps")

    @property
    def n_tokens(self) -> int:
        return self.acts.shape[2]

    @property
    def channels(self) -> int:
        return self.acts.shape[3]

    def subset(self, idx) -> "ActivationCache":
        idx = np.asarray(idx)
        labels = None if self.labels is None else self.labels[idx]
        return ActivationCache(self.acts[idx], self.timesteps, self.image_ids[idx], labels)


class SaeModel:
    def __init__(self, channels: int, expansion: int, timesteps, seed: int = 0, use_timestep_embedding: bool = True):
        if expansion < 1:
            raise ContractError("expansion ratio must be >= 1")
        self.channels = C = channels
        self.expansion = expansion
        self.K = K = expansion * channels
        self.timesteps = tuple(int(t) for t in timesteps)
        self._t_index = {t: i for i, t in enumerate(self.timesteps)}
        self.use_timestep_embedding = use_timestep_embedding
        rng = np.random.default_rng(seed)
        self.params = ParamStore(
            {
                "W_enc": init_uniform(rng, (K, C), C),
                "b_lat": init_uniform(rng, (K,), C),
                "W_dec": init_uniform(rng, (C, K), K),
                "b_pre": np.zeros(C),
                "emb": np.zeros((len(self.timesteps), C)),
            }
        )

    def t_index(self, t) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(t)).astype(np.int64)
        try:
            return np.array([self._t_index[int(v)] for v in ts.ravel()]).reshape(ts.shape)
        except KeyError as e:
            raise ContractError(f"no timestep embedding for t={e.args[0]}; SAE window is {self.timesteps}") from None

    def _embedding(self, ti: np.ndarray) -> np.ndarray:
        if not self.use_timestep_embedding:
            return np.zeros((ti.size, self.channels))
        return self.params["emb"][ti.ravel()]

    def preactivation(self, h: np.ndarray, t) -> np.ndarray:
        h = np.asarray(h, dtype=np.float64)
        if h.shape[-1] != self.channels:
            raise DimensionError(f"token width {h.shape[-1]} != SAE channels {self.channels}")
        rows = h.reshape(-1, self.channels)
        ti = np.broadcast_to(self.t_index(t).reshape(-1, *([1] * (h.ndim - 2))) if np.ndim(t) else self.t_index(t), h.shape[:-1])
        x = rows + self._embedding(np.ascontiguousarray(ti)) - self.params["b_pre"]
        pre = x @ self.params["W_enc"].T + self.params["b_lat"]
        return pre.reshape(*h.shape[:-1], self.K)


def encode(model: SaeModel, h: np.ndarray, t) -> np.ndarray:
    """Sparse code for tokens ``h`` (..., C) at timestep(s) ``t``.

    ``t`` is a scalar or one timestep per leading index of ``h``.
    """
    return relu(model.preactivation(h, t))


def decode(model: SaeModel, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != model.K:
        raise DimensionError(f"latent width {z.shape[-1]} != K={model.K}")
    return z @ model.params["W_dec"].T + model.params["b_pre"]


def sae_loss(h: np.ndarray, h_hat: np.ndarray, z: np.ndarray, lam: float) -> float:
    """Mean squared reconstruction error plus ``lam`` times mean |z|."""
    if h.shape != h_hat.shape:
        raise DimensionError(f"h {h.shape} and h_hat {h_hat.shape} differ")
    return float(np.mean((h - h_hat) ** 2) + lam * np.mean(np.abs(z)))


def loss_and_grad(model: SaeModel, h: np.ndarray, ti: np.ndarray, lam: float) -> float:
    """Loss on token rows ``h`` (M, C) with embedding rows ``ti`` (M,); accumulates gradients.

    The L1 subgradient at zero is zero.
    """
    P = model.params
    M, C = h.shape
    x = h + model._embedding(ti) - P["b_pre"]
    pre = x @ P["W_enc"].T + P["b_lat"]
    z = relu(pre)
    h_hat = z @ P["W_dec"].T + P["b_pre"]
    loss = sae_loss(h, h_hat, z, lam)
    dhat = 2.0 * (h_hat - h) / h.size
    P.accumulate("W_dec", dhat.T @ z)
    dz = dhat @ P["W_dec"] + lam * np.sign(z) / z.size
    dpre = dz * (pre > 0)
    P.accumulate("W_enc", dpre.T @ x)
    P.accumulate("b_lat", dpre.sum(axis=0))
    dx = dpre @ P["W_enc"]
    P.accumulate("b_pre", dhat.sum(axis=0) - dx.sum(axis=0))
    if model.use_timestep_embedding:
        demb = np.zeros_like(P["emb"])
        np.add.at(demb, ti, dx)
        P.accumulate("emb", demb)
    return loss


def dar(z: np.ndarray, tau: float = 0.01) -> float:
    """Fraction of latent dimensions whose mean activation over rows exceeds ``tau``."""
    if tau <= 0:
        raise ContractError("tau must be positive")
    z = np.asarray(z, dtype=np.float64)
    z = z.reshape(-1, z.shape[-1])
    if z.shape[0] == 0:
        raise ContractError("DAR of an empty batch")
    return float(np.mean(z.mean(axis=0) > tau))


@dataclass
class SaeStats:
    mse: float
    cosine: float
    dar: float


def evaluate(model: SaeModel, cache: ActivationCache, tau: float = 0.01) -> SaeStats:
    """Reconstruction MSE, mean per-map cosine similarity and DAR on ``cache``."""
    n, nt, N, C = cache.acts.shape
    h = cache.acts.reshape(n, nt, N * C)
    z_mean = np.zeros(model.K)
    sq = 0.0
    cos = np.empty((n, nt))
    for j, t in enumerate(cache.timesteps):
        tok = cache.acts[:, j]
        z = encode(model, tok, t)
        rec = decode(model, z)
        sq += float(np.sum((rec - tok) ** 2))
        z_mean += z.reshape(-1, model.K).sum(axis=0)
        a, b = h[:, j], rec.reshape(n, N * C)
        cos[:, j] = np.sum(a * b, axis=1) / np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), 1e-300)
    rows = n * nt * N
    z_mean /= rows
    return SaeStats(sq / cache.acts.size, float(cos.mean()), float(np.mean(z_mean > tau)))


@dataclass
class SaeTrainResult:
    model: SaeModel
    history: list[tuple[int, float, float, float]] = field(default_factory=list)
    heldout: SaeStats | None = None


def train_sae(
    cache: ActivationCache,
    expansion: int = 8,
    lam: float = 4.0,
    epochs: int = 100,
    lr: float = 5e-4,
    seed: int = 0,
    batch_maps: int = 64,
    heldout: ActivationCache | None = None,
    log_every: int = 10,
    use_timestep_embedding: bool = True,
) -> SaeTrainResult:
    """Token-wise Adam training with a fixed sparsity weight.

    Each step takes ``batch_maps`` activation maps (one image at one timestep)
    and trains on all of their ``batch_maps * N`` tokens jointly. The history
    holds ``(epoch, mse, cosine, dar)`` on the training cache every ``log_every``
    epochs and at the end.
    """
    if cache.acts.size == 0:
        raise ContractError("activation cache is empty")
    n, nt, N, C = cache.acts.shape
    model = SaeModel(C, expansion, cache.timesteps, seed=seed, use_timestep_embedding=use_timestep_embedding)
    model.params["b_pre"][...] = cache.acts.reshape(-1, C).mean(axis=0)
    opt = AdamState.for_params(model.params, lr=lr)
    rng = np.random.default_rng(seed + 1)
    maps = cache.acts.reshape(n * nt, N, C)
    map_t = np.tile(np.arange(nt), n)
    result = SaeTrainResult(model)
    for epoch in range(epochs):
        order = rng.permutation(n * nt)
        for s in range(0, len(order), batch_maps):
            idx = order[s : s + batch_maps]
            h = maps[idx].reshape(-1, C)
            ti = np.repeat(map_t[idx], N)
            model.params.zero_grad()
            loss = loss_and_grad(model, h, ti, lam)
            if not np.isfinite(loss):
                raise TrainingError(f"SAE loss diverged at epoch {epoch}")
            adam_step(model.params, opt)
        if (epoch + 1) % log_every == 0 or epoch == epochs - 1:
            st = evaluate(model, cache)
            result.history.append((epoch + 1, st.mse, st.cosine, st.dar))
            log.info("sae epoch %d mse %.5f cos %.4f dar %.4f", epoch + 1, st.mse, st.cosine, st.dar)
    if heldout is not None:
        result.heldout = evaluate(model, heldout)
    return result
