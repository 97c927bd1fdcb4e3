"""Stage-3 steering: inject a top-k concept shift over the editing window.

For concept ``c`` the sparse coordinate is ``alpha`` on the selected indices and
zero elsewhere; at every window step the current bottleneck ``h_t`` is encoded
to ``z_t`` and shifted by ``gamma * W (coord * z_t)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .align import ConceptMap, select_topk
from .diffusion import Denoiser, DiffusionSchedule, ddim_generate, ddim_invert
from .errors import ConfigurationError, ContractError, DimensionError
from .sae import SaeModel, encode


@dataclass(frozen=True)
class SteerConfig:
    concept: int
    alpha: float = 2.0
    k: int = 1
    gamma: float = 1.0
    t_edit: int = 50
    grid_points: int = 50
    include_bias: bool = False
    symmetric: bool = False

    def validate(self, K: int, T: int) -> None:
        if not np.isfinite(self.alpha) or not np.isfinite(self.gamma):
            raise ContractError("alpha and gamma must be finite")
        if not 1 <= self.k <= K:
            raise ContractError(f"k={self.k} outside [1, {K}]")
        if not 0 <= self.t_edit <= T:
            raise ContractError(f"t_edit={self.t_edit} outside [0, {T}]")


@dataclass
class SteerResult:
    original: np.ndarray
    steered: np.ndarray
    trace: np.ndarray  # (window steps, batch) Frobenius norm of the applied shift
    config: dict
    trajectory: list[np.ndarray] | None = None


def coordinate(alpha: float, indices, K: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).ravel()
    if np.any(idx < 0) or np.any(idx >= K):
        raise ContractError(f"indices must lie in [0, {K})")
    out = np.zeros(K)
    out[idx] = alpha
    return out


def concept_shift(cmap: ConceptMap, z: np.ndarray, coord: np.ndarray, include_bias: bool = False) -> np.ndarray:
    """``W (coord * z)`` per token; the map's bias only with ``include_bias``."""
    if coord.shape != (cmap.K,) or z.shape[-1] != cmap.K:
        raise DimensionError(f"coordinate {coord.shape} / latent {z.shape} do not match K={cmap.K}")
    out = (z * coord) @ cmap.W.T
    return out + cmap.b if include_bias else out


def _check(den: Denoiser, sae: SaeModel, cmap: ConceptMap) -> None:
    if not (den.channels == sae.channels == cmap.C) or sae.K != cmap.K:
        raise ConfigurationError(
            f"inconsistent components: denoiser C={den.channels}, SAE C={sae.channels} K={sae.K}, map C={cmap.C} K={cmap.K}"
        )
    want = cmap.refs.get("sae_id")
    have = getattr(sae, "artifact_id", None)
    if want and have and want != have:
        raise ConfigurationError(f"concept map was trained against SAE {want}, got {have}")


def steer(
    den: Denoiser,
    sae: SaeModel,
    cmap: ConceptMap,
    images: np.ndarray,
    cfg: SteerConfig,
    schedule: DiffusionSchedule,
    indices=None,
    x_T: np.ndarray | None = None,
    match_norms: np.ndarray | None = None,
    record: bool = False,
) -> SteerResult:
    """Invert ``images``, then regenerate while shifting the bottleneck in the window.

    ``indices`` overrides top-k selection; ``x_T`` reuses an earlier inversion of
    the same images on the same grid. ``match_norms`` (window steps, batch)
    rescales each step's nonzero shift to the given Frobenius norm.
    """
    _check(den, sae, cmap)
    cfg.validate(cmap.K, schedule.T)
    single = np.ndim(images) == 2
    x0 = np.asarray(images, dtype=np.float64)
    if single:
        x0 = x0[None]
    grid = schedule.grid(cfg.grid_points)
    if x_T is None:
        x_T = ddim_invert(den, schedule, x0, grid).x_T
    idx = select_topk(cmap, cfg.k) if indices is None else np.asarray(indices)
    coord = coordinate(cfg.alpha, idx, cmap.K)
    n_window = int(np.sum(grid[:-1] >= cfg.t_edit))
    trace = np.zeros((n_window, len(x0)))

    def shift(step, t, h):
        if t < cfg.t_edit:
            return None
        z = encode(sae, h, t)
        dh = cfg.gamma * concept_shift(cmap, z, coord, cfg.include_bias)
        norms = np.linalg.norm(dh, axis=(1, 2))
        if match_norms is not None:
            scale = np.divide(match_norms[step], norms, out=np.zeros_like(norms), where=norms > 0)
            dh = dh * scale[:, None, None]
            norms = np.linalg.norm(dh, axis=(1, 2))
        trace[step] = norms
        return dh

    traj = [] if record else None
    out = ddim_generate(den, schedule, x_T, grid, shift=shift, symmetric=cfg.symmetric, trajectory=traj)
    res = SteerResult(x0, out, trace, asdict(cfg), traj)
    if single:
        res.original, res.steered, res.trace = x0[0], out[0], trace[:, 0]
    return res


def reconstruct(den: Denoiser, images: np.ndarray, schedule: DiffusionSchedule, grid_points: int = 50, x_T=None) -> np.ndarray:
    """Invert then regenerate without any shift."""
    grid = schedule.grid(grid_points)
    if x_T is None:
        x_T = ddim_invert(den, schedule, images, grid).x_T
    return ddim_generate(den, schedule, x_T, grid)
