"""Stage-2 concept alignment: a linear map from sparse codes to bottleneck shifts.

``delta_h = W z + b`` is trained through the frozen denoiser and classifier.
Each training image contributes its DDIM-inverted state ``x_t`` at one window
timestep; the shifted one-shot estimate

    x0_edit = (x_t - sqrt(1 - ab_t) * eps(x_t | h + delta_h)) / sqrt(ab_t)

is scored by

    lam_sem * softplus(-(f_c(x0_edit) - f_c(x0) - margin)) + lam_recon * mean|x0_edit - x0|

where ``f_c`` is the frozen classifier's logit for the concept.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import AttributeClassifier
from .diffusion import Denoiser, DiffusionSchedule
from .errors import ConfigurationError, ContractError, DimensionError, TrainingError
from .numerics import AdamState, ParamStore, SgdState, adam_step, init_uniform, sgd_step, sigmoid, softplus
from .sae import SaeModel, encode

log = logging.getLogger(__name__)


@dataclass
class ConceptMap:
    W: np.ndarray  # (C, K)
    b: np.ndarray  # (C,)
    concept: int
    lam_sem: float = 3.0
    lam_recon: float = 1.0
    margin: float = 2.0
    refs: dict = field(default_factory=dict)  # ids of the frozen sae / denoiser / classifier

    @property
    def C(self) -> int:
        return self.W.shape[0]

    @property
    def K(self) -> int:
        return self.W.shape[1]

    @classmethod
    def init(cls, C: int, K: int, concept: int, seed: int = 0, **kw) -> "ConceptMap":
        rng = np.random.default_rng(seed)
        return cls(init_uniform(rng, (C, K), K), init_uniform(rng, (C,), K), concept, **kw)


def direction(cmap: ConceptMap, z: np.ndarray) -> np.ndarray:
    """Per-token ``W z + b``."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != cmap.K:
        raise DimensionError(f"latent width {z.shape[-1]} != map K={cmap.K}")
    return z @ cmap.W.T + cmap.b


def select_topk(cmap: ConceptMap, k: int, mode: str = "l2") -> np.ndarray:
    """Indices of the ``k`` most important latent dimensions, most important first.

    Importance is the L2 norm of each column of ``W`` (``mode="l2"``) or, for a
    single-row map, the absolute weight (``mode="abs"``). Ties go to the smaller index.
    """
    if not 1 <= k <= cmap.K:
        raise ContractError(f"k={k} outside [1, {cmap.K}]")
    if mode == "l2":
        score = np.linalg.norm(cmap.W, axis=0)
    elif mode == "abs":
        if cmap.C != 1:
            raise ContractError("abs importance needs a single-row map")
        score = np.abs(cmap.W[0])
    else:
        raise ContractError(f"unknown importance mode {mode!r}")
    return np.argsort(-score, kind="stable")[:k]


# ---------------------------------------------------------------- training


@dataclass
class AlignData:
    """Inputs for one concept: clean images, inverted window states, window timesteps.

    ``states[i, j]`` is image i's DDIM-inverted state at ``timesteps[j]``.
    """

    x0: np.ndarray  # (n, S, S)
    states: np.ndarray  # (n, nt, S, S)
    timesteps: np.ndarray  # (nt,)


def stage2_loss(
    params: ParamStore,
    cmap: ConceptMap,
    sae: SaeModel,
    den: Denoiser,
    clf: AttributeClassifier,
    schedule: DiffusionSchedule,
    x0: np.ndarray,
    x_t: np.ndarray,
    t: np.ndarray,
    logit0: np.ndarray,
    grad: bool = True,
) -> tuple[float, dict]:
    """Alignment loss for a batch; accumulates gradients into ``params`` ("W", "b")."""
    W, b = params["W"], params["b"]
    B = len(x0)
    h, cache = den.encode(x_t, t)
    z = encode(sae, h, t)
    dh = z @ W.T + b
    eps, dcache = den.decode(h + dh, cache)
    ab = schedule.alpha_bar[t][:, None, None]
    x_edit = (x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    logits, ccache = clf.forward(x_edit)
    gain = logits[:, cmap.concept] - logit0
    resid = x_edit - x0
    l_sem = float(np.mean(softplus(-(gain - cmap.margin))))
    l_rec = float(np.mean(np.abs(resid)))
    loss = cmap.lam_sem * l_sem + cmap.lam_recon * l_rec
    info = {"sem": l_sem, "recon": l_rec, "gain": float(gain.mean()), "dh_norm": float(np.linalg.norm(dh, axis=(1, 2)).mean())}
    if not grad:
        return loss, info
    dlogits = np.zeros_like(logits)
    dlogits[:, cmap.concept] = -cmap.lam_sem * sigmoid(-(gain - cmap.margin)) / B
    dx = clf.backward(dlogits, ccache, param_grads=False, input_grad=True)
    dx = dx + cmap.lam_recon * np.sign(resid) / resid.size
    deps = -dx * np.sqrt(1.0 - ab) / np.sqrt(ab)
    ddh, _ = den.decode_backward(deps, dcache, param_grads=False)
    rows = ddh.reshape(-1, ddh.shape[-1])
    params.accumulate("W", rows.T @ z.reshape(-1, z.shape[-1]))
    params.accumulate("b", rows.sum(axis=0))
    return loss, info


def _check_components(sae: SaeModel, den: Denoiser, clf: AttributeClassifier, concept: int) -> None:
    if sae.channels != den.channels:
        raise ConfigurationError(f"SAE channels {sae.channels} != denoiser channels {den.channels}")
    if clf.image_size != den.cfg.image_size:
        raise ConfigurationError("classifier and denoiser image sizes differ")
    if not 0 <= concept < clf.n_attributes:
        raise ConfigurationError(f"concept {concept} is not an attribute index of the classifier")


def train_concept(
    sae: SaeModel,
    den: Denoiser,
    clf: AttributeClassifier,
    schedule: DiffusionSchedule,
    concept: int,
    data: AlignData,
    lam_sem: float = 3.0,
    lam_recon: float = 1.0,
    margin: float = 2.0,
    epochs: int = 10,
    lr: float = 5e-3,
    seed: int = 0,
    batch: int = 32,
    refs: dict | None = None,
    optimizer: str = "adam",
) -> ConceptMap:
    """Fit ``(W, b)`` for one concept; the SAE, denoiser and classifier stay frozen.

    Every step draws one window timestep per image, uniformly.
    """
    _check_components(sae, den, clf, concept)
    if data.states.shape[1] != len(data.timesteps):
        raise ConfigurationError("inverted states do not match the window timesteps")
    missing = set(int(t) for t in data.timesteps) - set(sae.timesteps)
    if missing:
        raise ConfigurationError(f"SAE has no embedding for window timesteps {sorted(missing)}")
    cmap = ConceptMap.init(sae.channels, sae.K, concept, seed=seed, lam_sem=lam_sem, lam_recon=lam_recon, margin=margin, refs=dict(refs or {}))
    params = ParamStore({"W": cmap.W, "b": cmap.b})
    cmap.W, cmap.b = params["W"], params["b"]
    if optimizer == "adam":
        opt, step_fn = AdamState.for_params(params, lr=lr), adam_step
    elif optimizer == "sgd":
        opt, step_fn = SgdState.for_params(params, lr=lr), sgd_step
    else:
        raise ConfigurationError(f"unknown optimizer {optimizer!r}")
    rng = np.random.default_rng(seed + 1)
    logit0 = clf.logits(data.x0)[:, concept]
    n, nt = data.states.shape[:2]
    for epoch in range(epochs):
        order = rng.permutation(n)
        infos = []
        for s in range(0, n, batch):
            idx = order[s : s + batch]
            j = rng.integers(0, nt, size=len(idx))
            t = data.timesteps[j]
            params.zero_grad()
            loss, info = stage2_loss(params, cmap, sae, den, clf, schedule, data.x0[idx], data.states[idx, j], t, logit0[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"alignment loss diverged for concept {concept}")
            step_fn(params, opt)
            infos.append(info)
        log.info(
            "align concept %d epoch %d sem %.4f recon %.4f gain %.3f |dh| %.3f",
            concept,
            epoch,
            *(np.mean([i[k] for i in infos]) for k in ("sem", "recon", "gain", "dh_norm")),
        )
    return cmap
