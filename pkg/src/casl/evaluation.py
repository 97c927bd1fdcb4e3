"""Editing precision (EPR), linear concept probes, baselines and sweeps.

Logit pairs are passed as two arrays of shape ``(N, n_attributes)``: the
classifier logits of the originals and of the edited images, row-aligned.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass

import numpy as np

from .align import ConceptMap, select_topk
from .data import AttributeClassifier, classify
from .diffusion import Denoiser, DiffusionSchedule
from .errors import ContractError, DataError
from .sae import SaeModel, dar, encode
from .diffusion import ddim_invert
from .steer import SteerConfig, SteerResult, reconstruct, steer

log = logging.getLogger(__name__)

EPR_EPS = 1e-8
EPR_COLUMNS = ("concept", "alpha", "k", "gamma", "n", "delta_target", "delta_non_target", "epr")
PROBE_COLUMNS = ("concept", "k", "accuracy", "n_train", "n_test", "seed")


def _pairs(original, edited) -> tuple[np.ndarray, np.ndarray]:
    a = np.atleast_2d(np.asarray(original, dtype=np.float64))
    b = np.atleast_2d(np.asarray(edited, dtype=np.float64))
    if a.shape != b.shape:
        raise ContractError(f"original logits {a.shape} and edited logits {b.shape} differ")
    if len(a) == 0:
        raise ContractError("no logit pairs")
    return a, b


def delta_target(original, edited, target: int) -> float:
    """Mean absolute change of the target logit."""
    a, b = _pairs(original, edited)
    return float(np.mean(np.abs(b[:, target] - a[:, target])))


def delta_non_target(original, edited, non_targets) -> float:
    """Mean over non-target attributes of each one's mean absolute logit change."""
    a, b = _pairs(original, edited)
    J = list(non_targets)
    if not J:
        raise ContractError("non-target set is empty")
    per_attr = np.mean(np.abs(b[:, J] - a[:, J]), axis=0)
    return float(np.mean(per_attr))


@dataclass(frozen=True)
class EprReport:
    delta_target: float
    delta_non_target: float
    epr: float
    n: int
    target: int
    non_targets: tuple[int, ...]
    classifier: str = ""


def epr(original, edited, target: int, non_targets=None, classifier: str = "") -> EprReport:
    a, _ = _pairs(original, edited)
    if non_targets is None:
        non_targets = [j for j in range(a.shape[1]) if j != target]
    J = tuple(int(j) for j in non_targets)
    if target in J:
        raise ContractError("non-target set contains the target")
    dt = delta_target(original, edited, target)
    dn = delta_non_target(original, edited, J)
    return EprReport(dt, dn, dt / (dn + EPR_EPS), len(a), target, J, classifier)


def per_image_epr(original, edited, target: int, non_targets=None) -> np.ndarray:
    """EPR of each pair on its own (N = 1)."""
    a, b = _pairs(original, edited)
    return np.array([epr(a[i], b[i], target, non_targets).epr for i in range(len(a))])


# ---------------------------------------------------------------- probes


@dataclass
class ProbeModel:
    w: np.ndarray
    bias: float
    indices: np.ndarray
    concept: int
    seed: int
    mean: np.ndarray
    scale: np.ndarray
    accuracy: float = float("nan")
    n_train: int = 0
    n_test: int = 0

    def decision(self, features: np.ndarray) -> np.ndarray:
        x = (features[:, self.indices] - self.mean) / self.scale
        return x @ self.w + self.bias


def latent_features(sae: SaeModel, acts: np.ndarray, timesteps, pooling: str = "mean", batch: int = 256) -> np.ndarray:
    """Per-image probe features from cached tokens ``(n, nt, N, C)``.

    Codes are pooled over tokens (mean or max) at each timestep, then averaged over timesteps.
    """
    if pooling not in ("mean", "max"):
        raise ContractError(f"unknown pooling {pooling!r}")
    n, nt = acts.shape[:2]
    out = np.zeros((n, sae.K))
    for s in range(0, n, batch):
        for j, t in enumerate(timesteps):
            z = encode(sae, acts[s : s + batch, j], t)
            out[s : s + batch] += z.mean(axis=1) if pooling == "mean" else z.max(axis=1)
    return out / nt


def fit_linear_svm(x: np.ndarray, y: np.ndarray, reg: float = 1e-3, epochs: int = 200, lr: float = 0.05, seed: int = 0, batch: int = 32):
    """Hinge loss + L2 linear classifier by minibatch SGD; ``y`` in {-1, +1}."""
    rng = np.random.default_rng(seed)
    n, d = x.shape
    w = np.zeros(d)
    b = 0.0
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch):
            idx = order[s : s + batch]
            step += 1
            eta = lr / (1.0 + 1e-3 * step)
            margin = y[idx] * (x[idx] @ w + b)
            active = margin < 1
            gw = reg * w - (y[idx, None] * x[idx] * active[:, None]).sum(axis=0) / len(idx)
            gb = -(y[idx] * active).sum() / len(idx)
            w -= eta * gw
            b -= eta * gb
    return w, b


def probe_split(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded 8:2 split."""
    order = np.random.default_rng(seed).permutation(n)
    cut = int(round(0.8 * n))
    return np.sort(order[:cut]), np.sort(order[cut:])


def train_probe(features: np.ndarray, labels: np.ndarray, concept: int, indices, seed: int = 0, **svm) -> ProbeModel:
    """Linear SVM on ``features[:, indices]``; accuracy is measured on the held-out 20%.

    ``features`` are per-image pooled latents, ``labels`` the concept's 0/1 labels.
    """
    labels = np.asarray(labels).astype(int)
    pos = labels.mean()
    if not 0.4 <= pos <= 0.6:
        raise DataError(f"probe set is imbalanced: positive rate {pos:.3f}")
    idx = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    train, test = probe_split(len(labels), seed)
    x = features[:, idx]
    mean = x[train].mean(axis=0)
    scale = x[train].std(axis=0)
    scale[scale == 0] = 1.0
    xs = (x - mean) / scale
    y = 2.0 * labels - 1.0
    w, b = fit_linear_svm(xs[train], y[train], seed=seed, **svm)
    model = ProbeModel(w, b, idx, concept, seed, mean, scale, n_train=len(train), n_test=len(test))
    pred = np.where(xs[test] @ w + b > 0, 1, 0)
    model.accuracy = float(np.mean(pred == labels[test]))
    return model


def balanced_indices(labels: np.ndarray, per_class: int, seed: int) -> np.ndarray:
    """Rejection-sample up to ``per_class`` positives and negatives in seeded order."""
    order = np.random.default_rng(seed).permutation(len(labels))
    pos = [i for i in order if labels[i] == 1][:per_class]
    neg = [i for i in order if labels[i] == 0][:per_class]
    return np.sort(np.array(pos + neg, dtype=np.int64))


# ---------------------------------------------------------------- baselines


def random_direction_map(cmap: ConceptMap, k: int, seed: int, live: np.ndarray | None = None) -> tuple[ConceptMap, np.ndarray]:
    """A map whose ``k`` random columns are random unit vectors at the concept map's mean column norm.

    Indices are drawn uniformly from ``live`` (default: all latents).
    """
    rng = np.random.default_rng(seed)
    pool = np.arange(cmap.K) if live is None else np.asarray(live)
    if len(pool) < k:
        raise ContractError(f"only {len(pool)} candidate latents for k={k}")
    idx = np.sort(rng.choice(pool, size=k, replace=False))
    cols = rng.standard_normal((cmap.C, k))
    cols /= np.linalg.norm(cols, axis=0)
    W = np.zeros_like(cmap.W)
    W[:, idx] = cols * np.linalg.norm(cmap.W, axis=0).mean()
    return ConceptMap(W, np.zeros_like(cmap.b), cmap.concept, refs=dict(cmap.refs)), idx


def baseline_random_direction(
    den: Denoiser,
    sae: SaeModel,
    cmap: ConceptMap,
    images: np.ndarray,
    cfg: SteerConfig,
    schedule: DiffusionSchedule,
    seed: int,
    live: np.ndarray | None = None,
    x_T: np.ndarray | None = None,
    match_norms: np.ndarray | None = None,
) -> SteerResult:
    """The steering pipeline with random latent indices and random directions."""
    rmap, idx = random_direction_map(cmap, cfg.k, seed, live)
    return steer(den, sae, rmap, images, cfg, schedule, indices=idx, x_T=x_T, match_norms=match_norms)


def live_latents(z_mean: np.ndarray, tau: float = 0.01) -> np.ndarray:
    """Latents whose mean activation exceeds ``tau`` (the ones DAR counts)."""
    return np.flatnonzero(np.asarray(z_mean) > tau)


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepRow:
    concept: int
    alpha: float
    k: int
    gamma: float
    n: int
    delta_target: float
    delta_non_target: float
    epr: float
    median_epr: float

    def csv_row(self) -> list:
        return [self.concept, _fmt(self.alpha), self.k, _fmt(self.gamma), self.n, _fmt(self.delta_target), _fmt(self.delta_non_target), _fmt(self.epr)]


def _fmt(v: float) -> str:
    return repr(float(v))


def sweep(
    den: Denoiser,
    sae: SaeModel,
    maps: dict[int, ConceptMap],
    clf: AttributeClassifier,
    images: np.ndarray,
    schedule: DiffusionSchedule,
    alphas,
    ks,
    gamma: float = 1.0,
    t_edit: int = 50,
    grid_points: int = 50,
    x_T: np.ndarray | None = None,
) -> list[SweepRow]:
    """Full factorial (concept x alpha x k) steering run over ``images``.

    EPR pairs each image's unshifted reconstruction with its steered version, so
    alpha = 0 rows are exactly zero.
    """
    grid = schedule.grid(grid_points)
    if x_T is None:
        x_T = ddim_invert(den, schedule, images, grid).x_T
    base = classify(clf, reconstruct(den, images, schedule, grid_points, x_T))
    rows = []
    for c, cmap in maps.items():
        for alpha in alphas:
            for k in ks:
                cfg = SteerConfig(concept=c, alpha=float(alpha), k=int(k), gamma=gamma, t_edit=t_edit, grid_points=grid_points)
                res = steer(den, sae, cmap, images, cfg, schedule, x_T=x_T)
                edited = classify(clf, res.steered)
                rep = epr(base, edited, c)
                med = float(np.median(per_image_epr(base, edited, c)))
                rows.append(SweepRow(c, float(alpha), int(k), gamma, len(images), rep.delta_target, rep.delta_non_target, rep.epr, med))
                log.info("sweep c=%d alpha=%g k=%d epr=%.3f median=%.3f", c, alpha, k, rep.epr, med)
    return rows


def write_csv(path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    from .ckpt import atomic_write_bytes

    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


__all__ = [
    "EprReport",
    "ProbeModel",
    "SweepRow",
    "balanced_indices",
    "baseline_random_direction",
    "dar",
    "delta_non_target",
    "delta_target",
    "epr",
    "per_image_epr",
    "random_direction_map",
    "select_topk",
    "sweep",
    "train_probe",
]
