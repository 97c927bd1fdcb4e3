"""Procedural attribute-labelled images and the attribute classifier.

Each image is a soft-edged striped disc on a flat background, rendered from
seven continuous factors drawn uniformly from [0, 1]. Four binary attributes
threshold one factor each at 0.5.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

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
    sigmoid,
)

log = logging.getLogger(__name__)

FACTORS = ("radius", "x", "y", "rotation", "foreground", "stripe_freq", "background")
# attribute name -> factor it thresholds
ATTRIBUTES = {"big": "radius", "bright": "foreground", "light_bg": "background", "right": "x"}
ATTRIBUTE_NAMES = tuple(ATTRIBUTES)
THRESHOLD = 0.5


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # (S, S) in [-1, 1]
    labels: np.ndarray  # (L+1,) of {0, 1}


@dataclass
class Corpus:
    images: np.ndarray  # (n, S, S)
    labels: np.ndarray  # (n, L+1) int8
    factors: np.ndarray  # (n, 7)

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(self.images[i], self.labels[i])

    @property
    def n_attributes(self) -> int:
        return self.labels.shape[1]

    def subset(self, idx) -> "Corpus":
        idx = np.asarray(idx)
        return Corpus(self.images[idx], self.labels[idx], self.factors[idx])


def labels_from_factors(factors: np.ndarray) -> np.ndarray:
    cols = [FACTORS.index(f) for f in ATTRIBUTES.values()]
    return (factors[..., cols] > THRESHOLD).astype(np.int8)


def render(factors: np.ndarray, size: int = 32) -> np.ndarray:
    radius, cx, cy, rot, fg, freq, bg = factors
    R = size * (0.16 + 0.14 * radius)
    px = size * (0.38 + 0.24 * cx)
    py = size * (0.38 + 0.24 * cy)
    theta = np.pi * rot
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dist = np.hypot(xx - px, yy - py)
    mask = sigmoid((R - dist) / 1.2)
    u = (xx - px) * np.cos(theta) + (yy - py) * np.sin(theta)
    f = (0.05 + 0.07 * freq) / size * 32
    stripes = 1.0 - 0.3 * (0.5 + 0.5 * np.cos(2 * np.pi * f * u))
    fg_val = fg * stripes
    bg_val = -1.0 + 0.6 * bg
    img = bg_val + (fg_val - bg_val) * mask
    return np.clip(img, -1.0, 1.0)


def generate_corpus(n: int, seed: int, size: int = 32) -> Corpus:
    """``n`` images; image ``i`` draws its factors from the stream (seed, i)."""
    if n < 1:
        raise ContractError("corpus size must be at least 1")
    factors = np.empty((n, len(FACTORS)))
    images = np.empty((n, size, size))
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        factors[i] = rng.uniform(0.0, 1.0, len(FACTORS))
        images[i] = render(factors[i], size)
    return Corpus(images, labels_from_factors(factors), factors)


def split_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic 80/20 split: every fifth index is held out."""
    idx = np.arange(n)
    held = idx % 5 == 4
    return idx[~held], idx[held]


def balanced_accuracy(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Mean per-class recall over the classes present in ``y_true``."""
    recalls = [np.mean(y_pred[y_true == c] == c) for c in np.unique(y_true)]
    return float(np.mean(recalls))


# ---------------------------------------------------------------- classifier


class AttributeClassifier:
    """conv(8, s2) -> relu -> conv(16, s2) -> relu -> affine head producing raw logits."""

    def __init__(self, image_size: int = 32, n_attributes: int = 4, seed: int = 0, widths: tuple[int, int] = (8, 16)):
        if image_size % 4:
            raise ContractError("image size must be divisible by 4")
        self.image_size = image_size
        self.n_attributes = n_attributes
        self.seed = seed
        self.widths = tuple(widths)
        rng = np.random.default_rng(seed)
        w1, w2 = widths
        flat = (image_size // 4) ** 2 * w2
        self.params = ParamStore(
            {
                "c1.W": init_uniform(rng, (3, 3, 1, w1), 9),
                "c1.b": init_uniform(rng, (w1,), 9),
                "c2.W": init_uniform(rng, (3, 3, w1, w2), 9 * w1),
                "c2.b": init_uniform(rng, (w2,), 9 * w1),
                "head.W": init_uniform(rng, (n_attributes, flat), flat),
                "head.b": init_uniform(rng, (n_attributes,), flat),
            }
        )

    def forward(self, x: np.ndarray):
        S = self.image_size
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != (S, S):
            raise DimensionError(f"classifier expects ({S},{S}) images, got {x.shape}")
        P = self.params
        a0 = x[..., None]
        p1, cols1 = conv2d_forward(a0, P["c1.W"], P["c1.b"], stride=2)
        a1 = relu(p1)
        p2, cols2 = conv2d_forward(a1, P["c2.W"], P["c2.b"], stride=2)
        a2 = relu(p2)
        flat = a2.reshape(len(x), -1)
        logits = affine_forward(flat, P["head.W"], P["head.b"])
        return logits, (a0.shape, cols1, p1, a1.shape, cols2, p2, flat)

    def backward(self, dlogits: np.ndarray, cache, param_grads: bool = True, input_grad: bool = False):
        """Accumulates parameter gradients; returns d/dx when ``input_grad``."""
        s0, cols1, p1, s1, cols2, p2, flat = cache
        P = self.params
        dflat, dW, db = affine_backward(dlogits, flat, P["head.W"])
        if param_grads:
            P.accumulate("head.W", dW)
            P.accumulate("head.b", db)
        dp2 = relu_backward(dflat.reshape(p2.shape), p2)
        da1, dW, db = conv2d_backward(dp2, cols2, s1, P["c2.W"], stride=2)
        if param_grads:
            P.accumulate("c2.W", dW)
            P.accumulate("c2.b", db)
        dp1 = relu_backward(da1, p1)
        dx, dW, db = conv2d_backward(dp1, cols1, s0, P["c1.W"], stride=2, need_dx=input_grad)
        if param_grads:
            P.accumulate("c1.W", dW)
            P.accumulate("c1.b", db)
        return dx[..., 0] if input_grad else None

    def logits(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        return np.concatenate([self.forward(x[s : s + batch])[0] for s in range(0, len(x), batch)])

    def loss_and_grad(self, x: np.ndarray, y: np.ndarray) -> float:
        """Mean per-attribute sigmoid cross-entropy; accumulates gradients."""
        logits, cache = self.forward(x)
        # log(1 + e^z) - y z
        loss = float(np.mean(np.logaddexp(0.0, logits) - y * logits))
        dlogits = (sigmoid(logits) - y) / logits.size
        self.backward(dlogits, cache)
        return loss


def classify(clf: AttributeClassifier, image: np.ndarray) -> np.ndarray:
    """Raw attribute logits. Pixels outside [-1, 1] are clamped with a warning."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-2:] != (clf.image_size, clf.image_size):
        raise DimensionError(f"classifier expects ({clf.image_size},{clf.image_size}) images, got {image.shape}")
    if np.any(np.abs(image) > 1.0):
        warnings.warn("pixels outside [-1, 1] clamped before classification", stacklevel=2)
        image = np.clip(image, -1.0, 1.0)
    single = image.ndim == 2
    out = clf.logits(image[None] if single else image)
    return out[0] if single else out


def heldout_accuracy(clf: AttributeClassifier, corpus: Corpus) -> np.ndarray:
    _, test = split_indices(len(corpus))
    pred = (clf.logits(corpus.images[test]) > 0).astype(np.int8)
    y = corpus.labels[test]
    return np.array([balanced_accuracy(y[:, j], pred[:, j]) for j in range(y.shape[1])])


def train_classifier(
    corpus: Corpus,
    epochs: int = 20,
    lr: float = 2e-3,
    seed: int = 0,
    batch: int = 64,
    min_accuracy: float | None = 0.9,
) -> AttributeClassifier:
    """Fit on the 80% split; raise if any held-out balanced accuracy is below ``min_accuracy``."""
    if len(corpus) == 0:
        raise ContractError("corpus is empty")
    train, _ = split_indices(len(corpus))
    if len(train) == 0:
        train = np.arange(len(corpus))
    clf = AttributeClassifier(corpus.images.shape[1], corpus.n_attributes, seed=seed)
    opt = AdamState.for_params(clf.params, lr=lr)
    rng = np.random.default_rng(seed + 1)
    X, Y = corpus.images, corpus.labels.astype(np.float64)
    total = epochs * -(-len(train) // batch)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(train)
        for s in range(0, len(order), batch):
            idx = order[s : s + batch]
            opt.lr = 0.5 * lr * (1.0 + np.cos(np.pi * step / total))
            step += 1
            clf.params.zero_grad()
            loss = clf.loss_and_grad(X[idx], Y[idx])
            if not np.isfinite(loss):
                raise TrainingError("classifier loss diverged")
            adam_step(clf.params, opt)
        log.info("classifier epoch %d loss %.4f", epoch, loss)
    if min_accuracy is not None and len(corpus) >= 5:
        acc = heldout_accuracy(clf, corpus)
        if np.any(acc < min_accuracy):
            report = ", ".join(f"{n}={a:.3f}" for n, a in zip(ATTRIBUTE_NAMES, acc))
            raise TrainingError(f"classifier below {min_accuracy} held-out balanced accuracy: {report}")
    return clf
