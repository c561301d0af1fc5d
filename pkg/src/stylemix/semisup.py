"""Semi-supervised training pieces: weak/strong augmentation, confidence-
thresholded pseudo-labeling, the two loss terms, and batch construction that
pairs labeled with unlabeled instances for the statistics half-swap."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, softmax_cross_entropy, take_rows
from .model import Classifier

CROP_PAD = 4


@dataclass(frozen=True)
class LabeledExample:
    image: np.ndarray
    label: int
    domain_id: int


@dataclass(frozen=True)
class UnlabeledExample:
    image: np.ndarray
    domain_id: int
    pseudo_label: tuple[int, float] | None = None

    def __post_init__(self):
        if self.pseudo_label is not None and not 0.0 <= self.pseudo_label[1] <= 1.0:
            raise ValueError(f"pseudo-label confidence outside [0, 1]: {self.pseudo_label}")


@dataclass
class SemiSupConfig:
    tau: float = 0.95
    unlabeled_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must be in (0, 1], got {self.tau}")
        if self.unlabeled_weight < 0:
            raise ValueError(f"unlabeled weight must be >= 0, got {self.unlabeled_weight}")


# -- augmentation ------------------------------------------------------------------


def weak_augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip plus random crop from a 4-pixel zero padding."""
    img = image
    if rng.random() < 0.5:
        img = img[:, :, ::-1]
    c, h, w = img.shape
    padded = np.zeros((c, h + 2 * CROP_PAD, w + 2 * CROP_PAD), dtype=img.dtype)
    padded[:, CROP_PAD : CROP_PAD + h, CROP_PAD : CROP_PAD + w] = img
    oy, ox = rng.integers(0, 2 * CROP_PAD + 1, size=2)
    return np.ascontiguousarray(padded[:, oy : oy + h, ox : ox + w])


def _brightness(img, m, rng):
    if m == 0:
        return img
    sign = 1.0 if rng.random() < 0.5 else -1.0
    return img + np.float32(0.4 * m * sign)


def _contrast(img, m, rng):
    if m == 0:
        return img
    sign = 1.0 if rng.random() < 0.5 else -1.0
    factor = np.float32(1.0 + 0.8 * m * sign)
    return (img - 0.5) * factor + 0.5


def _posterize(img, m, rng):
    if m == 0:
        return img
    levels = max(2, int(round(16 - 13 * m)))
    return np.floor(img * levels) / levels


def _solarize(img, m, rng):
    if m == 0:
        return img
    threshold = 1.0 - 0.9 * m
    return np.where(img > threshold, 1.0 - img, img)


def _channel_shuffle(img, m, rng):
    if m == 0:
        return img
    return img[rng.permutation(img.shape[0])]


def _cutout(img, m, rng):
    if m == 0:
        return img
    c, h, w = img.shape
    side = int(round(m * h))
    if side <= 0:
        return img
    cy = int(rng.integers(0, h))
    cx = int(rng.integers(0, w))
    y0, y1 = max(0, cy - side // 2), min(h, cy - side // 2 + side)
    x0, x1 = max(0, cx - side // 2), min(w, cx - side // 2 + side)
    out = img.copy()
    out[:, y0:y1, x0:x1] = 0.0
    return out


STRONG_TRANSFORMS = {
    "brightness": _brightness,
    "contrast": _contrast,
    "posterize": _posterize,
    "solarize": _solarize,
    "channel-shuffle": _channel_shuffle,
    "cutout": _cutout,
}

_TRANSFORM_ORDER = tuple(STRONG_TRANSFORMS)


def strong_augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Weak augmentation followed by two random transforms from the catalogue,
    each with a random magnitude; output clamped to [0, 1]."""
    img = weak_augment(image, rng)
    picks = rng.choice(len(_TRANSFORM_ORDER), size=2, replace=False)
    for pick in picks:
        magnitude = float(rng.random())
        img = STRONG_TRANSFORMS[_TRANSFORM_ORDER[int(pick)]](img, magnitude, rng)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def augment_batch(images: np.ndarray, rng: np.random.Generator, strong: bool = False) -> np.ndarray:
    fn = strong_augment if strong else weak_augment
    return np.stack([fn(img, rng) for img in images])


# -- pseudo-labeling ----------------------------------------------------------------


def pseudo_label(probabilities: np.ndarray, tau: float) -> tuple[int, float] | None:
    """Argmax class and its confidence if max prob >= tau, else None.

    Ties break toward the lowest class index. Rejects vectors that are not a
    probability distribution (sum within 1e-5 of 1, entries in [0, 1])."""
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"expected a probability vector, got shape {p.shape}")
    if abs(p.sum() - 1.0) > 1e-5 or (p < -1e-9).any() or (p > 1.0 + 1e-9).any():
        raise ValueError(f"malformed probability distribution (sum={p.sum():.6f})")
    cls = int(np.argmax(p))
    conf = float(p[cls])
    return (cls, conf) if conf >= tau else None


def assign_pseudo_labels(
    clf: Classifier, images: np.ndarray, tau: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pseudo-labels from eval-mode predictions on weakly augmented views.

    Runs outside the gradient graph (the pseudo-labeling branch is blocked).
    Returns (labels, confidences, confident mask) over the batch."""
    weak = augment_batch(images, rng, strong=False)
    probs = clf.predict_probs(weak)
    labels = np.zeros(len(images), dtype=np.int64)
    confs = np.zeros(len(images), dtype=np.float64)
    mask = np.zeros(len(images), dtype=bool)
    for i, p in enumerate(probs):
        p = p / p.sum()  # float32 softmax sums can drift past the validator
        result = pseudo_label(p, tau)
        labels[i] = int(np.argmax(p))
        confs[i] = float(p.max())
        mask[i] = result is not None
    return labels, confs, mask


# -- losses ------------------------------------------------------------------------


def supervised_loss(
    clf: Classifier,
    images: np.ndarray,
    labels: np.ndarray,
    rng: np.random.Generator,
    domain_ids: np.ndarray | None = None,
    mix_rng: np.random.Generator | None = None,
) -> Tensor:
    """Mean cross-entropy over weakly augmented labeled images."""
    if len(images) == 0:
        raise ValueError("supervised loss needs a non-empty half-batch")
    weak = augment_batch(images, rng, strong=False)
    logits = clf.forward(weak, domain_ids=domain_ids, train_mode=True, rng=mix_rng)
    loss, _ = softmax_cross_entropy(logits, labels)
    return loss


def unlabeled_loss(
    clf: Classifier,
    images: np.ndarray,
    tau: float,
    rng: np.random.Generator,
    domain_ids: np.ndarray | None = None,
    mix_rng: np.random.Generator | None = None,
) -> Tensor:
    """Confidence-masked cross-entropy on strong views against pseudo-labels.

    Pseudo-labels come from weak views with gradients blocked; the sum of the
    confident examples' losses is normalized by the half-batch size, so an
    all-masked batch contributes exactly zero."""
    half = len(images)
    if half == 0:
        return Tensor(np.float32(0.0))
    labels, _, mask = assign_pseudo_labels(clf, images, tau, rng)
    if not mask.any():
        return Tensor(np.float32(0.0))
    strong = augment_batch(images, rng, strong=True)
    logits = clf.forward(strong, domain_ids=domain_ids, train_mode=True, rng=mix_rng)
    idx = np.flatnonzero(mask)
    confident_logits = take_rows(logits, idx)
    mean_loss, _ = softmax_cross_entropy(confident_logits, labels[idx])
    return mean_loss * (len(idx) / half)


# -- batch construction --------------------------------------------------------------


@dataclass
class SemiSupBatch:
    """[labeled half | unlabeled half]; the half-swap maps position i to
    position i + B/2, so every mixed statistic pair is (labeled, unlabeled)."""

    images_labeled: np.ndarray
    labels: np.ndarray
    domains_labeled: np.ndarray
    images_unlabeled: np.ndarray
    domains_unlabeled: np.ndarray

    @property
    def size(self) -> int:
        return len(self.images_labeled) + len(self.images_unlabeled)


def _sample_stratum(pool_idx: np.ndarray, need: int, rng: np.random.Generator, stratum: str) -> np.ndarray:
    if len(pool_idx) < need:
        raise ValueError(f"insufficient data in stratum {stratum!r}: need {need}, have {len(pool_idx)}")
    return rng.choice(pool_idx, size=need, replace=False)


def build_semisup_batch(
    labeled: dict,
    unlabeled: dict,
    batch_size: int,
    task: str,
    rng: np.random.Generator,
) -> SemiSupBatch:
    """Draw a [labeled | unlabeled] batch.

    ssdg: both halves stratified equally over the source domains present in
    the pools. uda: labeled half from the source mixture, unlabeled half from
    the target pool. `labeled` / `unlabeled` are dicts with keys images,
    classes, domains (classes unused for the unlabeled pool)."""
    if batch_size % 2:
        raise ValueError(f"batch size must be even, got {batch_size}")
    if task not in ("ssdg", "uda"):
        raise ValueError(f"task must be 'ssdg' or 'uda', got {task!r}")
    half = batch_size // 2

    if task == "ssdg":
        domains = np.unique(labeled["domains"])
        if half % len(domains):
            raise ValueError(
                f"half-batch {half} not divisible by {len(domains)} source domains for stratification"
            )
        per_domain = half // len(domains)
        lab_idx, unl_idx = [], []
        for dom in domains:
            lab_pool = np.flatnonzero(labeled["domains"] == dom)
            unl_pool = np.flatnonzero(unlabeled["domains"] == dom)
            lab_idx.append(_sample_stratum(lab_pool, per_domain, rng, f"labeled domain {dom}"))
            unl_idx.append(_sample_stratum(unl_pool, per_domain, rng, f"unlabeled domain {dom}"))
        lab_idx = np.concatenate(lab_idx)
        unl_idx = np.concatenate(unl_idx)
    else:
        lab_idx = _sample_stratum(np.arange(len(labeled["images"])), half, rng, "labeled source")
        unl_idx = _sample_stratum(np.arange(len(unlabeled["images"])), half, rng, "unlabeled target")

    return SemiSupBatch(
        images_labeled=labeled["images"][lab_idx],
        labels=labeled["classes"][lab_idx],
        domains_labeled=labeled["domains"][lab_idx],
        images_unlabeled=unlabeled["images"][unl_idx],
        domains_unlabeled=unlabeled["domains"][unl_idx],
    )
