"""Channel-statistics augmentation: instance normalization, AdaIN, and MixStyle.

Per-channel spatial means and standard deviations of a feature map act as a
proxy for image style. MixStyle regularizes training by re-styling each
instance with a random convex combination of its own statistics and those of
a reference instance from the same batch. The statistics are detached from
the computation graph so that learning cannot undo the augmentation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, sqrt, square, tmean

VALID_STRATEGIES = ("random", "cross-domain")
VALID_VARIANTS = ("mix", "replace")
INSERTION_SLOTS = ("res1", "res2", "res3", "res4")


@dataclass(frozen=True)
class ChannelStats:
    """Per-instance, per-channel mean and standard deviation, shape (B, C).

    Detached by construction: these arrays carry no graph linkage, so any
    value derived from them contributes zero gradient to the source tensor.
    """

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 2:
            raise ValueError(f"stats must share a (B, C) shape, got {self.mu.shape} / {self.sigma.shape}")

    def take(self, indices: np.ndarray) -> "ChannelStats":
        return ChannelStats(self.mu[indices], self.sigma[indices])


@dataclass
class MixStyleConfig:
    """Hyper-parameters of the statistics-mixing layer.

    alpha: Beta(alpha, alpha) shape parameter for the mixing weight.
    p_active: probability that a forward pass applies the layer at all.
    epsilon: variance stabilizer added under the square root.
    strategy: how the reference batch is chosen ("random" shuffle or
        "cross-domain" half-swap).
    variant: "mix" draws a convex weight per instance; "replace" fixes the
        weight to 0, i.e. plain AdaIN-style replacement.
    insertion_points: backbone slots (res1..res4) after which the layer runs.
    shared_coin: draw one activation coin per forward pass instead of one
        per inserted module.
    fixed_shuffle: reuse one reference permutation for all inserted modules
        in a pass instead of re-shuffling per module.
    """

    alpha: float = 0.1
    p_active: float = 0.5
    epsilon: float = 1e-5
    strategy: str = "random"
    variant: str = "mix"
    insertion_points: tuple[str, ...] = ("res1", "res2", "res3")
    train_mode: bool = True
    shared_coin: bool = False
    fixed_shuffle: bool = False

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if not 0.0 <= self.p_active <= 1.0:
            raise ValueError(f"p_active must be in [0, 1], got {self.p_active}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.strategy not in VALID_STRATEGIES:
            raise ValueError(f"strategy must be one of {VALID_STRATEGIES}, got {self.strategy!r}")
        if self.variant not in VALID_VARIANTS:
            raise ValueError(f"variant must be one of {VALID_VARIANTS}, got {self.variant!r}")
        self.insertion_points = tuple(self.insertion_points)
        bad = [p for p in self.insertion_points if p not in INSERTION_SLOTS]
        if bad:
            raise ValueError(f"unknown insertion points {bad}; valid slots are {INSERTION_SLOTS}")


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float32)


def compute_channel_stats(batch, epsilon: float = 1e-5) -> ChannelStats:
    """Spatial mean and epsilon-stabilized std per (instance, channel).

    The variance is biased (divided by H*W) and sigma = sqrt(var + epsilon),
    so constant channels yield sigma = sqrt(epsilon) > 0. The result is
    detached from the graph.
    """
    x = _as_array(batch)
    if x.ndim != 4:
        raise ValueError(f"expected a (B, C, H, W) batch, got shape {x.shape}")
    mu = x.mean(axis=(2, 3), dtype=np.float32)
    var = np.square(x - mu[:, :, None, None]).mean(axis=(2, 3), dtype=np.float32)
    sigma = np.sqrt(var + np.float32(epsilon))
    return ChannelStats(mu, sigma)


def instance_norm(batch: Tensor, gamma: Tensor, beta: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Normalize each channel by its own spatial statistics, then apply the
    learnable per-channel affine transform.

    Unlike the mixing layer, this is an ordinary differentiable layer: the
    statistics stay in the graph.
    """
    if batch.ndim != 4:
        raise ValueError(f"expected a (B, C, H, W) batch, got shape {batch.shape}")
    c = batch.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},), got {gamma.shape} / {beta.shape}")
    mu = tmean(batch, axis=(2, 3), keepdims=True)
    centered = batch - mu
    var = tmean(square(centered), axis=(2, 3), keepdims=True)
    sigma = sqrt(var + np.float32(epsilon))
    normalized = centered / sigma
    return normalized * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)


def _apply_stats(batch: Tensor, own: ChannelStats, gamma: np.ndarray, beta: np.ndarray) -> Tensor:
    """Style-normalize by own (detached) stats, re-style with (gamma, beta)."""
    mu = own.mu[:, :, None, None]
    sigma = own.sigma[:, :, None, None]
    normalized = (batch - mu) / sigma
    return normalized * gamma[:, :, None, None] + beta[:, :, None, None]


def adain(batch, style, epsilon: float = 1e-5) -> Tensor:
    """Replace the channel statistics of `batch` with those of `style`.

    Statistics of both inputs are detached, so the output is differentiable
    with respect to `batch` only through the normalized term.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    style_data = _as_array(style)
    if x.shape != style_data.shape:
        raise ValueError(f"content/style shapes differ: {x.shape} vs {style_data.shape}")
    own = compute_channel_stats(x, epsilon)
    ref = compute_channel_stats(style, epsilon)
    return _apply_stats(x, own, ref.sigma, ref.mu)


def sample_lambda(alpha: float, batch: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one Beta(alpha, alpha) mixing weight per instance."""
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    return rng.beta(alpha, alpha, size=batch).astype(np.float32)


def make_reference_permutation(
    batch: int,
    strategy: str,
    domain_ids: np.ndarray | None,
    rng: np.random.Generator,
) -> np.ndarray:
    """Choose the reference order: uniform shuffle, or a half-swap.

    The half-swap maps [first half | second half] to [second | first]. When
    domain ids are supplied, each half must come from a single domain and the
    two domains must differ; pass None to skip that check (e.g. when halves
    are the labeled/unlabeled partition rather than source domains).
    """
    if strategy == "random":
        return rng.permutation(batch)
    if strategy != "cross-domain":
        raise ValueError(f"unknown strategy {strategy!r}")
    if batch % 2:
        raise ValueError(f"cross-domain mixing needs an even batch, got {batch}")
    half = batch // 2
    if domain_ids is not None:
        ids = np.asarray(domain_ids)
        if ids.shape != (batch,):
            raise ValueError(f"domain_ids shape {ids.shape} != ({batch},)")
        first, second = set(ids[:half].tolist()), set(ids[half:].tolist())
        if len(first) != 1 or len(second) != 1 or first == second:
            raise ValueError(
                f"cross-domain mixing expects two pure, distinct halves, got domains {sorted(first)} | {sorted(second)}"
            )
    return np.concatenate([np.arange(half, batch), np.arange(half)])


def mix_statistics(
    stats_a: ChannelStats, stats_b: ChannelStats, lam: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Convex combination of two stat sets: lam*a + (1-lam)*b, lam per instance."""
    if stats_a.mu.shape != stats_b.mu.shape:
        raise ValueError(f"stat shapes differ: {stats_a.mu.shape} vs {stats_b.mu.shape}")
    lam = np.asarray(lam, dtype=np.float32)
    if lam.shape != (stats_a.mu.shape[0],):
        raise ValueError(f"lambda shape {lam.shape} != ({stats_a.mu.shape[0]},)")
    w = lam[:, None]
    gamma_mix = w * stats_a.sigma + (1.0 - w) * stats_b.sigma
    beta_mix = w * stats_a.mu + (1.0 - w) * stats_b.mu
    return gamma_mix, beta_mix


def mixstyle_forward(
    batch,
    config: MixStyleConfig,
    domain_ids: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    *,
    lam: np.ndarray | None = None,
    perm: np.ndarray | None = None,
    active: bool | None = None,
) -> Tensor:
    """Apply statistics mixing to a (B, C, H, W) batch.

    Outside training (config.train_mode False) the input is returned as-is,
    without touching the rng. In training, a Bernoulli(p_active) coin decides
    whether the pass is a no-op; when active, the batch is re-styled with a
    per-instance convex mix of its own statistics and a reference instance's.

    The keyword overrides (lam, perm, active) pin the per-pass random choices
    for diagnostics and tests.
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.ndim != 4:
        raise ValueError(f"expected a (B, C, H, W) batch, got shape {x.shape}")
    if not config.train_mode:
        return x
    if active is None:
        if rng is None:
            raise ValueError("an rng is required in training mode unless all choices are pinned")
        active = rng.random() < config.p_active
    if not active:
        return x

    b = x.shape[0]
    if perm is None:
        perm = make_reference_permutation(b, config.strategy, domain_ids, rng)
    own = compute_channel_stats(x, config.epsilon)
    ref = own.take(perm)
    if lam is None:
        if config.variant == "replace":
            lam = np.zeros(b, dtype=np.float32)
        else:
            lam = sample_lambda(config.alpha, b, rng)
    else:
        lam = np.asarray(lam, dtype=np.float32)
    gamma_mix, beta_mix = mix_statistics(own, ref, lam)
    return _apply_stats(x, own, gamma_mix, beta_mix)


def project_style_stats(stats, dims: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """PCA of concatenated (mu, sigma) vectors down to `dims` coordinates.

    Accepts a ChannelStats over a dataset, a list of ChannelStats to stack,
    or a plain (N, F) feature matrix. Returns (coords (N, dims), explained
    variance ratio (dims,)).
    """
    if isinstance(stats, ChannelStats):
        matrix = np.concatenate([stats.mu, stats.sigma], axis=1)
    elif isinstance(stats, np.ndarray):
        matrix = stats
    else:
        parts = [np.concatenate([s.mu, s.sigma], axis=1) for s in stats]
        matrix = np.concatenate(parts, axis=0)
    matrix = np.asarray(matrix, dtype=np.float64)
    n = matrix.shape[0]
    if n < 3:
        raise ValueError(f"projection needs at least 3 instances, got {n}")
    if dims < 1 or dims > min(matrix.shape):
        raise ValueError(f"dims={dims} out of range for matrix {matrix.shape}")
    centered = matrix - matrix.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    coords = centered @ vt[:dims].T
    total = np.sum(s**2)
    explained = (s[:dims] ** 2) / total if total > 0 else np.zeros(dims)
    return coords.astype(np.float32), explained.astype(np.float64)
