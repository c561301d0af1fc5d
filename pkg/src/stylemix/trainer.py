"""Training loops for domain generalization (plain, semi-supervised, and
unsupervised-adaptation tasks), leave-one-domain-out evaluation, and the
ablation harness.

Every run draws all randomness from one seed, split into independent streams
(weight init, batch order, augmentation, statistics mixing). Streams that an
inactive component consumes never touch the others, so a run with the mixing
layer disabled is bit-identical to one with activation probability 0.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import no_grad, softmax_cross_entropy, take_rows
from .datagen import load_manifest, load_split
from .mixstyle import MixStyleConfig, make_reference_permutation
from .model import Classifier, calibrate_backbone, init_backbone
from .optim import SGD, cosine_lr
from .semisup import SemiSupConfig, assign_pseudo_labels, augment_batch, build_semisup_batch

TASKS = ("dg", "ssdg", "uda")

LAYER_PLACEMENT_CODES = ("res1", "res12", "res123", "res1234", "res14", "res23")
ALPHA_SWEEP = (0.1, 0.2, 0.3, 0.4)


class DivergenceError(RuntimeError):
    """Raised when a training loss stops being finite."""


def insertion_points_from_code(code: str) -> tuple[str, ...]:
    """Expand a compact placement code like 'res14' to ('res1', 'res4')."""
    if not code.startswith("res") or not code[3:].isdigit() or not code[3:]:
        raise ValueError(f"bad insertion code {code!r}; expected e.g. 'res123'")
    return tuple(f"res{d}" for d in code[3:])


@dataclass
class ExperimentConfig:
    dataset_dir: str
    target_domain: int
    task: str = "dg"
    mixstyle: MixStyleConfig = field(default_factory=MixStyleConfig)
    baseline: bool = False
    semisup: SemiSupConfig = field(default_factory=SemiSupConfig)
    epochs: int = 30
    batch_size: int = 32
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    steps_per_epoch: int | None = None
    warmup_steps: int | None = None
    grad_clip: float | None = 1.0
    eval_batch: int = 256

    def __post_init__(self):
        self.dataset_dir = str(self.dataset_dir)
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"batch size must be even and >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_id(self) -> str:
        """Stable short hash of everything except the seed."""
        payload = self.to_dict()
        payload.pop("seed")
        canon = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:12]


@dataclass
class RunReport:
    config: dict
    seed: int
    train_loss: list[float]
    source_acc: list[float]
    target_acc: list[float]
    final_confusion: list[list[int]]
    wall_clock_sec: float

    @property
    def final_source_acc(self) -> float:
        return self.source_acc[-1]

    @property
    def final_target_acc(self) -> float:
        return self.target_acc[-1]

    def to_json(self) -> str:
        # Wall clock is intentionally left out: report files must be
        # byte-identical across reruns of the same (config, seed).
        payload = {
            "config": self.config,
            "seed": self.seed,
            "train_loss": self.train_loss,
            "source_acc": self.source_acc,
            "target_acc": self.target_acc,
            "final_source_acc": self.final_source_acc,
            "final_target_acc": self.final_target_acc,
            "final_confusion": self.final_confusion,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


# -- data assembly ---------------------------------------------------------------


def _concat(parts: list[dict]) -> dict:
    return {
        "images": np.concatenate([p["images"] for p in parts]),
        "classes": np.concatenate([p["classes"] for p in parts]),
        "domains": np.concatenate([p["domains"] for p in parts]),
        "labeled": np.concatenate([p["labeled"] for p in parts]),
    }


def _subset(pool: dict, mask: np.ndarray) -> dict:
    return {key: val[mask] for key, val in pool.items()}


def _center(split: dict) -> dict:
    # zero-centered pixels keep the norm-free conv stack out of the
    # co-moving-feature regime that kills relu units early in training
    out = dict(split)
    out["images"] = split["images"] - np.float32(0.5)
    return out


def load_task_data(cfg: ExperimentConfig) -> dict:
    """Assemble leave-one-domain-out pools for the configured task."""
    manifest = load_manifest(cfg.dataset_dir)
    names = [spec["name"] for spec in manifest["domains"]]
    if not 0 <= cfg.target_domain < len(names):
        raise ValueError(f"target domain {cfg.target_domain} outside [0, {len(names)})")
    target = names[cfg.target_domain]
    sources = [n for i, n in enumerate(names) if i != cfg.target_domain]

    src_train = _concat([_center(load_split(cfg.dataset_dir, n, "train")) for n in sources])
    src_test = _concat([_center(load_split(cfg.dataset_dir, n, "test")) for n in sources])
    tgt_train = _center(load_split(cfg.dataset_dir, target, "train"))
    tgt_test = _center(load_split(cfg.dataset_dir, target, "test"))

    labeled = _subset(src_train, src_train["labeled"])
    if cfg.task == "ssdg":
        unlabeled = _subset(src_train, ~src_train["labeled"])
    elif cfg.task == "uda":
        unlabeled = tgt_train  # target images participate without their labels
    else:
        unlabeled = None

    return {
        "k": manifest["classes"],
        "domain_names": names,
        "labeled": labeled,
        "unlabeled": unlabeled,
        "source_test": src_test,
        "target_test": tgt_test,
    }


# -- evaluation ---------------------------------------------------------------------


def evaluate(clf: Classifier, images: np.ndarray, labels: np.ndarray, k: int, batch_size: int = 256):
    """Eval-mode accuracy and confusion matrix over a split."""
    confusion = np.zeros((k, k), dtype=np.int64)
    correct = 0
    with no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size]
            truth = labels[start : start + batch_size]
            logits = clf.forward(chunk, train_mode=False)
            pred = logits.data.argmax(axis=1)
            correct += int((pred == truth).sum())
            np.add.at(confusion, (truth, pred), 1)
    return correct / len(images), confusion


# -- batch iterators ---------------------------------------------------------------


class _ShuffledCursor:
    """Endless stream of sample indices, reshuffled each time it wraps."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, count: int) -> np.ndarray:
        out = []
        while count > 0:
            if self.pos >= self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            grab = min(count, self.n - self.pos)
            out.append(self.order[self.pos : self.pos + grab])
            self.pos += grab
            count -= grab
        return np.concatenate(out)


def _dg_batch(pool, cfg, cursor, per_domain_idx, order_rng):
    """One supervised batch: shuffled mixture, or two pure domain halves.

    The layout depends only on the configured strategy, never on whether the
    mixing layer is enabled, so a baseline run consumes the batch-order rng
    identically to its mixing counterpart."""
    if cfg.mixstyle is not None and cfg.mixstyle.strategy == "cross-domain":
        domains = sorted(per_domain_idx)
        pair = order_rng.choice(len(domains), size=2, replace=False)
        half = cfg.batch_size // 2
        idx_parts = []
        for sel in pair:
            pool_idx = per_domain_idx[domains[int(sel)]]
            if len(pool_idx) < half:
                raise ValueError(f"domain {domains[int(sel)]} has {len(pool_idx)} examples < half-batch {half}")
            idx_parts.append(order_rng.choice(pool_idx, size=half, replace=False))
        idx = np.concatenate(idx_parts)
    else:
        idx = cursor.take(cfg.batch_size)
    return pool["images"][idx], pool["classes"][idx], pool["domains"][idx]


# -- training loops ------------------------------------------------------------------


def run_experiment(cfg: ExperimentConfig, return_model: bool = False):
    """Train per the config and report per-epoch losses and accuracies.

    Fully determined by (config, seed): the master seed is split into
    independent streams for init, batch order, augmentation, and mixing.
    """
    t0 = time.perf_counter()
    data = load_task_data(cfg)
    k = data["k"]

    ss = np.random.SeedSequence(cfg.seed)
    init_ss, order_ss, aug_ss, mix_ss = ss.spawn(4)
    init_rng = np.random.default_rng(init_ss)
    order_rng = np.random.default_rng(order_ss)
    aug_rng = np.random.default_rng(aug_ss)
    mix_rng = np.random.default_rng(mix_ss)

    backbone = init_backbone(k, init_rng)
    clf = Classifier(backbone, None if cfg.baseline else cfg.mixstyle)

    labeled = data["labeled"]
    unlabeled = data["unlabeled"]
    if len(labeled["images"]) < cfg.batch_size:
        raise ValueError(
            f"labeled pool ({len(labeled['images'])}) smaller than one batch ({cfg.batch_size})"
        )
    probe = labeled["images"][:: max(1, len(labeled["images"]) // 96)][:96]
    calibrate_backbone(backbone, probe)
    opt = SGD(clf.parameters(), cfg.lr0, cfg.momentum, cfg.weight_decay, grad_clip=cfg.grad_clip)

    if cfg.task == "dg":
        default_steps = len(labeled["images"]) // cfg.batch_size
    else:
        total = len(labeled["images"]) + len(unlabeled["images"])
        default_steps = total // cfg.batch_size
    steps_per_epoch = cfg.steps_per_epoch or max(1, default_steps)
    total_steps = cfg.epochs * steps_per_epoch
    warmup = cfg.warmup_steps if cfg.warmup_steps is not None else max(1, total_steps // 10)

    cursor = _ShuffledCursor(len(labeled["images"]), order_rng)
    per_domain_idx = {
        int(d): np.flatnonzero(labeled["domains"] == d) for d in np.unique(labeled["domains"])
    }

    train_loss: list[float] = []
    source_acc: list[float] = []
    target_acc: list[float] = []
    confusion = np.zeros((k, k), dtype=np.int64)
    gstep = 0

    for _ in range(cfg.epochs):
        epoch_losses = []
        for _ in range(steps_per_epoch):
            if gstep < warmup:
                opt.lr = cfg.lr0 * (gstep + 1) / warmup
            else:
                opt.lr = cosine_lr(gstep - warmup, max(1, total_steps - warmup), cfg.lr0)
            if cfg.task == "dg":
                images, targets, domain_ids = _dg_batch(labeled, cfg, cursor, per_domain_idx, order_rng)
                logits = clf.forward(images, domain_ids=domain_ids, train_mode=True, rng=mix_rng)
                loss, _ = softmax_cross_entropy(logits, targets)
            else:
                loss = _semisup_step(clf, cfg, labeled, unlabeled, order_rng, aug_rng, mix_rng)
            val = float(loss.data)
            if not np.isfinite(val):
                raise DivergenceError(f"non-finite loss {val} at step {gstep} (seed {cfg.seed})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(val)
            gstep += 1
        train_loss.append(float(np.mean(epoch_losses)))
        acc_s, _ = evaluate(clf, data["source_test"]["images"], data["source_test"]["classes"], k, cfg.eval_batch)
        acc_t, confusion = evaluate(
            clf, data["target_test"]["images"], data["target_test"]["classes"], k, cfg.eval_batch
        )
        source_acc.append(acc_s)
        target_acc.append(acc_t)

    report = RunReport(
        config=cfg.to_dict(),
        seed=cfg.seed,
        train_loss=train_loss,
        source_acc=source_acc,
        target_acc=target_acc,
        final_confusion=confusion.tolist(),
        wall_clock_sec=time.perf_counter() - t0,
    )
    return (report, clf) if return_model else report


def _semisup_step(clf, cfg, labeled, unlabeled, order_rng, aug_rng, mix_rng):
    """One combined step: [weak labeled | strong unlabeled] through one
    forward pass, so the half-swap mixes labeled with unlabeled statistics.

    Pseudo-labels come from an eval-mode pass on weak views (gradients
    blocked); unconfident unlabeled examples ride along in the forward but
    are excluded from the loss."""
    batch = build_semisup_batch(labeled, unlabeled, cfg.batch_size, cfg.task, order_rng)
    half = cfg.batch_size // 2

    weak_labeled = augment_batch(batch.images_labeled, aug_rng, strong=False)
    pseudo, _, mask = assign_pseudo_labels(clf, batch.images_unlabeled, cfg.semisup.tau, aug_rng)
    strong_unlabeled = augment_batch(batch.images_unlabeled, aug_rng, strong=True)

    combined = np.concatenate([weak_labeled, strong_unlabeled])
    perm = None
    if clf.mixstyle is not None and clf.mixstyle.strategy == "cross-domain":
        # halves are the labeled/unlabeled partition, not two source domains
        perm = make_reference_permutation(cfg.batch_size, "cross-domain", None, None)
    logits = clf.forward(combined, train_mode=True, rng=mix_rng,
                         mix_overrides={"perm": perm} if perm is not None else None)

    sup_loss, _ = softmax_cross_entropy(take_rows(logits, np.arange(half)), batch.labels)
    confident = np.flatnonzero(mask)
    if len(confident) == 0:
        return sup_loss
    unl_logits = take_rows(logits, half + confident)
    unl_mean, _ = softmax_cross_entropy(unl_logits, pseudo[confident])
    scale = cfg.semisup.unlabeled_weight * (len(confident) / half)
    return sup_loss + unl_mean * scale


# -- ablation harness -----------------------------------------------------------------


@dataclass
class AblationRow:
    config_id: str
    target_domain: int
    mean_acc: float
    std_acc: float
    n_seeds: int


@dataclass
class AblationResult:
    rows: list[AblationRow]
    # (label, target_domain, seed) -> (final target acc, final source acc)
    runs: dict[tuple[str, int, int], tuple[float, float]]
    labels: dict[str, str]  # config_id -> human label


def _run_for_ablation(payload: dict) -> tuple:
    cfg = payload["config"]
    report = run_experiment(cfg)
    return payload["label"], cfg.target_domain, cfg.seed, report.final_target_acc, report.final_source_acc


_WORKER_ENV = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def run_ablation(entries: list[tuple[str, ExperimentConfig]], seeds: list[int], jobs: int = 1) -> AblationResult:
    """Run every (config, seed) pair and aggregate per-config mean/std target
    accuracy. Entries are (label, config); each config's seed field is
    replaced by the shared seed list.

    With jobs > 1, runs execute in spawned worker processes pinned to one
    BLAS thread each; per-run results are independent of scheduling.
    """
    tasks = []
    for label, base in entries:
        for seed in seeds:
            tasks.append({"label": label, "config": replace(base, seed=seed)})

    results = []
    if jobs > 1 and len(tasks) > 1:
        import multiprocessing as mp

        saved = {key: os.environ.get(key) for key in _WORKER_ENV}
        for key in _WORKER_ENV:
            os.environ[key] = "1"
        try:
            ctx = mp.get_context("spawn")
            with concurrent.futures.ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
                results = list(pool.map(_run_for_ablation, tasks))
        finally:
            for key, val in saved.items():
                if val is None:
                    os.environ.pop(key, None)
                else:
                    os.environ[key] = val
    else:
        results = [_run_for_ablation(t) for t in tasks]

    runs: dict[tuple[str, int, int], tuple[float, float]] = {}
    for label, target, seed, acc_t, acc_s in results:
        runs[(label, target, seed)] = (acc_t, acc_s)

    rows = []
    labels_map = {}
    for label, base in entries:
        cid = base.config_id()
        labels_map[cid] = label
        accs = np.array([runs[(label, base.target_domain, seed)][0] for seed in seeds])
        rows.append(
            AblationRow(
                config_id=cid,
                target_domain=base.target_domain,
                mean_acc=float(accs.mean()),
                std_acc=float(accs.std()),
                n_seeds=len(seeds),
            )
        )
    return AblationResult(rows=rows, runs=runs, labels=labels_map)


def ablation_csv(result: AblationResult) -> str:
    """Comparison table: comma-separated, '.' decimals, LF line endings."""
    lines = ["config_id,target_domain,mean_acc,std_acc,n_seeds"]
    for row in result.rows:
        lines.append(
            f"{row.config_id},{row.target_domain},{row.mean_acc:.6f},{row.std_acc:.6f},{row.n_seeds}"
        )
    return "\n".join(lines) + "\n"
