"""Small four-block CNN backbone with named insertion slots for the
statistics-mixing layer.

Each block is conv3x3 -> relu -> conv3x3 -> relu -> avg-pool(2), with channel
widths (16, 32, 64, 128). The slots after the blocks are named res1..res4 by
analogy with the residual stages of larger backbones; the head is a global
average pool followed by a linear classifier.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor, avg_pool2d, conv2d, global_avg_pool, linear, no_grad, relu, softmax_probs
from .mixstyle import INSERTION_SLOTS, MixStyleConfig, make_reference_permutation, mixstyle_forward

WIDTHS = (16, 32, 64, 128)

WEIGHTS_MAGIC = b"MXCK"


class Backbone:
    """Parameter container for the conv stack and linear head."""

    def __init__(self, params: dict[str, Tensor], num_classes: int):
        self.params = params
        self.num_classes = num_classes

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]


def init_backbone(num_classes: int, rng: np.random.Generator, in_channels: int = 3) -> Backbone:
    """He-normal initialization of all conv and linear weights."""
    params: dict[str, Tensor] = {}

    def conv_param(name, cout, cin):
        fan_in = cin * 9
        w = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / fan_in)
        params[f"{name}_w"] = Tensor.param(w.astype(np.float32))
        params[f"{name}_b"] = Tensor.param(np.zeros(cout, dtype=np.float32))

    cin = in_channels
    for i, width in enumerate(WIDTHS, start=1):
        conv_param(f"b{i}_conv1", width, cin)
        conv_param(f"b{i}_conv2", width, width)
        cin = width
    head_w = rng.standard_normal((WIDTHS[-1], num_classes)) * np.sqrt(2.0 / WIDTHS[-1])
    params["head_w"] = Tensor.param(head_w.astype(np.float32))
    params["head_b"] = Tensor.param(np.zeros(num_classes, dtype=np.float32))
    return Backbone(params, num_classes)


class Classifier:
    """Backbone plus an optional statistics-mixing configuration.

    The mixing layer runs only in training mode; evaluation follows exactly
    the same op sequence as a plain backbone, so eval logits are bit-identical
    to a mixing-free model with the same weights.
    """

    def __init__(self, backbone: Backbone, mixstyle: MixStyleConfig | None = None):
        self.backbone = backbone
        self.mixstyle = mixstyle

    def parameters(self) -> list[Tensor]:
        return self.backbone.parameters()

    def forward(
        self,
        batch,
        domain_ids: np.ndarray | None = None,
        train_mode: bool = True,
        rng: np.random.Generator | None = None,
        capture: dict | None = None,
        mix_overrides: dict | None = None,
    ) -> Tensor:
        x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=np.float32))
        p = self.backbone.params
        cfg = self.mixstyle if (train_mode and self.mixstyle is not None) else None

        shared_active = None
        shared_perm = None
        if cfg is not None and cfg.train_mode:
            if cfg.shared_coin:
                shared_active = rng.random() < cfg.p_active
            if cfg.fixed_shuffle:
                shared_perm = make_reference_permutation(x.shape[0], cfg.strategy, domain_ids, rng)

        for i in range(1, 5):
            x = relu(conv2d(x, p[f"b{i}_conv1_w"], p[f"b{i}_conv1_b"], padding=1))
            x = relu(conv2d(x, p[f"b{i}_conv2_w"], p[f"b{i}_conv2_b"], padding=1))
            x = avg_pool2d(x, 2)
            slot = f"res{i}"
            if capture is not None:
                capture[slot] = x.data
            if cfg is not None and slot in cfg.insertion_points:
                overrides = dict(mix_overrides) if mix_overrides else {}
                if shared_active is not None:
                    overrides.setdefault("active", shared_active)
                if shared_perm is not None:
                    overrides.setdefault("perm", shared_perm)
                x = mixstyle_forward(x, cfg, domain_ids, rng, **overrides)
        pooled = global_avg_pool(x)
        return linear(pooled, p["head_w"], p["head_b"])

    def predict_probs(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode class probabilities, computed without graph recording."""
        out = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                logits = self.forward(images[start : start + batch_size], train_mode=False)
                out.append(softmax_probs(logits.data))
        return np.concatenate(out, axis=0)

    def features(self, images: np.ndarray, batch_size: int = 256) -> dict[str, np.ndarray]:
        """Eval-mode activations after each block, keyed res1..res4."""
        chunks: dict[str, list[np.ndarray]] = {slot: [] for slot in INSERTION_SLOTS}
        with no_grad():
            for start in range(0, len(images), batch_size):
                capture: dict[str, np.ndarray] = {}
                self.forward(images[start : start + batch_size], train_mode=False, capture=capture)
                for slot in INSERTION_SLOTS:
                    chunks[slot].append(capture[slot])
        return {slot: np.concatenate(parts, axis=0) for slot, parts in chunks.items()}


def calibrate_backbone(backbone: Backbone, probe: np.ndarray, target_std: float = 1.0) -> None:
    """Data-dependent weight rescaling (LSUV-style).

    Plain conv stacks without normalization layers train poorly from a purely
    shape-based init: activation scale drifts across depth and the loss sits
    at the uniform plateau for hundreds of steps. Rescaling each conv's
    weights so its post-relu output std on a probe batch hits target_std
    removes the plateau. Deterministic given the probe batch.
    """
    p = backbone.params
    x = Tensor(np.asarray(probe, dtype=np.float32))
    with no_grad():
        for i in range(1, 5):
            for j in (1, 2):
                w, b = p[f"b{i}_conv{j}_w"], p[f"b{i}_conv{j}_b"]
                out = relu(conv2d(x, w, b, padding=1))
                std = float(out.data.std())
                if std > 0:
                    w.data *= np.float32(target_std / std)
                x = relu(conv2d(x, w, b, padding=1))
            x = avg_pool2d(x, 2)
        logits = linear(global_avg_pool(x), p["head_w"], p["head_b"])
        std = float(logits.data.std())
        if std > 0:
            p["head_w"].data *= np.float32(target_std / std)


# -- checkpoints -------------------------------------------------------------------
# A deliberately simple flat container (json header + raw float32 blobs) so
# that rerunning a training command reproduces the file byte for byte.


def save_weights(path, backbone: Backbone) -> None:
    entries = []
    blobs = []
    for name in sorted(backbone.params):
        t = backbone.params[name]
        entries.append({"name": name, "shape": list(t.data.shape)})
        blobs.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    header = json.dumps({"num_classes": backbone.num_classes, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_weights(path) -> Backbone:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != WEIGHTS_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        params: dict[str, Tensor] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 4), dtype="<f4").reshape(shape)
            params[entry["name"]] = Tensor.param(data.copy())
    return Backbone(params, header["num_classes"])
