"""Procedural multi-domain image benchmark.

Each domain renders the same K glyph classes but with its own visual style:
palette, sinusoidal texture, contrast, brightness, and pixel noise. One
optional domain differs by geometry (rotation) instead, to probe the failure
mode that statistics mixing is not expected to fix. Generation is fully
deterministic: every example derives its rng stream from
(seed, domain, class, index), so parallel and serial generation agree byte
for byte.

Dataset file format (little-endian):
  header: magic "MXDS", u32 version=1, u32 K, u32 D, u32 C, u32 H, u32 W, u32 N
  record: u32 class, u32 domain, u8 labeled, 3 pad bytes, C*H*W float32 pixels
One file per (domain, split), plus a JSON manifest naming the files and
recording the seed and domain specs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MXDS"
VERSION = 1
HEADER = struct.Struct("<4s7I")
RECORD_META = struct.Struct("<IIB3x")

GLYPH_NAMES = ("disk", "ring", "square", "diamond", "plus", "cross", "triangle")

# glyph radius as a fraction of image size; larger glyphs give the class
# signal more pixels relative to the style variation
GLYPH_RADIUS_FRAC = 0.34


@dataclass(frozen=True)
class DomainSpec:
    """Style parameters of one domain.

    palette: (background colors, foreground colors), each a tuple of RGB
    triplets in [0, 1]; one of each is picked per image.
    texture_freq: cycles of the sinusoidal overlay across the image width
    (0 disables it). geometry_shift: optional (low, high) rotation range in
    degrees for the geometry-probe domain.
    """

    name: str
    bg_colors: tuple[tuple[float, float, float], ...]
    fg_colors: tuple[tuple[float, float, float], ...]
    texture_freq: float = 0.0
    texture_angle: float = 0.0
    contrast: float = 1.0
    brightness: float = 0.0
    noise_sigma: float = 0.0
    geometry_shift: tuple[float, float] | None = None

    def __post_init__(self):
        if self.texture_freq < 0:
            raise ValueError(f"texture_freq must be >= 0, got {self.texture_freq}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class DatasetManifest:
    """Sizes and seed of a generated dataset."""

    classes: int
    domains: int
    train_per_class: int
    test_per_class: int
    image_size: tuple[int, int, int] = (3, 32, 32)
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError(f"need K >= 2 classes, got K={self.classes}")
        if self.domains < 3:
            raise ValueError(f"need D >= 3 domains for leave-one-domain-out, got D={self.domains}")
        if self.train_per_class <= 0 or self.test_per_class <= 0:
            raise ValueError("per-split counts must be positive")
        self.image_size = tuple(self.image_size)


def default_domain_specs(include_geometry: bool = False) -> list[DomainSpec]:
    """Four style domains (plus an optional rotation domain).

    The styles differ in global color, texture, contrast, brightness, and
    noise; the glyph geometry is shared, so the domain shift is exactly the
    kind of per-channel statistic shift the mixing augmentation targets.
    """
    specs = [
        DomainSpec(
            name="paper",
            bg_colors=((0.93, 0.91, 0.85), (0.88, 0.87, 0.82), (0.96, 0.94, 0.90)),
            fg_colors=((0.15, 0.17, 0.30), (0.25, 0.15, 0.20), (0.10, 0.22, 0.18)),
            contrast=1.0,
            brightness=0.0,
            noise_sigma=0.01,
        ),
        DomainSpec(
            name="ember",
            bg_colors=((0.50, 0.18, 0.10), (0.42, 0.14, 0.16), (0.55, 0.24, 0.08)),
            fg_colors=((0.95, 0.80, 0.35), (0.98, 0.70, 0.25), (0.90, 0.88, 0.50)),
            contrast=1.25,
            brightness=-0.05,
            noise_sigma=0.02,
        ),
        DomainSpec(
            name="canvas",
            bg_colors=((0.55, 0.60, 0.38), (0.50, 0.56, 0.34), (0.60, 0.63, 0.45)),
            fg_colors=((0.28, 0.18, 0.10), (0.22, 0.14, 0.14), (0.32, 0.22, 0.08)),
            texture_freq=7.0,
            texture_angle=35.0,
            contrast=0.9,
            brightness=0.04,
            noise_sigma=0.015,
        ),
        DomainSpec(
            name="mist",
            bg_colors=((0.55, 0.62, 0.72), (0.60, 0.65, 0.74), (0.52, 0.58, 0.70)),
            fg_colors=((0.28, 0.35, 0.47), (0.32, 0.38, 0.51), (0.25, 0.31, 0.44)),
            contrast=0.55,
            brightness=0.18,
            noise_sigma=0.025,
        ),
    ]
    if include_geometry:
        specs.append(
            DomainSpec(
                name="tilt",
                bg_colors=specs[0].bg_colors,
                fg_colors=specs[0].fg_colors,
                contrast=1.0,
                brightness=0.0,
                noise_sigma=0.01,
                geometry_shift=(25.0, 65.0),
            )
        )
    return specs


# -- glyph rendering -------------------------------------------------------------


def _glyph_mask(class_id: int, size: int, cx: float, cy: float, angle_deg: float) -> np.ndarray:
    """Boolean coverage mask of the class glyph centered at (cx, cy)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    x = xx - cx
    y = yy - cy
    if angle_deg:
        a = np.deg2rad(angle_deg)
        x, y = np.cos(a) * x + np.sin(a) * y, -np.sin(a) * x + np.cos(a) * y
    r = size * GLYPH_RADIUS_FRAC
    name = GLYPH_NAMES[class_id % len(GLYPH_NAMES)]
    if name == "disk":
        return x**2 + y**2 <= r**2
    if name == "ring":
        d2 = x**2 + y**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if name == "square":
        return (np.abs(x) <= r * 0.9) & (np.abs(y) <= r * 0.9)
    if name == "diamond":
        return np.abs(x) + np.abs(y) <= r * 1.25
    if name == "plus":
        arm = r * 0.42
        return ((np.abs(x) <= arm) & (np.abs(y) <= r * 1.1)) | ((np.abs(y) <= arm) & (np.abs(x) <= r * 1.1))
    if name == "cross":
        arm = r * 0.38
        return (np.abs(x - y) <= arm * 1.2) & (np.abs(x + y) <= 2.3 * r) | (
            (np.abs(x + y) <= arm * 1.2) & (np.abs(x - y) <= 2.3 * r)
        )
    # triangle: downangled half-plane cuts
    return (y >= -r) & (y - 1.9 * x <= r * 0.9) & (y + 1.9 * x <= r * 0.9)


def render_example(class_id: int, domain: DomainSpec, rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """Render one (3, size, size) float32 image of the class in the domain's style.

    Geometry draws (position jitter, optional rotation) happen before style
    draws, so two domains differing only in palette produce identical masks
    under identical rng streams.
    """
    if class_id < 0 or class_id >= len(GLYPH_NAMES):
        raise ValueError(f"class_id {class_id} outside [0, {len(GLYPH_NAMES)})")
    # geometry
    jitter = size * 0.09
    cx = size / 2 + rng.uniform(-jitter, jitter)
    cy = size / 2 + rng.uniform(-jitter, jitter)
    angle = float(rng.uniform(*domain.geometry_shift)) if domain.geometry_shift else 0.0
    mask = _glyph_mask(class_id, size, cx, cy, angle)

    # style: palette pick plus a small per-image color jitter (sub-domains)
    bg = np.array(domain.bg_colors[rng.integers(0, len(domain.bg_colors))], dtype=np.float64)
    fg = np.array(domain.fg_colors[rng.integers(0, len(domain.fg_colors))], dtype=np.float64)
    bg = bg + rng.uniform(-0.03, 0.03, size=3)
    fg = fg + rng.uniform(-0.03, 0.03, size=3)

    img = np.empty((3, size, size), dtype=np.float64)
    img[:] = bg[:, None, None]
    img[:, mask] = fg[:, None]

    if domain.texture_freq > 0:
        phase = rng.uniform(0, 2 * np.pi)
        a = np.deg2rad(domain.texture_angle)
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        wave = np.sin(2 * np.pi * domain.texture_freq * (np.cos(a) * xx + np.sin(a) * yy) / size + phase)
        img += 0.12 * wave[None, :, :]

    img = (img - 0.5) * domain.contrast + 0.5
    img += domain.brightness
    if domain.noise_sigma > 0:
        img += rng.normal(0.0, domain.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _example_rng(seed: int, domain_id: int, class_id: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, domain_id, class_id, index)))


# -- binary dataset files ----------------------------------------------------------


def write_domain_file(path, images, classes, domains, labeled, k: int, d: int) -> None:
    images = np.ascontiguousarray(images, dtype=np.float32)
    n, c, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, k, d, c, h, w, n))
        for i in range(n):
            fh.write(RECORD_META.pack(int(classes[i]), int(domains[i]), int(bool(labeled[i]))))
            fh.write(images[i].tobytes())


def read_domain_file(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, k, d, c, h, w, n = HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    images = np.empty((n, c, h, w), dtype=np.float32)
    classes = np.empty(n, dtype=np.int64)
    domains = np.empty(n, dtype=np.int64)
    labeled = np.empty(n, dtype=bool)
    offset = HEADER.size
    pixels = c * h * w
    for i in range(n):
        cls, dom, lab = RECORD_META.unpack_from(raw, offset)
        offset += RECORD_META.size
        images[i] = np.frombuffer(raw, dtype="<f4", count=pixels, offset=offset).reshape(c, h, w)
        offset += pixels * 4
        classes[i], domains[i], labeled[i] = cls, dom, lab
    return {"images": images, "classes": classes, "domains": domains, "labeled": labeled,
            "k": k, "d": d, "image_size": (c, h, w)}


def generate_dataset(
    manifest: DatasetManifest,
    specs: list[DomainSpec],
    out_dir,
    label_budget: int | None = None,
) -> Path:
    """Render and persist all (domain, split) files plus the JSON manifest.

    label_budget, when set, flags exactly that many training examples per
    (class, domain) as labeled; the rest carry an empty pseudo-label slot.
    Returns the manifest path.
    """
    if len(specs) != manifest.domains:
        raise ValueError(f"manifest declares {manifest.domains} domains but {len(specs)} specs given")
    if manifest.classes > len(GLYPH_NAMES):
        raise ValueError(f"at most {len(GLYPH_NAMES)} glyph classes available, got K={manifest.classes}")
    if label_budget is not None and not 0 < label_budget <= manifest.train_per_class:
        raise ValueError(
            f"label budget {label_budget} impossible with {manifest.train_per_class} examples per class"
        )
    c, h, w = manifest.image_size
    if c != 3:
        raise ValueError("renderer produces 3-channel images")
    if h != w:
        raise ValueError(f"square images required, got {h}x{w}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files: dict[str, dict[str, str]] = {}
    counts = {"train": manifest.train_per_class, "test": manifest.test_per_class}
    for dom_id, spec in enumerate(specs):
        files[spec.name] = {}
        for split, per_class in counts.items():
            n = manifest.classes * per_class
            images = np.empty((n, c, h, w), dtype=np.float32)
            classes = np.empty(n, dtype=np.int64)
            labeled = np.ones(n, dtype=bool)
            i = 0
            for cls in range(manifest.classes):
                for idx in range(per_class):
                    # test indices continue after the train range so splits never share streams
                    stream_index = idx if split == "train" else manifest.train_per_class + idx
                    g = _example_rng(manifest.seed, dom_id, cls, stream_index)
                    images[i] = render_example(cls, spec, g, size=h)
                    classes[i] = cls
                    if split == "train" and label_budget is not None and idx >= label_budget:
                        labeled[i] = False
                    i += 1
            name = f"{spec.name}_{split}.mxds"
            write_domain_file(out_dir / name, images, classes,
                              np.full(n, dom_id), labeled, manifest.classes, manifest.domains)
            files[spec.name][split] = name

    manifest_path = out_dir / "manifest.json"
    payload = {
        "classes": manifest.classes,
        "domains": [asdict(s) for s in specs],
        "train_per_class": manifest.train_per_class,
        "test_per_class": manifest.test_per_class,
        "image_size": list(manifest.image_size),
        "seed": manifest.seed,
        "label_budget": label_budget,
        "files": files,
    }
    with open(manifest_path, "w", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def load_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    with open(path) as fh:
        return json.load(fh)


def load_split(dataset_dir, domain_name: str, split: str) -> dict:
    manifest = load_manifest(dataset_dir)
    try:
        fname = manifest["files"][domain_name][split]
    except KeyError:
        raise FileNotFoundError(f"no {split} file for domain {domain_name!r} in {dataset_dir}") from None
    return read_domain_file(Path(dataset_dir) / fname)
