"""Generator tests: renderer determinism and factorization, file format
round-trips, labeling budgets, and the style-separability invariant."""

import json

import numpy as np
import pytest

from stylemix.datagen import (
    DatasetManifest,
    DomainSpec,
    default_domain_specs,
    generate_dataset,
    load_manifest,
    load_split,
    read_domain_file,
    render_example,
    write_domain_file,
)
from stylemix.mixstyle import compute_channel_stats
from stylemix.model import Classifier, init_backbone

from helpers import rng


def small_manifest(**kw):
    defaults = dict(classes=4, domains=4, train_per_class=6, test_per_class=3, seed=11)
    defaults.update(kw)
    return DatasetManifest(**defaults)


class TestRenderer:
    def test_deterministic_given_rng(self):
        spec = default_domain_specs()[0]
        a = render_example(2, spec, rng(42))
        b = render_example(2, spec, rng(42))
        np.testing.assert_array_equal(a, b)
        assert a.shape == (3, 32, 32) and a.dtype == np.float32

    def test_pixels_in_unit_range(self):
        for spec in default_domain_specs(include_geometry=True):
            img = render_example(0, spec, rng(3))
            assert img.min() >= 0.0 and img.max() <= 1.0

    def test_palette_only_domains_share_masks(self):
        base = default_domain_specs()[0]
        recolored = DomainSpec(
            name="recolored",
            bg_colors=((0.1, 0.1, 0.5),),
            fg_colors=((0.9, 0.9, 0.2),),
            contrast=base.contrast,
            brightness=base.brightness,
            noise_sigma=0.0,
        )
        plain = DomainSpec(
            name="plain",
            bg_colors=((0.8, 0.8, 0.8),),
            fg_colors=((0.2, 0.2, 0.2),),
            contrast=base.contrast,
            brightness=base.brightness,
            noise_sigma=0.0,
        )
        img_a = render_example(3, recolored, rng(7))
        img_b = render_example(3, plain, rng(7))
        # the glyph mask is wherever a pixel differs from the image's own corner (background)
        mask_a = (img_a != img_a[:, :1, :1]).any(axis=0)
        mask_b = (img_b != img_b[:, :1, :1]).any(axis=0)
        np.testing.assert_array_equal(mask_a, mask_b)
        assert mask_a.any()

    def test_brightness_monotonic(self):
        means = []
        for offset in (-0.15, 0.0, 0.15):
            spec = DomainSpec(
                name=f"b{offset}",
                bg_colors=((0.5, 0.5, 0.5),),
                fg_colors=((0.3, 0.3, 0.3),),
                brightness=offset,
            )
            means.append(float(render_example(1, spec, rng(5)).mean()))
        assert means[0] < means[1] < means[2]

    def test_distinct_glyphs_per_class(self):
        spec = default_domain_specs()[0]
        imgs = [render_example(c, spec, rng(1)) for c in range(7)]
        for i in range(7):
            for j in range(i + 1, 7):
                assert np.abs(imgs[i] - imgs[j]).max() > 0.05

    def test_rejects_bad_class(self):
        with pytest.raises(ValueError, match="class_id"):
            render_example(7, default_domain_specs()[0], rng(0))


class TestFileFormat:
    def test_round_trip(self, tmp_path):
        g = rng(0)
        images = g.random((5, 3, 8, 8)).astype(np.float32)
        classes = np.array([0, 1, 2, 0, 1])
        domains = np.full(5, 3)
        labeled = np.array([True, False, True, True, False])
        path = tmp_path / "chunk.mxds"
        write_domain_file(path, images, classes, domains, labeled, k=3, d=4)
        out = read_domain_file(path)
        np.testing.assert_array_equal(out["images"], images)
        np.testing.assert_array_equal(out["classes"], classes)
        np.testing.assert_array_equal(out["domains"], domains)
        np.testing.assert_array_equal(out["labeled"], labeled)
        assert out["k"] == 3 and out["d"] == 4

    def test_header_layout_is_pinned(self, tmp_path):
        path = tmp_path / "one.mxds"
        img = np.zeros((1, 3, 2, 2), dtype=np.float32)
        write_domain_file(path, img, [5], [1], [True], k=7, d=4)
        raw = path.read_bytes()
        assert raw[:4] == b"MXDS"
        header = np.frombuffer(raw[4:32], dtype="<u4")
        np.testing.assert_array_equal(header, [1, 7, 4, 3, 2, 2, 1])
        # record: class u32, domain u32, labeled u8, 3 pad bytes, pixels
        assert np.frombuffer(raw[32:36], dtype="<u4")[0] == 5
        assert np.frombuffer(raw[36:40], dtype="<u4")[0] == 1
        assert raw[40] == 1
        assert len(raw) == 32 + 12 + 3 * 2 * 2 * 4

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.mxds"
        path.write_bytes(b"XXXX" + b"\0" * 60)
        with pytest.raises(ValueError, match="magic"):
            read_domain_file(path)


class TestGenerateDataset:
    def test_layout_and_counts(self, tmp_path):
        manifest = small_manifest()
        specs = default_domain_specs()
        path = generate_dataset(manifest, specs, tmp_path)
        meta = json.loads(path.read_text())
        assert len(meta["files"]) == 4
        train = load_split(tmp_path, "ember", "train")
        test = load_split(tmp_path, "ember", "test")
        assert len(train["images"]) == 4 * 6
        assert len(test["images"]) == 4 * 3
        # class balance: every (class, domain) cell equal
        counts = np.bincount(train["classes"], minlength=4)
        np.testing.assert_array_equal(counts, 6)

    def test_label_budget_flags(self, tmp_path):
        manifest = small_manifest(classes=4, train_per_class=6)
        generate_dataset(manifest, default_domain_specs(), tmp_path, label_budget=2)
        for name in ("paper", "ember", "canvas", "mist"):
            train = load_split(tmp_path, name, "train")
            assert int(train["labeled"].sum()) == 4 * 2
            for cls in range(4):
                cls_mask = train["classes"] == cls
                assert int(train["labeled"][cls_mask].sum()) == 2
            test = load_split(tmp_path, name, "test")
            assert test["labeled"].all()

    def test_budget_absent_all_labeled(self, tmp_path):
        generate_dataset(small_manifest(), default_domain_specs(), tmp_path)
        assert load_split(tmp_path, "paper", "train")["labeled"].all()

    def test_impossible_budget_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="budget"):
            generate_dataset(small_manifest(train_per_class=4), default_domain_specs(), tmp_path, label_budget=5)

    def test_regeneration_is_byte_identical(self, tmp_path):
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        for d in (a_dir, b_dir):
            generate_dataset(small_manifest(), default_domain_specs(), d)
        for f in sorted(a_dir.iterdir()):
            assert f.read_bytes() == (b_dir / f.name).read_bytes(), f.name

    def test_manifest_validation(self):
        with pytest.raises(ValueError, match="K >= 2"):
            DatasetManifest(classes=1, domains=4, train_per_class=5, test_per_class=5)
        with pytest.raises(ValueError, match="D >= 3"):
            DatasetManifest(classes=4, domains=2, train_per_class=5, test_per_class=5)

    def test_missing_manifest_names_path(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="manifest"):
            load_manifest(tmp_path / "nowhere")


class TestStyleSeparability:
    def test_linear_probe_on_untrained_shallow_stats(self, tmp_path):
        """Domains must be separable from shallow-feature statistics of an
        untrained fixed-seed CNN: a least-squares linear classifier on
        (mu, sigma) must exceed 0.8 accuracy."""
        manifest = DatasetManifest(classes=4, domains=4, train_per_class=10, test_per_class=2, seed=3)
        generate_dataset(manifest, default_domain_specs(), tmp_path)
        images, domain_ids = [], []
        for name in ("paper", "ember", "canvas", "mist"):
            split = load_split(tmp_path, name, "train")
            images.append(split["images"])
            domain_ids.append(split["domains"])
        images = np.concatenate(images)
        domain_ids = np.concatenate(domain_ids)

        clf = Classifier(init_backbone(4, np.random.default_rng(0)))
        res1 = clf.features(images)["res1"]
        stats = compute_channel_stats(res1)
        feats = np.concatenate([stats.mu, stats.sigma], axis=1).astype(np.float64)
        feats = np.concatenate([feats, np.ones((len(feats), 1))], axis=1)

        onehot = np.eye(4)[domain_ids]
        weights, *_ = np.linalg.lstsq(feats, onehot, rcond=None)
        pred = (feats @ weights).argmax(axis=1)
        accuracy = float((pred == domain_ids).mean())
        assert accuracy > 0.8, f"style probe accuracy {accuracy:.3f}"
