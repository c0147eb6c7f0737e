import json
from dataclasses import replace

import numpy as np
import pytest

from hyperseg.synthdata import (
    InfeasiblePhantomError, PhantomSpec, SpacingRange, StructureSpec, generate_phantom, load_dataset,
    sample_native, write_dataset,
)
from hyperseg.volume import resample_labels

# coarse reference keeps generation fast; the structure sizes are unchanged
SMALL = PhantomSpec(reference_spacing=1.0)


def dice_fg(a, b, num_classes):
    out = []
    for c in range(1, num_classes):
        p, g = a == c, b == c
        denom = p.sum() + g.sum()
        out.append(1.0 if denom == 0 else 2 * (p & g).sum() / denom)
    return float(np.mean(out))


class TestGeneratePhantom:
    def test_deterministic(self):
        a = generate_phantom(SMALL, np.random.default_rng(7))
        b = generate_phantom(SMALL, np.random.default_rng(7))
        np.testing.assert_array_equal(a[0].data, b[0].data)
        np.testing.assert_array_equal(a[1].data, b[1].data)

    def test_binary_task(self):
        spec = replace(SMALL, num_classes=2)
        _, lab = generate_phantom(spec, np.random.default_rng(0))
        assert set(np.unique(lab.data)) == {0, 1}

    def test_shapes_and_spacing(self):
        img, lab = generate_phantom(SMALL, np.random.default_rng(1))
        assert img.shape == lab.shape == (64, 64, 64)
        assert img.spacing == lab.spacing == (1.0, 1.0, 1.0)

    def test_class_fractions_over_many_seeds(self):
        spec = replace(SMALL, reference_spacing=2.0)
        for seed in range(100):
            _, lab = generate_phantom(spec, np.random.default_rng(seed))
            frac = np.bincount(lab.data.ravel(), minlength=4) / lab.data.size
            assert (frac[1:] >= spec.min_class_fraction).all(), (seed, frac)

    def test_two_dimensional(self):
        spec = PhantomSpec(dim=2)
        img, lab = generate_phantom(spec, np.random.default_rng(3))
        assert img.ndim == 2 and set(np.unique(lab.data)) == {0, 1, 2, 3}

    def test_infeasible_canvas(self):
        spec = replace(SMALL, canvas_size_mm=20.0, reference_spacing=1.0)
        with pytest.raises(InfeasiblePhantomError):
            generate_phantom(spec, np.random.default_rng(0))

    def test_too_many_classes(self):
        with pytest.raises(ValueError):
            PhantomSpec(num_classes=5)

    def test_resampling_round_trip(self):
        """Labels survive a 1 mm round trip and degrade monotonically with coarser spacings."""
        spec = PhantomSpec()
        for seed in range(2):
            _, lab = generate_phantom(spec, np.random.default_rng(seed))
            scores = []
            for t in (1.0, 2.0, 3.0):
                back = resample_labels(resample_labels(lab, (t,) * 3), lab.spacing, shape=lab.shape)
                scores.append(dice_fg(back.data, lab.data, 4))
            assert scores[0] > 0.9
            assert scores[0] > scores[1] > scores[2] > 0.7


class TestSpacingRange:
    def test_validation(self):
        with pytest.raises(ValueError):
            SpacingRange((1.0,), (0.5,))
        with pytest.raises(ValueError):
            SpacingRange((0.0,), (1.0,))

    def test_statistics(self):
        r = SpacingRange.isotropic(0.5, 3.5)
        draws = np.array([r.sample(np.random.default_rng([5, i])) for i in range(10_000)])
        assert draws.min() >= 0.5 and draws.max() <= 3.5
        sigma = 3.0 / np.sqrt(12) / np.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(0) - 2.0) < 3 * sigma)

    def test_contains(self):
        r = SpacingRange((1.0, 0.2), (5.0, 1.5))
        assert r.contains((1.0, 1.5)) and not r.contains((0.99, 1.0))


class TestSampleNative:
    pair = generate_phantom(SMALL, np.random.default_rng(2))

    def test_degenerate_range(self):
        img, lab, spacing = sample_native(self.pair, SpacingRange.isotropic(2.0, 2.0), np.random.default_rng(0))
        assert spacing == (2.0, 2.0, 2.0) and img.spacing == lab.spacing == spacing
        assert img.shape == (32, 32, 32)

    def test_label_subset(self):
        _, lab, _ = sample_native(self.pair, SpacingRange.isotropic(1.0, 3.0), np.random.default_rng(1))
        assert set(np.unique(lab.data)) <= set(np.unique(self.pair[1].data))

    def test_refuses_finer_than_reference(self):
        with pytest.raises(ValueError):
            sample_native(self.pair, SpacingRange.isotropic(0.5, 3.0), np.random.default_rng(0))


def test_dataset_round_trip(tmp_path):
    spec = replace(SMALL, reference_spacing=2.0, seed=11)
    manifest = write_dataset(tmp_path, spec, 2, SpacingRange.isotropic(2.0, 4.0), prefix="x")
    meta = json.loads(manifest.read_text())
    assert [p["id"] for p in meta["pairs"]] == ["x000", "x001"]
    assert meta["reference_spacing_mm"] == [2.0, 2.0, 2.0]
    ds = load_dataset(manifest)
    assert len(ds) == 2 and ds.num_classes == 4
    img, lab = generate_phantom(spec, np.random.default_rng(12))
    np.testing.assert_array_equal(ds.pairs[1][0].data, img.data)
    np.testing.assert_array_equal(ds.pairs[1][1].data, lab.data)
    assert PhantomSpec.from_dict(meta["phantom"]) == spec


def test_structure_spec_roundtrip():
    s = StructureSpec("tube", (3.0, 4.0), (0.5, 0.6), length=(10.0, 12.0))
    spec = replace(SMALL, structures=(s,), num_classes=2)
    assert PhantomSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
