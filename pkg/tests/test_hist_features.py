import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pdl1wsi import hist_features as hf
from pdl1wsi import roi
from pdl1wsi.roi import EmptyRoiError
from pdl1wsi.slide_io import SlideRaster

BROWN_U8 = (117, 89, 67)    # nearest 8-bit color to the reference brown
WHITE = (238, 238, 238)
TISSUE = (190, 140, 170)

# oracle bin indices for solid-color tiles
BIN_BROWN = 0      # distance 0.288
BIN_WHITE = 45     # distance 45.5365
BIN_TISSUE = 32    # distance 32.4594


def solid_tiles(*colors, s=8):
    return np.stack([np.full((s, s, 3), c, dtype=np.uint8) for c in colors])


class TestDistanceBins:
    def test_unit_width_and_clamp(self):
        d = np.array([0.0, 0.999, 1.0, 45.5365, 99.0, 99.999, 100.0, 150.0])
        np.testing.assert_array_equal(
            hf.distance_bins(d), [0, 0, 1, 45, 99, 99, 99, 99]
        )


class TestBrownHistogram:
    def test_all_brown_in_bin_zero(self):
        counts = hf.brown_histogram(solid_tiles(BROWN_U8))
        assert counts[BIN_BROWN] == 64
        assert counts.sum() == 64

    def test_all_white_in_oracle_bin(self):
        counts = hf.brown_histogram(solid_tiles(WHITE))
        assert counts[BIN_WHITE] == 64
        assert counts.sum() == 64

    def test_two_color_bimodal(self):
        counts = hf.brown_histogram(solid_tiles(BROWN_U8, WHITE))
        assert counts[BIN_BROWN] == 64
        assert counts[BIN_WHITE] == 64
        assert np.count_nonzero(counts) == 2

    def test_inside_selector(self):
        tiles = solid_tiles(BROWN_U8, WHITE, TISSUE)
        counts = hf.brown_histogram(tiles, inside=np.array([True, False, True]))
        assert counts[BIN_BROWN] == 64
        assert counts[BIN_WHITE] == 0
        assert counts[BIN_TISSUE] == 64

    def test_mass_conservation(self):
        rng = np.random.default_rng(2)
        tiles = rng.integers(0, 256, size=(5, 8, 8, 3), dtype=np.uint8)
        inside = np.array([True, True, False, True, False])
        counts = hf.brown_histogram(tiles, inside)
        assert counts.sum() == 3 * 64
        assert (counts >= 0).all()

    def test_empty_roi_raises(self):
        tiles = solid_tiles(BROWN_U8)
        with pytest.raises(EmptyRoiError):
            hf.brown_histogram(tiles, inside=np.array([False]))
        with pytest.raises(EmptyRoiError):
            hf.brown_histogram(np.empty((0, 8, 8, 3), dtype=np.uint8))


class TestLogNormalize:
    def test_single_loaded_bin(self):
        counts = np.zeros(100, dtype=np.int64)
        counts[7] = 500
        feats = hf.log_normalize(counts)
        assert feats[7] == 1.0
        assert (feats[np.arange(100) != 7] == 0.0).all()

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(4)
        counts = rng.integers(0, 10_000, size=100)
        total = int(counts.sum())
        expected = [math.log(1 + int(c)) / math.log(1 + total) for c in counts]
        np.testing.assert_allclose(hf.log_normalize(counts), expected, rtol=1e-12)

    def test_bounded(self):
        counts = np.full(100, 41, dtype=np.int64)
        feats = hf.log_normalize(counts)
        assert (feats >= 0).all() and (feats <= 1).all()

    @given(hnp.arrays(np.int64, 10, elements=st.integers(0, 10**6)))
    def test_monotone(self, counts):
        if counts.sum() == 0:
            return
        feats = hf.log_normalize(counts)
        order = np.argsort(counts, kind="stable")
        assert (np.diff(feats[order]) >= 0).all()

    def test_zero_total_rejected(self):
        with pytest.raises(ValueError):
            hf.log_normalize(np.zeros(100, dtype=np.int64))


class TestBaselineRatio:
    def test_all_mass_in_bin_zero(self):
        counts = np.zeros(100)
        counts[0] = 10
        for t_bin in (0, 1, 50, 99):
            assert hf.baseline_ratio(counts, t_bin) == 1.0

    def test_uniform_counts_midpoint(self):
        counts = np.full(100, 3)
        assert hf.baseline_ratio(counts, 49) == pytest.approx(0.5, abs=1e-12)

    def test_bruteforce_fixture(self):
        rng = np.random.default_rng(9)
        counts = rng.integers(0, 50, size=100)
        total = int(counts.sum())
        for t_bin in (0, 17, 63, 99):
            expected = sum(int(c) for c in counts[: t_bin + 1]) / total
            assert hf.baseline_ratio(counts, t_bin) == pytest.approx(expected, abs=1e-12)

    @given(hnp.arrays(np.int64, 100, elements=st.integers(0, 1000)))
    def test_monotone_in_t_bin(self, counts):
        if counts.sum() == 0:
            return
        rs = [hf.baseline_ratio(counts, t) for t in range(100)]
        assert all(a <= b + 1e-15 for a, b in zip(rs, rs[1:]))
        assert rs[99] == pytest.approx(1.0, abs=1e-12)

    def test_invalid_inputs(self):
        counts = np.ones(100)
        with pytest.raises(ValueError):
            hf.baseline_ratio(counts, -1)
        with pytest.raises(ValueError):
            hf.baseline_ratio(counts, 100)
        with pytest.raises(ValueError):
            hf.baseline_ratio(np.zeros(100), 5)


class TestBaselinePredict:
    def test_high_ratio_positive(self):
        counts = np.zeros(100)
        counts[0] = 10
        th = hf.BaselineThresholds(t_bin=5, t_cls=0.01)
        assert hf.baseline_predict(counts, th) == "positive"

    def test_zero_ratio_negative(self):
        counts = np.zeros(100)
        counts[99] = 10
        for t_cls in (0.0, 0.5):
            th = hf.BaselineThresholds(t_bin=5, t_cls=t_cls)
            assert hf.baseline_predict(counts, th) == "negative"

    def test_equality_is_negative(self):
        # r = 0.5 exactly against t_cls = 0.5: strict comparison
        counts = np.zeros(100)
        counts[0] = 5
        counts[50] = 5
        th = hf.BaselineThresholds(t_bin=10, t_cls=0.5)
        assert hf.baseline_ratio(counts, 10) == 0.5
        assert hf.baseline_predict(counts, th) == "negative"

    def test_threshold_validation(self):
        with pytest.raises(ValueError):
            hf.BaselineThresholds(t_bin=100, t_cls=0.5)
        with pytest.raises(ValueError):
            hf.BaselineThresholds(t_bin=-1, t_cls=0.5)
        with pytest.raises(ValueError):
            hf.BaselineThresholds(t_bin=0, t_cls=1.5)


def _mass_at(bin_idx, n=1000):
    counts = np.zeros(100, dtype=np.int64)
    counts[bin_idx] = n
    return counts


class TestBaselineTrain:
    def test_separable_corpus(self):
        # positives carry mass in low bins, negatives in high bins
        rows = np.stack([_mass_at(b) for b in (2, 5, 8, 60, 70, 80)])
        labels = np.array([True, True, True, False, False, False])
        th = hf.baseline_train(rows, labels)
        assert hf.evaluate_baseline(rows, labels, th) == 1.0
        # smallest separating t_bin is 8; t_cls=0 makes r>0 iff mass below cut
        assert th.t_bin == 8
        assert th.t_cls == 0.0

    def test_single_class_tiebreak(self):
        rows = np.stack([_mass_at(50), _mass_at(50)])
        th = hf.baseline_train(rows, np.array([False, False]))
        # first grid cell already classifies everything negative
        assert (th.t_bin, th.t_cls) == (0, 0.0)
        th = hf.baseline_train(rows, np.array([True, True]))
        assert (th.t_bin, th.t_cls) == (50, 0.0)

    def test_matches_bruteforce_grid(self):
        rng = np.random.default_rng(31)
        rows = rng.integers(0, 40, size=(8, 100)).astype(np.int64)
        labels = rng.random(8) < 0.5
        got = hf.baseline_train(rows, labels)

        ratios = [
            [sum(int(c) for c in row[: t + 1]) / int(row.sum()) for t in range(100)]
            for row in rows
        ]
        best = None
        for t_bin in range(100):
            for step in range(1001):
                t_cls = step / 1000
                correct = sum(
                    (r[t_bin] > t_cls) == bool(lab) for r, lab in zip(ratios, labels)
                )
                acc = correct / len(rows)
                if best is None or acc > best[0] + 1e-12:
                    best = (acc, t_bin, t_cls)
        assert got.t_bin == best[1]
        assert got.t_cls == pytest.approx(best[2], abs=1e-12)
        assert hf.evaluate_baseline(rows, labels, got) == pytest.approx(best[0], abs=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_never_below_majority_rate(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 7))
        rows = rng.integers(0, 20, size=(n, 100)).astype(np.int64) + 1
        labels = rng.random(n) < 0.5
        th = hf.baseline_train(rows, labels, t_cls_steps=100)
        majority = max(labels.mean(), 1 - labels.mean())
        assert hf.evaluate_baseline(rows, labels, th) >= majority - 1e-12

    def test_deterministic(self):
        rng = np.random.default_rng(8)
        rows = rng.integers(0, 30, size=(6, 100)).astype(np.int64)
        labels = np.array([True, False, True, False, True, False])
        assert hf.baseline_train(rows, labels) == hf.baseline_train(rows, labels)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            hf.baseline_train(np.empty((0, 100)), np.empty(0, dtype=bool))
        with pytest.raises(ValueError):
            hf.baseline_train(np.ones((2, 50)), np.array([True, False]))

    def test_string_labels_match_bools(self):
        rows = np.stack([_mass_at(b) for b in (2, 5, 60, 70)])
        bools = np.array([True, True, False, False])
        names = np.array([hf.POSITIVE, hf.POSITIVE, hf.NEGATIVE, hf.NEGATIVE])
        assert hf.baseline_train(rows, names) == hf.baseline_train(rows, bools)
        th = hf.baseline_train(rows, bools)
        assert hf.evaluate_baseline(rows, names, th) == hf.evaluate_baseline(rows, bools, th)

    def test_bad_label_values_rejected(self):
        rows = np.stack([_mass_at(2), _mass_at(60)])
        with pytest.raises(ValueError, match="unknown label"):
            hf.baseline_train(rows, np.array([hf.POSITIVE, "maybe"]))
        with pytest.raises(ValueError, match="labels must be"):
            hf.baseline_train(rows, np.array([1, 0]))


class TestFeaturizeSlide:
    CFG = roi.RoiConfig(tile_size=64, downsampled_size=64)

    def _raster(self, with_brown_tile=True):
        px = np.empty((512, 512, 3), dtype=np.uint8)
        px[:] = WHITE
        for r in range(2, 6):
            for c in range(2, 6):
                px[r * 64:(r + 1) * 64, c * 64:(c + 1) * 64] = TISSUE
        if with_brown_tile:
            px[3 * 64:4 * 64, 3 * 64:4 * 64] = BROWN_U8
        return SlideRaster(slide_id="s", pixels=px)

    def test_roi_restricted_histogram(self):
        raster = self._raster()
        result = roi.identify_roi(raster, self.CFG)
        feat = hf.featurize_slide(raster, result, self.CFG)
        assert feat.total_pixels == result.n_inside * 64 * 64
        assert feat.counts.sum() == feat.total_pixels
        assert feat.counts[BIN_BROWN] == 64 * 64          # 1 brown tile
        assert feat.counts[BIN_TISSUE] == 15 * 64 * 64    # 15 tissue tiles
        assert feat.counts[BIN_WHITE] == 0                # background excluded
        assert feat.features.shape == (100,)
        assert feat.features.max() <= 1.0

    def test_blank_slide_raises(self):
        px = np.full((512, 512, 3), 238, dtype=np.uint8)
        raster = SlideRaster(slide_id="blank", pixels=px)
        result = roi.identify_roi(raster, self.CFG)
        with pytest.raises(EmptyRoiError):
            hf.featurize_slide(raster, result, self.CFG)


class TestFeatureFileIo:
    def test_lognorm_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(12)
        rows = [
            ("slide_a", rng.random(100)),
            ("slide_b", rng.random(100)),
        ]
        path = tmp_path / "features.txt"
        hf.write_features(path, rows, kind="lognorm")
        kind, loaded = hf.read_features(path)
        assert kind == "lognorm"
        assert [r[0] for r in loaded] == ["slide_a", "slide_b"]
        for (_, orig), (_, back) in zip(rows, loaded):
            np.testing.assert_array_equal(back, orig)   # %.17g round-trips doubles

    def test_counts_roundtrip(self, tmp_path):
        rows = [("s1", np.arange(100, dtype=np.int64) * 7)]
        path = tmp_path / "counts.txt"
        hf.write_features(path, rows, kind="counts")
        kind, loaded = hf.read_features(path)
        assert kind == "counts"
        assert loaded[0][1].dtype == np.int64
        np.testing.assert_array_equal(loaded[0][1], rows[0][1])

    def test_bad_kind_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            hf.write_features(tmp_path / "x.txt", [], kind="raw")

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "x.txt"
        path.write_text("# some-other-file v9\n# kind: counts\n")
        with pytest.raises(ValueError):
            hf.read_features(path)

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "x.txt"
        body = " ".join(["1"] * 99)
        path.write_text(f"# {hf.FEATURE_FILE_VERSION}\n# kind: counts\nslide {body}\n")
        with pytest.raises(ValueError, match=":3:"):
            hf.read_features(path)

    def test_wrong_length_vector_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            hf.write_features(tmp_path / "x.txt", [("s", np.ones(99))], kind="counts")


class TestBaselineModelIo:
    def test_roundtrip(self, tmp_path):
        th = hf.BaselineThresholds(t_bin=17, t_cls=0.123)
        path = tmp_path / "model.txt"
        hf.write_baseline(th, path)
        back = hf.read_baseline(path)
        assert back.t_bin == 17
        assert back.t_cls == pytest.approx(0.123, abs=1e-9)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "m.txt"
        path.write_text("something-else\nt_bin 1\nt_cls 0.5\n")
        with pytest.raises(ValueError):
            hf.read_baseline(path)

    def test_missing_field(self, tmp_path):
        path = tmp_path / "m.txt"
        path.write_text(f"{hf.BASELINE_FILE_VERSION}\nt_bin 1\n")
        with pytest.raises(ValueError):
            hf.read_baseline(path)
