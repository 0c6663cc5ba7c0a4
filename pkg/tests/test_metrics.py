import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from firework import framework, metrics
from firework.types import LabelVolume


def make_labels(arr) -> LabelVolume:
    return LabelVolume(torch.as_tensor(np.asarray(arr), dtype=torch.int64))


def brute_force_assd(a: np.ndarray, b: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """O(n^2) all-pairs oracle with the same 6-connectivity surface rule."""

    def surface(mask):
        pts = []
        for idx in zip(*np.nonzero(mask)):
            for axis in range(3):
                for d in (-1, 1):
                    n = list(idx)
                    n[axis] += d
                    if not (0 <= n[axis] < mask.shape[axis]) or not mask[tuple(n)]:
                        pts.append(idx)
                        break
                else:
                    continue
                break
        return np.array(pts, dtype=float)

    sa = surface(a) * np.asarray(spacing)
    sb = surface(b) * np.asarray(spacing)
    d_ab = [np.sqrt(((p - sb) ** 2).sum(axis=1)).min() for p in sa]
    d_ba = [np.sqrt(((p - sa) ** 2).sum(axis=1)).min() for p in sb]
    return (sum(d_ab) + sum(d_ba)) / (len(d_ab) + len(d_ba))


class TestDice:
    def test_identical_labels(self):
        arr = np.zeros((6, 6, 6), dtype=int)
        arr[1:3, 1:3, 1:3] = 1
        arr[3:5, 3:5, 3:5] = 2
        a = make_labels(arr)
        per_roi, mean = metrics.dice(a, a)
        assert per_roi == {1: 1.0, 2: 1.0}
        assert mean == 1.0

    def test_disjoint_masks(self):
        x = np.zeros((6, 6, 6), dtype=int)
        y = np.zeros((6, 6, 6), dtype=int)
        x[0:2, 0:2, 0:2] = 1
        y[4:6, 4:6, 4:6] = 1
        _, mean = metrics.dice(make_labels(x), make_labels(y))
        assert mean == 0.0

    def test_half_overlapping_cubes(self):
        # oracle by voxel counting: two 4^3 cubes sharing a 4x4x2 slab
        x = np.zeros((8, 8, 8), dtype=int)
        y = np.zeros((8, 8, 8), dtype=int)
        x[0:4, 0:4, 0:4] = 1
        y[0:4, 0:4, 2:6] = 1
        per_roi, mean = metrics.dice(make_labels(x), make_labels(y))
        assert per_roi[1] == pytest.approx(2 * 32 / (64 + 64))
        assert mean == pytest.approx(0.5)

    def test_roi_absent_from_one_scores_zero(self):
        x = np.zeros((4, 4, 4), dtype=int)
        x[0, 0, 0] = 1
        y = np.zeros((4, 4, 4), dtype=int)
        per_roi, mean = metrics.dice(make_labels(x), make_labels(y), rois=[1])
        assert per_roi == {1: 0.0}
        assert mean == 0.0

    def test_roi_absent_from_both_excluded(self):
        x = np.zeros((4, 4, 4), dtype=int)
        x[0, 0, 0] = 1
        per_roi, mean = metrics.dice(make_labels(x), make_labels(x), rois=[1, 7])
        assert 7 not in per_roi
        assert mean == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            metrics.dice(make_labels(np.zeros((4, 4, 4), dtype=int)),
                         make_labels(np.zeros((4, 4, 5), dtype=int)))

    @given(seed=st.integers(0, 1000))
    @settings(max_examples=20, deadline=None)
    def test_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.integers(0, 3, size=(5, 5, 5))
        y = rng.integers(0, 3, size=(5, 5, 5))
        pa, ma = metrics.dice(make_labels(x), make_labels(y))
        pb, mb = metrics.dice(make_labels(y), make_labels(x))
        assert pa == pb and ma == mb


class TestAssd:
    def test_identical_masks(self):
        mask = np.zeros((5, 5, 5), dtype=bool)
        mask[1:4, 1:4, 1:4] = True
        assert metrics.assd(mask, mask) == 0.0

    def test_two_points_three_apart(self):
        a = np.zeros((8, 4, 4), dtype=bool)
        b = np.zeros((8, 4, 4), dtype=bool)
        a[1, 1, 1] = True
        b[4, 1, 1] = True
        assert metrics.assd(a, b, spacing=(1.0, 1.0, 1.0)) == pytest.approx(3.0)

    def test_spacing_scales_distances(self):
        a = np.zeros((8, 4, 4), dtype=bool)
        b = np.zeros((8, 4, 4), dtype=bool)
        a[1, 1, 1] = True
        b[4, 1, 1] = True
        assert metrics.assd(a, b, spacing=(2.0, 1.0, 1.0)) == pytest.approx(6.0)

    def test_empty_mask_is_an_error(self):
        full = np.ones((3, 3, 3), dtype=bool)
        empty = np.zeros((3, 3, 3), dtype=bool)
        with pytest.raises(ValueError):
            metrics.assd(full, empty)

    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_matches_brute_force_on_random_masks(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.random((6, 6, 6)) < 0.3
        b = rng.random((6, 6, 6)) < 0.3
        if not a.any() or not b.any():
            return
        expected = brute_force_assd(a, b)
        assert metrics.assd(a, b) == pytest.approx(expected, abs=1e-9)

    def test_exhaustive_small_instances(self):
        # every nonempty mask pair on a 2x2x2 grid (256 ordered pairs)
        cells = list(itertools.product(range(2), repeat=3))
        masks = []
        for bits in range(1, 2**8):
            m = np.zeros((2, 2, 2), dtype=bool)
            for i, c in enumerate(cells):
                if bits >> i & 1:
                    m[c] = True
            masks.append(m)
        rng = np.random.default_rng(0)
        for a, b in rng.choice(len(masks), size=(64, 2)):
            expected = brute_force_assd(masks[a], masks[b])
            assert metrics.assd(masks[a], masks[b]) == pytest.approx(expected, abs=1e-9)


class TestEvaluate:
    def _identity_result(self, labels: LabelVolume, steps: int):
        shape = labels.shape
        zero = torch.zeros(3, *shape)
        return framework.RegistrationResult(
            mode="firework",
            phis=[zero] * steps,
            increments=[zero] * steps,
            warped=[torch.zeros(shape)] * steps,
            warped_labels=[labels] * steps,
        )

    def test_identity_result_perfect_scores(self):
        arr = np.zeros((8, 8, 8), dtype=int)
        arr[2:5, 2:5, 2:5] = 1
        arr[5:7, 5:7, 5:7] = 2
        labels = make_labels(arr)
        records = metrics.evaluate(self._identity_result(labels, 3), labels, [1, 2])
        assert len(records) == 3
        for rec in records:
            assert rec.dsc_mean == 1.0
            assert rec.assd_mean_mm == 0.0
            assert rec.folding_ratio == 0.0

    def test_record_count_matches_steps(self):
        arr = np.zeros((6, 6, 6), dtype=int)
        arr[1:4, 1:4, 1:4] = 1
        labels = make_labels(arr)
        records = metrics.evaluate(self._identity_result(labels, 5), labels, [1])
        assert [r.step for r in records] == [1, 2, 3, 4, 5]

    def test_mean_matches_manual_per_roi_aggregation(self):
        arr_f = np.zeros((8, 8, 8), dtype=int)
        arr_f[1:4, 1:4, 1:4] = 1
        arr_f[4:7, 4:7, 4:7] = 2
        arr_m = np.roll(arr_f, 1, axis=0)
        labels_f = make_labels(arr_f)
        labels_m = make_labels(arr_m)
        result = self._identity_result(labels_m, 1)
        records = metrics.evaluate(result, labels_f, [1, 2])
        per_roi, _ = metrics.dice(labels_m, labels_f, [1, 2])
        assert records[0].dsc_per_roi == per_roi
        assert records[0].dsc_mean == pytest.approx(np.mean(list(per_roi.values())))


class TestMetricsCsv:
    def test_roundtrip_columns(self, tmp_path):
        rec = metrics.MetricsRecord(step=1, dsc_mean=0.75, dsc_per_roi={1: 0.5, 2: 1.0},
                                    assd_mean_mm=1.25, folding_ratio=0.0)
        path = tmp_path / "metrics.csv"
        metrics.write_metrics_csv(path, [rec], rois=[1, 2])
        header = path.read_text().splitlines()[0]
        assert header == "step,dsc_mean,assd_mean_mm,folding_ratio,dsc_1,dsc_2"
        rows = metrics.read_metrics_csv(path)
        assert rows[0]["dsc_mean"] == 0.75
        assert rows[0]["dsc_2"] == 1.0

    def test_empty_csv_rejected(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("step,dsc_mean\n")
        with pytest.raises(ValueError):
            metrics.read_metrics_csv(path)
