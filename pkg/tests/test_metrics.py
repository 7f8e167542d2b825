import numpy as np
import numpy.testing as npt
import pytest

from diffumamba.data import gen_phantoms
from diffumamba.metrics import (MetricsReport, SampleMetrics, dsc_iou,
                                evaluate_masks, evaluate_model, hd95,
                                perturbation_grid, surface_voxels,
                                write_perturb_csv)
from diffumamba.network import ModelConfig, Network
from diffumamba.tensor import Rng, ShapeError


def brute_hd95(pred, gt, spacing=(1.0, 1.0, 1.0)):
    """O(n^2) oracle: all pairwise surface distances, pooled percentile."""
    sp = np.argwhere(surface_voxels(pred)).astype(float) * np.asarray(spacing)
    sg = np.argwhere(surface_voxels(gt)).astype(float) * np.asarray(spacing)
    d = np.sqrt(((sp[:, None, :] - sg[None, :, :]) ** 2).sum(axis=2))
    pooled = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return float(np.percentile(pooled, 95, method="linear"))


class TestDscIou:
    def test_identical_masks(self, rng):
        m = rng.random((4, 4, 4)) > 0.5
        assert dsc_iou(m, m) == (1.0, 1.0)

    def test_disjoint_masks(self):
        a = np.zeros((3, 3, 3), dtype=bool)
        b = np.zeros((3, 3, 3), dtype=bool)
        a[0, 0, 0] = True
        b[2, 2, 2] = True
        assert dsc_iou(a, b) == (0.0, 0.0)

    def test_counting_oracle(self):
        a = np.zeros((2, 2, 2), dtype=bool)
        b = np.zeros((2, 2, 2), dtype=bool)
        a.ravel()[:4] = True
        b.ravel()[2:6] = True   # |A| = |B| = 4, overlap 2
        d, i = dsc_iou(a, b)
        assert d == 0.5
        npt.assert_allclose(i, 1.0 / 3.0, rtol=1e-12)

    def test_both_empty_defined_as_one(self):
        z = np.zeros((2, 2, 2), dtype=bool)
        assert dsc_iou(z, z) == (1.0, 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dsc_iou(np.zeros((2, 2, 2), dtype=bool), np.zeros((3, 3, 3), dtype=bool))

    @pytest.mark.parametrize("seed", range(10))
    def test_dsc_iou_identity(self, seed):
        r = Rng(seed, "masks")
        a = r.random((5, 5, 5)) < 0.4
        b = r.random((5, 5, 5)) < 0.4
        d, i = dsc_iou(a, b)
        assert 0.0 <= d <= 1.0 and 0.0 <= i <= 1.0
        npt.assert_allclose(d, 2 * i / (1 + i), atol=1e-6)


class TestHd95:
    def test_identical_masks_zero(self, rng):
        m = rng.random((5, 5, 5)) < 0.3
        if m.any():
            assert hd95(m, m) == 0.0

    def test_two_voxels_three_apart(self):
        a = np.zeros((8, 8, 8), dtype=bool)
        b = np.zeros((8, 8, 8), dtype=bool)
        a[2, 2, 2] = True
        b[5, 2, 2] = True   # 3 voxels apart along one axis
        assert hd95(a, b) == 3.0

    def test_spacing_scales_distances(self):
        a = np.zeros((8, 8, 8), dtype=bool)
        b = np.zeros((8, 8, 8), dtype=bool)
        a[2, 2, 2] = True
        b[5, 2, 2] = True
        npt.assert_allclose(hd95(a, b, spacing=(2.5, 1.0, 1.0)), 7.5, rtol=1e-6)

    def test_empty_mask_undefined(self):
        z = np.zeros((4, 4, 4), dtype=bool)
        m = z.copy()
        m[1, 1, 1] = True
        assert hd95(z, m) is None
        assert hd95(m, z) is None

    @pytest.mark.parametrize("seed", range(12))
    def test_matches_brute_force(self, seed):
        r = Rng(seed, "hd")
        shape = [int(r.integers(3, 9)) for _ in range(3)]
        a = r.random(tuple(shape)) < 0.25
        b = r.random(tuple(shape)) < 0.25
        if not a.any() or not b.any():
            return
        npt.assert_allclose(hd95(a, b), brute_hd95(a, b), atol=1e-6)

    @pytest.mark.parametrize("seed", range(6))
    def test_symmetric_under_swap(self, seed):
        r = Rng(seed, "hd-sym")
        a = r.random((6, 6, 6)) < 0.3
        b = r.random((6, 6, 6)) < 0.3
        if not a.any() or not b.any():
            return
        npt.assert_allclose(hd95(a, b), hd95(b, a), atol=1e-9)

    def test_surface_of_single_voxel_is_itself(self):
        m = np.zeros((3, 3, 3), dtype=bool)
        m[1, 1, 1] = True
        npt.assert_array_equal(surface_voxels(m), m)

    def test_surface_excludes_interior(self):
        m = np.ones((3, 3, 3), dtype=bool)
        s = surface_voxels(m)
        assert not s[1, 1, 1]       # interior voxel
        assert s.sum() == 26        # all shell voxels touch the border


class TestReport:
    def _report(self):
        report = MetricsReport(meta={"seed": 0})
        report.add(SampleMetrics("a", {1: {"dsc": 0.8, "iou": 2 / 3, "hd95": 1.0}}))
        report.add(SampleMetrics("b", {1: {"dsc": 1.0, "iou": 1.0, "hd95": None}}))
        return report

    def test_summary_excludes_undefined_hd(self):
        s = self._report().summary()
        assert s["hd95"]["n"] == 1
        assert s["hd95_undefined"] == 1
        npt.assert_allclose(s["dsc"]["mean"], 0.9)

    def test_csv_row_count(self, tmp_path):
        path = tmp_path / "m.csv"
        self._report().write_csv(path)
        lines = [l for l in path.read_text().splitlines() if l and not l.startswith("#")]
        assert len(lines) == 3   # header + 2 samples

    def test_json_summary(self, tmp_path):
        import json
        path = tmp_path / "m.json"
        self._report().write_json(path)
        d = json.loads(path.read_text())
        assert d["n_samples"] == 2 and d["sample_ids"] == ["a", "b"]


def _tiny_model_and_samples():
    from diffumamba.data import PhantomConfig
    cfg = ModelConfig(channels=(4, 8), strides=(1, 2), n_stages=2, ssm_state=2, seed=2)
    model = Network(cfg)
    samples = gen_phantoms(2, 3, PhantomConfig(shape=(8, 8, 8), n_blobs=(1, 1),
                                               radius=(2.0, 3.0)))
    return model, samples


class TestEvaluateAndPerturb:
    def test_evaluate_model_row_count(self):
        model, samples = _tiny_model_and_samples()
        report = evaluate_model(model, samples)
        assert len(report.samples) == len(samples)
        for sm in report.samples:
            assert set(sm.per_class.keys()) == {1}

    def test_grid_shape_and_level1_bit_equal(self):
        model, samples = _tiny_model_and_samples()
        families = ["gaussian", "salt_pepper"]
        cells = perturbation_grid(model, samples, families, [1, 2, 3], seed=4)
        assert len(cells) == 6
        clean = [c for c in cells if c.level == 1]
        assert clean[0].mean_dsc == clean[1].mean_dsc    # same clean pass reused
        assert all(c.mean_perturbation == 0.0 for c in clean)

    def test_grid_deterministic(self):
        model, samples = _tiny_model_and_samples()
        a = perturbation_grid(model, samples, ["speckle"], [1, 3], seed=9)
        b = perturbation_grid(model, samples, ["speckle"], [1, 3], seed=9)
        assert [(c.mean_dsc, c.mean_perturbation) for c in a] == \
               [(c.mean_dsc, c.mean_perturbation) for c in b]

    def test_perturb_csv(self, tmp_path):
        model, samples = _tiny_model_and_samples()
        cells = perturbation_grid(model, samples, ["periodic"], [1, 2], seed=0)
        path = tmp_path / "p.csv"
        write_perturb_csv(cells, path, meta={"seed": 0})
        body = [l for l in path.read_text().splitlines() if not l.startswith("#")]
        assert body[0] == "family,level,param,mean_dsc,mean_perturbation"
        assert len(body) == 3
