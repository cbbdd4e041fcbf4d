import numpy as np
import pytest

from se2gcnn.autograd import Tensor
from se2gcnn.datasets import (
    LabeledPatchSet,
    load_dataset,
    read_manifest,
    save_dataset,
    synth_curve_segmentation,
    synth_rotated_patterns,
    write_netpbm,
)
from se2gcnn.layers import lift_correlate
from se2gcnn.network import NetworkConfig, build_network, forward, init_weights, model_bytes
from se2gcnn.tensorio import read_netpbm
from se2gcnn.training import (
    TrainingDiverged,
    TrainSettings,
    _batch_indices,
    augment_rot90,
    augment_transpose,
    dihedral,
    evaluate,
    predict,
    random_augment,
    recalibrate_batch_norm,
    train,
)

SMALL = (4, 4, 4, 4, 4, 1)


def _small_model(N=4, seed=0, **kw):
    return init_weights(build_network(NetworkConfig(N=N, channels=SMALL, **kw)), seed)


def _toy_set(count=64, size=8, seed=0):
    """Bright patches are class 1, dark ones class 0: separable by mean intensity."""
    rng = np.random.default_rng(seed)
    labels = np.arange(count) % 2
    base = np.where(labels == 1, 0.8, 0.2)[:, None, None, None]
    patches = base + 0.05 * rng.standard_normal((count, size, size, 3))
    return LabeledPatchSet(patches.astype(np.float32), labels.astype(np.float32), seed, "toy")


class TestAugmentation:
    def test_transpose_symmetric_identity(self, rng):
        a = rng.standard_normal((2, 5, 5, 1))
        sym = a + np.swapaxes(a, 1, 2)
        out = augment_transpose(sym)
        assert out.shape == (2, 2, 5, 5, 1)
        np.testing.assert_array_equal(out[1], sym)

    def test_rot90_four_times(self, rng):
        a = rng.standard_normal((3, 6, 6, 2))
        b = a
        for _ in range(4):
            b = dihedral(b, 1, False)
        np.testing.assert_array_equal(a, b)

    def test_rot90_orbit_matches_brute_force(self, rng):
        a = rng.standard_normal((1, 4, 4))
        got = {x.tobytes() for x in augment_rot90(a)[:, 0]}
        img = a[0]
        expected = set()
        for flip in (False, True):
            m = img.T if flip else img
            for k in range(4):
                expected.add(np.ascontiguousarray(np.rot90(m, k)).tobytes())
        assert got == expected and len(got) == 8

    def test_non_square_rejected(self):
        with pytest.raises(ValueError):
            augment_transpose(np.zeros((1, 4, 5, 1)))
        with pytest.raises(ValueError):
            augment_rot90(np.zeros((1, 4, 5, 1)))

    def test_random_augment_moves_pixel_labels(self, rng):
        patches = rng.standard_normal((16, 6, 6, 1))
        labels = patches[..., 0] > 0
        p, lab = random_augment(patches, labels, "rot90", rng)
        np.testing.assert_array_equal(lab, p[..., 0] > 0)

    def test_none_is_identity(self, rng):
        patches = rng.standard_normal((4, 6, 6, 1))
        p, _ = random_augment(patches, np.zeros(4), "none", rng)
        assert p is patches


class TestSettings:
    def test_invalid(self):
        for kw in [dict(lr=0), dict(batch_size=0), dict(iterations=-1), dict(momentum=1.0),
                   dict(augmentation="flip"), dict(recalibration_batches=-1)]:
            with pytest.raises(ValueError):
                TrainSettings(**kw)


class TestTrain:
    def test_zero_iterations_unchanged(self):
        m = _small_model()
        before = model_bytes(m)
        _, curve = train(m, _toy_set(), TrainSettings(iterations=0))
        assert model_bytes(m) == before and curve == []

    def test_separable_toy_converges(self):
        m = _small_model(N=4, pool_layers=(1,))
        _, curve = train(m, _toy_set(), TrainSettings(lr=0.05, batch_size=16, iterations=500, log_every=25))
        assert min(loss for _, loss in curve) < 0.1
        assert curve[-1][1] < 0.1

    def test_deterministic(self):
        data = _toy_set()
        s = TrainSettings(lr=0.02, batch_size=8, iterations=15, augmentation="rot90", seed=4, log_every=5)
        lines_a, lines_b = [], []
        a, ca = train(_small_model(seed=1), data, s, log=lines_a.append)
        b, cb = train(_small_model(seed=1), data, s, log=lines_b.append)
        assert model_bytes(a) == model_bytes(b)
        assert ca == cb and lines_a == lines_b
        assert lines_a[0].startswith("iter=5 loss=")

    def test_empty_data(self):
        with pytest.raises(ValueError):
            train(_small_model(), _toy_set(count=64).subset(slice(0, 0)), TrainSettings(iterations=1))

    @pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
    def test_divergence_reported(self):
        m = _small_model(precision="float32")
        m.params["layer6.weight"].data[...] = 1e38
        with pytest.raises(TrainingDiverged):
            train(m, _toy_set(), TrainSettings(lr=1e3, batch_size=8, iterations=5))

    def test_pixel_head_trains(self):
        data = synth_curve_segmentation(8, seed=1, size=12)
        m = _small_model(head="pixel")
        _, curve = train(m, data, TrainSettings(lr=0.02, batch_size=4, iterations=3, log_every=1,
                                                augmentation="transpose"))
        assert len(curve) == 3 and all(np.isfinite(v) for _, v in curve)


class TestRecalibration:
    def test_running_mean_is_average_of_batch_means(self):
        m = _small_model(N=4)
        m.params["layer1.weight"].data[...] += 0.3  # non-zero mean activations
        m.buffers["layer1.bn.running_mean"][...] = 50.0
        data = _toy_set(count=32)
        recalibrate_batch_norm(m, data, 3, 8, "none", np.random.default_rng(5))
        rng = np.random.default_rng(5)
        kernels = next(iter(m.kernel_sets()))
        means = []
        for _ in range(3):
            idx = _batch_indices(data.labels, 8, rng)
            h = lift_correlate(Tensor(data.patches[idx]), kernels).data
            means.append(h.mean(axis=(0, 1, 2, 3)))
        np.testing.assert_allclose(m.buffers["layer1.bn.running_mean"], np.mean(means, axis=0), rtol=1e-5)

    def test_inference_tracks_batch_statistics(self):
        m = _small_model(N=4, pool_layers=(1,))
        for name in m.buffers:
            m.buffers[name][...] = 7.0  # stale statistics
        data = _toy_set(count=64)
        recalibrate_batch_norm(m, data, 8, 64, "none", np.random.default_rng(0))
        a = forward(m, data.patches, mode="inference").data
        b = forward(m, data.patches, mode="train").data
        assert np.max(np.abs(a - b)) <= 1e-3 * (1 + np.max(np.abs(b)))


class TestPredict:
    def test_tta_transpose_on_symmetric_inputs(self, rng):
        m = _small_model(N=1, seed=3)
        a = rng.uniform(0, 1, (5, 8, 8, 3)).astype(np.float32)
        sym = (a + np.swapaxes(a, 1, 2)) / 2
        np.testing.assert_allclose(predict(m, sym, tta="transpose"), predict(m, sym), atol=1e-7)

    def test_pixel_tta_maps_back(self, rng, monkeypatch):
        import se2gcnn.training as tr

        # a pointwise "network" commutes with every dihedral transform, so each
        # variant maps back onto the plain output only if un-transforming is right
        monkeypatch.setattr(tr, "forward", lambda model, x, mode: Tensor(x[..., 0] + 2 * x[..., 1]))
        x = rng.uniform(-1, 1, (2, 6, 6, 3))
        m = _small_model(head="pixel")
        plain = predict(m, x)
        np.testing.assert_allclose(predict(m, x, tta="rot90"), plain, atol=1e-12)
        np.testing.assert_allclose(predict(m, x, tta="transpose"), plain, atol=1e-12)

    def test_evaluate_keys(self):
        data = _toy_set(count=20)
        out = evaluate(_small_model(), data)
        assert set(out) == {"accuracy", "f1", "auc"}
        seg = synth_curve_segmentation(3, seed=0, size=12)
        out = evaluate(_small_model(head="pixel"), seg)
        assert set(out) == {"auc", "rand", "f1", "accuracy"}
        assert 0 <= out["rand"] <= 1


class TestDatasets:
    def test_patterns_deterministic_and_balanced(self):
        a = synth_rotated_patterns(100, seed=5)
        b = synth_rotated_patterns(100, seed=5)
        np.testing.assert_array_equal(a.patches, b.patches)
        np.testing.assert_array_equal(a.labels, b.labels)
        assert a.patches.shape == (100, 32, 32, 3) and a.patches.dtype == np.float32
        assert abs(a.labels.mean() - 0.5) <= 0.01
        assert not np.array_equal(a.patches, synth_rotated_patterns(100, seed=6).patches)

    def test_orientation_histogram_uniform(self):
        from scipy.stats import chisquare

        data = synth_rotated_patterns(400, seed=2)
        counts, _ = np.histogram(data.orientations, bins=8, range=(0, 2 * np.pi))
        assert chisquare(counts).pvalue > 0.01
        assert np.unique(np.floor(data.orientations[:16] / (np.pi / 4))).size >= 5

    def test_curves_in_band(self):
        data = synth_curve_segmentation(20, seed=3, band=(0.08, 0.30))
        frac = data.labels.reshape(20, -1).mean(axis=1)
        assert np.all((frac >= 0.08) & (frac <= 0.30))
        np.testing.assert_array_equal(data.labels, synth_curve_segmentation(20, seed=3).labels)
        assert data.per_pixel

    def test_round_trip(self, tmp_path):
        data = synth_rotated_patterns(10, seed=1)
        save_dataset(data, tmp_path / "ds")
        back = load_dataset(tmp_path / "ds")
        np.testing.assert_array_equal(back.patches, data.patches)
        np.testing.assert_array_equal(back.labels, data.labels)
        meta = read_manifest(tmp_path / "ds")
        assert meta == {"count": "10", "shape": "32,32,3", "seed": "1", "generator": "rotated_patterns"}

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "absent")

    def test_netpbm_round_trip(self, tmp_path, rng):
        img = (rng.integers(0, 256, (5, 7, 3)) / 255).astype(np.float32)
        write_netpbm(tmp_path / "a.ppm", img)
        np.testing.assert_allclose(read_netpbm(tmp_path / "a.ppm"), img, atol=1e-6)
        write_netpbm(tmp_path / "b.pgm", img[..., :1])
        assert read_netpbm(tmp_path / "b.pgm").shape == (5, 7, 1)
