import json

import numpy as np
import pytest

import memroute.tensor as T
from memroute.errors import ShapeError
from memroute.objectives import (
    DATA_FORMAT,
    composite,
    compress_loss,
    disk_alpha,
    distill_loss,
    gen_toy_sample,
    load_dataset,
    matting_loss,
    metrics_sad_mse,
    reported_metrics,
    sample_seed,
    total_loss,
    write_dataset,
)
from memroute.tensor import Tensor


def fields(seed=0, shape=(3, 6, 5)):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=shape), rng.uniform(size=shape), rng.uniform(size=shape[1:])


class TestComposite:
    def test_zero_alpha_is_background(self):
        f, b, _ = fields()
        np.testing.assert_array_equal(composite(f, b, np.zeros(f.shape[1:])), b)

    def test_unit_alpha_is_foreground(self):
        f, b, _ = fields()
        np.testing.assert_array_equal(composite(f, b, np.ones(f.shape[1:])), f)

    def test_half(self):
        out = composite(np.ones((3, 2, 2)), np.zeros((3, 2, 2)), np.full((2, 2), 0.5))
        np.testing.assert_array_equal(out, 0.5)

    def test_per_pixel_loop(self):
        f, b, a = fields(1)
        out = composite(f, b, a)
        for c in range(3):
            for i in range(6):
                for j in range(5):
                    assert out[c, i, j] == pytest.approx(a[i, j] * f[c, i, j] + (1 - a[i, j]) * b[c, i, j], abs=1e-15)

    def test_affine_in_alpha(self):
        f, b, a1 = fields(2)
        a2 = np.random.default_rng(3).uniform(size=a1.shape)
        mid = composite(f, b, (a1 + a2) / 2)
        np.testing.assert_allclose(mid, (composite(f, b, a1) + composite(f, b, a2)) / 2, atol=1e-6)

    @pytest.mark.parametrize("bad", [-0.1, 1.2])
    def test_alpha_range(self, bad):
        f, b, a = fields()
        a[0, 0] = bad
        with pytest.raises(ValueError):
            composite(f, b, a)

    def test_shape_mismatch(self):
        f, b, a = fields()
        with pytest.raises(ShapeError):
            composite(f, b[:, :5], a)


class TestToyData:
    @pytest.mark.parametrize("difficulty", ["easy", "hard"])
    def test_deterministic_bytes(self, difficulty):
        a = gen_toy_sample(np.random.default_rng(42), 32, difficulty)
        b = gen_toy_sample(np.random.default_rng(42), 32, difficulty)
        for name in ("fg", "bg", "alpha", "image"):
            assert getattr(a, name).tobytes() == getattr(b, name).tobytes()

    @pytest.mark.parametrize("difficulty", ["easy", "hard"])
    def test_sample_invariants(self, difficulty):
        s = gen_toy_sample(np.random.default_rng(7), 32, difficulty)
        assert s.fg.shape == s.bg.shape == s.image.shape == (3, 32, 32) and s.alpha.shape == (32, 32)
        assert s.alpha.min() >= 0 and s.alpha.max() <= 1
        np.testing.assert_allclose(s.image, s.alpha * s.fg + (1 - s.alpha) * s.bg, atol=1e-6)

    def test_disk_interior_exactly_one_with_soft_boundary(self):
        a = disk_alpha(64, 32.0, 32.0, 30.0)
        yy, xx = np.meshgrid(np.arange(64) + 0.5, np.arange(64) + 0.5, indexing="ij")
        r = np.hypot(yy - 32, xx - 32)
        assert np.all(a[r < 28.5] == 1.0)
        assert np.all(a[r > 31.5] == 0.0)
        band = a[(r > 29.3) & (r < 30.7)]
        assert np.any((band > 0) & (band < 1))

    def test_hard_mattes_have_fractional_mass(self):
        rng = np.random.default_rng(0)
        alphas = np.stack([gen_toy_sample(rng, 32, "hard").alpha for _ in range(100)])
        fractional = np.count_nonzero((alphas > 0) & (alphas < 1))
        assert fractional / alphas.size > 0.1

    def test_bad_difficulty(self):
        with pytest.raises(ValueError):
            gen_toy_sample(np.random.default_rng(0), 16, "medium")

    def test_sample_seed_independent_streams(self):
        seeds = {sample_seed(5, i) for i in range(50)}
        assert len(seeds) == 50
        assert sample_seed(5, 3) == sample_seed(5, 3) != sample_seed(6, 3)


class TestDataset:
    def test_round_trip(self, tmp_path):
        index = write_dataset(tmp_path, 8, 64, "easy", 11)
        assert index["format"] == DATA_FORMAT and len(index["samples"]) == 8
        images, alphas, loaded = load_dataset(tmp_path)
        assert images.shape == (8, 3, 64, 64) and alphas.shape == (8, 64, 64)
        assert loaded == json.loads((tmp_path / "index.json").read_text())
        ref = gen_toy_sample(np.random.default_rng(index["samples"][3]["seed"]), 64, "easy")
        np.testing.assert_array_equal(alphas[3], ref.alpha.astype(np.float32))
        np.testing.assert_allclose(images[3], ref.image, atol=0.5 / 255 + 1e-6)

    def test_same_seed_same_bytes(self, tmp_path):
        write_dataset(tmp_path / "a", 3, 32, "hard", 1)
        write_dataset(tmp_path / "b", 3, 32, "hard", 1)
        names = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
        for n in names:
            assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()

    def test_empty(self, tmp_path):
        index = write_dataset(tmp_path, 0, 32, "easy", 0)
        assert index["count"] == 0 and index["samples"] == []
        with pytest.raises(ValueError):
            load_dataset(tmp_path)


class TestDistillLoss:
    def test_identical_is_zero(self):
        f = np.random.default_rng(0).normal(size=(2, 4, 6))
        assert distill_loss(f, Tensor(f)).item() == 0.0

    @pytest.mark.parametrize("c", [0.5, -2.0])
    def test_constant_offset(self, c):
        f = np.random.default_rng(1).normal(size=(2, 4, 6))
        assert distill_loss(f, Tensor(f + c)).item() == pytest.approx(c * c, rel=1e-12)

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(2)
        ft, fs = rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 5, 4))
        B, N, D = ft.shape
        per_sample = [sum(((ft[b, i] - fs[b, i]) ** 2).sum() for i in range(N)) / N for b in range(B)]
        expected_token = sum(per_sample) / B
        assert distill_loss(ft, Tensor(fs), "token-mean").item() == pytest.approx(expected_token, abs=1e-10)
        assert distill_loss(ft, Tensor(fs)).item() == pytest.approx(expected_token / D, abs=1e-10)

    def test_gradient_only_to_student(self):
        rng = np.random.default_rng(3)
        ft = Tensor(rng.normal(size=(1, 3, 2)), requires_grad=True)
        fs = Tensor(rng.normal(size=(1, 3, 2)), requires_grad=True)
        T.backward(distill_loss(ft, fs))
        assert ft.grad is None
        np.testing.assert_allclose(fs.grad, 2 * (fs.data - ft.data) / 6, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            distill_loss(np.zeros((1, 2, 3)), Tensor(np.zeros((1, 3, 3))))

    def test_unknown_reduction(self):
        with pytest.raises(ValueError):
            distill_loss(np.zeros((1, 2, 3)), Tensor(np.zeros((1, 2, 3))), "sum")


class TestCompressLoss:
    def test_on_target(self):
        assert compress_loss(0.25, 0.25) == 0.0

    def test_arithmetic(self):
        assert compress_loss(Tensor(np.array(0.75)), 0.25).item() == 0.25

    @pytest.mark.parametrize("g", [0.1, 0.6, 0.9])
    def test_derivative(self, g):
        gamma = Tensor(np.array(g), requires_grad=True)
        T.backward(compress_loss(gamma, 0.25))
        assert gamma.grad == pytest.approx(2 * (g - 0.25), abs=1e-15)
        assert T.grad_check(lambda t: compress_loss(t, 0.25), Tensor(np.array(g))) < 1e-8


class TestMattingLoss:
    def test_identical(self):
        a = np.random.default_rng(0).uniform(size=(2, 4, 4))
        assert matting_loss(Tensor(a), a).item() == 0.0

    def test_opposite(self):
        assert matting_loss(Tensor(np.zeros((3, 3))), np.ones((3, 3))).item() == 1.0

    def test_mean_abs_oracle(self):
        rng = np.random.default_rng(1)
        p, t = rng.uniform(size=(2, 5, 5)), rng.uniform(size=(2, 5, 5))
        assert matting_loss(Tensor(p), t).item() == pytest.approx(np.abs(p - t).sum() / 50, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matting_loss(Tensor(np.zeros((2, 2))), np.zeros((3, 2)))


class TestTotalLoss:
    def test_unweighted_sum_is_exact(self):
        m, d, c = (Tensor(np.array(v)) for v in (0.1, 0.2, 0.3))
        out = total_loss(m, d, c)
        assert out.total.item() == out.matting.item() + out.distill.item() + out.compress.item()
        assert out.values() == {"matting": 0.1, "distill": 0.2, "compress": 0.3, "total": 0.1 + 0.2 + 0.3}

    def test_weights(self):
        m, d, c = (Tensor(np.array(v)) for v in (1.0, 2.0, 3.0))
        assert total_loss(m, d, c, (2.0, 0.5, 0.0)).total.item() == 3.0


class TestMetrics:
    def test_identical(self):
        a = np.random.default_rng(0).uniform(size=(8, 8))
        assert metrics_sad_mse(a, a) == (0.0, 0.0)

    def test_opposite(self):
        sad, mse = metrics_sad_mse(np.zeros((10, 10)), np.ones((10, 10)))
        assert sad == 100.0 and mse == 1.0

    def test_direct_oracle(self):
        rng = np.random.default_rng(1)
        p, t = rng.uniform(size=(6, 7)), rng.uniform(size=(6, 7))
        sad, mse = metrics_sad_mse(p, t)
        assert sad == pytest.approx(sum(abs(x - y) for x, y in zip(p.ravel(), t.ravel())), abs=1e-10)
        assert mse == pytest.approx(sum((x - y) ** 2 for x, y in zip(p.ravel(), t.ravel())) / 42, abs=1e-12)

    def test_reported_scaling(self):
        sad, mse = reported_metrics(np.zeros((10, 10)), np.ones((10, 10)))
        assert sad == pytest.approx(0.1) and mse == pytest.approx(1000.0)
