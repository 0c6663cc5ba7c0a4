import pytest
import torch

from firework import refiner
from firework.refiner import RefinerConfig

from conftest import relative_error, smooth_field, smooth_image


class TestConfig:
    def test_rejects_bad_channel_count(self):
        with pytest.raises(ValueError):
            RefinerConfig(input_channels=4)

    def test_rejects_wrong_output_channels(self):
        with pytest.raises(ValueError):
            RefinerConfig(output_channels=2)


class TestInitParams:
    def test_same_seed_same_fingerprint(self):
        a = refiner.init_params(RefinerConfig(seed=11))
        b = refiner.init_params(RefinerConfig(seed=11))
        assert a.fingerprint() == b.fingerprint()

    def test_different_seed_different_fingerprint(self):
        a = refiner.init_params(RefinerConfig(seed=1))
        b = refiner.init_params(RefinerConfig(seed=2))
        assert a.fingerprint() != b.fingerprint()

    def test_parameter_count_is_small(self):
        params = refiner.init_params(RefinerConfig())
        assert params.param_count() < 500_000

    def test_final_layer_zero_initialized(self):
        params = refiner.init_params(RefinerConfig(seed=3))
        assert torch.equal(params.model.head.weight, torch.zeros_like(params.model.head.weight))
        assert torch.equal(params.model.head.bias, torch.zeros_like(params.model.head.bias))

    def test_init_does_not_disturb_global_rng(self):
        torch.manual_seed(123)
        before = torch.rand(4)
        torch.manual_seed(123)
        refiner.init_params(RefinerConfig(seed=9))
        after = torch.rand(4)
        assert torch.equal(before, after)


class TestRefine:
    def test_fresh_params_predict_zero_error(self):
        params = refiner.init_params(RefinerConfig(seed=0))
        v = smooth_image(0, (16, 16, 16))
        u = smooth_field(1, (16, 16, 16))
        eps = refiner.refine(params, v, v, v, u)
        assert torch.equal(eps, torch.zeros(3, 16, 16, 16))

    def test_output_shape(self):
        params = refiner.init_params(RefinerConfig(seed=0))
        v = torch.rand(32, 32, 32)
        u = torch.zeros(3, 32, 32, 32)
        assert refiner.refine(params, v, v, v, u).shape == (3, 32, 32, 32)

    def test_deterministic_forward(self):
        params = refiner.init_params(RefinerConfig(seed=4))
        with torch.no_grad():
            for p in params.model.parameters():
                p.add_(torch.randn_like(p) * 0.05)
        v = smooth_image(2, (16, 16, 16))
        u = smooth_field(3, (16, 16, 16))
        with torch.no_grad():
            a = refiner.refine(params, v, v, v, u)
            b = refiner.refine(params, v, v, v, u)
        assert torch.equal(a, b)

    def test_rejects_shape_mismatch(self):
        params = refiner.init_params(RefinerConfig(seed=0))
        with pytest.raises(ValueError):
            refiner.refine(params, torch.rand(16, 16, 16), torch.rand(16, 16, 16),
                           torch.rand(16, 16, 8), torch.zeros(3, 16, 16, 16))

    def test_rejects_non_divisible_shape(self):
        params = refiner.init_params(RefinerConfig(seed=0))
        v = torch.rand(10, 10, 10)
        with pytest.raises(ValueError):
            refiner.refine(params, v, v, v, torch.zeros(3, 10, 10, 10))

    def test_rejects_baseline_config(self):
        params = refiner.init_params(RefinerConfig(input_channels=2, seed=0))
        v = torch.rand(16, 16, 16)
        with pytest.raises(ValueError):
            refiner.refine(params, v, v, v, torch.zeros(3, 16, 16, 16))

    def test_weight_gradient_matches_finite_differences(self):
        params = refiner.init_params(RefinerConfig(seed=5))
        params.model.double()
        with torch.no_grad():
            for p in params.model.parameters():
                p.add_(torch.randn_like(p) * 0.05)
        v = smooth_image(4, (8, 8, 8), dtype=torch.float64)
        u = smooth_field(5, (8, 8, 8), amplitude=0.5, dtype=torch.float64)
        probe = params.model.stem[0].weight

        def objective():
            return (refiner.refine(params, v, v, v, u) ** 2).sum()

        params.model.zero_grad()
        objective().backward()
        step = 1e-4  # small enough that FD truncation stays below the 1e-3 gate
        analytic, numeric = [], []
        flat = probe.detach().reshape(-1)
        for i in range(0, flat.numel(), max(1, flat.numel() // 8)):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
                hi = float(objective())
                flat[i] = orig - step
                lo = float(objective())
                flat[i] = orig
            numeric.append((hi - lo) / (2 * step))
            analytic.append(float(probe.grad.reshape(-1)[i]))
        analytic = torch.tensor(analytic)
        numeric = torch.tensor(numeric)
        assert relative_error(analytic, numeric) < 1e-3


class TestBaselineForward:
    def test_fresh_params_predict_zero_residual(self):
        params = refiner.init_params(RefinerConfig(input_channels=2, seed=0))
        v = smooth_image(0, (16, 16, 16))
        out = refiner.baseline_forward(params, v, v)
        assert torch.equal(out, torch.zeros(3, 16, 16, 16))

    def test_output_shape(self):
        params = refiner.init_params(RefinerConfig(input_channels=2, seed=0))
        v = torch.rand(16, 16, 16)
        assert refiner.baseline_forward(params, v, v).shape == (3, 16, 16, 16)

    def test_rejects_firework_config(self):
        params = refiner.init_params(RefinerConfig(seed=0))
        v = torch.rand(16, 16, 16)
        with pytest.raises(ValueError):
            refiner.baseline_forward(params, v, v)


class TestCheckpoint:
    def test_roundtrip_preserves_weights_and_mode(self, tmp_path):
        params = refiner.init_params(RefinerConfig(seed=8))
        with torch.no_grad():
            for p in params.model.parameters():
                p.add_(torch.randn_like(p) * 0.1)
        path = tmp_path / "model.ckpt"
        refiner.save_checkpoint(path, params, mode="firework")
        loaded, mode = refiner.load_checkpoint(path)
        assert mode == "firework"
        assert loaded.fingerprint() == params.fingerprint()
        assert loaded.config == params.config

    def test_deterministic_bytes(self, tmp_path):
        params = refiner.init_params(RefinerConfig(seed=8))
        refiner.save_checkpoint(tmp_path / "a.ckpt", params, mode="baseline")
        refiner.save_checkpoint(tmp_path / "b.ckpt", params, mode="baseline")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError, match="magic"):
            refiner.load_checkpoint(path)

    def test_truncated_payload_rejected(self, tmp_path):
        params = refiner.init_params(RefinerConfig(seed=1))
        path = tmp_path / "model.ckpt"
        refiner.save_checkpoint(path, params, mode="firework")
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(ValueError, match="truncated"):
            refiner.load_checkpoint(path)
