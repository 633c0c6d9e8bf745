import math

import numpy as np
import pytest
import torch

from uncodec import rangecoder
from uncodec.coding import (
    Bitstream,
    BitstreamError,
    FactorizedEntropyModel,
    clamp_to_support,
    entropy_decode,
    entropy_encode,
    estimate_bits,
    linear_noise_bound,
    perturb_quantized,
    quantize_infer,
    quantize_train,
)


class TestQuantizeTrain:
    def test_noise_strictly_inside_half_open_interval(self):
        g = torch.Generator().manual_seed(0)
        x = torch.zeros(1000, 1000)
        noisy = quantize_train(x, g)
        assert (noisy.abs() < 0.5).all()

    def test_preserves_gradient_identity(self):
        x = torch.randn(4, 4, requires_grad=True)
        quantize_train(x, torch.Generator().manual_seed(0)).sum().backward()
        torch.testing.assert_close(x.grad, torch.ones_like(x))

    def test_same_seed_same_noise(self):
        x = torch.randn(8, 8)
        a = quantize_train(x, torch.Generator().manual_seed(3))
        b = quantize_train(x, torch.Generator().manual_seed(3))
        assert torch.equal(a, b)


class TestQuantizeInfer:
    def test_rounding(self):
        out = quantize_infer(torch.tensor([1.4, -1.4, 0.6, -0.6]))
        assert out.tolist() == [1.0, -1.0, 1.0, -1.0]

    def test_ties_away_from_zero(self):
        out = quantize_infer(torch.tensor([2.5, -2.5, 0.5, -0.5]))
        assert out.tolist() == [3.0, -3.0, 1.0, -1.0]

    def test_idempotent(self, rng):
        x = torch.from_numpy(rng.normal(0, 50, size=(16, 16)).astype(np.float32))
        once = quantize_infer(x)
        assert torch.equal(quantize_infer(once), once)

    def test_magnitude_bound(self):
        with pytest.raises(ValueError, match="bound"):
            quantize_infer(torch.tensor([40000.0]))

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            quantize_infer(torch.tensor([float("nan")]))


class TestPerturbQuantized:
    def test_gap_above_threshold_moves_toward_latent(self):
        out = perturb_quantized(torch.tensor([1.3]), torch.tensor([1.0]))
        assert out.item() == pytest.approx(1.06)

    def test_gap_below_threshold_untouched(self):
        out = perturb_quantized(torch.tensor([1.05]), torch.tensor([1.0]))
        assert out.item() == 1.0

    def test_exact_integers_unchanged(self, rng):
        latent = torch.from_numpy(rng.integers(-5, 5, size=(3, 4, 4)).astype(np.float32))
        out = perturb_quantized(latent, latent.clone())
        assert torch.equal(out, latent)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            perturb_quantized(torch.zeros(3), torch.zeros(4))


class TestLinearNoiseBound:
    def test_zero_weights(self):
        assert linear_noise_bound(torch.zeros(10)) == 0.0

    def test_closed_form(self):
        assert linear_noise_bound([1.0, -2.0]) == 1.5

    def test_dominates_sampled_noise(self, rng):
        w = rng.normal(size=50)
        bound = linear_noise_bound(w)
        eta = rng.uniform(-0.5, 0.5, size=(10_000, 50))
        assert np.abs(eta @ w).max() <= bound + 1e-12


class TestEntropyModel:
    def test_likelihood_in_unit_interval(self, rng):
        m = FactorizedEntropyModel(4)
        x = torch.from_numpy(rng.normal(0, 5, size=(4, 6, 6)).astype(np.float32))
        p = m.likelihood(x)
        assert (p > 0).all() and (p <= 1).all()

    def test_cdf_monotone(self):
        m = FactorizedEntropyModel(3)
        grid = torch.linspace(-50, 50, 201).unsqueeze(0).expand(3, -1)
        vals = m.cdf(grid)
        assert (vals.diff(dim=1) >= -1e-7).all()

    def test_likelihood_floor_is_tail_mass(self):
        m = FactorizedEntropyModel(2, tail_mass=1e-9)
        p = m.likelihood(torch.full((2, 1, 1), 1e6))
        assert (p >= 1e-9).all()

    def test_frozen_bin_probabilities_sum_to_one(self):
        m = FactorizedEntropyModel(3)
        m.freeze()
        for cdf in m._frozen_cdfs:
            assert cdf[0] == 0 and cdf[-1] == (1 << rangecoder.PRECISION)
            assert all(b > a for a, b in zip(cdf, cdf[1:]))


class TestEstimateBits:
    class _StubModel:
        def __init__(self, prob):
            self.prob = prob

        def likelihood(self, values):
            return torch.full_like(values, self.prob)

    def test_half_probability_is_one_bit(self):
        bits = estimate_bits(torch.zeros(1, 1, 1), self._StubModel(0.5))
        assert bits.item() == pytest.approx(1.0)

    def test_uniform_256_is_eight_bits(self):
        bits = estimate_bits(torch.zeros(1, 1, 1), self._StubModel(1 / 256))
        assert bits.item() == pytest.approx(8.0)

    def test_matches_per_element_log_sum_oracle(self, rng):
        m = FactorizedEntropyModel(4)
        code = torch.from_numpy(rng.integers(-8, 8, size=(4, 4, 4)).astype(np.float32))
        got = estimate_bits(code, m).item()
        p = m.likelihood(code).detach().numpy()
        want = -np.log2(p).sum()
        assert got == pytest.approx(want, rel=1e-6)

    def test_positive(self, rng):
        m = FactorizedEntropyModel(2)
        code = torch.from_numpy(rng.integers(-4, 4, size=(2, 3, 3)).astype(np.float32))
        assert estimate_bits(code, m).item() > 0


class TestEntropyCoding:
    @pytest.fixture(scope="class")
    def frozen_model(self):
        torch.manual_seed(11)
        m = FactorizedEntropyModel(6)
        m.freeze()
        return m

    def test_round_trip_random_codes(self, frozen_model, rng):
        for _ in range(25):
            code = torch.from_numpy(rng.integers(-30, 30, size=(6, 4, 5)).astype(np.float32))
            code = clamp_to_support(code, frozen_model)
            bs = entropy_encode(code, frozen_model, "mv")
            out = entropy_decode(bs, frozen_model)
            assert torch.equal(out, code)

    def test_length_within_estimate_tolerance(self, frozen_model, rng):
        code = torch.from_numpy(rng.integers(-20, 20, size=(6, 10, 10)).astype(np.float32))
        code = clamp_to_support(code, frozen_model)
        bs = entropy_encode(code, frozen_model, "mv")
        est = estimate_bits(code, frozen_model).item()
        nbits = 8 * len(bs.to_bytes())
        assert est <= nbits <= est * 1.02 + 512

    def test_container_round_trip(self, frozen_model, rng):
        code = torch.from_numpy(rng.integers(-5, 5, size=(6, 2, 3)).astype(np.float32))
        code = clamp_to_support(code, frozen_model)
        bs = entropy_encode(code, frozen_model, "residual")
        raw = bs.to_bytes()
        parsed, offset = Bitstream.from_bytes(raw)
        assert offset == len(raw)
        assert parsed.stream_kind == "residual"
        assert parsed.shape == (6, 2, 3)
        assert torch.equal(entropy_decode(parsed, frozen_model), code)

    def test_empty_code(self, frozen_model):
        code = torch.zeros(6, 0, 4)
        bs = entropy_encode(code, frozen_model, "mv")
        assert bs.payload == b""
        assert entropy_decode(bs, frozen_model).shape == (6, 0, 4)

    def test_model_mismatch_rejected(self, frozen_model, rng):
        other = FactorizedEntropyModel(6)
        other.freeze()
        code = clamp_to_support(torch.zeros(6, 2, 2), frozen_model)
        bs = entropy_encode(code, frozen_model, "mv")
        with pytest.raises(BitstreamError, match="model_id"):
            entropy_decode(bs, other)

    def test_corrupt_magic_rejected(self, frozen_model):
        bs = entropy_encode(torch.zeros(6, 2, 2), frozen_model, "mv")
        raw = bytearray(bs.to_bytes())
        raw[0] = 0x58
        with pytest.raises(BitstreamError, match="magic"):
            Bitstream.from_bytes(bytes(raw))

    def test_truncated_stream_rejected(self, frozen_model):
        bs = entropy_encode(torch.ones(6, 2, 2), frozen_model, "mv")
        raw = bs.to_bytes()
        with pytest.raises(BitstreamError, match="truncated"):
            Bitstream.from_bytes(raw[: len(raw) - 3])

    def test_requires_frozen_model(self):
        m = FactorizedEntropyModel(2)
        with pytest.raises(RuntimeError, match="freeze"):
            entropy_encode(torch.zeros(2, 2, 2), m, "mv")


class TestRangeCoderDirect:
    def test_skewed_rate_close_to_entropy(self, rng):
        pmf = np.array([0.9, 0.05, 0.03, 0.02])
        cdf = rangecoder.pmf_to_quantized_cdf(pmf).tolist()
        syms = rng.choice(4, size=2000, p=pmf).tolist()
        data = rangecoder.encode_symbols(syms, (cdf for _ in syms))
        ideal = -sum(math.log2((cdf[s + 1] - cdf[s]) / (1 << rangecoder.PRECISION)) for s in syms)
        assert ideal <= len(data) * 8 <= ideal * 1.02 + 64
        assert rangecoder.decode_symbols(data, (cdf for _ in syms)) == syms

    def test_every_bin_gets_nonzero_frequency(self):
        cdf = rangecoder.pmf_to_quantized_cdf(np.array([1.0, 0.0, 0.0, 1e-30]))
        assert (np.diff(cdf) >= 1).all()
