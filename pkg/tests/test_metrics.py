import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradleak.autodiff import DimensionError
from gradleak.media import Frame, FrameSequence
from gradleak.metrics import QualityReport, psnr, report_to_csv_rows, score_sequences, ssim


def noise_frame(h, w, seed):
    rng = np.random.default_rng(seed)
    return Frame(rng.integers(0, 256, (h, w, 3), dtype=np.uint8))


def direct_psnr(a, b):
    mse = np.mean((a.pixels.astype(np.float64) - b.pixels.astype(np.float64)) ** 2)
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(255.0**2 / mse)


class TestPSNR:
    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_matches_direct_formula(self, seed):
        a = noise_frame(16, 16, seed)
        b = noise_frame(16, 16, seed + 1)
        assert abs(psnr(a, b) - direct_psnr(a, b)) < 1e-9

    def test_identical_frames_give_infinity(self):
        a = noise_frame(16, 16, 0)
        assert psnr(a, a) == float("inf")

    def test_symmetry(self):
        a, b = noise_frame(16, 16, 1), noise_frame(16, 16, 2)
        assert psnr(a, b) == psnr(b, a)

    def test_shape_mismatch_raises(self):
        with pytest.raises(DimensionError):
            psnr(noise_frame(16, 16, 0), noise_frame(16, 18, 0))


class TestSSIM:
    def test_self_similarity_is_one(self):
        a = noise_frame(32, 32, 5)
        assert abs(ssim(a, a) - 1.0) < 1e-12

    def test_symmetry(self):
        a, b = noise_frame(32, 32, 6), noise_frame(32, 32, 7)
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12

    def test_range(self):
        for s in range(5):
            v = ssim(noise_frame(24, 24, s), noise_frame(24, 24, s + 50))
            assert -1.0 <= v <= 1.0

    def test_noise_scores_below_smooth_shift(self):
        base = noise_frame(32, 32, 8)
        shifted = Frame(np.clip(base.pixels.astype(int) + 3, 0, 255).astype(np.uint8))
        noisy = noise_frame(32, 32, 9)
        assert ssim(base, shifted) > ssim(base, noisy)

    def test_window_requires_minimum_size(self):
        with pytest.raises(DimensionError):
            ssim(noise_frame(8, 8, 0), noise_frame(8, 8, 1))


class TestScoreSequences:
    def test_identical_sequences(self):
        seq = FrameSequence([noise_frame(32, 32, s) for s in range(3)], fps=30)
        rep = score_sequences(seq, seq, "self")
        assert rep.infinite_psnr_frames == 3
        assert abs(rep.mean_ssim - 1.0) < 1e-12

    def test_per_frame_rows_match_length(self):
        a = FrameSequence([noise_frame(32, 32, s) for s in range(4)], fps=30)
        b = FrameSequence([noise_frame(32, 32, s + 9) for s in range(4)], fps=30)
        rep = score_sequences(a, b, "ab")
        assert len(rep.per_frame) == 4
        assert len(report_to_csv_rows(rep)) == 5  # header + rows

    def test_length_mismatch_raises(self):
        a = FrameSequence([noise_frame(32, 32, 1)], fps=30)
        b = FrameSequence([noise_frame(32, 32, 1)] * 2, fps=30)
        with pytest.raises(DimensionError):
            score_sequences(a, b, "ab")

    def test_json_is_strict(self):
        import json

        seq = FrameSequence([noise_frame(32, 32, 0)], fps=30)
        rep = score_sequences(seq, seq, "self")
        json.dumps(rep.to_json(), allow_nan=False)  # must not raise
