import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from rawspk import dsp


def naive_dft(x):
    n = len(x)
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) @ x


def negative_ratio(h):
    """max |bin| over strictly negative frequencies, relative to the peak."""
    spec = np.abs(naive_dft(h + 1j * dsp.hilbert(h)))
    n = len(h)
    neg = spec[n // 2 + 1:]
    return neg.max(initial=0.0) / spec.max()


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


class TestWaveform:
    def test_duration(self):
        assert dsp.Waveform(np.zeros(8000)).duration == 0.5

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_rejects_non_finite(self, bad):
        with pytest.raises(ValueError, match="NaN or Inf"):
            dsp.Waveform(np.array([0.0, bad]))

    def test_rejects_bad_rate(self):
        with pytest.raises(ValueError, match="sample_rate"):
            dsp.Waveform(np.zeros(4), 0)

    def test_rejects_2d(self):
        with pytest.raises(ValueError, match="1-D"):
            dsp.Waveform(np.zeros((2, 2)))


class TestFFT:
    def test_impulse_is_flat(self):
        np.testing.assert_allclose(dsp.fft([1.0, 0.0, 0.0, 0.0]), np.ones(4), atol=0)

    def test_single_bin_cosine(self):
        n = 8
        X = dsp.fft(np.cos(2 * np.pi * 2 * np.arange(n) / n))
        expected = np.zeros(n)
        expected[[2, 6]] = n / 2
        np.testing.assert_allclose(X, expected, atol=1e-12)

    @pytest.mark.parametrize("n", [37, 400, 1, 2, 97])
    def test_matches_naive_dft(self, n):
        x = np.random.default_rng(n).standard_normal(n)
        X = dsp.fft(x)
        ref = naive_dft(x)
        assert np.max(np.abs(X - ref)) <= 1e-10 * np.max(np.abs(ref))

    def test_round_trip_all_lengths(self):
        rng = np.random.default_rng(0)
        for n in range(1, 513):
            x = rng.standard_normal(n)
            back = dsp.ifft(dsp.fft(x))
            assert np.max(np.abs(back - x)) <= 1e-10 * np.max(np.abs(x))

    def test_conjugate_symmetry(self):
        x = np.random.default_rng(1).standard_normal(50)
        X = dsp.fft(x)
        np.testing.assert_allclose(X[1:], np.conj(X[1:][::-1]), atol=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError, match="empty"):
            dsp.fft([])
        with pytest.raises(ValueError, match="empty"):
            dsp.ifft([])

    def test_accepts_waveform(self):
        w = dsp.Waveform(np.array([1.0, 0.0]))
        np.testing.assert_allclose(dsp.fft(w), [1.0, 1.0])


class TestHilbert:
    def test_cosine_to_sine(self):
        t = np.arange(64)
        out = dsp.hilbert(np.cos(2 * np.pi * 3 * t / 64))
        np.testing.assert_allclose(out, np.sin(2 * np.pi * 3 * t / 64), atol=1e-10)

    def test_constant_has_no_quadrature(self):
        np.testing.assert_allclose(dsp.hilbert(np.full(10, 3.5)), 0.0, atol=1e-14)

    def test_random_400_is_analytic(self):
        h = np.random.default_rng(2).standard_normal(400)
        assert negative_ratio(h) < 1e-9

    @pytest.mark.parametrize("n", [2, 3, 7, 64, 401])
    def test_analytic_any_length(self, n):
        h = np.random.default_rng(n).standard_normal(n)
        assert negative_ratio(h) < 1e-9

    def test_mask_keeps_dc_and_nyquist(self):
        np.testing.assert_array_equal(dsp.analytic_mask(6), [1, 2, 2, 1, 0, 0])
        np.testing.assert_array_equal(dsp.analytic_mask(5), [1, 2, 2, 0, 0])

    def test_too_short(self):
        with pytest.raises(ValueError, match="2 samples"):
            dsp.hilbert([1.0])

    @pytest.mark.parametrize("k", [1, 5, 17, 31])
    def test_orthogonal_for_tones(self, k):
        t = np.arange(64)
        h = np.cos(2 * np.pi * k * t / 64 + 0.3)
        g = dsp.hilbert(h)
        assert abs(h @ g) < 1e-8 * np.linalg.norm(h) * np.linalg.norm(g)

    def test_batched_last_axis(self):
        H = np.random.default_rng(3).standard_normal((3, 16))
        np.testing.assert_allclose(dsp.hilbert(H), np.stack([dsp.hilbert(h) for h in H]))

    @given(arrays(np.float64, st.integers(2, 64), elements=finite))
    def test_analytic_property(self, h):
        spec = np.abs(np.fft.fft(h + 1j * dsp.hilbert(h)))
        if spec.max() == 0:
            return
        assert spec[len(h) // 2 + 1:].max(initial=0.0) <= 1e-9 * spec.max()

    @given(arrays(np.float64, 32, elements=finite), arrays(np.float64, 32, elements=finite),
           finite, finite)
    def test_linear(self, h1, h2, a, b):
        lhs = dsp.hilbert(a * h1 + b * h2)
        rhs = a * dsp.hilbert(h1) + b * dsp.hilbert(h2)
        scale = max(1.0, np.abs(lhs).max(), np.abs(rhs).max())
        assert np.max(np.abs(lhs - rhs)) <= 1e-10 * scale


class TestFrame:
    @pytest.mark.parametrize("length,expected", [(1000, 4), (400, 1), (399, 0)])
    def test_counts(self, length, expected):
        frames = dsp.frame(np.arange(length, dtype=float), 400, 160)
        assert frames.shape == (expected, 400)
        assert dsp.n_frames(length, 400, 160) == expected

    def test_frame_contents(self):
        frames = dsp.frame(np.arange(1000, dtype=float), 400, 160)
        np.testing.assert_array_equal(frames[2], np.arange(320, 720))

    def test_bad_args(self):
        with pytest.raises(ValueError):
            dsp.frame(np.zeros(10), 0, 1)
        with pytest.raises(ValueError):
            dsp.frame(np.zeros(10), 4, 0)

    @given(st.integers(0, 300), st.integers(1, 50), st.integers(1, 20))
    def test_count_formula(self, length, frame_len, hop):
        frames = dsp.frame(np.zeros(length), frame_len, hop)
        expected = 0 if length < frame_len else (length - frame_len) // hop + 1
        assert frames.shape == (expected, frame_len)


class TestMel:
    def test_zero(self):
        assert dsp.hz_to_mel(0) == 0.0

    def test_round_trip(self):
        assert dsp.mel_to_hz(dsp.hz_to_mel(4000)) == pytest.approx(4000, rel=1e-9)

    def test_1000_hz(self):
        import math
        expected = 2595 * math.log10(1 + 1000 / 700)
        assert dsp.hz_to_mel(1000) == pytest.approx(expected, rel=1e-12)

    def test_strictly_monotone(self):
        m = dsp.hz_to_mel(np.arange(0, 8001, 1.0))
        assert np.all(np.diff(m) > 0)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            dsp.hz_to_mel(-1.0)
        with pytest.raises(ValueError):
            dsp.mel_to_hz(-1.0)

    @given(st.floats(0, 20000))
    def test_inverse(self, f):
        assert dsp.mel_to_hz(dsp.hz_to_mel(f)) == pytest.approx(f, rel=1e-9, abs=1e-9)


class TestMelFilterbank:
    @pytest.fixture
    def fb(self):
        return dsp.mel_filterbank_matrix(30, 512, 16000, 0, 8000)

    def test_shape_and_rows(self, fb):
        assert fb.shape == (30, 257)
        assert np.all(fb >= 0)
        assert np.all(fb.sum(axis=1) > 0)

    def test_single_maximum_and_monotone_centres(self, fb):
        peaks = fb.argmax(axis=1)
        for row, k in zip(fb, peaks):
            assert np.sum(row == row.max()) == 1
        assert np.all(np.diff(peaks) >= 0)

    def test_support(self, fb):
        pts = dsp.mel_to_hz(np.linspace(0, dsp.hz_to_mel(8000), 32))
        freqs = np.arange(257) * 16000 / 512
        for i, row in enumerate(fb):
            outside = (freqs <= pts[i]) | (freqs >= pts[i + 2])
            assert np.all(row[outside] == 0)

    def test_centres_match_mel_points(self, fb):
        centres = dsp.mel_to_hz(np.linspace(dsp.hz_to_mel(0), dsp.hz_to_mel(8000), 32))[1:-1]
        bin_hz = 16000 / 512
        peaks = fb.argmax(axis=1) * bin_hz
        assert np.all(np.abs(peaks - centres) <= bin_hz)

    @pytest.mark.parametrize("f_min,f_max", [(-1, 8000), (100, 100), (0, 9000)])
    def test_bad_band(self, f_min, f_max):
        with pytest.raises(ValueError, match="f_min"):
            dsp.mel_filterbank_matrix(30, 512, 16000, f_min, f_max)

    def test_bad_count(self):
        with pytest.raises(ValueError, match="n_mels"):
            dsp.mel_filterbank_matrix(0, 512, 16000)


class TestPeakFrequency:
    def test_tone_filter(self):
        t = np.arange(400)
        h = np.hamming(400) * np.cos(2 * np.pi * 1234.5 * t / 16000)
        assert dsp.peak_frequency(h, 16000) == pytest.approx(1234.5, rel=1e-3)

    def test_zero_filter(self):
        assert dsp.peak_frequency(np.zeros(16), 16000) == 0.0
