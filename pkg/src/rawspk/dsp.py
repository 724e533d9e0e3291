"""Deterministic signal-processing primitives shared by the front-ends.

Everything here runs in 64-bit precision and is free of hidden state.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SAMPLE_RATE = 16000


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains NaN or Inf samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self):
        return len(self) / self.sample_rate


def _samples(signal):
    if isinstance(signal, Waveform):
        return signal.samples
    return np.asarray(signal, dtype=np.float64)


def fft(signal, n=None):
    """Complex DFT along the last axis (any length, mixed-radix)."""
    x = np.asarray(_samples(signal))
    if x.size == 0 or x.shape[-1] == 0:
        raise ValueError("fft of an empty sequence")
    return np.fft.fft(x, n=n, axis=-1)


def ifft(spectrum, n=None):
    X = np.asarray(spectrum)
    if X.size == 0 or X.shape[-1] == 0:
        raise ValueError("ifft of an empty sequence")
    return np.fft.ifft(X, n=n, axis=-1)


def analytic_mask(n):
    """Frequency mask turning a length-``n`` real DFT into its analytic version.

    DC and (for even ``n``) Nyquist are kept, positive bins doubled, negative
    bins zeroed.
    """
    m = np.zeros(n)
    m[0] = 1.0
    if n % 2 == 0:
        m[n // 2] = 1.0
        m[1:n // 2] = 2.0
    else:
        m[1:(n + 1) // 2] = 2.0
    return m


def hilbert(h):
    """Discrete Hilbert transform of real filters along the last axis.

    Returns the quadrature component ``g`` such that ``h + 1j * g`` has no
    energy on the strictly negative DFT frequencies.
    """
    h = np.asarray(_samples(h), dtype=np.float64)
    if h.ndim == 0 or h.shape[-1] < 2:
        raise ValueError("hilbert needs at least 2 samples")
    n = h.shape[-1]
    a = np.fft.ifft(np.fft.fft(h, axis=-1) * analytic_mask(n), axis=-1)
    return a.imag


def frame(signal, frame_len, hop):
    """Split a signal into frames ``[i*hop, i*hop + frame_len)``.

    Trailing partial frames are dropped; a signal shorter than one frame
    yields an empty ``(0, frame_len)`` array.
    """
    if frame_len < 1 or hop < 1:
        raise ValueError(f"frame_len and hop must be >= 1, got {frame_len}, {hop}")
    x = _samples(signal)
    if x.shape[-1] < frame_len:
        return np.zeros(x.shape[:-1] + (0, frame_len))
    return sliding_window_view(x, frame_len, axis=-1)[..., ::hop, :]


def n_frames(length, frame_len, hop):
    if length < frame_len:
        return 0
    return (length - frame_len) // hop + 1


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("frequency must be non-negative")
    m = 2595.0 * np.log10(1.0 + f / 700.0)
    return m if m.ndim else float(m)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0):
        raise ValueError("mel value must be non-negative")
    f = 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return f if f.ndim else float(f)


def mel_points(n_mels, f_min, f_max):
    """The ``n_mels + 2`` band edges/centres, uniformly spaced on the mel axis."""
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))


def mel_centers(n_mels, f_min, f_max):
    return mel_points(n_mels, f_min, f_max)[1:-1]


def _check_band(n_mels, f_min, f_max, sample_rate):
    if n_mels < 1:
        raise ValueError(f"n_mels must be >= 1, got {n_mels}")
    if not 0 <= f_min < f_max <= sample_rate / 2:
        raise ValueError(
            f"need 0 <= f_min < f_max <= sample_rate/2, got f_min={f_min}, "
            f"f_max={f_max}, sample_rate={sample_rate}")


def mel_filterbank_matrix(n_mels, n_fft, sample_rate, f_min=0.0, f_max=None):
    """Triangular mel weights of shape ``(n_mels, n_fft // 2 + 1)``."""
    if f_max is None:
        f_max = sample_rate / 2
    _check_band(n_mels, f_min, f_max, sample_rate)
    pts = mel_points(n_mels, f_min, f_max)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    left, center, right = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (freqs - left) / (center - left)
    down = (right - freqs) / (right - center)
    return np.maximum(0.0, np.minimum(up, down))


def hamming(n):
    return np.hamming(n)


def magnitude_response(h, n_fft):
    """|H| of real filters at ``n_fft // 2 + 1`` uniformly spaced frequencies."""
    return np.abs(np.fft.rfft(np.asarray(h, dtype=np.float64), n=n_fft, axis=-1))


def peak_frequency(h, sample_rate, n_fft=1 << 16):
    """Frequency of maximum response of a real filter, in Hz.

    Uses a dense zero-padded FFT refined by parabolic interpolation of the
    log magnitude. An all-zero filter reports 0.
    """
    mag = magnitude_response(h, max(n_fft, len(h)))
    k = int(np.argmax(mag))
    if mag[k] == 0.0:
        return 0.0
    df = sample_rate / max(n_fft, len(h))
    if 0 < k < len(mag) - 1 and np.all(mag[k - 1:k + 2] > 0):
        a, b, c = np.log(mag[k - 1:k + 2])
        denom = a - 2 * b + c
        offset = 0.5 * (a - c) / denom if denom != 0 else 0.0
        return (k + offset) * df
    return k * df
