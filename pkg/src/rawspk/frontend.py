"""Learnable waveform front-ends.

Three flavours feed the shared encoder:

* non-parametric filters initialised as Gabor wavelets on the mel scale,
* parametric sinc band-pass filters defined by ``(f_low, bandwidth)``,
* a fixed mel filterbank over short-time power spectra.

Learnable banks run in ``real`` mode (log |y|) or ``analytic`` mode, where
the imaginary filters are recomputed from the real ones with the Hilbert
transform on every forward pass and the pair is L2-pooled.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import dsp

EPS = 1e-6
SINC_MIN_HZ = 50.0
F_MIN = 50.0
MODES = ("real", "analytic")
PARAMETERIZATIONS = ("nonparametric", "sinc")


@dataclass
class FilterBank:
    weights: np.ndarray
    mode: str = "analytic"
    parameterization: str = "nonparametric"
    sinc_params: np.ndarray = None
    stride: int = 5
    sample_rate: int = dsp.SAMPLE_RATE

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"unknown parameterization {self.parameterization!r}")
        self.weights = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        if self.weights.shape[0] < 1 or self.weights.shape[1] < 2:
            raise ValueError(f"need >= 1 filter of length >= 2, got {self.weights.shape}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")

    @property
    def n_filters(self):
        return self.weights.shape[0]

    @property
    def filter_len(self):
        return self.weights.shape[1]

    @property
    def n_parameters(self):
        if self.parameterization == "sinc":
            return int(np.asarray(self.sinc_params).size)
        return int(self.weights.size)


@dataclass
class Wavegram:
    features: np.ndarray
    hop_equivalent: int

    @property
    def n_frames(self):
        return self.features.shape[1]


# ---------------------------------------------------------------- Gabor init


def _time_axis(filter_len):
    return np.arange(filter_len) - filter_len // 2


def gabor_filters(centers_hz, bandwidths_hz, filter_len, sample_rate, phase="cos"):
    """Peak-normalised Gaussian-windowed sinusoids centred at ``filter_len // 2``.

    ``bandwidths_hz`` is the -3 dB (half-power) width of each filter's
    magnitude response.
    """
    centers = np.asarray(centers_hz, dtype=np.float64)[:, None]
    bw = np.asarray(bandwidths_hz, dtype=np.float64)[:, None]
    t = _time_axis(filter_len)[None, :] / sample_rate
    # |G(f)|^2 = exp(-f^2 / sigma_f^2) drops by half at f = sigma_f * sqrt(ln 2)
    sigma_f = bw / (2.0 * math.sqrt(math.log(2.0)))
    sigma_t = 1.0 / (2.0 * math.pi * sigma_f)
    envelope = np.exp(-0.5 * (t / sigma_t) ** 2)
    carrier = np.cos if phase == "cos" else np.sin
    h = envelope * carrier(2.0 * math.pi * centers * t)
    peak = np.abs(h).max(axis=1, keepdims=True)
    return h / np.where(peak > 0, peak, 1.0)


def mel_band_layout(n_filters, sample_rate, f_min=F_MIN, f_max=None):
    """Centres and half-maximum widths of the mel triangles, in Hz."""
    if f_max is None:
        f_max = sample_rate / 2
    pts = dsp.mel_points(n_filters, f_min, f_max)
    centers = pts[1:-1]
    fwhm = 0.5 * (pts[2:] - pts[:-2])
    return centers, fwhm


def gabor_init(n_filters=30, filter_len=400, sample_rate=dsp.SAMPLE_RATE,
               mode="analytic", stride=5, f_min=F_MIN, f_max=None):
    if n_filters < 1:
        raise ValueError(f"n_filters must be >= 1, got {n_filters}")
    if filter_len < 2 or filter_len % 2:
        raise ValueError(f"filter_len must be even and >= 2, got {filter_len}")
    centers, fwhm = mel_band_layout(n_filters, sample_rate, f_min, f_max)
    w = gabor_filters(centers, fwhm, filter_len, sample_rate)
    return FilterBank(w, mode=mode, parameterization="nonparametric",
                      stride=stride, sample_rate=sample_rate)


# ---------------------------------------------------------------- sinc filters


def clamp_sinc_params(f_low, bandwidth, sample_rate):
    """Map arbitrary trained values onto a valid band ``(f1, f2)`` in Hz."""
    nyq = sample_rate / 2
    f1 = np.minimum(np.maximum(np.abs(f_low), SINC_MIN_HZ), nyq - SINC_MIN_HZ)
    bw = np.maximum(np.abs(bandwidth), SINC_MIN_HZ)
    f2 = np.minimum(f1 + bw, nyq)
    return f1, f2


def _sinc_kernel(f1, f2, filter_len, sample_rate):
    # band-pass = difference of two Hamming-windowed ideal low-pass filters
    n = _time_axis(filter_len)[None, :].astype(np.float64)
    win = np.hamming(filter_len)[None, :]
    f1n = np.asarray(f1, dtype=np.float64)[..., None] / sample_rate
    f2n = np.asarray(f2, dtype=np.float64)[..., None] / sample_rate
    lp2 = 2 * f2n * np.sinc(2 * f2n * n)
    lp1 = 2 * f1n * np.sinc(2 * f1n * n)
    return win * (lp2 - lp1), n, win


def sinc_filter(f_low, bandwidth, filter_len=400, sample_rate=dsp.SAMPLE_RATE):
    if filter_len < 2 or filter_len % 2:
        raise ValueError(f"filter_len must be even and >= 2, got {filter_len}")
    f1, f2 = clamp_sinc_params(np.atleast_1d(f_low), np.atleast_1d(bandwidth), sample_rate)
    h, _, _ = _sinc_kernel(f1, f2, filter_len, sample_rate)
    return h[0] if np.ndim(f_low) == 0 else h


def sinc_bank_tensor(params_hz, filter_len, sample_rate):
    """Differentiable sinc filters from a [F, 2] tensor of (f_low, bandwidth) in Hz."""
    params_hz = ad.as_tensor(params_hz)
    a = params_hz.data[:, 0].astype(np.float64)
    b = params_hz.data[:, 1].astype(np.float64)
    nyq = sample_rate / 2
    f1, f2 = clamp_sinc_params(a, b, sample_rate)
    h, n, win = _sinc_kernel(f1, f2, filter_len, sample_rate)

    # d/df (2 f sinc(2 f n)) = 2 cos(2 pi f n) / sample_rate, including n = 0
    d2 = win * 2 * np.cos(2 * np.pi * (f2[:, None] / sample_rate) * n) / sample_rate
    d1 = -win * 2 * np.cos(2 * np.pi * (f1[:, None] / sample_rate) * n) / sample_rate
    abs_a = np.abs(a)
    df1_da = np.where((abs_a >= SINC_MIN_HZ) & (abs_a <= nyq - SINC_MIN_HZ), np.sign(a), 0.0)
    open_top = (f1 + np.maximum(np.abs(b), SINC_MIN_HZ)) < nyq
    df2_df1 = np.where(open_top, 1.0, 0.0)
    df2_db = np.where(open_top & (np.abs(b) >= SINC_MIN_HZ), np.sign(b), 0.0)

    def bw(g):
        g = g.astype(np.float64)
        g1 = (g * d1).sum(axis=1)
        g2 = (g * d2).sum(axis=1)
        ga = (g1 + g2 * df2_df1) * df1_da
        gb = g2 * df2_db
        return (np.stack([ga, gb], axis=1).astype(params_hz.dtype),)

    return ad.custom(h.astype(params_hz.dtype), (params_hz,), bw, "sinc_bank")


def sinc_bank_init(n_filters=30, filter_len=400, sample_rate=dsp.SAMPLE_RATE,
                   mode="real", stride=5, f_min=F_MIN, f_max=None):
    if filter_len < 2 or filter_len % 2:
        raise ValueError(f"filter_len must be even and >= 2, got {filter_len}")
    if f_max is None:
        f_max = sample_rate / 2
    pts = dsp.mel_points(n_filters, f_min, f_max)
    params = np.stack([pts[:-2], pts[2:] - pts[:-2]], axis=1)
    w = sinc_filter(params[:, 0], params[:, 1], filter_len, sample_rate)
    return FilterBank(w, mode=mode, parameterization="sinc", sinc_params=params,
                      stride=stride, sample_rate=sample_rate)


# ---------------------------------------------------------------- forward


def analytic_extend(bank):
    """(real, imaginary) filter pairs; imaginary parts come from the Hilbert transform."""
    if bank.mode != "analytic":
        raise ValueError("analytic_extend needs a bank in analytic mode")
    return bank.weights.copy(), dsp.hilbert(bank.weights)


def wavegram_tensor(x, filters, mode, stride):
    """Log-magnitude features [B, F, T'] from waveforms ``x`` [B, T] and real filters [F, L].

    Works on :class:`autodiff.Tensor` so gradients reach the filters
    (through the Hilbert transform in analytic mode).
    """
    filters = ad.as_tensor(filters)
    x = ad.as_tensor(x)
    n_f, length = filters.shape
    if x.shape[-1] < length:
        raise ValueError(f"input of {x.shape[-1]} samples is shorter than filter length {length}")
    if mode == "analytic":
        bank = ad.concat([filters, ad.hilbert(filters)], axis=0)
    else:
        bank = filters
    y = ad.conv1d(ad.reshape(x, (x.shape[0], 1, x.shape[-1])),
                  ad.reshape(bank, (bank.shape[0], 1, length)), stride=stride)
    if mode == "analytic":
        re, im = y[:, :n_f, :], y[:, n_f:, :]
        mag = ad.sqrt(ad.square(re) + ad.square(im) + EPS ** 2)
    else:
        mag = ad.abs_(y) + EPS
    return ad.log(mag)


def frontend_forward(x, bank):
    """Wavegram of a single waveform under ``bank`` (valid strided correlation)."""
    samples = dsp._samples(x)
    if samples.shape[-1] < bank.filter_len:
        raise ValueError(
            f"input of {samples.shape[-1]} samples is shorter than filter length {bank.filter_len}")
    feats = wavegram_tensor(samples[None, :], bank.weights, bank.mode, bank.stride)
    return Wavegram(feats.data[0], hop_equivalent=bank.stride)


def mel_features(x, n_mels=30, frame_len=400, hop=5, n_fft=512,
                 sample_rate=dsp.SAMPLE_RATE, f_min=0.0, f_max=None):
    """Log mel power features; ``x`` is [T] or [B, T]. Returns [.., n_mels, frames]."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < frame_len:
        raise ValueError(f"input of {x.shape[-1]} samples is shorter than frame length {frame_len}")
    frames = dsp.frame(x, frame_len, hop) * dsp.hamming(frame_len)
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=-1)) ** 2
    mel = dsp.mel_filterbank_matrix(n_mels, n_fft, sample_rate, f_min, f_max)
    out = np.log(power @ mel.T + EPS)
    return np.swapaxes(out, -1, -2)


def mel_frontend(x, n_mels=30):
    return Wavegram(mel_features(dsp._samples(x), n_mels=n_mels), hop_equivalent=5)


# ---------------------------------------------------------------- export


def filter_responses(bank, n_fft=512):
    """(peak_hz, responses normalised by the global maximum) for each filter."""
    w = bank.weights
    peaks = np.array([dsp.peak_frequency(h, bank.sample_rate) for h in w])
    resp = dsp.magnitude_response(w, n_fft)
    top = resp.max()
    if top > 0:
        resp = resp / top
    return peaks, resp


def export_filter_responses(bank, path, n_fft=512):
    peaks, resp = filter_responses(bank, n_fft)
    header = ["filter", "peak_hz"] + [f"r_{k}" for k in range(resp.shape[1])]
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for i, (p, r) in enumerate(zip(peaks, resp)):
                writer.writerow([i, f"{p:.6f}"] + [f"{v:.8g}" for v in r])
    except OSError as exc:
        raise OSError(f"cannot write filter responses to {path}: {exc}") from exc
    return path


def read_filter_responses(path):
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    body = np.array(rows[1:], dtype=np.float64)
    return body[:, 1], body[:, 2:]
