"""Synthetic speakers, acoustic degradation and verification protocols.

A speaker is a source-filter voice: a jittered glottal impulse train at the
speaker's pitch, shaped by three formant resonators and a spectral tilt.
Degradation adds exponentially decaying reverberation and pink noise, which
stands in for far-field recordings.
"""

import itertools
import json
import os
import wave
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import signal

from .dsp import SAMPLE_RATE, Waveform

PEAK = 0.5

# documented uniform ranges for speaker parameters
F0_RANGE = (70.0, 350.0)
JITTER_RANGE = (0.005, 0.02)
FORMANT_RANGES = ((300.0, 900.0), (950.0, 2400.0), (2500.0, 3600.0))
BANDWIDTH_RANGE = (60.0, 160.0)
TILT_RANGE = (-9.0, -3.0)
MIN_F0_GAP = 5.0

CONDITION_KINDS = ("clean", "noisy", "reverberant", "noisy_reverberant")


@dataclass
class SynthSpeaker:
    speaker_id: str
    f0_mean: float
    f0_jitter: float
    formants: tuple
    bandwidths: tuple
    spectral_tilt: float
    seed: int

    def __post_init__(self):
        if not 60.0 <= self.f0_mean <= 400.0:
            raise ValueError(f"f0_mean {self.f0_mean} outside [60, 400] Hz")
        if any(b <= a for a, b in zip(self.formants, self.formants[1:])):
            raise ValueError(f"formants must be strictly increasing, got {self.formants}")
        if self.formants[-1] >= SAMPLE_RATE / 2:
            raise ValueError("formants must lie below Nyquist")


@dataclass
class Condition:
    kind: str = "clean"
    snr: float = 20.0
    rt60: float = 0.0

    def __post_init__(self):
        if self.kind not in CONDITION_KINDS:
            raise ValueError(f"condition kind must be one of {CONDITION_KINDS}")
        if not np.isfinite(self.snr):
            raise ValueError("snr must be finite")
        if not 0.0 <= self.rt60 <= 1.0:
            raise ValueError(f"rt60 must be in [0, 1] s, got {self.rt60}")


def _spaced_pitches(n, rng):
    """``n`` pitches uniform over the range subject to the minimum gap."""
    lo, hi = F0_RANGE
    slack = hi - lo - (n - 1) * MIN_F0_GAP
    if slack < 0:
        raise ValueError(f"cannot fit {n} speakers {MIN_F0_GAP} Hz apart in {F0_RANGE} Hz")
    base = np.sort(rng.uniform(0.0, slack, n)) + MIN_F0_GAP * np.arange(n)
    return rng.permutation(lo + base)


def gen_speakers(n, master_seed):
    """``n`` speakers with pairwise f0 gaps of at least 5 Hz.

    Colliding pitches are resampled while the exclusion zones cannot cover
    the whole range (``2 * gap * n < width``), which guarantees termination.
    Larger sets place pitches by a gap-preserving spacing of sorted uniform
    draws instead, since sequential rejection jams near 75% occupancy.
    """
    if n < 2:
        raise ValueError(f"need at least 2 speakers, got {n}")
    rng = np.random.default_rng(master_seed)
    crowded = 2 * MIN_F0_GAP * n >= F0_RANGE[1] - F0_RANGE[0]
    spaced = _spaced_pitches(n, np.random.default_rng([master_seed, 1])) if crowded else None
    speakers = []
    f0s = []
    while len(speakers) < n:
        f0 = rng.uniform(*F0_RANGE)
        jitter = rng.uniform(*JITTER_RANGE)
        formants = tuple(float(rng.uniform(*r)) for r in FORMANT_RANGES)
        bws = tuple(float(rng.uniform(*BANDWIDTH_RANGE)) for _ in FORMANT_RANGES)
        tilt = rng.uniform(*TILT_RANGE)
        seed = int(rng.integers(2**31))
        if crowded:
            f0 = spaced[len(speakers)]
        elif any(abs(f0 - g) < MIN_F0_GAP for g in f0s):
            continue
        f0s.append(f0)
        speakers.append(SynthSpeaker(f"spk{len(speakers):03d}", float(f0), float(jitter),
                                     formants, bws, float(tilt), seed))
    return speakers


def _resonator(freq, bw, sr):
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * freq / sr
    a = np.array([1.0, -2 * r * np.cos(theta), r * r])
    return np.array([a.sum()]), a  # unit gain at DC


def _apply_tilt(x, tilt_db_per_octave, sr, f_ref=100.0):
    spec = np.fft.rfft(x)
    f = np.maximum(np.fft.rfftfreq(len(x), 1.0 / sr), f_ref)
    gain = 10.0 ** (tilt_db_per_octave * np.log2(f / f_ref) / 20.0)
    return np.fft.irfft(spec * gain, n=len(x))


def _normalize_peak(x, peak=PEAK):
    top = np.max(np.abs(x))
    return x * (peak / top) if top > 0 else x


def synth_utterance(speaker, duration_s, utt_seed, sample_rate=SAMPLE_RATE):
    if not 0.5 <= duration_s <= 10.0:
        raise ValueError(f"duration must be in [0.5, 10] s, got {duration_s}")
    rng = np.random.default_rng([speaker.seed, utt_seed])
    n = int(round(duration_s * sample_rate))
    # slow sinusoidal f0 drift plus per-period jitter
    depth = rng.uniform(0.01, 0.03)
    rate = rng.uniform(0.5, 2.0)
    phase = rng.uniform(0, 2 * np.pi)
    src = np.zeros(n)
    t = rng.uniform(0, sample_rate / speaker.f0_mean)
    while t < n:
        i = int(t)
        src[i] += 1.0 - (t - i)
        if i + 1 < n:
            src[i + 1] += t - i
        f0 = speaker.f0_mean * (1 + depth * np.sin(2 * np.pi * rate * t / sample_rate + phase))
        f0 *= 1 + speaker.f0_jitter * rng.standard_normal()
        t += sample_rate / f0
    x = src + 0.02 * rng.standard_normal(n)  # aspiration noise
    for freq, bw in zip(speaker.formants, speaker.bandwidths):
        b, a = _resonator(freq, bw, sample_rate)
        x = signal.lfilter(b, a, x)
    x = _apply_tilt(x, speaker.spectral_tilt, sample_rate)
    return Waveform(_normalize_peak(x), sample_rate)


def pink_noise(n, rng):
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    pink = np.fft.irfft(spec / np.sqrt(f), n=n)
    return pink / np.std(pink)


def synthetic_rir(rt60, sample_rate=SAMPLE_RATE, rng=None, length_factor=1.2):
    """Direct path plus white noise under an envelope that falls 60 dB at ``rt60``."""
    if rng is None:
        rng = np.random.default_rng(0)
    n = max(1, int(round(length_factor * rt60 * sample_rate)))
    t = np.arange(n) / sample_rate
    decay = 3.0 * np.log(10.0) / rt60  # amplitude 10^-3 (= -60 dB) at t = rt60
    h = rng.standard_normal(n) * np.exp(-decay * t) * 0.1
    h[0] = 1.0
    return h


def add_noise(x, snr_db, rng):
    """Add pink noise at ``snr_db`` measured over the whole signal (no renormalisation)."""
    noise = pink_noise(len(x), rng)
    p_sig = np.mean(x ** 2)
    noise *= np.sqrt(p_sig / (np.mean(noise ** 2) * 10.0 ** (snr_db / 10.0)))
    return x + noise


def reverberate(x, rt60, rng, sample_rate=SAMPLE_RATE):
    h = synthetic_rir(rt60, sample_rate, rng)
    return signal.fftconvolve(x, h)[:len(x)]


def degrade(x, condition, seed):
    samples = x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)
    sr = x.sample_rate if isinstance(x, Waveform) else SAMPLE_RATE
    if condition.kind == "clean":
        return Waveform(samples.copy(), sr)
    rng = np.random.default_rng(seed)
    y = samples
    if condition.kind in ("reverberant", "noisy_reverberant") and condition.rt60 > 0:
        y = reverberate(y, condition.rt60, rng, sr)
    if condition.kind in ("noisy", "noisy_reverberant"):
        y = add_noise(y, condition.snr, rng)
    return Waveform(_normalize_peak(y), sr)


# ---------------------------------------------------------------- protocol


@dataclass
class Utterance:
    utt_id: str
    speaker_id: str
    condition: str
    waveform: Waveform = field(repr=False)

    @property
    def duration(self):
        return self.waveform.duration


@dataclass
class Trial:
    enroll_id: str
    test_id: str
    target: bool


@dataclass
class Protocol:
    train: list
    eval_clean: list
    eval_degraded: list
    matched_trials: list
    mismatched_trials: list
    speakers: list


TRAIN_NOISE = Condition("noisy", snr=10.0)
EVAL_MISMATCH = Condition("noisy_reverberant", snr=5.0, rt60=0.5)


def make_trials(utts, rng):
    """All target pairs plus an equal number of randomly drawn nontarget pairs."""
    pairs = list(itertools.combinations(range(len(utts)), 2))
    tgt = [p for p in pairs if utts[p[0]].speaker_id == utts[p[1]].speaker_id]
    non = [p for p in pairs if utts[p[0]].speaker_id != utts[p[1]].speaker_id]
    if not tgt or not non:
        raise ValueError("need at least one target and one nontarget pair")
    k = min(len(tgt), len(non))
    tgt = [tgt[i] for i in sorted(rng.choice(len(tgt), k, replace=False))]
    non = [non[i] for i in sorted(rng.choice(len(non), k, replace=False))]
    trials = [Trial(utts[a].utt_id, utts[b].utt_id, True) for a, b in tgt]
    trials += [Trial(utts[a].utt_id, utts[b].utt_id, False) for a, b in non]
    order = rng.permutation(len(trials))
    return [trials[i] for i in order]


def build_protocol(n_speakers=20, utts_per_speaker=10, train_fraction=0.5,
                   train_condition=TRAIN_NOISE, eval_condition=EVAL_MISMATCH,
                   seed=0, duration_s=1.0):
    """Open-set split: training speakers (clean + noisy copies) and disjoint
    evaluation speakers scored under clean and degraded conditions."""
    n_train = int(round(train_fraction * n_speakers))
    n_eval = n_speakers - n_train
    if n_train < 2 or n_eval < 2 or utts_per_speaker < 2:
        raise ValueError(
            f"infeasible split: {n_train} train / {n_eval} eval speakers, "
            f"{utts_per_speaker} utterances each (need >= 2 of each)")
    speakers = gen_speakers(n_speakers, seed)
    rng = np.random.default_rng(seed + 1)
    order = rng.permutation(n_speakers)
    train_spk = [speakers[i] for i in sorted(order[:n_train])]
    eval_spk = [speakers[i] for i in sorted(order[n_train:])]

    train, clean, degraded = [], [], []
    for spk in train_spk:
        for u in range(utts_per_speaker):
            x = synth_utterance(spk, duration_s, u)
            uid = f"{spk.speaker_id}_u{u:03d}"
            train.append(Utterance(uid, spk.speaker_id, "clean", x))
            noisy = degrade(x, train_condition, [spk.seed, u, 1])
            train.append(Utterance(uid + "_n", spk.speaker_id, train_condition.kind, noisy))
    for spk in eval_spk:
        for u in range(utts_per_speaker):
            x = synth_utterance(spk, duration_s, u)
            uid = f"{spk.speaker_id}_u{u:03d}"
            clean.append(Utterance(uid, spk.speaker_id, "clean", x))
            bad = degrade(x, eval_condition, [spk.seed, u, 2])
            degraded.append(Utterance(uid + "_d", spk.speaker_id, eval_condition.kind, bad))
    matched = make_trials(clean, np.random.default_rng(seed + 2))
    mismatched = make_trials(degraded, np.random.default_rng(seed + 3))
    return Protocol(train, clean, degraded, matched, mismatched, speakers)


# ---------------------------------------------------------------- disk format


def write_wav(path, x, sample_rate=SAMPLE_RATE):
    samples = x.samples if isinstance(x, Waveform) else np.asarray(x)
    pcm = np.clip(np.round(samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path):
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        sr = fh.getframerate()
        pcm = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32767.0, sr)


SPLITS = {"train": "train", "eval_clean": "eval_clean", "eval_degraded": "eval_degraded"}


def write_trials(path, trials):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in trials:
            fh.write(f"{t.enroll_id}\t{t.test_id}\t{'target' if t.target else 'nontarget'}\n")


def read_trials(path):
    trials = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
                raise ValueError(f"{path}:{lineno}: malformed trial line {line!r}")
            trials.append(Trial(parts[0], parts[1], parts[2] == "target"))
    if not trials:
        raise ValueError(f"{path}: empty trial list")
    return trials


def write_corpus(protocol, root):
    """Write ``<root>/<split>/<speaker>/<utt>.wav``, ``manifest.tsv`` and trial lists."""
    os.makedirs(root, exist_ok=True)
    rows = []
    for split, utts in (("train", protocol.train), ("eval_clean", protocol.eval_clean),
                        ("eval_degraded", protocol.eval_degraded)):
        for u in utts:
            d = os.path.join(root, split, u.speaker_id)
            os.makedirs(d, exist_ok=True)
            write_wav(os.path.join(d, u.utt_id + ".wav"), u.waveform)
            rows.append((u.utt_id, u.speaker_id, u.condition, f"{u.duration:.4f}", split))
    with open(os.path.join(root, "manifest.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("utt_id\tspeaker_id\tcondition\tduration\tsplit\n")
        for r in rows:
            fh.write("\t".join(r) + "\n")
    write_trials(os.path.join(root, "matched.trials"), protocol.matched_trials)
    write_trials(os.path.join(root, "mismatched.trials"), protocol.mismatched_trials)
    with open(os.path.join(root, "speakers.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump([asdict(s) for s in protocol.speakers], fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_manifest(root):
    with open(os.path.join(root, "manifest.tsv"), encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        return [dict(zip(header, line.rstrip("\n").split("\t"))) for line in fh if line.strip()]


def load_split(root, split):
    """Utterances of one split, in manifest order."""
    utts = []
    for row in read_manifest(root):
        if row["split"] != split:
            continue
        path = os.path.join(root, split, row["speaker_id"], row["utt_id"] + ".wav")
        utts.append(Utterance(row["utt_id"], row["speaker_id"], row["condition"], read_wav(path)))
    return utts
