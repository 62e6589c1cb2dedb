"""Time-frequency transforms and the two binaural quality metrics.

STFT frames are centered (half a window of zero padding on each side) with a
periodic Hann window, so a unit impulse at sample 0 lands on the window peak
and the overlap-add inverse divides by the exact per-sample window-square
sum. Default parameters: 22050 Hz, window 512, hop 128.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation

SAMPLE_RATE = 22050
WINDOW = 512
HOP = 128


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ContractViolation("waveform must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.samples)):
            raise ContractViolation("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ContractViolation("sample rate must be positive")
        self.sample_rate = int(self.sample_rate)

    def __len__(self):
        return self.samples.size

    def rms(self):
        return float(np.sqrt(np.mean(self.samples**2)))


@dataclass
class ImpulseResponse:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size < 1:
            raise ContractViolation("impulse response must be a non-empty 1-D array")
        if not np.all(np.isfinite(self.samples)):
            raise ContractViolation("impulse response contains non-finite samples")
        self.sample_rate = int(self.sample_rate)

    def energy(self):
        return float(np.sum(self.samples**2))


@dataclass
class Spectrogram:
    bins: np.ndarray  # complex, shape (window//2 + 1, frames)
    window: int
    hop: int
    sample_rate: int

    @property
    def n_bins(self):
        return self.bins.shape[0]

    @property
    def n_frames(self):
        return self.bins.shape[1]

    def magnitudes(self):
        return np.abs(self.bins)


def hann(n):
    """Periodic Hann window (COLA-friendly for hop = n / k, integer k >= 2)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _check_params(window, hop):
    if window < 2 or (window & (window - 1)) != 0:
        raise ConfigError(f"window must be a power of two, got {window}")
    if hop <= 0 or hop > window:
        raise ConfigError(f"hop must be in (0, window], got {hop}")
    if window % hop != 0 or window // hop < 2:
        raise ConfigError(f"window/hop pair ({window}, {hop}) does not satisfy overlap-add")


def stft(wave: Waveform, window=WINDOW, hop=HOP) -> Spectrogram:
    _check_params(window, hop)
    x = wave.samples
    if x.size == 0:
        raise ContractViolation("empty waveform")
    half = window // 2
    n_frames = int(np.ceil(x.size / hop)) + 1
    padded_len = (n_frames - 1) * hop + window
    padded = np.zeros(padded_len)
    padded[half : half + x.size] = x
    offsets = np.arange(n_frames) * hop
    frames = padded[offsets[:, None] + np.arange(window)[None, :]]
    spec = np.fft.rfft(frames * hann(window)[None, :], axis=1)
    return Spectrogram(bins=spec.T.copy(), window=window, hop=hop, sample_rate=wave.sample_rate)


def istft(spec: Spectrogram, length=None) -> Waveform:
    _check_params(spec.window, spec.hop)
    window, hop = spec.window, spec.hop
    win = hann(window)
    frames = np.fft.irfft(spec.bins.T, n=window, axis=1) * win[None, :]
    n_frames = frames.shape[0]
    padded_len = (n_frames - 1) * hop + window
    out = np.zeros(padded_len)
    weight = np.zeros(padded_len)
    win_sq = win * win
    for m in range(n_frames):
        sl = slice(m * hop, m * hop + window)
        out[sl] += frames[m]
        weight[sl] += win_sq
    covered = weight > 1e-12
    out[covered] /= weight[covered]
    half = window // 2
    body = out[half : padded_len - half]
    if length is not None:
        if length > body.size:
            body = np.concatenate([body, np.zeros(length - body.size)])
        else:
            body = body[:length]
    return Waveform(samples=body, sample_rate=spec.sample_rate)


def mag_distance(pred, gt, window=WINDOW, hop=HOP):
    """Magnitude-spectrogram distance between two binaural pairs.

    Mean over channels of the squared Frobenius distance between magnitude
    spectrograms, normalized by frame count.
    """
    _check_pairs(pred, gt)
    total = 0.0
    for p, g in zip(pred, gt):
        sp = stft(p, window, hop).magnitudes()
        sg = stft(g, window, hop).magnitudes()
        total += float(((sp - sg) ** 2).sum()) / sp.shape[1]
    return total / len(pred)


def envelope(x):
    """Magnitude of the analytic signal (FFT-based Hilbert transform)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    spectrum = np.fft.fft(x)
    h = np.zeros(n)
    if n % 2 == 0:
        h[0] = h[n // 2] = 1.0
        h[1 : n // 2] = 2.0
    else:
        h[0] = 1.0
        h[1 : (n + 1) // 2] = 2.0
    return np.abs(np.fft.ifft(spectrum * h))


def env_distance(pred, gt):
    """Envelope distance between two binaural pairs: mean over channels of
    the L2 distance between analytic-signal envelopes, normalized by sample
    count."""
    _check_pairs(pred, gt)
    total = 0.0
    for p, g in zip(pred, gt):
        d = envelope(p.samples) - envelope(g.samples)
        total += float(np.linalg.norm(d)) / p.samples.size
    return total / len(pred)


def _check_pairs(pred, gt):
    if len(pred) != 2 or len(gt) != 2:
        raise ContractViolation("expected (left, right) pairs")
    for p, g in zip(pred, gt):
        if len(p) != len(g):
            raise ContractViolation(f"length mismatch: {len(p)} vs {len(g)}")
        if p.sample_rate != g.sample_rate:
            raise ContractViolation("sample rate mismatch")
