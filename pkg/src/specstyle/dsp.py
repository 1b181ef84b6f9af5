"""Time-domain audio <-> log-magnitude spectrogram conversions.

Frames are not centred: frame ``t`` covers samples ``[t*hop, t*hop + fft_size)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import resample_poly

DEFAULT_EPSILON = 1e-10


class Window(str, enum.Enum):
    HANN = "hann"
    HAMMING = "hamming"
    RECTANGULAR = "rectangular"


class SignalTooShortError(ValueError):
    pass


class NonInvertibleError(ValueError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64).reshape(-1))
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 1024
    hop: int = 256
    window: Window = Window.HANN

    def __post_init__(self):
        object.__setattr__(self, "window", Window(self.window))
        if self.fft_size < 1 or self.hop < 1:
            raise ValueError("fft_size and hop must be positive")
        if self.hop > self.fft_size:
            raise ValueError(f"hop {self.hop} exceeds fft_size {self.fft_size}")

    @property
    def bins(self) -> int:
        return self.fft_size // 2 + 1

    def coefficients(self) -> np.ndarray:
        """Periodic window of length ``fft_size``."""
        n = np.arange(self.fft_size)
        if self.window is Window.HANN:
            return 0.5 - 0.5 * np.cos(2 * np.pi * n / self.fft_size)
        if self.window is Window.HAMMING:
            return 0.54 - 0.46 * np.cos(2 * np.pi * n / self.fft_size)
        return np.ones(self.fft_size)

    def frame_count(self, length: int) -> int:
        return (length - self.fft_size) // self.hop + 1 if length >= self.fft_size else 0


@dataclass(frozen=True)
class ComplexSpectrogram:
    bins: np.ndarray  # (fft_size // 2 + 1, frames)
    config: StftConfig
    sample_rate: int

    def __post_init__(self):
        if self.bins.ndim != 2 or self.bins.shape[0] != self.config.bins:
            raise ValueError(f"expected {self.config.bins} rows, got shape {self.bins.shape}")

    @property
    def frames(self) -> int:
        return self.bins.shape[1]


@dataclass(frozen=True)
class LogMagSpectrogram:
    values: np.ndarray  # natural-log magnitude, (bins, frames)
    config: StftConfig
    sample_rate: int
    epsilon: float = DEFAULT_EPSILON

    @property
    def frames(self) -> int:
        return self.values.shape[1]


def stft(clip: AudioClip, cfg: StftConfig = StftConfig()) -> ComplexSpectrogram:
    x = clip.samples
    if x.size < cfg.fft_size:
        raise SignalTooShortError(f"signal of {x.size} samples is shorter than one {cfg.fft_size}-sample window")
    frames = sliding_window_view(x, cfg.fft_size)[:: cfg.hop] * cfg.coefficients()
    return ComplexSpectrogram(np.fft.rfft(frames, axis=1).T, cfg, clip.sample_rate)


def window_sum(cfg: StftConfig, frames: int) -> np.ndarray:
    """Overlap-added squared window, the least-squares ISTFT normaliser."""
    w2 = cfg.coefficients() ** 2
    total = np.zeros((frames - 1) * cfg.hop + cfg.fft_size)
    for t in range(frames):
        total[t * cfg.hop : t * cfg.hop + cfg.fft_size] += w2
    return total


def check_invertible(cfg: StftConfig) -> None:
    """Reject configs whose steady-state window overlap vanishes somewhere."""
    w2 = cfg.coefficients() ** 2
    phase_sums = np.array([w2[r :: cfg.hop].sum() for r in range(cfg.hop)])
    if np.any(phase_sums <= 0.0):
        raise NonInvertibleError(
            f"{cfg.window.value} window with fft_size={cfg.fft_size}, hop={cfg.hop} leaves samples uncovered"
        )


def istft(spec: ComplexSpectrogram) -> AudioClip:
    """Weighted overlap-add inverse (least-squares estimate of the signal).

    Edge samples that every frame weights by zero carry no information and
    come back as zero.
    """
    cfg = spec.config
    check_invertible(cfg)
    w = cfg.coefficients()
    frames = np.fft.irfft(spec.bins.T, n=cfg.fft_size, axis=1) * w
    out = np.zeros((spec.frames - 1) * cfg.hop + cfg.fft_size)
    for t in range(spec.frames):
        out[t * cfg.hop : t * cfg.hop + cfg.fft_size] += frames[t]
    norm = window_sum(cfg, spec.frames)
    covered = norm > 1e-12
    out[covered] /= norm[covered]
    out[~covered] = 0.0
    return AudioClip(out, spec.sample_rate)


def log_magnitude(spec: ComplexSpectrogram, epsilon: float = DEFAULT_EPSILON) -> LogMagSpectrogram:
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    values = np.log(np.maximum(np.abs(spec.bins), epsilon))
    return LogMagSpectrogram(values, spec.config, spec.sample_rate, epsilon)


def spectral_convergence(spec: ComplexSpectrogram, target: np.ndarray) -> float:
    """``|| |S| - M ||_F / ||M||_F`` for a linear target magnitude ``M``."""
    denom = np.linalg.norm(target)
    return float(np.linalg.norm(np.abs(spec.bins) - target) / denom) if denom > 0 else float(np.linalg.norm(np.abs(spec.bins)))


def locked_phase(target: np.ndarray, cfg: StftConfig, rng: np.random.Generator) -> np.ndarray:
    """Seeded phase-vocoder style starting phase for Griffin-Lim.

    Frame 0 gets uniform random phases. Afterwards every bin follows the
    nearest spectral peak of its frame: the window-centre phase advances by
    the peak's interpolated frequency over one hop, and bins around the peak
    take the -pi-per-bin slope of a symmetric window.
    """
    logm = np.log(np.maximum(target, np.finfo(float).tiny))
    nbins, nframes = target.shape
    k = np.arange(nbins)
    centre = rng.uniform(-np.pi, np.pi, nbins)
    freq_prev = k.astype(float)
    out = np.empty(target.shape)
    for t in range(nframes):
        col = logm[:, t]
        peaks = np.flatnonzero((col[1:-1] > col[:-2]) & (col[1:-1] >= col[2:])) + 1
        if peaks.size:
            a, b, c = col[peaks - 1], col[peaks], col[peaks + 1]
            curv = a - 2 * b + c
            offset = np.where(curv < 0, 0.5 * (a - c) / np.where(curv < 0, curv, 1.0), 0.0)
            peak_freq = peaks + np.clip(offset, -0.5, 0.5)
            owner = np.searchsorted((peaks[1:] + peaks[:-1]) / 2, k)
            freq, src = peak_freq[owner], peaks[owner]
        else:
            freq, src = k.astype(float), k
        centre = centre[src]
        if t > 0:
            centre = centre + np.pi * (freq + freq_prev[src]) * cfg.hop / cfg.fft_size
        freq_prev = freq
        out[:, t] = centre - np.pi * k
    return out


def griffin_lim_iter(mag: LogMagSpectrogram, iterations: int = 60, seed: int = 0,
                     init: str = "locked") -> Iterator[tuple[AudioClip, float]]:
    """Yield ``(waveform, spectral_convergence)`` after each Griffin-Lim iteration.

    ``init`` picks the starting phase: ``"locked"`` (see :func:`locked_phase`)
    or ``"random"`` (uniform in [-pi, pi) per bin and frame). Both are drawn
    from ``seed``.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    target = np.exp(mag.values)
    rng = np.random.default_rng(seed)
    if init == "locked":
        phase = locked_phase(target, mag.config, rng)
    elif init == "random":
        phase = rng.uniform(-np.pi, np.pi, size=target.shape)
    else:
        raise ValueError(f"unknown phase init {init!r}")
    estimate = target * np.exp(1j * phase)
    for _ in range(iterations):
        clip = istft(ComplexSpectrogram(estimate, mag.config, mag.sample_rate))
        rebuilt = stft(clip, mag.config)
        yield clip, spectral_convergence(rebuilt, target)
        magnitude = np.abs(rebuilt.bins)
        unit = np.ones_like(rebuilt.bins)
        nz = magnitude > 0
        unit[nz] = rebuilt.bins[nz] / magnitude[nz]
        estimate = target * unit


def griffin_lim(mag: LogMagSpectrogram, iterations: int = 60, seed: int = 0, init: str = "locked") -> AudioClip:
    """Recover a waveform whose STFT magnitude approximates ``exp(mag)``."""
    clip = None
    for clip, _ in griffin_lim_iter(mag, iterations, seed, init):
        pass
    return clip


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Polyphase resampling with a Kaiser-windowed sinc anti-aliasing filter.

    Output length is ``round(len * target / source)``.
    """
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    ratio = Fraction(int(target_rate), clip.sample_rate)
    y = resample_poly(clip.samples, ratio.numerator, ratio.denominator, window=("kaiser", 8.0))
    n = int(round(clip.samples.size * target_rate / clip.sample_rate))
    if y.size < n:
        y = np.pad(y, (0, n - y.size))
    return AudioClip(y[:n], int(target_rate))
