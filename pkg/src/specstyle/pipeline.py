"""End-to-end stylisation and spectrogram images."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import CorpusError, NETWORK_BINS, WINDOW_FRAMES, Manifest, spectrogram, split_windows
from .dsp import DEFAULT_EPSILON, AudioClip, LogMagSpectrogram, StftConfig, griffin_lim
from .models import NetworkWeights, forward


def attach_meta(net: NetworkWeights, manifest: Manifest) -> NetworkWeights:
    """Record normalisation stats and STFT geometry on the checkpoint."""
    rate = manifest.utterances[0].sample_rate if manifest.utterances else 16000
    net.meta["norm"] = np.array([manifest.mean, manifest.std], dtype=np.float32)
    net.meta["audio"] = np.array([rate, manifest.stft.fft_size, manifest.stft.hop], dtype=np.float32)
    return net


def net_geometry(net: NetworkWeights) -> tuple[StftConfig, int, float, float]:
    if "norm" not in net.meta or "audio" not in net.meta:
        raise CorpusError("checkpoint carries no normalisation/STFT metadata")
    mean, std = (float(v) for v in net.meta["norm"])
    rate, fft, hop = (int(v) for v in net.meta["audio"])
    return StftConfig(fft, hop), rate, mean, std


@dataclass
class Stylized:
    clip: AudioClip
    content: np.ndarray  # log magnitude, all bins, windowed frames
    output: np.ndarray
    content_norm: np.ndarray  # network-domain windows [N,1,512,256]
    output_norm: np.ndarray


def stylize_windows(stn: NetworkWeights, windows: np.ndarray) -> np.ndarray:
    """One eval-mode forward pass per window, in order."""
    return np.concatenate([forward(stn, windows[k : k + 1], train=False).data for k in range(len(windows))])


def stylize(clip: AudioClip, stn: NetworkWeights, gl_iters: int = 60, seed: int = 0) -> Stylized:
    cfg, rate, mean, std = net_geometry(stn)
    full = spectrogram(clip, cfg, rate)
    windows = split_windows(full)
    if not windows:
        raise CorpusError(f"input yields {full.shape[1]} frames, fewer than one {WINDOW_FRAMES}-frame window")
    x = ((np.stack(windows)[:, None] - mean) / std).astype(stn.dtype)
    y = stylize_windows(stn, x)
    frames = len(windows) * WINDOW_FRAMES
    floor = np.log(DEFAULT_EPSILON)
    body = np.concatenate(list(y[:, 0] * std + mean), axis=1).astype(np.float64)
    nyquist = np.full((cfg.bins - NETWORK_BINS, frames), floor)
    out_log = np.maximum(np.vstack([body, nyquist]), floor)
    audio = griffin_lim(LogMagSpectrogram(out_log, cfg, rate), gl_iters, seed)
    audio = AudioClip(audio.samples[: frames * cfg.hop], rate)
    return Stylized(audio, full[:, :frames], out_log, x, y)


def render_spectrogram(values: np.ndarray) -> np.ndarray:
    """8-bit grayscale image: high frequencies on top, min/max contrast stretch."""
    img = np.flipud(np.asarray(values, dtype=np.float64))
    lo, hi = img.min(), img.max()
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.round(255.0 * (img - lo) / (hi - lo)).astype(np.uint8)


def write_image(img: np.ndarray, path) -> None:
    """Binary PGM (P5); PNG when the path ends in ``.png``."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(img, mode="L").save(path)
        return
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)
