"""WAV I/O and preparation of fixed-size normalised spectrogram windows."""

from __future__ import annotations

import logging
import struct
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .dsp import DEFAULT_EPSILON, AudioClip, StftConfig, log_magnitude, resample, stft

log = logging.getLogger(__name__)

NETWORK_BINS = 512
WINDOW_FRAMES = 256
MANIFEST_NAME = "manifest.tsv"


class WavError(ValueError):
    pass


class NotWavError(WavError):
    """File lacks the RIFF/WAVE magic."""


class UnsupportedCodecError(WavError):
    pass


class TruncatedWavError(WavError):
    pass


class EmptyWavError(WavError):
    pass


class CorpusError(RuntimeError):
    pass


class IntegrityError(CorpusError):
    """Manifest and window files disagree."""


_PCM = 1
_EXTENSIBLE = 0xFFFE


def load_wav(path) -> AudioClip:
    """Decode 16-bit PCM (mono, or multi-channel averaged) to floats in [-1, 1]."""
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != b"RIFF" or buf[8:12] != b"WAVE":
        raise NotWavError(f"{path}: missing RIFF/WAVE header")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(buf):
        cid, size = struct.unpack_from("<4sI", buf, pos)
        body = pos + 8
        if cid == b"fmt ":
            if size < 16 or body + size > len(buf):
                raise TruncatedWavError(f"{path}: fmt chunk truncated")
            tag, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", buf, body)
            if tag == _EXTENSIBLE and size >= 40:
                (tag,) = struct.unpack_from("<H", buf, body + 24)
            fmt = (tag, channels, rate, bits)
        elif cid == b"data":
            if body + size > len(buf):
                raise TruncatedWavError(f"{path}: data chunk declares {size} bytes, {len(buf) - body} present")
            data = buf[body : body + size]
            break
        pos = body + size + (size & 1)
    if fmt is None:
        raise TruncatedWavError(f"{path}: no fmt chunk")
    tag, channels, rate, bits = fmt
    if tag != _PCM or bits != 16:
        raise UnsupportedCodecError(f"{path}: only 16-bit PCM supported (format {tag}, {bits} bits)")
    if channels < 1:
        raise UnsupportedCodecError(f"{path}: zero channels")
    if data is None:
        raise TruncatedWavError(f"{path}: no data chunk")
    if len(data) == 0:
        raise EmptyWavError(f"{path}: data chunk is empty")
    frame_bytes = 2 * channels
    if len(data) % frame_bytes:
        raise TruncatedWavError(f"{path}: data chunk ends mid-frame")
    pcm = np.frombuffer(data, dtype="<i2").reshape(-1, channels).astype(np.float64)
    return AudioClip(pcm.mean(axis=1) / 32768.0, rate)


def save_wav(clip: AudioClip, path) -> None:
    """Write mono 16-bit PCM; samples are clamped to [-1, 1] first."""
    q = np.clip(np.round(np.clip(clip.samples, -1.0, 1.0) * 32768.0), -32768, 32767).astype("<i2")
    with open(path, "wb") as fh, wave.open(fh, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(q.tobytes())


@dataclass
class Utterance:
    id: str
    path: str
    sample_rate: int
    windows: int


@dataclass
class Manifest:
    """Prepared dataset index; ``root`` holds the ``.f32`` window files."""

    root: Path
    utterances: list[Utterance]
    mean: float
    std: float
    stft: StftConfig = field(default_factory=StftConfig)

    @property
    def total_windows(self) -> int:
        return sum(u.windows for u in self.utterances)

    def window_paths(self) -> list[Path]:
        return [self.root / f"{u.id}_{k}.f32" for u in self.utterances for k in range(u.windows)]

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def to_text(self) -> str:
        lines = [f"{u.id}\t{u.path}\t{u.sample_rate}\t{u.windows}" for u in self.utterances]
        lines.append(f"#stats mean={self.mean!r} std={self.std!r}")
        lines.append(f"#stft fft={self.stft.fft_size} hop={self.stft.hop} window={self.stft.window.value}")
        return "\n".join(lines) + "\n"

    def write(self) -> Path:
        path = self.root / MANIFEST_NAME
        path.write_text(self.to_text())
        return path

    @classmethod
    def read(cls, root) -> "Manifest":
        root = Path(root)
        path = root / MANIFEST_NAME
        if not path.is_file():
            raise CorpusError(f"no {MANIFEST_NAME} in {root}")
        utts, mean, std, cfg = [], None, None, None
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            if line.startswith("#stats"):
                kv = dict(item.split("=", 1) for item in line.split()[1:])
                mean, std = float(kv["mean"]), float(kv["std"])
            elif line.startswith("#stft"):
                kv = dict(item.split("=", 1) for item in line.split()[1:])
                cfg = StftConfig(int(kv["fft"]), int(kv["hop"]), kv["window"])
            else:
                uid, src, rate, windows = line.split("\t")
                utts.append(Utterance(uid, src, int(rate), int(windows)))
        if mean is None or cfg is None:
            raise CorpusError(f"{path}: missing #stats or #stft footer")
        if not (np.isfinite(mean) and np.isfinite(std) and std > 0):
            raise CorpusError(f"{path}: invalid stats mean={mean} std={std}")
        return cls(root, utts, mean, std, cfg)


def _floor32(epsilon: float) -> np.float32:
    """Smallest float32 not below ln(epsilon)."""
    f = np.float32(np.log(epsilon))
    return np.nextafter(f, np.float32(np.inf)) if f < np.log(epsilon) else f


def spectrogram(clip: AudioClip, cfg: StftConfig, target_rate: int, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Resample, transform and take log magnitude; returns all bins x frames."""
    return log_magnitude(stft(resample(clip, target_rate), cfg), epsilon).values


def split_windows(values: np.ndarray, epsilon: float = DEFAULT_EPSILON) -> list[np.ndarray]:
    """Crop to the network's bins and cut non-overlapping 256-frame windows."""
    cropped = values[:NETWORK_BINS]
    count = cropped.shape[1] // WINDOW_FRAMES
    floor = _floor32(epsilon)
    return [np.maximum(cropped[:, k * WINDOW_FRAMES : (k + 1) * WINDOW_FRAMES].astype(np.float32), floor)
            for k in range(count)]


def write_window(window: np.ndarray, path) -> None:
    Path(path).write_bytes(np.ascontiguousarray(window, dtype="<f4").tobytes())


def read_window(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) != 4 * NETWORK_BINS * WINDOW_FRAMES:
        raise IntegrityError(f"{path}: expected {4 * NETWORK_BINS * WINDOW_FRAMES} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4").reshape(NETWORK_BINS, WINDOW_FRAMES).astype(np.float32)


def prepare_dataset(input_dir, output_dir, cfg: StftConfig = StftConfig(), target_rate: int = 16000) -> Manifest:
    """Turn every ``*.wav`` under ``input_dir`` into stored spectrogram windows.

    Utterances shorter than one window are skipped with a warning. Files
    are processed in sorted path order so reruns give identical output.
    """
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    if not input_dir.is_dir():
        raise CorpusError(f"input directory {input_dir} does not exist")
    wavs = sorted(p for p in input_dir.rglob("*") if p.suffix.lower() == ".wav" and p.is_file())
    if not wavs:
        raise CorpusError(f"no WAV files in {input_dir}")
    output_dir.mkdir(parents=True, exist_ok=True)

    utts: list[Utterance] = []
    total = total_sq = 0.0
    count = 0
    for path in wavs:
        uid = path.relative_to(input_dir).with_suffix("").as_posix().replace("/", "__")
        clip = load_wav(path)
        if len(clip) < cfg.fft_size:
            log.warning("skipping %s: shorter than one STFT frame", path)
            continue
        windows = split_windows(spectrogram(clip, cfg, target_rate))
        if not windows:
            log.warning("skipping %s: fewer than %d frames", path, WINDOW_FRAMES)
            continue
        for k, win in enumerate(windows):
            write_window(win, output_dir / f"{uid}_{k}.f32")
            w64 = win.astype(np.float64)
            total += w64.sum()
            total_sq += (w64 * w64).sum()
            count += w64.size
        utts.append(Utterance(uid, str(path), target_rate, len(windows)))
    if not utts:
        raise CorpusError(f"no utterance in {input_dir} is long enough for one {WINDOW_FRAMES}-frame window")
    mean = total / count
    std = float(np.sqrt(max(total_sq / count - mean * mean, 0.0)))
    if not std > 0:
        raise CorpusError("prepared windows have zero variance")
    manifest = Manifest(output_dir, utts, float(mean), std, cfg)
    manifest.write()
    return manifest


def load_windows(manifest: Manifest, normalize: bool = True) -> np.ndarray:
    """All windows as one [N,1,512,256] float32 array."""
    paths = manifest.window_paths()
    for p in paths:
        if not p.is_file():
            raise IntegrityError(f"manifest lists missing window {p}")
    stack = np.stack([read_window(p) for p in paths])[:, None]
    return manifest.normalize(stack).astype(np.float32) if normalize else stack


def load_batches(manifest: Manifest, batch_size: int, seed: int, epochs: int = 1) -> Iterator[np.ndarray]:
    """Seeded shuffled batches of normalised windows; partial batches dropped."""
    paths = manifest.window_paths()
    missing = [p for p in paths if not p.is_file()]
    if missing:
        raise IntegrityError(f"manifest lists missing window {missing[0]}")
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(paths))
        for k in range(len(paths) // batch_size):
            idx = order[k * batch_size : (k + 1) * batch_size]
            batch = np.stack([read_window(paths[i]) for i in idx])[:, None]
            yield manifest.normalize(batch).astype(np.float32)
