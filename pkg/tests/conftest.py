import hashlib
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from speech import synth_utterance  # noqa: E402
from specstyle import corpus, dsp, models, pipeline, training  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(f"\n{line}", file=sys.__stdout__, flush=True)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class Corpus:
    root: Path
    manifest: corpus.Manifest
    windows: np.ndarray  # normalised [N,1,512,256]
    content_wav: Path
    style_wav: Path
    style_window: np.ndarray  # normalised [1,1,512,256]


@pytest.fixture(scope="session")
def speech_corpus(tmp_path_factory) -> Corpus:
    """Seven 17 s synthetic utterances (4 windows each) plus a distinct style clip."""
    root = tmp_path_factory.mktemp("speech")
    wavs = root / "wavs"
    wavs.mkdir()
    for k in range(7):
        samples = synth_utterance(17.0, 16000, f0=105 + 6 * k, seed=100 + k)
        corpus.save_wav(dsp.AudioClip(samples, 16000), wavs / f"utt{k}.wav")
    style_wav = root / "style.wav"
    corpus.save_wav(dsp.AudioClip(synth_utterance(5.0, 16000, f0=230, seed=7, formant_shift=1.35), 16000), style_wav)
    manifest = corpus.prepare_dataset(wavs, root / "prepared")
    windows = corpus.load_windows(manifest)
    style = corpus.split_windows(corpus.spectrogram(corpus.load_wav(style_wav), manifest.stft, 16000))[0]
    style_norm = manifest.normalize(style)[None, None].astype(np.float32)
    return Corpus(root, manifest, windows, wavs / "utt0.wav", style_wav, style_norm)


@dataclass
class Run:
    net: models.NetworkWeights
    history: training.LossHistory
    seconds: float


@pytest.fixture(scope="session")
def ae_run(speech_corpus) -> Run:
    """200 steps on the 8 windows of the first two utterances."""
    cfg = training.TrainConfig(learning_rate=1e-3, weight_decay=1e-4, batch_size=8, max_steps=200, seed=0)
    net = pipeline.attach_meta(models.build_network(0), speech_corpus.manifest)
    t0 = time.perf_counter()
    net, hist = training.train_autoencoder(speech_corpus.windows[:8], cfg, net=net)
    return Run(net, hist, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def overfit_run(speech_corpus) -> Run:
    cfg = training.TrainConfig(learning_rate=1e-3, weight_decay=1e-4, batch_size=1, max_steps=500, seed=0)
    net = pipeline.attach_meta(models.build_network(0), speech_corpus.manifest)
    t0 = time.perf_counter()
    net, hist = training.train_autoencoder(speech_corpus.windows[:1], cfg, net=net)
    return Run(net, hist, time.perf_counter() - t0)


@dataclass
class StnRun(Run):
    loss_net_hash_before: str
    loss_net_hash_after: str
    checkpoint: Path


def _train_stn(speech_corpus, ae_run, tmp_path_factory, beta1, beta2) -> StnRun:
    d = tmp_path_factory.mktemp(f"stn_{beta1}_{beta2}")
    ln_path = d / "loss_net.astw"
    models.save_checkpoint(ae_run.net, ln_path)
    before = sha256(ln_path)
    loss_net = models.load_checkpoint(ln_path)
    cfg = training.TrainConfig(learning_rate=1e-3, weight_decay=0.0, batch_size=4, beta1=beta1, beta2=beta2,
                               alpha=100.0, beta=1e4, max_steps=300, seed=0)
    t0 = time.perf_counter()
    stn, hist = training.train_stn(speech_corpus.windows[8:24], speech_corpus.style_window, loss_net, cfg)
    seconds = time.perf_counter() - t0
    models.save_checkpoint(loss_net, d / "loss_net_after.astw")
    after = sha256(d / "loss_net_after.astw")
    ckpt = d / "stn.astw"
    models.save_checkpoint(stn, ckpt)
    return StnRun(stn, hist, seconds, before, after, ckpt)


@pytest.fixture(scope="session")
def stn_default(speech_corpus, ae_run, tmp_path_factory) -> StnRun:
    return _train_stn(speech_corpus, ae_run, tmp_path_factory, 0.999, 0.99)


@pytest.fixture(scope="session")
def stn_conventional(speech_corpus, ae_run, tmp_path_factory) -> StnRun:
    return _train_stn(speech_corpus, ae_run, tmp_path_factory, 0.9, 0.999)


@pytest.fixture(scope="session")
def identity_ae(overfit_run, speech_corpus) -> models.NetworkWeights:
    """The single-item overfit pushed on for another 1500 steps, as a near-identity map."""
    cfg = training.TrainConfig(learning_rate=1e-3, weight_decay=1e-4, batch_size=1, max_steps=1500, seed=1)
    net, _ = training.train_autoencoder(speech_corpus.windows[:1], cfg, net=overfit_run.net.copy())
    return net
