import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import sha256
from speech import synth_utterance
from specstyle import cli, corpus, models, pipeline, training
from specstyle.dsp import AudioClip, StftConfig
from specstyle.training import LossHistory


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def wavs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_wavs")
    (root / "in").mkdir()
    for k in range(3):
        corpus.save_wav(AudioClip(synth_utterance(4.5, 16000, f0=110 + 10 * k, seed=k), 16000), root / "in" / f"u{k}.wav")
    corpus.save_wav(AudioClip(synth_utterance(4.5, 16000, f0=220, seed=9, formant_shift=1.3), 16000), root / "style.wav")
    corpus.save_wav(AudioClip(synth_utterance(1.0, 16000, seed=4), 16000), root / "short.wav")
    return root


@pytest.fixture(scope="module")
def prepared(wavs, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_prep")
    assert cli.main(["prepare", "--in", str(wavs / "in"), "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def loss_net_ckpt(prepared, tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("cli_ln") / "ln.astw"
    assert cli.main(["train-loss-net", "--data", str(prepared), "--out", str(ckpt), "--steps", "3", "--batch", "2"]) == 0
    return ckpt


@pytest.fixture(scope="module")
def stn_ckpt(prepared, loss_net_ckpt, wavs, tmp_path_factory):
    ckpt = tmp_path_factory.mktemp("cli_stn") / "stn.astw"
    code = cli.main(["train-stn", "--data", str(prepared), "--loss-net", str(loss_net_ckpt), "--style",
                     str(wavs / "style.wav"), "--out", str(ckpt), "--steps", "2"])
    assert code == 0
    return ckpt


class TestPrepare:
    def test_summary_matches_manifest(self, wavs, tmp_path, capsys):
        code, out, _ = run(["prepare", "--in", wavs / "in", "--out", tmp_path], capsys)
        assert code == 0
        summary = json.loads(out)
        manifest = corpus.Manifest.read(tmp_path)
        assert summary["utterances"] == 3 and summary["windows"] == manifest.total_windows == 3
        assert summary["mean"] == manifest.mean and summary["std"] == manifest.std

    def test_missing_dir(self, tmp_path, capsys):
        code, out, err = run(["prepare", "--in", tmp_path / "nope", "--out", tmp_path / "o"], capsys)
        assert code == 1 and out == "" and "does not exist" in err

    def test_bad_flags_exit_2(self):
        proc = subprocess.run([sys.executable, "-m", "specstyle", "prepare", "--bogus"], capture_output=True, text=True)
        assert proc.returncode == 2 and proc.stdout == "" and "usage" in proc.stderr

    def test_config_file_precedence(self, wavs, tmp_path, capsys, monkeypatch):
        conf = tmp_path / "conf"
        conf.write_text("# overrides\nhop = 128\nfft=512\n")
        monkeypatch.setenv("SPECSTYLE_CONFIG", str(conf))
        assert run(["prepare", "--in", wavs / "in", "--out", tmp_path / "a"], capsys)[0] == 0
        assert corpus.Manifest.read(tmp_path / "a").stft == StftConfig(512, 128)
        assert run(["prepare", "--in", wavs / "in", "--out", tmp_path / "b", "--hop", "256"], capsys)[0] == 0
        assert corpus.Manifest.read(tmp_path / "b").stft == StftConfig(512, 256)

    def test_bad_config_value(self, wavs, tmp_path, capsys, monkeypatch):
        conf = tmp_path / "conf"
        conf.write_text("hop=lots\n")
        monkeypatch.setenv("SPECSTYLE_CONFIG", str(conf))
        code, _, err = run(["prepare", "--in", wavs / "in", "--out", tmp_path / "a"], capsys)
        assert code == 1 and "hop" in err


class TestTrainLossNet:
    def test_outputs(self, loss_net_ckpt):
        hist = LossHistory.from_csv(loss_net_ckpt.with_suffix(".csv"))
        assert len(hist) == 3 and [r.step for r in hist.records] == [1, 2, 3]
        net = models.load_checkpoint(loss_net_ckpt)
        assert net.channels == models.DEFAULT_CHANNELS and "norm" in net.meta

    def test_same_seed_same_csv(self, prepared, tmp_path, capsys):
        for name in ("a", "b"):
            assert run(["train-loss-net", "--data", prepared, "--out", tmp_path / f"{name}.astw", "--steps", 2,
                        "--batch", 2, "--seed", 4], capsys)[0] == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        assert sha256(tmp_path / "a.astw") == sha256(tmp_path / "b.astw")

    def test_checkpoint_reproduces_final_batch_loss(self, prepared, tmp_path, capsys, monkeypatch):
        conf = tmp_path / "conf"
        conf.write_text("checkpoint_interval=2\n")
        monkeypatch.setenv("SPECSTYLE_CONFIG", str(conf))
        ckpt = tmp_path / "ln.astw"
        assert run(["train-loss-net", "--data", prepared, "--out", ckpt, "--steps", 3, "--batch", 2], capsys)[0] == 0
        # weights saved after step 2 are exactly the weights step 3 was evaluated with
        net = models.load_checkpoint(f"{ckpt}.step2")
        data = corpus.load_windows(corpus.Manifest.read(prepared))
        idx = list(training.batch_schedule(len(data), 2, 0, 3))[-1]
        loss = training.reconstruction_loss(net, data[idx]).item()
        assert loss == LossHistory.from_csv(tmp_path / "ln.csv").records[-1].total

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_exit_1(self, prepared, tmp_path, capsys):
        code, _, err = run(["train-loss-net", "--data", prepared, "--out", tmp_path / "x.astw", "--steps", 2,
                            "--batch", 2, "--lr", "1e300"], capsys)
        assert code == 1 and "non-finite" in err

    def test_missing_data(self, tmp_path, capsys):
        assert run(["train-loss-net", "--data", tmp_path, "--out", tmp_path / "x.astw"], capsys)[0] == 1


class TestTrainStn:
    def test_loss_net_file_unchanged(self, prepared, loss_net_ckpt, wavs, tmp_path, capsys):
        before = sha256(loss_net_ckpt)
        code, out, _ = run(["train-stn", "--data", prepared, "--loss-net", loss_net_ckpt, "--style", wavs / "style.wav",
                            "--out", tmp_path / "s.astw", "--steps", 2], capsys)
        assert code == 0 and json.loads(out)["steps"] == 2
        assert sha256(loss_net_ckpt) == before

    def test_alpha_zero(self, prepared, loss_net_ckpt, wavs, tmp_path, capsys):
        code, _, _ = run(["train-stn", "--data", prepared, "--loss-net", loss_net_ckpt, "--style", wavs / "style.wav",
                          "--out", tmp_path / "s.astw", "--steps", 2, "--alpha", 0], capsys)
        assert code == 0
        assert all(r.content == 0.0 for r in LossHistory.from_csv(tmp_path / "s.csv").records)

    def test_loss_trend(self, prepared, loss_net_ckpt, wavs, tmp_path, capsys):
        code, _, _ = run(["train-stn", "--data", prepared, "--loss-net", loss_net_ckpt, "--style", wavs / "style.wav",
                          "--out", tmp_path / "s.astw", "--steps", 30], capsys)
        assert code == 0
        totals = LossHistory.from_csv(tmp_path / "s.csv").totals
        assert np.median(totals[-3:]) < np.median(totals[:3])

    def test_short_style_exit_1(self, prepared, loss_net_ckpt, wavs, tmp_path, capsys):
        code, _, err = run(["train-stn", "--data", prepared, "--loss-net", loss_net_ckpt, "--style", wavs / "short.wav",
                            "--out", tmp_path / "s.astw", "--steps", 1], capsys)
        assert code == 1 and "shorter" in err

    def test_corrupt_loss_net_exit_1(self, prepared, wavs, tmp_path, capsys):
        (tmp_path / "bad.astw").write_bytes(b"nope")
        code, _, _ = run(["train-stn", "--data", prepared, "--loss-net", tmp_path / "bad.astw", "--style",
                          wavs / "style.wav", "--out", tmp_path / "s.astw"], capsys)
        assert code == 1


class TestStylize:
    def test_duration_and_dumps(self, stn_ckpt, wavs, tmp_path, capsys):
        out = tmp_path / "o.wav"
        code, stdout, _ = run(["stylize", "--in", wavs / "in" / "u0.wav", "--stn", stn_ckpt, "--out", out,
                               "--gl-iters", 2, "--dump-spec", tmp_path / "d"], capsys)
        assert code == 0
        clip = corpus.load_wav(out)
        windows = json.loads(stdout)["windows"]
        assert windows == 1 and clip.sample_rate == 16000
        assert abs(len(clip) - windows * 256 * 256) <= 256
        for side in ("content", "output"):
            assert pipeline.read_pgm(tmp_path / f"d_{side}.pgm").shape == (513, 256)

    def test_deterministic(self, stn_ckpt, wavs, tmp_path, capsys):
        for k in range(2):
            assert run(["stylize", "--in", wavs / "in" / "u1.wav", "--stn", stn_ckpt, "--out", tmp_path / f"{k}.wav",
                        "--gl-iters", 3, "--seed", 2], capsys)[0] == 0
        assert (tmp_path / "0.wav").read_bytes() == (tmp_path / "1.wav").read_bytes()

    def test_short_input_exit_1(self, stn_ckpt, wavs, tmp_path, capsys):
        code, _, err = run(["stylize", "--in", wavs / "short.wav", "--stn", stn_ckpt, "--out", tmp_path / "o.wav"], capsys)
        assert code == 1 and not (tmp_path / "o.wav").exists()

    def test_near_identity(self, speech_corpus, identity_ae, tmp_path):
        stn = models.init_stn_from_loss_net(identity_ae)
        result = pipeline.stylize(corpus.load_wav(speech_corpus.content_wav), stn, gl_iters=1)
        err = float(((result.output_norm[0] - result.content_norm[0]) ** 2).mean())
        print(f"near-identity window MSE {err:.4f}")
        assert err < 0.02


class TestSpectrogramImage:
    def test_geometry(self, wavs, tmp_path, capsys):
        code, out, _ = run(["spectrogram-png", "--in", wavs / "in" / "u0.wav", "--out", tmp_path / "s.pgm"], capsys)
        assert code == 0
        img = pipeline.read_pgm(tmp_path / "s.pgm")
        frames = StftConfig().frame_count(int(4.5 * 16000))
        assert img.shape == (513, frames) == (json.loads(out)["height"], json.loads(out)["width"])

    def test_silence_uniform(self, tmp_path, capsys):
        corpus.save_wav(AudioClip(np.zeros(8000), 16000), tmp_path / "z.wav")
        assert run(["spectrogram-png", "--in", tmp_path / "z.wav", "--out", tmp_path / "z.pgm"], capsys)[0] == 0
        img = pipeline.read_pgm(tmp_path / "z.pgm")
        assert np.all(img == img[0, 0])

    def test_tone_band(self, tmp_path, capsys):
        t = np.arange(16000) / 16000
        corpus.save_wav(AudioClip(0.5 * np.sin(2 * np.pi * 1000 * t), 16000), tmp_path / "t.wav")
        assert run(["spectrogram-png", "--in", tmp_path / "t.wav", "--out", tmp_path / "t.pgm"], capsys)[0] == 0
        img = pipeline.read_pgm(tmp_path / "t.pgm")
        assert np.argmax(img.mean(axis=1)) == 512 - 64  # 1 kHz is bin 64; row 0 is Nyquist

    def test_png(self, wavs, tmp_path, capsys):
        Image = pytest.importorskip("PIL.Image")
        assert run(["spectrogram-png", "--in", wavs / "in" / "u0.wav", "--out", tmp_path / "s.png"], capsys)[0] == 0
        assert np.asarray(Image.open(tmp_path / "s.png")).shape[0] == 513

    def test_unreadable(self, tmp_path, capsys):
        (tmp_path / "x.wav").write_bytes(b"garbage")
        assert run(["spectrogram-png", "--in", tmp_path / "x.wav", "--out", tmp_path / "x.pgm"], capsys)[0] == 1
        assert run(["spectrogram-png", "--in", tmp_path / "missing.wav", "--out", tmp_path / "x.pgm"], capsys)[0] == 1


def test_read_pgm_whitespace_pixels(tmp_path):
    img = np.array([[9, 10, 32], [13, 0, 255]], dtype=np.uint8)
    pipeline.write_image(img, tmp_path / "w.pgm")
    np.testing.assert_array_equal(pipeline.read_pgm(tmp_path / "w.pgm"), img)
