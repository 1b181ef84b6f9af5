"""Command-line front end: prepare, train-loss-net, train-stn, stylize, spectrogram-png.

Exit codes: 0 success, 1 operational error, 2 bad flags. Diagnostics go to
stderr, one JSON summary line per run to stdout.

Settings resolve as: command-line flag, then the ``key=value`` file named by
``SPECSTYLE_CONFIG``, then built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import corpus, dsp, models, pipeline, training

log = logging.getLogger("specstyle")

DEFAULTS = {
    "rate": 16000,
    "fft": 1024,
    "hop": 256,
    "steps_ae": 2000,
    "steps_stn": 500,
    "batch": 24,
    "lr": 1e-3,
    "wd": 1e-4,
    "seed": 0,
    "alpha": 100.0,
    "beta": 1e4,
    "b1": 0.999,
    "b2": 0.99,
    "gl_iters": 60,
    "checkpoint_interval": 0,
}


class CliError(Exception):
    pass


def read_config_file() -> dict[str, str]:
    path = os.environ.get("SPECSTYLE_CONFIG")
    if not path:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read SPECSTYLE_CONFIG file {path}: {exc}") from None
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


class Settings:
    """Resolve one setting through flag > config file > default."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.file = read_config_file()

    def get(self, key: str, kind=float, default_key: str | None = None):
        value = getattr(self.args, key, None)
        if value is not None:
            return value
        if key in self.file:
            try:
                return kind(float(self.file[key])) if kind is int else kind(self.file[key])
            except ValueError:
                raise CliError(f"config key {key}={self.file[key]!r} is not a valid {kind.__name__}") from None
        return kind(DEFAULTS[default_key or key])


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def cmd_prepare(args, settings: Settings) -> None:
    cfg = dsp.StftConfig(settings.get("fft", int), settings.get("hop", int))
    manifest = corpus.prepare_dataset(args.input, args.out, cfg, settings.get("rate", int))
    _emit({"utterances": len(manifest.utterances), "windows": manifest.total_windows,
           "mean": manifest.mean, "std": manifest.std, "manifest": str(args.out / corpus.MANIFEST_NAME)})


def _history_path(ckpt: Path) -> Path:
    return ckpt.with_suffix(".csv")


def cmd_train_loss_net(args, settings: Settings) -> None:
    manifest = corpus.Manifest.read(args.data)
    data = corpus.load_windows(manifest)
    cfg = training.TrainConfig(
        learning_rate=settings.get("lr"), weight_decay=settings.get("wd"), batch_size=settings.get("batch", int),
        beta1=0.9, beta2=0.999, max_steps=settings.get("steps", int, "steps_ae"), seed=settings.get("seed", int),
        checkpoint_interval=settings.get("checkpoint_interval", int),
    )
    if cfg.batch_size > len(data):
        log.warning("batch size %d exceeds %d windows; using %d", cfg.batch_size, len(data), len(data))
    net = pipeline.attach_meta(models.build_network(cfg.seed), manifest)
    net, history = training.train_autoencoder(data, cfg, net=net, checkpoint_path=args.out)
    models.save_checkpoint(net, args.out)
    history.to_csv(_history_path(args.out))
    _emit({"checkpoint": str(args.out), "history": str(_history_path(args.out)), "steps": len(history),
           "final_loss": history.records[-1].total if history.records else None})


def style_window(path: Path, net: models.NetworkWeights) -> np.ndarray:
    cfg, rate, mean, std = pipeline.net_geometry(net)
    windows = corpus.split_windows(corpus.spectrogram(corpus.load_wav(path), cfg, rate))
    if not windows:
        raise CliError(f"style clip {path} is shorter than one {corpus.WINDOW_FRAMES}-frame window")
    return ((windows[0] - mean) / std).astype(np.float32)[None, None]


def cmd_train_stn(args, settings: Settings) -> None:
    manifest = corpus.Manifest.read(args.data)
    data = corpus.load_windows(manifest)
    loss_net = models.load_checkpoint(args.loss_net)
    if "norm" not in loss_net.meta:
        pipeline.attach_meta(loss_net, manifest)
    style_spec = style_window(args.style, loss_net)
    cfg = training.TrainConfig(
        learning_rate=settings.get("lr"), weight_decay=0.0, batch_size=settings.get("batch", int),
        beta1=settings.get("b1"), beta2=settings.get("b2"), alpha=settings.get("alpha"), beta=settings.get("beta"),
        max_steps=settings.get("steps", int, "steps_stn"), seed=settings.get("seed", int),
        checkpoint_interval=settings.get("checkpoint_interval", int),
    )
    stn, history = training.train_stn(data, style_spec, loss_net, cfg, checkpoint_path=args.out)
    models.save_checkpoint(stn, args.out)
    history.to_csv(_history_path(args.out))
    _emit({"checkpoint": str(args.out), "history": str(_history_path(args.out)), "steps": len(history),
           "final_loss": history.records[-1].total if history.records else None})


def cmd_stylize(args, settings: Settings) -> None:
    stn = models.load_checkpoint(args.stn)
    clip = corpus.load_wav(args.input)
    result = pipeline.stylize(clip, stn, settings.get("gl_iters", int), settings.get("seed", int))
    corpus.save_wav(result.clip, args.out)
    if args.dump_spec:
        pipeline.write_image(pipeline.render_spectrogram(result.content), f"{args.dump_spec}_content.pgm")
        pipeline.write_image(pipeline.render_spectrogram(result.output), f"{args.dump_spec}_output.pgm")
    _emit({"output": str(args.out), "samples": len(result.clip), "sample_rate": result.clip.sample_rate,
           "windows": len(result.output_norm)})


def cmd_spectrogram_png(args, settings: Settings) -> None:
    cfg = dsp.StftConfig(settings.get("fft", int), settings.get("hop", int))
    values = corpus.spectrogram(corpus.load_wav(args.input), cfg, settings.get("rate", int))
    img = pipeline.render_spectrogram(values)
    pipeline.write_image(img, args.out)
    _emit({"image": str(args.out), "height": img.shape[0], "width": img.shape[1]})


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specstyle", description="Single-pass audio style transfer on spectrograms.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build spectrogram windows from a directory of WAVs")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--rate", type=int)
    p.add_argument("--fft", type=int)
    p.add_argument("--hop", type=int)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train-loss-net", help="pretrain the autoencoder loss network")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--wd", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_loss_net)

    p = sub.add_parser("train-stn", help="train the transformation network against one style clip")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--loss-net", dest="loss_net", type=Path, required=True)
    p.add_argument("--style", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--b1", type=float)
    p.add_argument("--b2", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_stn)

    p = sub.add_parser("stylize", help="stylize a WAV in one forward pass plus Griffin-Lim")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--stn", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--gl-iters", dest="gl_iters", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dump-spec", dest="dump_spec")
    p.set_defaults(func=cmd_stylize)

    p = sub.add_parser("spectrogram-png", help="render a WAV's log-magnitude spectrogram as an image")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_spectrogram_png)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args, Settings(args))
    except (CliError, corpus.CorpusError, corpus.WavError, models.CheckpointError, dsp.SignalTooShortError,
            training.TrainingDiverged, ValueError, OSError) as exc:
        print(f"specstyle {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
