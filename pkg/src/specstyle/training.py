"""Training loops: autoencoder pretraining and transformation-network training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .gradnet import AdamHyper, AdamState, ShapeError, Tape, Tensor, adam_step, add, backward, gram, mse, scale
from .models import NetworkWeights, StyleRep, build_network, encode, forward, init_stn_from_loss_net, save_checkpoint, style

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 24
    beta1: float = 0.9
    beta2: float = 0.999
    alpha: float = 100.0
    beta: float = 1e4
    max_steps: int = 2000
    seed: int = 0
    checkpoint_interval: int = 0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")

    def adam(self) -> AdamHyper:
        return AdamHyper(self.learning_rate, self.beta1, self.beta2, 1e-8, self.weight_decay)


AE_DEFAULTS = TrainConfig()
# Transformation-network run: no decay, betas as literally reported for this stage.
STN_DEFAULTS = TrainConfig(weight_decay=0.0, beta1=0.999, beta2=0.99, max_steps=500)


@dataclass
class StepRecord:
    step: int
    total: float
    content: float | None = None
    style: float | None = None


@dataclass
class LossHistory:
    records: list[StepRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: StepRecord) -> None:
        self.records.append(record)

    @property
    def totals(self) -> np.ndarray:
        return np.array([r.total for r in self.records])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "total", "content", "style"])
            for r in self.records:
                writer.writerow([r.step, repr(r.total), "" if r.content is None else repr(r.content),
                                 "" if r.style is None else repr(r.style)])

    @classmethod
    def from_csv(cls, path) -> "LossHistory":
        hist = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                hist.append(StepRecord(int(row["step"]), float(row["total"]),
                                       float(row["content"]) if row["content"] else None,
                                       float(row["style"]) if row["style"] else None))
        return hist


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, batch_ids: Sequence[int], value: float):
        self.step = step
        self.batch_ids = list(batch_ids)
        self.value = value
        super().__init__(f"non-finite loss {value} at step {step} (batch items {self.batch_ids})")


def batch_schedule(n_items: int, batch_size: int, seed: int, steps: int) -> Iterator[np.ndarray]:
    """Index batches for ``steps`` optimizer steps.

    Each epoch is a fresh seeded permutation; the trailing partial batch is
    dropped. A batch size above the dataset size is clamped to it.
    """
    if n_items < 1:
        raise ValueError("dataset is empty")
    batch = min(batch_size, n_items)
    per_epoch = n_items // batch
    rng = np.random.default_rng(seed)
    done = 0
    while done < steps:
        order = rng.permutation(n_items)
        for k in range(per_epoch):
            if done == steps:
                return
            yield order[k * batch : (k + 1) * batch]
            done += 1


def _as_dataset(dataset, dtype) -> np.ndarray:
    data = np.asarray(dataset, dtype=dtype)
    if data.ndim == 3:
        data = data[:, None]
    if data.ndim != 4 or data.shape[0] == 0:
        raise ValueError("dataset must be a non-empty stack of [1,H,W] spectrograms")
    return data


def _check_finite(value: float, step: int, idx) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(step, idx, value)


def _maybe_checkpoint(net: NetworkWeights, cfg: TrainConfig, step: int, path) -> None:
    if path is not None and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
        save_checkpoint(net, f"{path}.step{step}")


def reconstruction_loss(net: NetworkWeights, batch: np.ndarray, train: bool = True) -> Tensor:
    return mse(forward(net, Tensor(batch), train=train), batch)


def train_autoencoder(dataset, cfg: TrainConfig = AE_DEFAULTS, net: NetworkWeights | None = None,
                      checkpoint_path=None) -> tuple[NetworkWeights, LossHistory]:
    """Fit the autoencoder to reconstruct ``dataset`` ([N,1,H,W]) under MSE.

    With ``checkpoint_path`` and a positive ``cfg.checkpoint_interval`` the
    weights after step k are written to ``<checkpoint_path>.step<k>``.
    """
    data = _as_dataset(dataset, np.float32 if net is None else net.dtype)
    if net is None:
        net = build_network(cfg.seed, input_shape=data.shape[2:])
    params = net.parameters()
    state = AdamState.zeros_like(params)
    hyper = cfg.adam()
    history = LossHistory()
    for step, idx in enumerate(batch_schedule(len(data), cfg.batch_size, cfg.seed, cfg.max_steps), 1):
        with Tape() as tape:
            loss = reconstruction_loss(net, data[idx])
        _check_finite(loss.item(), step, idx)
        grads = backward(loss, tape, params)
        adam_step(params, [grads[p] for p in params], state, hyper)
        history.append(StepRecord(step, loss.item()))
        _maybe_checkpoint(net, cfg, step, checkpoint_path)
        if step % 50 == 0:
            log.info("ae step %d loss %.5f", step, loss.item())
    return net, history


def style_target(loss_net: NetworkWeights, style_spec) -> StyleRep:
    """Fixed style grams of the style spectrogram (computed once, no tape)."""
    rep = style(loss_net, np.asarray(style_spec))
    return StyleRep([Tensor(g.data) for g in rep.grams], rep.weights)


def loss_terms(Y: Tensor, C, style_rep: StyleRep, loss_net: NetworkWeights, alpha: float,
               beta: float) -> tuple[Tensor, Tensor, Tensor]:
    """Return ``(total, content_term, style_term)`` of the combined loss.

    ``content_term`` is the content MSE and ``style_term`` the weighted gram
    MSE, both before scaling by ``alpha``/``beta``. The loss network runs in
    eval mode; gradients flow only into ``Y``.
    """
    C = C.data if isinstance(C, Tensor) else np.asarray(C)
    if Y.shape != C.shape:
        raise ShapeError(f"output shape {Y.shape} != content shape {C.shape}")
    latent_c, _ = encode(loss_net, C, train=False)
    latent_y, acts_y = encode(loss_net, Y, train=False)
    content_term = mse(latent_y, latent_c.data)
    style_term = None
    for act, target, w in zip(acts_y[:3], style_rep.grams, style_rep.weights):
        g = gram(act, normalize=True)
        tgt = np.broadcast_to(target.data, g.shape)
        part = scale(mse(g, tgt), w)
        style_term = part if style_term is None else add(style_term, part)
    total = add(scale(content_term, alpha), scale(style_term, beta))
    return total, content_term, style_term


def combined_loss(Y: Tensor, C, style_rep: StyleRep, loss_net: NetworkWeights, alpha: float,
                  beta: float) -> Tensor:
    """``alpha * MSE(content(Y), content(C)) + beta * sum_l w_l MSE(gram_l(Y), gram_l(S))``."""
    return loss_terms(Y, C, style_rep, loss_net, alpha, beta)[0]


def train_stn(content_dataset, style_spec, loss_net: NetworkWeights, cfg: TrainConfig = STN_DEFAULTS,
              checkpoint_path=None) -> tuple[NetworkWeights, LossHistory]:
    """Train a transformation network initialised from ``loss_net``.

    Each batch is both the network input and the content target. The loss
    network is never modified; its parameters are excluded from the tape.
    """
    frozen = loss_net.copy().set_requires_grad(False)
    stn = init_stn_from_loss_net(loss_net)
    data = _as_dataset(content_dataset, stn.dtype)
    target = style_target(frozen, np.asarray(style_spec, dtype=stn.dtype))
    params = stn.parameters()
    state = AdamState.zeros_like(params)
    hyper = cfg.adam()
    history = LossHistory()
    for step, idx in enumerate(batch_schedule(len(data), cfg.batch_size, cfg.seed, cfg.max_steps), 1):
        batch = data[idx]
        with Tape() as tape:
            Y = forward(stn, Tensor(batch), train=True)
            total, c_term, s_term = loss_terms(Y, batch, target, frozen, cfg.alpha, cfg.beta)
        _check_finite(total.item(), step, idx)
        grads = backward(total, tape, params)
        adam_step(params, [grads[p] for p in params], state, hyper)
        history.append(StepRecord(step, total.item(), cfg.alpha * c_term.item(), cfg.beta * s_term.item()))
        _maybe_checkpoint(stn, cfg, step, checkpoint_path)
        if step % 25 == 0:
            log.info("stn step %d loss %.5f", step, total.item())
    return stn, history


def optimize_spectrogram(content_spec, style_rep: StyleRep, loss_net: NetworkWeights, iterations: int,
                         alpha: float = 100.0, beta: float = 1e4, learning_rate: float = 1e-2,
                         seed: int = 0) -> tuple[np.ndarray, LossHistory]:
    """Per-input iterative stylisation: optimise the spectrogram itself.

    This is the slow optimisation-based alternative to a single network
    pass, used as a wall-clock baseline.
    """
    content_spec = np.asarray(content_spec)
    frozen = loss_net.copy().set_requires_grad(False)
    rng = np.random.default_rng(seed)
    Y = Tensor(content_spec + 0.01 * rng.standard_normal(content_spec.shape).astype(content_spec.dtype), True)
    state = AdamState.zeros_like([Y])
    hyper = AdamHyper(learning_rate)
    history = LossHistory()
    for step in range(1, iterations + 1):
        with Tape() as tape:
            total, c_term, s_term = loss_terms(Y, content_spec, style_rep, frozen, alpha, beta)
        grads = backward(total, tape, [Y])
        adam_step([Y], [grads[Y]], state, hyper)
        history.append(StepRecord(step, total.item(), alpha * c_term.item(), beta * s_term.item()))
    return Y.data, history


def with_overrides(cfg: TrainConfig, **kwargs) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kwargs.items() if v is not None})
