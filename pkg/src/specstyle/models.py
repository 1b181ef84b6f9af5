"""The shared 8-layer convolutional autoencoder and its content/style views.

The same architecture serves as the frozen loss network (trained as a plain
autoencoder on spectrograms) and as the spectrogram transformation network
(initialised from the loss network and trained against a style target).
"""

from __future__ import annotations

import copy
import hashlib
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .gradnet import RunningStats, ShapeError, Tensor, as_tensor, batchnorm2d, conv2d, conv_transpose2d, gram, relu

DEFAULT_CHANNELS = (1, 16, 32, 64, 128)
DEFAULT_INPUT_SHAPE = (512, 256)
STYLE_WEIGHTS = (1 / 3, 1 / 3, 1 / 3)


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "conv_transpose"
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    padding: int
    activation: str  # "relu+batchnorm" | "none"


def architecture(channels: Sequence[int] = DEFAULT_CHANNELS) -> list[LayerSpec]:
    """Four stride-2 3x3 convs down, four stride-2 4x4 transposed convs back up."""
    if len(channels) != 5:
        raise ValueError("channels must list 5 widths: input plus four encoder layers")
    specs = [LayerSpec("conv", channels[i], channels[i + 1], 3, 2, 1, "relu+batchnorm") for i in range(4)]
    rev = channels[::-1]
    for i in range(4):
        act = "none" if i == 3 else "relu+batchnorm"
        specs.append(LayerSpec("conv_transpose", rev[i], rev[i + 1], 4, 2, 1, act))
    return specs


def layer_names() -> list[str]:
    return [f"enc{i}" for i in range(1, 5)] + [f"dec{i}" for i in range(1, 5)]


@dataclass
class LayerParams:
    weight: Tensor
    bias: Tensor
    bn_scale: Tensor | None = None
    bn_shift: Tensor | None = None
    stats: RunningStats | None = None

    def parameters(self) -> list[Tensor]:
        ps = [self.weight, self.bias]
        if self.bn_scale is not None:
            ps += [self.bn_scale, self.bn_shift]
        return ps

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"weight": self.weight.data, "bias": self.bias.data}
        if self.bn_scale is not None:
            out.update(bn_scale=self.bn_scale.data, bn_shift=self.bn_shift.data,
                       running_mean=self.stats.mean, running_var=self.stats.var)
        return out


@dataclass
class NetworkWeights:
    """Ordered named parameters of one autoencoder instance.

    ``meta`` carries small float vectors that travel with the checkpoint,
    such as the input normalisation statistics.
    """

    specs: list[LayerSpec]
    layers: dict[str, LayerParams]
    input_shape: tuple[int, int] = DEFAULT_INPUT_SHAPE
    meta: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple([self.specs[0].in_channels] + [s.out_channels for s in self.specs[:4]])

    @property
    def dtype(self):
        return self.layers["enc1"].weight.dtype

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers.values() for p in layer.parameters()]

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        items = [(f"{name}.{key}", arr) for name, layer in self.layers.items() for key, arr in layer.arrays().items()]
        items.append(("meta.input_shape", np.asarray(self.input_shape, dtype=np.float32)))
        items += [(f"meta.{k}", v) for k, v in sorted(self.meta.items())]
        return items

    def copy(self) -> "NetworkWeights":
        return copy.deepcopy(self)

    def set_requires_grad(self, flag: bool) -> "NetworkWeights":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.named_arrays():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def build_network(seed: int = 0, channels: Sequence[int] = DEFAULT_CHANNELS,
                  input_shape: tuple[int, int] = DEFAULT_INPUT_SHAPE, dtype=np.float32) -> NetworkWeights:
    """Instantiate the autoencoder with seeded fan-in-scaled uniform kernels.

    Kernels are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); for transposed
    convs fan_in counts the taps that actually reach one output pixel.
    Biases and batch-norm shifts start at zero, batch-norm scales at one.
    """
    if input_shape[0] % 16 or input_shape[1] % 16:
        raise ValueError("input height and width must be divisible by 16")
    rng = np.random.default_rng(seed)
    specs = architecture(channels)
    layers = {}
    for name, spec in zip(layer_names(), specs):
        k = spec.kernel
        if spec.kind == "conv":
            shape = (spec.out_channels, spec.in_channels, k, k)
            fan_in = spec.in_channels * k * k
        else:
            shape = (spec.in_channels, spec.out_channels, k, k)
            fan_in = spec.in_channels * k * k / spec.stride**2
        bound = 1.0 / np.sqrt(fan_in)
        weight = Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), True, f"{name}.weight")
        bias = Tensor(np.zeros(spec.out_channels, dtype=dtype), True, f"{name}.bias")
        layer = LayerParams(weight, bias)
        if spec.activation != "none":
            layer.bn_scale = Tensor(np.ones(spec.out_channels, dtype=dtype), True, f"{name}.bn_scale")
            layer.bn_shift = Tensor(np.zeros(spec.out_channels, dtype=dtype), True, f"{name}.bn_shift")
            layer.stats = RunningStats.fresh(spec.out_channels, dtype)
        layers[name] = layer
    return NetworkWeights(specs, layers, tuple(input_shape))


def _apply(layer: LayerParams, spec: LayerSpec, x: Tensor, train: bool) -> Tensor:
    op = conv2d if spec.kind == "conv" else conv_transpose2d
    y = op(x, layer.weight, layer.bias, spec.stride, spec.padding)
    if spec.activation == "none":
        return y
    return batchnorm2d(relu(y), layer.bn_scale, layer.bn_shift, layer.stats, train)


def _check_input(net: NetworkWeights, x: Tensor) -> None:
    h, w = net.input_shape
    if x.data.ndim != 4 or x.shape[1:] != (net.specs[0].in_channels, h, w):
        raise ShapeError(f"expected input [B,{net.specs[0].in_channels},{h},{w}], got {list(x.shape)}")


def encode(net: NetworkWeights, spec, train: bool = False) -> tuple[Tensor, list[Tensor]]:
    """Run the four conv layers; return the latent and all four activations."""
    x = as_tensor(spec)
    _check_input(net, x)
    acts = []
    for name, s in zip(layer_names()[:4], net.specs[:4]):
        x = _apply(net.layers[name], s, x, train)
        acts.append(x)
    return x, acts


def decode(net: NetworkWeights, latent, train: bool = False) -> Tensor:
    x = as_tensor(latent)
    h, w = net.input_shape
    expected = (net.specs[4].in_channels, h // 16, w // 16)
    if x.data.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"expected latent [B,{expected[0]},{expected[1]},{expected[2]}], got {list(x.shape)}")
    for name, s in zip(layer_names()[4:], net.specs[4:]):
        x = _apply(net.layers[name], s, x, train)
    return x


def forward(net: NetworkWeights, spec, train: bool = False) -> Tensor:
    latent, _ = encode(net, spec, train)
    return decode(net, latent, train)


stn_forward = forward


def content(net: NetworkWeights, spec) -> Tensor:
    """Latent embedding used as the content representation (eval mode)."""
    return encode(net, spec, train=False)[0]


@dataclass
class StyleRep:
    grams: list[Tensor]
    weights: tuple[float, ...] = STYLE_WEIGHTS

    def __post_init__(self):
        if len(self.grams) != len(self.weights):
            raise ValueError("one weight per gram required")
        if abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError("style weights must sum to 1")


def style(net: NetworkWeights, spec, weights: Sequence[float] = STYLE_WEIGHTS) -> StyleRep:
    """Normalised grams of the first three conv activations (eval mode)."""
    _, acts = encode(net, spec, train=False)
    return StyleRep([gram(a, normalize=True) for a in acts[:3]], tuple(weights))


def init_stn_from_loss_net(loss_net: NetworkWeights) -> NetworkWeights:
    stn = loss_net.copy()
    stn.set_requires_grad(True)
    return stn


# -- checkpoints -------------------------------------------------------------

MAGIC = b"ASTW"
VERSION = 1


class CheckpointError(Exception):
    code = "checkpoint"


class CheckpointFormatError(CheckpointError):
    code = "bad-format"


class CheckpointTruncatedError(CheckpointError):
    code = "truncated"


class CheckpointChecksumError(CheckpointError):
    code = "checksum"


class CheckpointShapeError(CheckpointError):
    code = "shape-mismatch"


def save_checkpoint(net: NetworkWeights, path) -> None:
    """Write ``net`` in the little-endian ASTW v1 format.

    Payloads are float32, so round-trips are bitwise only for float32 nets.
    """
    items = net.named_arrays()
    parts = [MAGIC, struct.pack("<II", VERSION, len(items))]
    crc = 0
    for name, arr in items:
        encoded = name.encode("utf-8")
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        payload = arr32.tobytes()
        crc = zlib.crc32(payload, crc)
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", arr32.ndim))
        parts.append(struct.pack(f"<{arr32.ndim}Q", *arr32.shape))
        parts.append(payload)
    parts.append(struct.pack("<I", crc))
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint_arrays(path) -> dict[str, np.ndarray]:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("missing ASTW magic")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    arrays: dict[str, np.ndarray] = {}
    crc = 0
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        payload = r.take(4 * int(np.prod(dims, dtype=np.int64)))
        crc = zlib.crc32(payload, crc)
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    (stored,) = r.unpack("<I")
    if stored != crc:
        raise CheckpointChecksumError("payload CRC32 mismatch")
    return arrays


def load_checkpoint(path) -> NetworkWeights:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Architecture widths are recovered from the kernel shapes and must form
    the autoencoder chain; anything else is a :class:`CheckpointShapeError`.
    """
    arrays = read_checkpoint_arrays(path)
    try:
        channels = [int(arrays["enc1.weight"].shape[1])]
        channels += [int(arrays[f"enc{i}.weight"].shape[0]) for i in range(1, 5)]
        input_shape = tuple(int(v) for v in arrays["meta.input_shape"])
    except (KeyError, IndexError) as exc:
        raise CheckpointShapeError(f"checkpoint lacks tensor {exc}") from None
    net = build_network(0, channels, input_shape)
    for name, layer in net.layers.items():
        for key, target in layer.arrays().items():
            full = f"{name}.{key}"
            if full not in arrays:
                raise CheckpointShapeError(f"checkpoint lacks tensor {full!r}")
            if arrays[full].shape != target.shape:
                raise CheckpointShapeError(f"{full}: shape {arrays[full].shape} != expected {target.shape}")
            target[...] = arrays[full]
    net.meta = {k[5:]: v for k, v in arrays.items() if k.startswith("meta.") and k != "meta.input_shape"}
    expected = {n for n, _ in net.named_arrays()}
    extra = set(arrays) - expected
    if extra:
        raise CheckpointShapeError(f"unexpected tensors {sorted(extra)}")
    return net
