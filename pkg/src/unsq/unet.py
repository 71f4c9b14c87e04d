"""The 5-level U-net family, parameterized by starting channel depth.

Level ``l`` of the contracting path has ``C * 2**l`` channels, so the bottom
level carries ``16 * C``. Each level is two 3x3 convolutions with ReLU (and,
optionally on the contracting path, batch normalization between conv and
ReLU). The expansive path up-convolves, halving channels, concatenates the
skip connection and applies two more 3x3 convolutions. A 1x1 head produces
two class logits.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .layers import (BatchNormParams, ConvParams, batch_norm2d, concat_channels, conv2d,
                     conv_transpose2d, max_pool2d)
from .tensor import Tensor, relu

LEVELS = 5
MULTIPLE = 2 ** (LEVELS - 1)


@dataclass(frozen=True)
class UnetConfig:
    start_channels: int = 64
    in_channels: int = 1
    out_classes: int = 2
    batch_norm_contracting: bool = False
    levels: int = LEVELS
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5
    dtype: str = "float64"

    def __post_init__(self):
        if self.start_channels < 1:
            raise ValueError("start_channels must be >= 1")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.levels != LEVELS:
            raise ValueError(f"only {LEVELS}-level U-nets are supported")
        if self.out_classes != 2:
            raise ValueError("the segmentation head is binary (2 classes)")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")

    @property
    def widths(self) -> list[int]:
        return [self.start_channels * 2 ** level for level in range(self.levels)]


@dataclass
class DownBlock:
    conv1: ConvParams
    conv2: ConvParams
    bn1: BatchNormParams | None = None
    bn2: BatchNormParams | None = None


@dataclass
class UpBlock:
    upconv: ConvParams
    conv1: ConvParams
    conv2: ConvParams


class CheckpointError(Exception):
    """Base class for checkpoint read failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class UnetModel:
    def __init__(self, config: UnetConfig, down: list[DownBlock], up: list[UpBlock],
                 head: ConvParams, seed: int | None = None):
        self.config = config
        self.down = down
        self.up = up
        self.head = head
        self.seed = seed

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, blk in enumerate(self.down):
            for j, (conv, bn) in enumerate(((blk.conv1, blk.bn1), (blk.conv2, blk.bn2)), start=1):
                out += [(f"down{i}.conv{j}.weight", conv.weight), (f"down{i}.conv{j}.bias", conv.bias)]
                if bn is not None:
                    out += [(f"down{i}.bn{j}.gamma", bn.gamma), (f"down{i}.bn{j}.beta", bn.beta)]
        for i, blk in enumerate(self.up):
            level = len(self.up) - 1 - i
            for part in ("upconv", "conv1", "conv2"):
                conv = getattr(blk, part)
                out += [(f"up{level}.{part}.weight", conv.weight), (f"up{level}.{part}.bias", conv.bias)]
        out += [("head.weight", self.head.weight), ("head.bias", self.head.bias)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def batch_norms(self) -> list[tuple[str, BatchNormParams]]:
        out = []
        for i, blk in enumerate(self.down):
            for j, bn in ((1, blk.bn1), (2, blk.bn2)):
                if bn is not None:
                    out.append((f"down{i}.bn{j}", bn))
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, bn in self.batch_norms():
            out += [(f"{name}.running_mean", bn.running_mean), (f"{name}.running_var", bn.running_var)]
        return out

    def conv_layers(self) -> list[tuple[str, ConvParams]]:
        """Every convolution with a role tag: ``down``, ``upconv``, ``up`` or ``head``."""
        out = []
        for blk in self.down:
            out += [("down", blk.conv1), ("down", blk.conv2)]
        for blk in self.up:
            out += [("upconv", blk.upconv), ("up", blk.conv1), ("up", blk.conv2)]
        out.append(("head", self.head))
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data.copy() for name, t in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = {name: t.data for name, t in self.named_parameters()}
        targets.update(dict(self.named_buffers()))
        missing = set(targets) - set(state)
        extra = set(state) - set(targets)
        if missing or extra:
            raise CheckpointShapeError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, arr in targets.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise CheckpointShapeError(f"{name}: shape {src.shape} vs expected {arr.shape}")
            arr[...] = src

    def fingerprint(self) -> str:
        """SHA-256 over config and all parameter/buffer bytes."""
        h = hashlib.sha256(json.dumps(asdict(self.config), sort_keys=True).encode())
        for name, arr in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def __call__(self, batch, mode: str = "train") -> Tensor:
        return forward(self, batch, mode)


def _conv(rng: np.random.Generator, c_in: int, c_out: int, k: int, dtype) -> ConvParams:
    std = np.sqrt(2.0 / (k * k * c_in))
    weight = rng.normal(0.0, std, size=(c_out, c_in, k, k)).astype(dtype)
    return ConvParams(Tensor(weight, requires_grad=True),
                      Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True))


def build(config: UnetConfig, seed: int = 0) -> UnetModel:
    """He-initialized U-net; identical seeds give bit-identical parameters."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    widths = config.widths

    def bn(c):
        if not config.batch_norm_contracting:
            return None
        return BatchNormParams.create(c, dtype, config.bn_momentum, config.bn_epsilon)

    down = []
    prev = config.in_channels
    for w in widths:
        down.append(DownBlock(_conv(rng, prev, w, 3, dtype), _conv(rng, w, w, 3, dtype), bn(w), bn(w)))
        prev = w
    up = []
    for w in reversed(widths[:-1]):
        up.append(UpBlock(_conv(rng, 2 * w, w, 2, dtype), _conv(rng, 2 * w, w, 3, dtype),
                          _conv(rng, w, w, 3, dtype)))
    head = _conv(rng, widths[0], config.out_classes, 1, dtype)
    return UnetModel(config, down, up, head, seed)


def check_input_dims(h: int, w: int) -> None:
    if h % MULTIPLE or w % MULTIPLE:
        raise ValueError(f"input spatial dims {h}x{w} must be multiples of {MULTIPLE}")


def forward(model: UnetModel, batch, mode: str = "train") -> Tensor:
    """Logits ``(n, 2, h, w)`` for a batch ``(n, in_channels, h, w)``.

    Eval mode uses batch-norm running statistics and changes no state.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = batch if isinstance(batch, Tensor) else Tensor(batch, dtype=model.config.dtype)
    if x.data.ndim != 4 or x.shape[1] != model.config.in_channels:
        raise ValueError(f"expected input (n, {model.config.in_channels}, h, w), got {x.shape}")
    check_input_dims(x.shape[2], x.shape[3])
    if x.dtype != np.dtype(model.config.dtype):
        x = Tensor(x.data.astype(model.config.dtype), _validate=False)

    skips = []
    h = x
    last = len(model.down) - 1
    for level, blk in enumerate(model.down):
        for conv, bn in ((blk.conv1, blk.bn1), (blk.conv2, blk.bn2)):
            h = conv2d(h, conv)
            if bn is not None:
                h = batch_norm2d(h, bn, mode)
            h = relu(h)
        if level < last:
            skips.append(h)
            h, _ = max_pool2d(h)
    for blk, skip in zip(model.up, reversed(skips)):
        h = conv_transpose2d(h, blk.upconv)
        h = concat_channels(skip, h)
        h = relu(conv2d(h, blk.conv1))
        h = relu(conv2d(h, blk.conv2))
    return conv2d(h, model.head)


# --- parameter counting --------------------------------------------------

COUNT_MODES = ("plain", "paper-compat")


def count_params(config: UnetConfig, mode: str = "plain") -> int:
    """Closed-form trainable-parameter count.

    ``plain``: conv weights and biases, plus gamma/beta at each contracting-path
    batch norm when enabled. ``paper-compat``: conv weights and biases plus two
    per-channel parameters on every 3x3 convolution of both paths, which is the
    accounting that reproduces the published U-net sizes (31,042,434 at C=64).
    """
    if mode not in COUNT_MODES:
        raise ValueError(f"mode must be one of {COUNT_MODES}")
    c, cin = config.start_channels, config.in_channels
    k = config.out_classes
    # contracting: 9*(cin*C + C*C) + 2C at level 0, then 9*(C_l/2*C_l + C_l^2) + 2C_l
    # expansive per level (width W): 4*2W*W + W + 9*(2W*W + W*W) + 2W
    # head: C*k + k
    # Summed over widths C*2^l these collapse to polynomials in C.
    down = 9 * cin * c + c + 9 * c * c + c
    for level in range(1, LEVELS):
        w = c * 2 ** level
        down += 9 * (w // 2) * w + w + 9 * w * w + w
    up = 0
    for level in range(LEVELS - 1):
        w = c * 2 ** level
        up += 8 * w * w + w + 27 * w * w + 2 * w
    total = down + up + c * k + k
    down_channels = 2 * sum(c * 2 ** level for level in range(LEVELS))
    up_channels = 2 * sum(c * 2 ** level for level in range(LEVELS - 1))
    if mode == "paper-compat":
        return total + 2 * (down_channels + up_channels)
    if config.batch_norm_contracting:
        total += 2 * down_channels
    return total


def enumerate_params(model: UnetModel, mode: str = "plain") -> int:
    """Runtime count of a built model's trainable tensors under ``mode``."""
    if mode not in COUNT_MODES:
        raise ValueError(f"mode must be one of {COUNT_MODES}")
    total = model.num_parameters()
    if mode == "paper-compat":
        # 3x3 convs without their own BN get 2 per-channel parameters added
        has_bn = set()
        for blk in model.down:
            if blk.bn1 is not None:
                has_bn.update({id(blk.conv1), id(blk.conv2)})
        for _, conv in model.conv_layers():
            if conv.kernel == (3, 3) and id(conv) not in has_bn:
                total += 2 * conv.c_out
    return total


# --- checkpoints ---------------------------------------------------------

MAGIC = b"UNSQCKPT"
FORMAT_VERSION = 1
TRAILER = b"UNSQEND!"


def _checkpoint_bytes(model: UnetModel, metadata: dict | None = None) -> bytes:
    header = {"config": asdict(model.config), "seed": model.seed, "metadata": metadata or {}}
    hb = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(hb)))
    buf.write(hb)
    entries = [(n, t.data) for n, t in model.named_parameters()] + model.named_buffers()
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    buf.write(TRAILER)
    return buf.getvalue()


def save_checkpoint(model: UnetModel, path, metadata: dict | None = None) -> Path:
    """Write ``model`` atomically (temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_checkpoint_bytes(model, metadata))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.data)}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[UnetModel, dict]:
    """Load a checkpoint, returning the model and its metadata record."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a U-net checkpoint (bad magic)")
    version, hlen = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    header = json.loads(r.take(hlen))
    config = UnetConfig(**header["config"])
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape)
    if r.take(len(TRAILER)) != TRAILER:
        raise CheckpointTruncatedError(f"{path}: missing end marker")

    model = build(config, seed=header.get("seed") or 0)
    model.seed = header.get("seed")
    model.load_state_dict(state)
    return model, header.get("metadata", {})


def load_checkpoint(path) -> UnetModel:
    return read_checkpoint(path)[0]
