"""Residual CNN mapping a (2, t, 128) feature segment to a fixed-size embedding."""

from __future__ import annotations

import io
import json
import os
import struct
import zipfile
from dataclasses import asdict, dataclass

import numpy as np

from .tensor_nn import (
    DEFAULT_DTYPE,
    AdaptiveAvgPool2d,
    BatchNorm2d,
    ContractError,
    Conv2d,
    LeakyReLU,
    MaxPool2x2,
    Parameter,
)

CHECKPOINT_VERSION = 1
MIN_FRAMES = 8


class CheckpointError(RuntimeError):
    """Raised when a checkpoint cannot be loaded into the requested model."""


@dataclass(frozen=True)
class EncoderConfig:
    block_channels: tuple[int, ...] = (64, 128, 64)
    convs_per_block: int = 3
    adaptive_out: tuple[int, int] = (4, 8)
    leaky_slope: float = 0.01
    in_channels: int = 2
    n_freq: int = 128

    @property
    def embedding_dim(self) -> int:
        return self.block_channels[-1] * self.adaptive_out[0] * self.adaptive_out[1]

    def to_dict(self):
        d = asdict(self)
        d["block_channels"] = list(self.block_channels)
        d["adaptive_out"] = list(self.adaptive_out)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["block_channels"] = tuple(d["block_channels"])
        d["adaptive_out"] = tuple(d["adaptive_out"])
        return cls(**d)


class ConvBlock:
    """[conv3x3 -> bn -> leaky relu] x n, plus a 1x1 conv shortcut, then 2x2 max pool.

    The shortcut output is added after the last activation. The 3x3 convs
    carry no bias because the batch norm that follows cancels it.
    """

    def __init__(self, name, in_ch, out_ch, n_convs, slope, dtype):
        self.layers = []
        ch = in_ch
        for k in range(n_convs):
            self.layers += [
                Conv2d(f"{name}.conv{k + 1}", ch, out_ch, 3, padding=1, bias=False, dtype=dtype),
                BatchNorm2d(f"{name}.bn{k + 1}", out_ch, dtype=dtype),
                LeakyReLU(slope),
            ]
            ch = out_ch
        self.shortcut = Conv2d(f"{name}.shortcut", in_ch, out_ch, 1, bias=True, dtype=dtype)
        self.pool = MaxPool2x2()

    def forward(self, x):
        h = x
        for layer in self.layers:
            h = layer.forward(h)
        h = h + self.shortcut.forward(x)
        return self.pool.forward(h)

    def backward(self, dy):
        dh = self.pool.backward(dy)
        dx = self.shortcut.backward(dh)
        for layer in reversed(self.layers):
            dh = layer.backward(dh)
        return dx + dh

    def all_layers(self):
        return self.layers + [self.shortcut]


class Encoder:
    """Three residual conv blocks, adaptive average pooling and flatten.

    ``forward`` takes a batch (B, 2, t, 128) and returns (B, embedding_dim).
    Call :meth:`train` / :meth:`eval` to switch batch-norm behaviour.
    """

    def __init__(self, config: EncoderConfig = EncoderConfig(), dtype=DEFAULT_DTYPE):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.blocks = []
        ch = config.in_channels
        for b, out_ch in enumerate(config.block_channels):
            self.blocks.append(ConvBlock(f"block{b + 1}", ch, out_ch, config.convs_per_block,
                                         config.leaky_slope, self.dtype))
            ch = out_ch
        self.head = AdaptiveAvgPool2d(*config.adaptive_out)
        self._out_shape = None
        self.training = True

    # -- bookkeeping -----------------------------------------------------
    def _layers(self):
        for block in self.blocks:
            yield from block.all_layers()

    def parameters(self) -> list[Parameter]:
        return [p for layer in self._layers() for p in layer.parameters()]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self._layers():
            out.update(layer.buffers())
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.value for name, p in self.named_parameters().items()}
        state.update(self.buffers())
        return state

    def load_state_dict(self, state):
        targets = {name: p.value for name, p in self.named_parameters().items()}
        targets.update(self.buffers())
        missing = set(targets) - set(state)
        if missing:
            raise CheckpointError(f"checkpoint lacks parameter {sorted(missing)[0]}")
        for name, arr in targets.items():
            src = np.asarray(state[name])
            if src.shape != arr.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: checkpoint {src.shape}, model {arr.shape}")
        for name, arr in targets.items():
            arr[...] = state[name]

    def train(self):
        self._set_mode(True)
        return self

    def eval(self):
        self._set_mode(False)
        return self

    def _set_mode(self, training):
        self.training = training
        for layer in self._layers():
            if isinstance(layer, BatchNorm2d):
                layer.training = training

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- compute ---------------------------------------------------------
    def forward(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ContractError(f"encoder expects (B, {self.config.in_channels}, t, F), got {x.shape}")
        if x.shape[2] < MIN_FRAMES:
            raise ContractError(f"segment has {x.shape[2]} frames, need at least {MIN_FRAMES}")
        if x.shape[3] != self.config.n_freq:
            raise ContractError(f"segment has {x.shape[3]} frequency bins, need {self.config.n_freq}")
        h = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
        for block in self.blocks:
            h = block.forward(h)
        h = self.head.forward(h).transpose(0, 3, 1, 2)
        self._out_shape = h.shape
        # flattened in (C, T, F) order
        return h.reshape(h.shape[0], -1)

    def backward(self, demb):
        """Gradient w.r.t. the (B, 2, t, F) input given the embedding gradient."""
        dh = demb.reshape(self._out_shape).astype(self.dtype, copy=False)
        dh = self.head.backward(np.ascontiguousarray(dh.transpose(0, 2, 3, 1)))
        for block in reversed(self.blocks):
            dh = block.backward(dh)
        return dh.transpose(0, 3, 1, 2)

    def embed(self, segments, batch_size=64):
        """Eval-mode embeddings of ``segments`` (B, 2, t, F), computed in chunks."""
        was_training = self.training
        self.eval()
        try:
            out = [self.forward(segments[i:i + batch_size])
                   for i in range(0, len(segments), batch_size)]
        finally:
            self._set_mode(was_training)
        if not out:
            return np.zeros((0, self.config.embedding_dim), self.dtype)
        return np.concatenate(out, axis=0)


def init_parameters(config: EncoderConfig = EncoderConfig(), seed: int = 0,
                    dtype=DEFAULT_DTYPE) -> Encoder:
    """Kaiming-uniform (fan-in, leaky-ReLU gain) conv weights, zero biases, unit BN scale."""
    enc = Encoder(config, dtype)
    rng = np.random.default_rng(seed)
    gain = np.sqrt(2.0 / (1.0 + config.leaky_slope ** 2))
    for layer in enc._layers():
        if isinstance(layer, Conv2d):
            w = layer.weight.value
            fan_in = w.shape[0] * w.shape[1] * w.shape[2]
            bound = gain * np.sqrt(3.0 / fan_in)
            w[...] = rng.uniform(-bound, bound, size=w.shape)
    return enc


# ---------------------------------------------------------------------------
# checkpoints
#
# A checkpoint is a zip archive holding ``meta.json`` (format version, encoder
# config, tensor index) and ``tensors.bin``. The blob is the concatenation of,
# per tensor in index order: uint32 name length, UTF-8 name, uint32 ndim,
# ndim x uint32 shape, float32 little-endian row-major values.


def _pack_tensors(state):
    buf = io.BytesIO()
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr32.ndim))
        buf.write(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
        buf.write(arr32.tobytes())
    return buf.getvalue()


def _unpack_tensors(blob):
    out = {}
    pos = 0
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if pos + 4 * count > len(blob):
                raise CheckpointError(f"truncated payload for {name}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated tensor blob: {exc}") from exc
    return out


def save_checkpoint(encoder: Encoder, path, extra: dict | None = None,
                    extra_tensors: dict | None = None):
    """Write parameters and batch-norm statistics atomically to ``path``.

    ``extra_tensors`` (e.g. optimiser moments) are stored alongside and
    ignored by :func:`load_checkpoint`.
    """
    state = dict(encoder.state_dict())
    state.update(extra_tensors or {})
    meta = {
        "version": CHECKPOINT_VERSION,
        "encoder": encoder.config.to_dict(),
        "tensors": list(state),
        "extra": extra or {},
    }
    tmp = f"{path}.tmp"
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("meta.json", json.dumps(meta, indent=1, sort_keys=True))
        zf.writestr("tensors.bin", _pack_tensors(state))
    os.replace(tmp, path)


def read_checkpoint(path):
    """Return ``(meta, tensors)`` without building a model."""
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            blob = zf.read("tensors.bin")
    except (zipfile.BadZipFile, KeyError, OSError, EOFError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    tensors = _unpack_tensors(blob)
    missing = [n for n in meta["tensors"] if n not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameter {missing[0]}")
    return meta, tensors


def load_checkpoint(path, config: EncoderConfig | None = None, dtype=DEFAULT_DTYPE) -> Encoder:
    """Build an encoder from ``path``.

    When ``config`` is given the stored tensors must fit it; otherwise the
    stored config is used.
    """
    meta, tensors = read_checkpoint(path)
    stored = EncoderConfig.from_dict(meta["encoder"])
    if config is not None and config != stored:
        # pooling sizes carry no weights, so compare configs as well as shapes
        diff = [k for k, v in config.to_dict().items() if stored.to_dict()[k] != v]
        raise CheckpointError(f"checkpoint config differs from the requested model in {', '.join(diff)}")
    enc = Encoder(config or stored, dtype)
    enc.load_state_dict(tensors)
    return enc
