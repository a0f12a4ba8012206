"""BC-SENet assembly, scaling, parameter audit, and checkpoint files.

The network reads a [N, 1, 40, T] log-mel map through:

  stem    5x5 conv, stride (2,1), 16t channels, BN + ReLU      F: 40 -> 20
  stage1  transition(16t->8t, stride 1) + 1 normal, dilation 1 F: 20
  stage2  transition(stride (2,1)) + 1 normal, 12t, dilation 2 F: 20 -> 10
  stage3  transition(stride (2,1)) + 3 normal, 16t, dilation 4 F: 10 -> 5
  stage4  transition(stride 1) + 3 normal, 20t, dilation 8     F: 5
  head    5x5 depthwise (pad (0,2)) -> 1x1 to 32t + BN + ReLU,
          global mean over (F, T), linear to num_classes

With attention enabled, a per-frame frequency gate (tfwSE) follows stages 1
and 2 (where frequency resolution is still high) and a channel gate (SE)
follows stages 3 and 4. `tau` scales every channel count; `attention_mode
= "none"` recovers the plain broadcast-residual baseline.

Checkpoints are little-endian binary: magic "BCSE", format version, the
config as JSON, named float32 tensors (parameters and running statistics),
optional optimizer state, and a trailing CRC32 of everything before it.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CheckpointError, InvalidArgument, ShapeError
from .layers import (BatchNorm2d, BCResBlock, Conv2d, Linear, SEBlock,
                     TfwSEBlock, _check_mode, _rng, conv_out_extent, relu)
from .tensor import DEFAULT_DTYPE, Tensor

CHECKPOINT_MAGIC = b"BCSE"
CHECKPOINT_VERSION = 1

ATTENTION_MODES = ("none", "se_tfwse")

# (base channels, blocks in stage, frequency stride, temporal dilation)
STAGE_SPECS = ((8, 2, 1, 1), (12, 2, 2, 2), (16, 4, 2, 4), (20, 4, 1, 8))
STEM_BASE = 16
HEAD_BASE = 32


@dataclass
class ModelConfig:
    """Everything needed to rebuild a model deterministically."""

    tau: float = 1
    num_classes: int = 12
    ssn_subbands: int = 5
    se_ratio: int = 4
    attention_mode: str = "se_tfwse"
    n_mels: int = 40
    time_frames: int = 98          # nominal input width; forward accepts any T
    dropout: float = 0.1
    seed: int = 0
    labels: tuple | None = None

    def validate(self):
        if self.tau <= 0:
            raise InvalidArgument(f"tau must be positive, got {self.tau}")
        if self.num_classes < 2:
            raise InvalidArgument(f"num_classes must be >= 2, got {self.num_classes}")
        if self.attention_mode not in ATTENTION_MODES:
            raise InvalidArgument(
                f"attention_mode must be one of {ATTENTION_MODES}, got {self.attention_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgument(f"dropout must be in [0, 1), got {self.dropout}")
        if self.labels is not None and len(self.labels) != self.num_classes:
            raise InvalidArgument(
                f"{len(self.labels)} labels given for {self.num_classes} classes")
        return self


def scaled_channels(tau, base: int) -> int:
    """Width scaling; non-integer products round to nearest."""
    return max(1, round(base * tau))


class BCSENet:
    """The assembled network. Build once, then call `forward`."""

    def __init__(self, config: ModelConfig, dtype=DEFAULT_DTYPE):
        self.config = config.validate()
        self.dtype = dtype
        rng = _rng(config.seed)
        tau = config.tau
        s = config.ssn_subbands

        stem_ch = scaled_channels(tau, STEM_BASE)
        self.stem_conv = Conv2d(1, stem_ch, (5, 5), stride=(2, 1), padding=(2, 2),
                                rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm2d(stem_ch, dtype=dtype)

        freq = conv_out_extent(config.n_mels, 5, 2, 1, 2)
        in_ch = stem_ch
        self.stages = []
        self.attention = []
        for base, n_blocks, stride, dilation in STAGE_SPECS:
            out_ch = scaled_channels(tau, base)
            blocks = []
            for b in range(n_blocks):
                blocks.append(BCResBlock(
                    in_ch if b == 0 else out_ch, out_ch,
                    freq_stride=stride if b == 0 else 1,
                    temporal_dilation=dilation, ssn_subbands=s,
                    dropout=config.dropout, rng=rng, dtype=dtype))
                in_ch = out_ch
            freq = conv_out_extent(freq, 3, stride, 1, 1)
            if freq < 1 or freq % s:
                raise InvalidArgument(
                    f"model geometry invalid: frequency extent {freq} after a stage "
                    f"is not divisible by {s} subbands (n_mels={config.n_mels})")
            self.stages.append(blocks)
            if config.attention_mode == "se_tfwse":
                if base in (8, 12):     # early stages: frequency-resolved gates
                    self.attention.append(TfwSEBlock(freq, config.se_ratio,
                                                     rng=rng, dtype=dtype))
                else:                   # late stages: channel gates
                    self.attention.append(SEBlock(out_ch, config.se_ratio,
                                                  rng=rng, dtype=dtype))
            else:
                self.attention.append(None)

        if freq < 5:
            raise InvalidArgument(f"frequency extent {freq} too small for the 5x5 head")
        head_in = in_ch
        head_ch = scaled_channels(tau, HEAD_BASE)
        self.head_dw = Conv2d(head_in, head_in, (5, 5), padding=(0, 2),
                              groups=head_in, rng=rng, dtype=dtype)
        self.head_pw = Conv2d(head_in, head_ch, (1, 1), rng=rng, dtype=dtype)
        self.head_bn = BatchNorm2d(head_ch, dtype=dtype)
        self.classifier = Linear(head_ch, config.num_classes, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, mode: str = "eval", rng=None) -> Tensor:
        """Features [N, 1, n_mels, T] -> logits [N, num_classes]."""
        _check_mode(mode)
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != self.config.n_mels:
            raise ShapeError(
                f"expected input [N, 1, {self.config.n_mels}, T], got {x.shape}")
        if mode == "train" and self.config.dropout > 0:
            rng = _rng(rng if rng is not None else self.config.seed)
        out = relu(self.stem_bn.forward(self.stem_conv.forward(x), mode))
        for blocks, att in zip(self.stages, self.attention):
            for blk in blocks:
                out = blk.forward(out, mode, rng)
            if att is not None:
                out = att.forward(out)
        out = self.head_dw.forward(out)
        out = relu(self.head_bn.forward(self.head_pw.forward(out), mode))
        out = out.mean(axes=(2, 3))
        return self.classifier.forward(out)

    # -- parameter bookkeeping ------------------------------------------------

    def _children(self):
        yield "stem.conv", self.stem_conv
        yield "stem.bn", self.stem_bn
        for i, blocks in enumerate(self.stages, start=1):
            for j, blk in enumerate(blocks):
                yield f"stage{i}.block{j}", blk
            if self.attention[i - 1] is not None:
                yield f"stage{i}.att", self.attention[i - 1]
        yield "head.dw", self.head_dw
        yield "head.pw", self.head_pw
        yield "head.bn", self.head_bn
        yield "head.fc", self.classifier

    def named_params(self):
        """Learnable tensors only (weights, biases, gamma, beta)."""
        for prefix, child in self._children():
            for name, p in child.named_params():
                yield f"{prefix}.{name}", p

    def named_buffers(self):
        """Non-learnable state: running statistics."""
        for prefix, child in self._children():
            for name, b in child.named_buffers():
                yield f"{prefix}.{name}", b

    def set_buffer(self, name: str, value: np.ndarray):
        for prefix, child in self._children():
            if name.startswith(prefix + "."):
                child.set_buffer(name[len(prefix) + 1:], value)
                return
        raise KeyError(name)

    def count_params(self) -> int:
        return sum(p.size for _, p in self.named_params())


def build_model(config: ModelConfig, dtype=DEFAULT_DTYPE) -> BCSENet:
    return BCSENet(config, dtype)


def count_params(config: ModelConfig) -> int:
    """Learnable parameter count implied by a config."""
    return build_model(config).count_params()


# ---------------------------------------------------------------------------
# checkpoint format

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    payload = np.ascontiguousarray(arr, dtype="<f4")
    head = _pack_str(name) + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + payload.tobytes()


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def tensor(self):
        name = self.string()
        rank = self.u32()
        shape = struct.unpack(f"<{rank}I", self.take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape)
        return name, data.copy()


def save_checkpoint(model: BCSENet, path, optim_state: dict | None = None) -> None:
    """Write config + parameters + running stats (+ optional optimizer
    slots) with a trailing CRC32."""
    cfg = asdict(model.config)
    if cfg.get("labels") is not None:
        cfg["labels"] = list(cfg["labels"])
    tensors = list(model.named_params()) + list(model.named_buffers())

    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    out += _pack_str(json.dumps(cfg, sort_keys=True))
    out += struct.pack("<I", len(tensors))
    for name, t in tensors:
        out += _pack_tensor(name, t.data if isinstance(t, Tensor) else t)
    if optim_state is None:
        out += struct.pack("<B", 0)
    else:
        out += struct.pack("<B", 1)
        out += _pack_str(optim_state["kind"])
        out += struct.pack("<I", int(optim_state["step"]))
        slots = optim_state["slots"]
        out += struct.pack("<I", len(slots))
        for name in sorted(slots):
            out += _pack_tensor(name, slots[name])
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    with open(path, "wb") as f:
        f.write(bytes(out))


def load_checkpoint(path, dtype=DEFAULT_DTYPE):
    """Rebuild the model stored at `path`; returns (model, optim_state).

    The embedded config wins over whatever the caller expected; every tensor
    the architecture defines must be present.
    """
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 12 or buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    stored_crc = struct.unpack("<I", buf[-4:])[0]
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")

    r = _Reader(buf[:-4], path)
    r.take(4)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    cfg_dict = json.loads(r.string())
    if cfg_dict.get("labels") is not None:
        cfg_dict["labels"] = tuple(cfg_dict["labels"])
    config = ModelConfig(**cfg_dict)
    model = BCSENet(config, dtype)

    stored = {}
    for _ in range(r.u32()):
        name, data = r.tensor()
        stored[name] = data

    optim_state = None
    if r.u8():
        kind = r.string()
        step = r.u32()
        slots = {}
        for _ in range(r.u32()):
            name, data = r.tensor()
            slots[name] = data.astype(dtype)
        optim_state = {"kind": kind, "step": step, "slots": slots}

    expected = dict(model.named_params())
    buffers = dict(model.named_buffers())
    for name in list(expected) + list(buffers):
        if name not in stored:
            raise CheckpointError(f"{path}: incomplete checkpoint, missing tensor {name!r}")
    for name in stored:
        if name not in expected and name not in buffers:
            raise CheckpointError(f"{path}: unexpected tensor {name!r}")
    for name, p in expected.items():
        if stored[name].shape != p.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {stored[name].shape}, "
                f"expected {p.shape}")
        p.data = stored[name].astype(dtype)
    for name, b in buffers.items():
        model.set_buffer(name, stored[name].reshape(b.shape).astype(dtype))
    return model, optim_state
