"""Learnable layers over [batch, channel, frequency, time] activations.

Everything here is built from the autodiff primitives in `tensor`, except
`conv2d`, which registers its own vector-Jacobian product: the forward pass
lowers patches to a grouped matrix product (im2col), the weight gradient
reuses the lowered patches, and the input gradient scatters one strided
slice-add per kernel tap.

Convolutions carry no bias unless asked: every conv in this model is either
followed by a normalization layer or feeds a residual sum, which keeps the
parameter budget aligned with the published model sizes.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import InvalidArgument, ShapeError
from .tensor import DEFAULT_DTYPE, Tensor, primitive, relu, sigmoid, zeros, ones

MODES = ("train", "eval")


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise InvalidArgument(f"mode must be one of {MODES}, got {mode!r}")


def _pair(v):
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def he_uniform(rng, shape, fan_in: int, dtype) -> Tensor:
    """Fan-in scaled uniform init for layers feeding ReLUs."""
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(_rng(rng).uniform(-bound, bound, shape).astype(dtype),
                  requires_grad=True)


# ---------------------------------------------------------------------------
# convolution primitive

def conv_out_extent(extent: int, kernel: int, stride: int, dilation: int,
                    padding: int) -> int:
    return (extent + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, stride=(1, 1), dilation=(1, 1),
           padding=(0, 0), groups: int = 1) -> Tensor:
    """Cross-correlation with zero padding, stride, dilation, and groups.

    x: [N, C, F, T]; weight: [OC, C/groups, kf, kt] -> [N, OC, F', T'].
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {xd.shape} / {wd.shape}")
    n, c, f, t = xd.shape
    oc, cg, kf, kt = wd.shape
    g = int(groups)
    if g < 1 or oc % g or c != cg * g:
        raise ShapeError(
            f"conv2d channel/group mismatch: input C={c}, weight expects "
            f"{cg}*groups with groups={g}, out={oc}")
    sf, st = _pair(stride)
    df, dt = _pair(dilation)
    pf, pt = _pair(padding)
    fo = conv_out_extent(f, kf, sf, df, pf)
    to = conv_out_extent(t, kt, st, dt, pt)
    if fo < 1 or to < 1:
        raise ShapeError(
            f"conv2d geometry gives empty output: input {f}x{t}, kernel {kf}x{kt}, "
            f"stride ({sf},{st}), dilation ({df},{dt}), padding ({pf},{pt})")

    xp = np.pad(xd, ((0, 0), (0, 0), (pf, pf), (pt, pt))) if (pf or pt) else xd
    fp, tp = xp.shape[2], xp.shape[3]
    xg = xp.reshape(n, g, cg, fp, tp)
    s0, s1, s2, s3, s4 = xg.strides
    windows = np.lib.stride_tricks.as_strided(
        xg,
        shape=(n, g, cg, kf, kt, fo, to),
        strides=(s0, s1, s2, df * s3, dt * s4, sf * s3, st * s4),
        writeable=False)
    cols = windows.reshape(n, g, cg * kf * kt, fo * to)     # materializes
    w2 = wd.reshape(g, oc // g, cg * kf * kt)
    out = np.matmul(w2, cols).reshape(n, oc, fo, to)

    def vjp(gout):
        ocg = oc // g
        dy = gout.reshape(n, g, ocg, fo * to)
        dw = np.matmul(dy, cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(wd.shape)
        dxp = np.zeros((n, g, cg, fp, tp), dtype=xd.dtype)
        wtap = wd.reshape(g, ocg, cg, kf, kt)
        for i in range(kf):
            fs = slice(i * df, i * df + sf * (fo - 1) + 1, sf)
            for j in range(kt):
                ts = slice(j * dt, j * dt + st * (to - 1) + 1, st)
                contrib = np.matmul(wtap[:, :, :, i, j].transpose(0, 2, 1), dy)
                dxp[:, :, :, fs, ts] += contrib.reshape(n, g, cg, fo, to)
        dxp = dxp.reshape(n, c, fp, tp)
        dx = dxp[:, :, pf:pf + f, pt:pt + t] if (pf or pt) else dxp
        return dx, dw

    return primitive(out, (x, weight), vjp)


class Conv2d:
    """Conv layer owning its weight (He-uniform) and optional bias."""

    def __init__(self, in_channels, out_channels, kernel, stride=(1, 1),
                 dilation=(1, 1), padding=(0, 0), groups=1, bias=False,
                 rng=0, dtype=DEFAULT_DTYPE):
        kf, kt = _pair(kernel)
        if in_channels % groups or out_channels % groups:
            raise ShapeError(
                f"channels in={in_channels}/out={out_channels} not divisible by groups={groups}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kf, kt)
        self.stride = _pair(stride)
        self.dilation = _pair(dilation)
        self.padding = _pair(padding)
        self.groups = groups
        fan_in = (in_channels // groups) * kf * kt
        self.weight = he_uniform(rng, (out_channels, in_channels // groups, kf, kt),
                                 fan_in, dtype)
        self.bias = zeros([out_channels], dtype=dtype, requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight, self.stride, self.dilation, self.padding,
                     self.groups)
        if self.bias is not None:
            out = out + self.bias.reshape((1, self.out_channels, 1, 1))
        return out

    def named_params(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias

    def named_buffers(self):
        return ()


class Linear:
    """Fully connected layer: x [N, in] @ weight [in, out] + bias."""

    def __init__(self, in_features, out_features, bias=True, rng=0, dtype=DEFAULT_DTYPE):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = he_uniform(rng, (in_features, out_features), in_features, dtype)
        self.bias = zeros([out_features], dtype=dtype, requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out

    def named_params(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias

    def named_buffers(self):
        return ()


# ---------------------------------------------------------------------------
# normalization

class BatchNorm2d:
    """Per-channel batch norm over (N, F, T) with running statistics.

    Train mode normalizes by the biased (1/n) batch variance and folds the
    batch statistics into the running ones with momentum 0.1; eval mode uses
    the running statistics only.
    """

    def __init__(self, num_features, eps=1e-5, momentum=0.1, dtype=DEFAULT_DTYPE):
        self.num_features = num_features
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.gamma = ones([num_features], dtype=dtype, requires_grad=True)
        self.beta = zeros([num_features], dtype=dtype, requires_grad=True)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        _check_mode(mode)
        c = self.num_features
        if x.ndim != 4 or x.shape[1] != c:
            raise ShapeError(f"batchnorm over {c} channels got input {x.shape}")
        if x.shape[0] == 0:
            raise InvalidArgument("batchnorm needs a non-empty batch")
        if mode == "train":
            m = x.mean(axes=(0, 2, 3), keepdims=True)
            centered = x - m
            var = (centered * centered).mean(axes=(0, 2, 3), keepdims=True)
            xhat = centered * ((var + self.eps) ** -0.5)
            mom = self.momentum
            self.running_mean = ((1 - mom) * self.running_mean
                                 + mom * m.data.reshape(c)).astype(x.dtype)
            self.running_var = ((1 - mom) * self.running_var
                                + mom * var.data.reshape(c)).astype(x.dtype)
        else:
            mean_t = Tensor(self.running_mean.reshape(1, c, 1, 1))
            inv = (self.running_var.astype(np.float64) + self.eps) ** -0.5
            inv_t = Tensor(inv.reshape(1, c, 1, 1).astype(x.dtype))
            xhat = (x - mean_t) * inv_t
        return xhat * self.gamma.reshape((1, c, 1, 1)) + self.beta.reshape((1, c, 1, 1))

    def named_params(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def named_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var

    def set_buffer(self, name, value):
        if name == "running_mean":
            self.running_mean = value
        elif name == "running_var":
            self.running_var = value
        else:
            raise KeyError(name)


class SubSpectralNorm:
    """Batch norm applied independently to contiguous frequency groups.

    Splitting F into `subbands` groups and folding them into the channel
    axis gives each (channel, subband) pair its own statistics and affine
    parameters; `subbands=1` degenerates to plain BatchNorm2d.
    """

    def __init__(self, num_features, subbands, eps=1e-5, momentum=0.1,
                 dtype=DEFAULT_DTYPE):
        if subbands < 1:
            raise InvalidArgument(f"subbands must be >= 1, got {subbands}")
        self.num_features = num_features
        self.subbands = subbands
        self.bn = BatchNorm2d(num_features * subbands, eps, momentum, dtype)

    def forward(self, x: Tensor, mode: str) -> Tensor:
        n, c, f, t = x.shape
        if c != self.num_features:
            raise ShapeError(f"subspectral norm over {self.num_features} channels got {x.shape}")
        s = self.subbands
        if f % s:
            raise ShapeError(f"frequency extent {f} is not divisible by {s} subbands")
        y = x.reshape((n, c * s, f // s, t))
        y = self.bn.forward(y, mode)
        return y.reshape((n, c, f, t))

    def named_params(self):
        return self.bn.named_params()

    def named_buffers(self):
        return self.bn.named_buffers()

    def set_buffer(self, name, value):
        self.bn.set_buffer(name, value)


# ---------------------------------------------------------------------------
# attention

class SEBlock:
    """Channel gate: squeeze by the (F, T) mean, excite through two FC
    layers, multiply each channel by its sigmoid gate."""

    def __init__(self, channels, ratio=4, hidden_floor=4, rng=0, dtype=DEFAULT_DTYPE):
        self.channels = channels
        hidden = max(channels // ratio, hidden_floor)
        rng = _rng(rng)
        self.fc1 = Linear(channels, hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, channels, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        n, c, _, _ = x.shape
        if c != self.channels:
            raise ShapeError(f"SE block over {self.channels} channels got input {x.shape}")
        z = x.mean(axes=(2, 3))                       # [N, C]
        gate = sigmoid(self.fc2.forward(relu(self.fc1.forward(z))))
        return x * gate.reshape((n, c, 1, 1))

    def named_params(self):
        for name, p in self.fc1.named_params():
            yield f"fc1.{name}", p
        for name, p in self.fc2.named_params():
            yield f"fc2.{name}", p

    def named_buffers(self):
        return ()


class TfwSEBlock:
    """Per-time-frame frequency gate: squeeze by the channel mean, excite
    each frame's frequency vector through two shared FC layers."""

    def __init__(self, n_freq, ratio=4, hidden_floor=2, rng=0, dtype=DEFAULT_DTYPE):
        self.n_freq = n_freq
        hidden = max(n_freq // ratio, hidden_floor)
        rng = _rng(rng)
        self.fc1 = Linear(n_freq, hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, n_freq, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        n, _, f, t = x.shape
        if f != self.n_freq:
            raise ShapeError(f"tfwSE block over {self.n_freq} bins got input {x.shape}")
        z = x.mean(axes=(1,))                          # [N, F, T]
        frames = z.transpose((0, 2, 1)).reshape((n * t, f))
        gate = sigmoid(self.fc2.forward(relu(self.fc1.forward(frames))))
        gate = gate.reshape((n, t, f)).transpose((0, 2, 1)).reshape((n, 1, f, t))
        return x * gate

    def named_params(self):
        for name, p in self.fc1.named_params():
            yield f"fc1.{name}", p
        for name, p in self.fc2.named_params():
            yield f"fc2.{name}", p

    def named_buffers(self):
        return ()


class Dropout:
    """Inverted dropout: train mode zeroes elements with probability p and
    rescales survivors by 1/(1-p); eval mode is the identity."""

    def __init__(self, p: float = 0.1):
        if not 0.0 <= p < 1.0:
            raise InvalidArgument(f"dropout probability must be in [0, 1), got {p}")
        self.p = float(p)

    def forward(self, x: Tensor, mode: str, rng=None) -> Tensor:
        _check_mode(mode)
        if mode == "eval" or self.p == 0.0:
            return x
        if rng is None:
            raise InvalidArgument("dropout in train mode needs a seed or Generator")
        keep = _rng(rng).random(x.shape) >= self.p
        mask = keep.astype(x.dtype) / (1.0 - self.p)
        return x * Tensor(mask)

    def named_params(self):
        return ()

    def named_buffers(self):
        return ()


# ---------------------------------------------------------------------------
# broadcast-residual block

class BCResBlock:
    """Residual block mixing a 2D frequency path with a broadcast 1D
    temporal path.

    f2: frequency-depthwise 3x1 conv (stride on F for transitions) into
    subspectral norm. The f2 output is averaged over frequency, run through
    f1 (temporal-depthwise 1x3 conv with the stage dilation, batch norm,
    pointwise conv, dropout), and broadcast back across frequency into the
    residual sum; ReLU comes after the sum. Normal blocks keep the identity
    term; transition blocks first project channels with a pointwise conv +
    BN + ReLU and drop the identity.
    """

    def __init__(self, in_channels, out_channels, *, freq_stride=1,
                 temporal_dilation=1, ssn_subbands=5, dropout=0.1,
                 rng=0, dtype=DEFAULT_DTYPE):
        self.transition = (in_channels != out_channels) or (freq_stride != 1)
        self.out_channels = out_channels
        rng = _rng(rng)
        if self.transition:
            self.pre_pw = Conv2d(in_channels, out_channels, (1, 1), rng=rng, dtype=dtype)
            self.pre_bn = BatchNorm2d(out_channels, dtype=dtype)
        elif in_channels != out_channels:
            raise ShapeError(
                f"normal block needs matching channels, got {in_channels}->{out_channels}")
        c = out_channels
        td = int(temporal_dilation)
        self.freq_dw = Conv2d(c, c, (3, 1), stride=(freq_stride, 1), padding=(1, 0),
                              groups=c, rng=rng, dtype=dtype)
        self.ssn = SubSpectralNorm(c, ssn_subbands, dtype=dtype)
        self.temp_dw = Conv2d(c, c, (1, 3), dilation=(1, td), padding=(0, td),
                              groups=c, rng=rng, dtype=dtype)
        self.temp_bn = BatchNorm2d(c, dtype=dtype)
        self.pw = Conv2d(c, c, (1, 1), rng=rng, dtype=dtype)
        self.drop = Dropout(dropout)

    def forward(self, x: Tensor, mode: str, rng=None) -> Tensor:
        _check_mode(mode)
        if self.transition:
            x = relu(self.pre_bn.forward(self.pre_pw.forward(x), mode))
        f2 = self.ssn.forward(self.freq_dw.forward(x), mode)
        pooled = f2.mean(axes=(2,), keepdims=True)             # [N, C, 1, T]
        f1 = self.temp_bn.forward(self.temp_dw.forward(pooled), mode)
        f1 = self.drop.forward(self.pw.forward(f1), mode, rng)
        if self.transition:
            y = f2 + f1                                        # f1 broadcast over F
        else:
            if f2.shape != x.shape:
                raise ShapeError(
                    f"normal block residual mismatch: input {x.shape} vs f2 {f2.shape}")
            y = x + f2 + f1
        return relu(y)

    def _children(self):
        if self.transition:
            yield "pre_pw", self.pre_pw
            yield "pre_bn", self.pre_bn
        yield "freq_dw", self.freq_dw
        yield "ssn", self.ssn
        yield "temp_dw", self.temp_dw
        yield "temp_bn", self.temp_bn
        yield "pw", self.pw

    def named_params(self):
        for prefix, child in self._children():
            for name, p in child.named_params():
                yield f"{prefix}.{name}", p

    def named_buffers(self):
        for prefix, child in self._children():
            for name, b in child.named_buffers():
                yield f"{prefix}.{name}", b

    def set_buffer(self, name, value):
        prefix, rest = name.split(".", 1)
        dict(self._children())[prefix].set_buffer(rest, value)
