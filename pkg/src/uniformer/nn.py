"""Differentiable neural building blocks on top of the tensor engine.

Provides the grouped 3D convolution primitive (covering pointwise and
depthwise cases), batch/layer normalization for the channels-first video
layout [B, C, T, H, W], GELU/softmax/linear helpers, stochastic depth, and
a minimal Module system for parameter bookkeeping.

All layers are pure functions of their inputs except batchnorm running
statistics, which are updated in train mode and therefore need exclusive
access; eval-mode layers are safe for concurrent use.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float64) -> np.ndarray:
    """Normal draws with resampling outside two standard deviations."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype, copy=False)


class Parameter(Tensor):
    """Learnable tensor. ``decay`` marks eligibility for weight decay."""

    def __init__(self, data, decay: bool = True):
        super().__init__(data, requires_grad=True)
        self.decay = decay


class Module:
    """Tiny container with named parameters, buffers, and a train flag."""

    def __init__(self):
        self.training = True

    def _components(self):
        for name, value in self.__dict__.items():
            yield name, value

    def modules(self):
        """Depth-first iteration over self and all submodules."""
        yield self
        for _, value in self._components():
            if isinstance(value, Module):
                yield from value.modules()

    def named_parameters(self, prefix: str = ""):
        for name, value in self._components():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")

    def named_buffer_owners(self, prefix: str = ""):
        """Yields (full name, owning module, attribute) for each buffer."""
        for name, value in self._components():
            if isinstance(value, Module):
                yield from value.named_buffer_owners(f"{prefix}{name}.")
        for name in getattr(self, "_buffer_names", ()):
            yield f"{prefix}{name}", self, name

    def named_buffers(self, prefix: str = ""):
        """Non-learnable state (e.g. batchnorm running statistics)."""
        for full, module, attr in self.named_buffer_owners(prefix):
            yield full, getattr(module, attr)

    def parameters(self):
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, flag: bool = True):
        for m in self.modules():
            m.training = flag
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        self._items = list(items)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def append(self, m):
        self._items.append(m)

    def modules(self):
        yield self
        for m in self._items:
            yield from m.modules()

    def named_parameters(self, prefix: str = ""):
        for i, m in enumerate(self._items):
            yield from m.named_parameters(f"{prefix}{i}.")

    def named_buffer_owners(self, prefix: str = ""):
        for i, m in enumerate(self._items):
            yield from m.named_buffer_owners(f"{prefix}{i}.")


# ----------------------------------------------------------------------
# grouped 3D convolution (cross-correlation, zero padding)


def conv3d_output_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv3d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride=(1, 1, 1),
    padding=(0, 0, 0),
    groups: int = 1,
) -> Tensor:
    """Grouped 3D cross-correlation with zero padding.

    ``x`` is [B, C, T, H, W]; ``weight`` is [Co, C/groups, kt, kh, kw].
    groups=1 with a 1x1x1 kernel is a per-position linear map; groups=C
    gives depthwise (per-channel) filtering.  Differentiable with respect
    to input, weight, and bias.
    """
    if x.ndim != 5:
        raise ValueError(f"conv3d expects [B, C, T, H, W] input, got shape {x.shape}")
    if weight.ndim != 5:
        raise ValueError(f"conv3d expects a rank-5 weight, got shape {weight.shape}")
    if x.data.dtype != weight.data.dtype:
        raise TypeError(f"conv3d: dtype mismatch {x.data.dtype.name} vs {weight.data.dtype.name}")
    B, C, T, H, W = x.shape
    Co, Cig, kt, kh, kw = weight.shape
    if C % groups != 0 or Co % groups != 0:
        raise ValueError(f"conv3d: channels {C}->{Co} not divisible by groups={groups}")
    if Cig != C // groups:
        raise ValueError(
            f"conv3d: weight carries {Cig} input channels per group, input needs {C // groups}"
        )
    st, sh, sw = stride
    pt, ph, pw = padding
    To = conv3d_output_extent(T, kt, st, pt)
    Ho = conv3d_output_extent(H, kh, sh, ph)
    Wo = conv3d_output_extent(W, kw, sw, pw)
    if To <= 0 or Ho <= 0 or Wo <= 0:
        raise ValueError(
            f"conv3d: non-positive output extent {To}x{Ho}x{Wo} for input {T}x{H}x{W}, "
            f"kernel {kt}x{kh}x{kw}, stride {st}x{sh}x{sw}, padding {pt}x{ph}x{pw}"
        )
    if bias is not None and bias.shape != (Co,):
        raise ValueError(f"conv3d: bias shape {bias.shape} != ({Co},)")

    G, Cog = groups, Co // groups
    pad_spec = ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw))
    need_pad = pt or ph or pw

    def padded(arr):
        return np.pad(arr, pad_spec) if need_pad else arr

    xg = padded(x.data).reshape(B, G, Cig, T + 2 * pt, H + 2 * ph, W + 2 * pw)
    w6 = weight.data.reshape(G, Cog, Cig, kt, kh, kw)
    out = np.zeros((B, G, Cog, To, Ho, Wo), dtype=x.data.dtype)
    for dt in range(kt):
        ts = slice(dt, dt + (To - 1) * st + 1, st)
        for dh in range(kh):
            hs = slice(dh, dh + (Ho - 1) * sh + 1, sh)
            for dw in range(kw):
                ws = slice(dw, dw + (Wo - 1) * sw + 1, sw)
                out += np.einsum(
                    "bgithw,goi->bgothw", xg[:, :, :, ts, hs, ws], w6[..., dt, dh, dw]
                )
    out = out.reshape(B, Co, To, Ho, Wo)
    if bias is not None:
        out = out + bias.data.reshape(1, Co, 1, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    result = Tensor._result(out, parents)
    if result.requires_grad:
        def _bw():
            g = result.grad.reshape(B, G, Cog, To, Ho, Wo)
            xgb = padded(x.data).reshape(B, G, Cig, T + 2 * pt, H + 2 * ph, W + 2 * pw)
            gx = np.zeros_like(xgb) if x.requires_grad else None
            gw = np.zeros_like(w6) if weight.requires_grad else None
            for dt in range(kt):
                ts = slice(dt, dt + (To - 1) * st + 1, st)
                for dh in range(kh):
                    hs = slice(dh, dh + (Ho - 1) * sh + 1, sh)
                    for dw in range(kw):
                        ws = slice(dw, dw + (Wo - 1) * sw + 1, sw)
                        if gw is not None:
                            gw[..., dt, dh, dw] = np.einsum(
                                "bgothw,bgithw->goi", g, xgb[:, :, :, ts, hs, ws]
                            )
                        if gx is not None:
                            gx[:, :, :, ts, hs, ws] += np.einsum(
                                "bgothw,goi->bgithw", g, w6[..., dt, dh, dw]
                            )
            if gx is not None:
                gx = gx.reshape(B, C, T + 2 * pt, H + 2 * ph, W + 2 * pw)
                x._accumulate(gx[:, :, pt : pt + T, ph : ph + H, pw : pw + W])
            if gw is not None:
                weight._accumulate(gw.reshape(Co, Cig, kt, kh, kw))
            if bias is not None and bias.requires_grad:
                bias._accumulate(result.grad.sum(axis=(0, 2, 3, 4)))
        result._backward_fn = _bw
    return result


class Conv3d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel,
        stride=(1, 1, 1),
        padding=(0, 0, 0),
        groups: int = 1,
        bias: bool = True,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
    ):
        super().__init__()
        kernel = tuple(kernel)
        if in_channels % groups or out_channels % groups:
            raise ValueError(
                f"conv3d: channels {in_channels}->{out_channels} not divisible by groups={groups}"
            )
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = tuple(stride)
        self.padding = tuple(padding)
        self.groups = groups
        rng = rng if rng is not None else np.random.default_rng(0)
        wshape = (out_channels, in_channels // groups, *kernel)
        self.weight = Parameter(trunc_normal(rng, wshape, dtype=dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype), decay=False) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv3d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def output_shape(self, in_shape):
        """(C, T, H, W) geometry without touching data."""
        c, t, h, w = in_shape
        if c != self.in_channels:
            raise ValueError(f"conv3d: expected {self.in_channels} channels, got {c}")
        dims = [
            conv3d_output_extent(s, k, st, p)
            for s, k, st, p in zip((t, h, w), self.kernel, self.stride, self.padding)
        ]
        if any(d <= 0 for d in dims):
            raise ValueError(f"conv3d: non-positive output extent for input shape {in_shape}")
        return (self.out_channels, *dims)


# ----------------------------------------------------------------------
# normalization


class BatchNorm3d(Module):
    """Per-channel batch normalization over [B, C, T, H, W].

    Train mode normalizes with batch statistics and updates running
    mean/var with the given momentum (running variance uses the unbiased
    estimate); eval mode normalizes with the stored running statistics,
    which default to mean 0 / var 1 before any update.
    """

    _buffer_names = ("running_mean", "running_var")

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1, dtype=np.float64):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.scale = Parameter(np.ones(num_features, dtype=dtype), decay=False)
        self.shift = Parameter(np.zeros(num_features, dtype=dtype), decay=False)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 5 or x.shape[1] != self.num_features:
            raise ValueError(
                f"batchnorm3d: expected [B, {self.num_features}, T, H, W], got {x.shape}"
            )
        B, C, T, H, W = x.shape
        axes = (0, 2, 3, 4)
        pshape = (1, C, 1, 1, 1)
        if self.training:
            n = B * T * H * W
            if n < 2:
                raise ValueError("batchnorm3d: train mode needs at least 2 values per channel")
            mu = x.mean(axes=axes, keepdims=True)
            centered = x - mu.expand(x.shape)
            var = (centered * centered).mean(axes=axes, keepdims=True)
            inv = (var + self.eps).sqrt()
            xhat = centered / inv.expand(x.shape)
            # running stats track the same batch statistics, outside the tape
            m = self.momentum
            batch_mean = mu.data.reshape(C)
            batch_var = var.data.reshape(C) * (n / (n - 1))
            self.running_mean = (1 - m) * self.running_mean + m * batch_mean
            self.running_var = (1 - m) * self.running_var + m * batch_var
        else:
            mean = Tensor(self.running_mean.reshape(pshape))
            std = Tensor(np.sqrt(self.running_var + self.eps).reshape(pshape))
            xhat = (x - mean.expand(x.shape)) / std.expand(x.shape)
        g = self.scale.reshape(pshape).expand(x.shape)
        b = self.shift.reshape(pshape).expand(x.shape)
        return xhat * g + b


class LayerNorm(Module):
    """Layer normalization over the channel axis of channels-first tensors.

    Each token (every position along the remaining axes) is normalized to
    zero mean / unit variance across its channel vector, then scaled and
    shifted.  Stateless.
    """

    def __init__(self, num_channels: int, eps: float = 1e-6, dtype=np.float64):
        super().__init__()
        self.num_channels = num_channels
        self.eps = eps
        self.scale = Parameter(np.ones(num_channels, dtype=dtype), decay=False)
        self.shift = Parameter(np.zeros(num_channels, dtype=dtype), decay=False)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim < 2 or x.shape[1] != self.num_channels:
            raise ValueError(
                f"layernorm: expected channel axis 1 of size {self.num_channels}, got {x.shape}"
            )
        mu = x.mean(axes=(1,), keepdims=True)
        centered = x - mu.expand(x.shape)
        var = (centered * centered).mean(axes=(1,), keepdims=True)
        xhat = centered / (var + self.eps).sqrt().expand(x.shape)
        pshape = tuple(self.num_channels if i == 1 else 1 for i in range(x.ndim))
        g = self.scale.reshape(pshape).expand(x.shape)
        b = self.shift.reshape(pshape).expand(x.shape)
        return xhat * g + b


# ----------------------------------------------------------------------
# linear / activations / pooling


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias) over the last axis; weight is [C_in, C_out]."""
    out = x.matmul(weight)
    if bias is not None:
        pshape = (1,) * (out.ndim - 1) + (weight.shape[1],)
        out = out + bias.reshape(pshape).expand(out.shape)
    return out


class Linear(Module):
    def __init__(
        self,
        in_features: int,
        out_features: int,
        bias: bool = True,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
    ):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(trunc_normal(rng, (in_features, out_features), dtype=dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype), decay=False) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


def gelu(x: Tensor) -> Tensor:
    return x.gelu()


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x.softmax(axis)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatiotemporal average pooling: [B, C, T, H, W] -> [B, C]."""
    if x.ndim != 5:
        raise ValueError(f"global_avg_pool expects rank-5 input, got {x.shape}")
    return x.mean(axes=(2, 3, 4))


# ----------------------------------------------------------------------
# stochastic depth


def drop_path(
    x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None
) -> Tensor:
    """Per-sample residual-branch dropout (stochastic depth).

    In train mode each sample of the batch is kept with probability
    ``1 - rate`` and scaled by ``1 / (1 - rate)``; eval mode is the
    identity for any rate.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"drop_path rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode drop_path needs an RNG")
    keep = (rng.random(x.shape[0]) >= rate).astype(x.data.dtype) / (1.0 - rate)
    mask = Tensor(keep.reshape((x.shape[0],) + (1,) * (x.ndim - 1)))
    return x * mask.expand(x.shape)


class DropPath(Module):
    """Module wrapper holding the rate and a shared RNG reference."""

    def __init__(self, rate: float = 0.0):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"drop_path rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng: np.random.Generator | None = None

    def forward(self, x: Tensor) -> Tensor:
        return drop_path(x, self.rate, self.training, self.rng)
