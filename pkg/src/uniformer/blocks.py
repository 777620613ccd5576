"""UniFormer block: dynamic position embedding, local/global multi-head
relation aggregation, and the feed-forward network, composed residually.

A block maps [B, C, T, H, W] to the same shape:

    x = x + DPE(x)                      # depthwise 3D conv, zero padding
    x = x + drop_path(MHRA(norm1(x)))   # BN for local blocks, LN for global
    x = x + drop_path(FFN(norm2(x)))

Local MHRA aggregates each token's small 3D neighborhood with a learnable
affinity cube and is realized as pointwise -> depthwise -> pointwise
convolution; global MHRA is joint spatiotemporal self-attention over all
T*H*W tokens.  The affinity-cube entry [dt, dh, dw] weights the neighbor at
offset (dt - t//2, dh - h//2, dw - w//2) from the anchor, so the cube is a
cross-correlation kernel; out-of-grid offsets contribute zero via padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import BatchNorm3d, Conv3d, DropPath, LayerNorm, Linear, Module
from .tensor import Tensor

LOCAL = "local"
GLOBAL = "global"


# ----------------------------------------------------------------------
# token index math


@dataclass(frozen=True)
class TokenIndex:
    """3D grid coordinates of a token together with its flat index."""

    t: int
    h: int
    w: int
    k: int


def grid_to_flat(t: int, h: int, w: int, T: int, H: int, W: int) -> int:
    """Row-major flattening: k = t*H*W + h*W + w."""
    if not (0 <= t < T and 0 <= h < H and 0 <= w < W):
        raise ValueError(f"grid index ({t}, {h}, {w}) outside {T}x{H}x{W}")
    return t * H * W + h * W + w


def flat_to_grid(k: int, T: int, H: int, W: int) -> TokenIndex:
    """Inverse of :func:`grid_to_flat` for k in [0, T*H*W)."""
    L = T * H * W
    if not 0 <= k < L:
        raise ValueError(f"flat index {k} outside [0, {L})")
    t = k // (H * W)
    rem = k - t * H * W
    h = rem // W
    w = rem % W
    return TokenIndex(t, h, w, k)


def neighborhood(anchor: TokenIndex, tube, dims) -> list[tuple[TokenIndex, tuple[int, int, int]]]:
    """In-grid tokens within the tube around an anchor, with their offsets.

    ``tube`` extents must be odd so the anchor sits at the cube center;
    a neighbor qualifies when every per-axis |offset| is at most the tube
    half-width.  Out-of-grid positions are simply absent (their affinity
    is zero).
    """
    tt, th, tw = tube
    if tt % 2 == 0 or th % 2 == 0 or tw % 2 == 0:
        raise ValueError(f"tube extents must be odd, got {tube}")
    T, H, W = dims
    rt, rh, rw = tt // 2, th // 2, tw // 2
    out = []
    for dt in range(-rt, rt + 1):
        t = anchor.t + dt
        if not 0 <= t < T:
            continue
        for dh in range(-rh, rh + 1):
            h = anchor.h + dh
            if not 0 <= h < H:
                continue
            for dw in range(-rw, rw + 1):
                w = anchor.w + dw
                if not 0 <= w < W:
                    continue
                out.append((TokenIndex(t, h, w, grid_to_flat(t, h, w, T, H, W)), (dt, dh, dw)))
    return out


# ----------------------------------------------------------------------
# block configuration


@dataclass
class BlockConfig:
    """Shape of one block: aggregation kind plus the shared constants."""

    kind: str
    channels: int
    tube: tuple[int, int, int] = (5, 5, 5)
    head_dim: int = 64
    dpe_kernel: tuple[int, int, int] = (3, 3, 3)
    ffn_ratio: int = 4
    drop_path_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in (LOCAL, GLOBAL):
            raise ValueError(f"block kind must be '{LOCAL}' or '{GLOBAL}', got {self.kind!r}")
        if self.kind == GLOBAL and self.channels % self.head_dim != 0:
            raise ValueError(
                f"global block: channels {self.channels} not divisible by head_dim {self.head_dim}"
            )
        if any(k % 2 == 0 for k in self.tube):
            raise ValueError(f"tube extents must be odd, got {self.tube}")

    @property
    def heads(self) -> int:
        # local aggregation runs one head per channel
        return self.channels if self.kind == LOCAL else self.channels // self.head_dim


# ----------------------------------------------------------------------
# sub-modules


class DynamicPositionEmbedding(Module):
    """Depthwise 3D convolution whose zero padding leaks absolute position.

    Returns only the convolution output; the caller adds the residual.
    No bias and no normalization here.
    """

    def __init__(self, channels: int, kernel=(3, 3, 3), rng=None, dtype=np.float64):
        super().__init__()
        kernel = tuple(kernel)
        self.conv = Conv3d(
            channels,
            channels,
            kernel,
            padding=tuple(k // 2 for k in kernel),
            groups=channels,
            bias=False,
            rng=rng,
            dtype=dtype,
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class LocalMHRA(Module):
    """Neighborhood aggregation with learnable per-head affinity cubes.

    Equivalent to gathering, for every anchor token, its in-grid tube
    neighbors weighted by the affinity cube, applied to linearly
    transformed tokens and fused across heads.  Instantiated as
    PWConv (value) -> DWConv (affinity) -> PWConv (fuse), with one head
    per channel, so the affinity weights live in the depthwise kernel.
    The caller applies batchnorm beforehand.
    """

    def __init__(self, channels: int, tube=(5, 5, 5), rng=None, dtype=np.float64):
        super().__init__()
        tube = tuple(tube)
        if any(k % 2 == 0 for k in tube):
            raise ValueError(f"tube extents must be odd, got {tube}")
        self.tube = tube
        self.value = Conv3d(channels, channels, (1, 1, 1), bias=False, rng=rng, dtype=dtype)
        self.affinity = Conv3d(
            channels,
            channels,
            tube,
            padding=tuple(k // 2 for k in tube),
            groups=channels,
            bias=False,
            rng=rng,
            dtype=dtype,
        )
        self.fuse = Conv3d(channels, channels, (1, 1, 1), bias=False, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fuse(self.affinity(self.value(x)))


class GlobalMHRA(Module):
    """Joint spatiotemporal self-attention over all T*H*W tokens.

    Affinity between tokens is the softmax of scaled query-key products
    computed across the full grid (no spatial/temporal split).  Logits are
    scaled by 1/sqrt(head_dim).  The caller applies layernorm beforehand.
    """

    def __init__(self, channels: int, head_dim: int = 64, rng=None, dtype=np.float64):
        super().__init__()
        if channels % head_dim != 0:
            raise ValueError(f"channels {channels} not divisible by head_dim {head_dim}")
        self.channels = channels
        self.head_dim = head_dim
        self.heads = channels // head_dim
        self.scale = float(head_dim) ** -0.5
        self.query = Linear(channels, channels, rng=rng, dtype=dtype)
        self.key = Linear(channels, channels, rng=rng, dtype=dtype)
        self.value = Linear(channels, channels, rng=rng, dtype=dtype)
        self.fuse = Linear(channels, channels, rng=rng, dtype=dtype)

    def attention_weights(self, x: Tensor) -> Tensor:
        """Affinity matrix [B, heads, L, L]; rows sum to one."""
        q, k, _ = self._qkv(x)
        return (q.matmul(k.permute(0, 1, 3, 2)) * self.scale).softmax(axis=-1)

    def _qkv(self, x: Tensor):
        B, C, T, H, W = x.shape
        L = T * H * W
        tokens = x.permute(0, 2, 3, 4, 1).reshape(B, L, C)
        def split(t):
            return t.reshape(B, L, self.heads, self.head_dim).permute(0, 2, 1, 3)
        return split(self.query(tokens)), split(self.key(tokens)), split(self.value(tokens))

    def forward(self, x: Tensor) -> Tensor:
        B, C, T, H, W = x.shape
        L = T * H * W
        q, k, v = self._qkv(x)
        attn = (q.matmul(k.permute(0, 1, 3, 2)) * self.scale).softmax(axis=-1)
        ctx = attn.matmul(v).permute(0, 2, 1, 3).reshape(B, L, C)
        out = self.fuse(ctx)
        return out.reshape(B, T, H, W, C).permute(0, 4, 1, 2, 3)


class FeedForward(Module):
    """Per-token channel MLP: expand by ``ratio``, GELU, reduce back.

    Realized with 1x1x1 convolutions, which coincide with token-flattened
    linear layers.
    """

    def __init__(self, channels: int, ratio: int = 4, rng=None, dtype=np.float64):
        super().__init__()
        hidden = channels * ratio
        self.expand = Conv3d(channels, hidden, (1, 1, 1), bias=True, rng=rng, dtype=dtype)
        self.reduce = Conv3d(hidden, channels, (1, 1, 1), bias=True, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.reduce(self.expand(x).gelu())


# ----------------------------------------------------------------------
# the block


class UniformerBlock(Module):
    """One local or global block; preserves [B, C, T, H, W]."""

    def __init__(self, config: BlockConfig, rng=None, dtype=np.float64):
        super().__init__()
        self.config = config
        C = config.channels
        self.dpe = DynamicPositionEmbedding(C, config.dpe_kernel, rng=rng, dtype=dtype)
        if config.kind == LOCAL:
            self.norm1 = BatchNorm3d(C, dtype=dtype)
            self.norm2 = BatchNorm3d(C, dtype=dtype)
            self.mhra = LocalMHRA(C, config.tube, rng=rng, dtype=dtype)
        else:
            self.norm1 = LayerNorm(C, dtype=dtype)
            self.norm2 = LayerNorm(C, dtype=dtype)
            self.mhra = GlobalMHRA(C, config.head_dim, rng=rng, dtype=dtype)
        self.ffn = FeedForward(C, config.ffn_ratio, rng=rng, dtype=dtype)
        self.drop_path = DropPath(config.drop_path_rate)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.dpe(x)
        x = x + self.drop_path(self.mhra(self.norm1(x)))
        x = x + self.drop_path(self.ffn(self.norm2(x)))
        return x
