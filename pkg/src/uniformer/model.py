"""Full network assembly: patch stem, four stages of blocks, downsamplers,
and the classification head, plus checkpoint I/O and 2D-to-3D kernel
inflation.

Geometry: the stem downsamples space by 4 (and time by 2 in video mode);
a 1x2x2 strided convolution halves the spatial grid before stages 2-4, so
the cumulative spatial stride is 32.  Stage types are a four-letter string
over {L, G} choosing local or global aggregation per stage ("LLGG" by
default).  Image mode (T=1) clamps every temporal kernel extent and stride
to 1 and is otherwise identical layer for layer.

Built models are immutable under eval-mode forward, so concurrent
inference is safe; training (batchnorm statistics, gradient accumulation)
needs exclusive access per model instance.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .blocks import BlockConfig, GLOBAL, LOCAL, UniformerBlock
from .nn import Conv3d, LayerNorm, Linear, Module, ModuleList, DropPath, global_avg_pool
from .tensor import Tensor
from . import tensorfile

IN_CHANNELS = 3
SPATIAL_STRIDE_TOTAL = 32

SCHEDULES = ("linear", "constant")
INPUT_MODES = ("video", "image")


@dataclass
class ModelConfig:
    """Declarative description of the full network."""

    stage_channels: tuple[int, int, int, int] = (64, 128, 320, 512)
    stage_depths: tuple[int, int, int, int] = (3, 4, 8, 3)
    stage_types: str = "LLGG"
    tube: tuple[int, int, int] = (5, 5, 5)
    head_dim: int = 64
    num_classes: int = 400
    drop_path_max: float = 0.0
    input_mode: str = "video"
    # extensions beyond the core field set, with defaults
    drop_path_schedule: str = "linear"
    overlapped_stem: bool = False

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        self.tube = tuple(int(k) for k in self.tube)
        if len(self.stage_channels) != 4 or any(c <= 0 for c in self.stage_channels):
            raise ValueError(f"stage_channels must be 4 positive ints, got {self.stage_channels}")
        if len(self.stage_depths) != 4 or any(d <= 0 for d in self.stage_depths):
            raise ValueError(f"stage_depths must be 4 positive ints, got {self.stage_depths}")
        if len(self.stage_types) != 4 or any(ch not in "LG" for ch in self.stage_types):
            raise ValueError(
                f"stage_types must be a length-4 string over 'L'/'G', got {self.stage_types!r}"
            )
        if len(self.tube) != 3 or any(k % 2 == 0 or k <= 0 for k in self.tube):
            raise ValueError(f"tube extents must be positive odd ints, got {self.tube}")
        if self.input_mode not in INPUT_MODES:
            raise ValueError(f"input_mode must be one of {INPUT_MODES}, got {self.input_mode!r}")
        if self.drop_path_schedule not in SCHEDULES:
            raise ValueError(
                f"drop_path_schedule must be one of {SCHEDULES}, got {self.drop_path_schedule!r}"
            )
        if not 0.0 <= self.drop_path_max < 1.0:
            raise ValueError(f"drop_path_max must be in [0, 1), got {self.drop_path_max}")
        if self.num_classes <= 0:
            raise ValueError(f"num_classes must be positive, got {self.num_classes}")
        for i, letter in enumerate(self.stage_types):
            if letter == "G" and self.stage_channels[i] % self.head_dim != 0:
                raise ValueError(
                    f"stage {i + 1}: head_dim {self.head_dim} does not divide "
                    f"channels {self.stage_channels[i]}"
                )

    @property
    def video(self) -> bool:
        return self.input_mode == "video"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["stage_depths"] = list(self.stage_depths)
        d["tube"] = list(self.tube)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        known = {f for f in ModelConfig.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return ModelConfig(**d)


def save_config(config: ModelConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2)
        fh.write("\n")


def load_config(path) -> ModelConfig:
    with open(path, encoding="utf-8") as fh:
        return ModelConfig.from_dict(json.load(fh))


# Variant presets. S-dagger differs from S by one extra block in stages 2/3
# and an overlapped patch embedding (image mode).
PRESETS: dict[str, dict] = {
    "S": dict(stage_channels=(64, 128, 320, 512), stage_depths=(3, 4, 8, 3)),
    "Sdagger": dict(
        stage_channels=(64, 128, 320, 512), stage_depths=(3, 5, 9, 3), overlapped_stem=True
    ),
    "B": dict(stage_channels=(64, 128, 320, 512), stage_depths=(5, 8, 20, 7)),
    "L": dict(stage_channels=(128, 192, 448, 640), stage_depths=(5, 10, 24, 7)),
}
_PRESET_ALIASES = {"S†": "Sdagger", "SDAGGER": "Sdagger", "s": "S", "b": "B", "l": "L"}


def preset_config(
    name: str,
    num_classes: int = 400,
    input_mode: str = "video",
    drop_path_max: float = 0.0,
) -> ModelConfig:
    key = _PRESET_ALIASES.get(name, name)
    if key not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(
        num_classes=num_classes,
        input_mode=input_mode,
        drop_path_max=drop_path_max,
        **PRESETS[key],
    )


def _clamp_temporal(extents, video: bool):
    """Image mode collapses temporal kernel extents / strides to 1."""
    if video:
        return tuple(extents)
    return (1,) + tuple(extents[1:])


# ----------------------------------------------------------------------
# layers around the stages


class PatchStem(Module):
    """Input embedding: strided convolution(s) then layer normalization.

    Video mode: one 3x4x4 convolution with stride 2x4x4 (temporal padding 1
    keeps T/2 exact).  Image mode: 1x4x4 with stride 1x4x4, or, for the
    overlapped variant, two 1x3x3 stride-1x2x2 convolutions with a GELU
    in between.
    """

    def __init__(self, out_channels: int, video: bool, overlapped: bool, rng, dtype=np.float64):
        super().__init__()
        self.overlapped = overlapped and not video
        if self.overlapped:
            mid = out_channels // 2
            self.convs = ModuleList(
                [
                    Conv3d(IN_CHANNELS, mid, (1, 3, 3), (1, 2, 2), (0, 1, 1), rng=rng, dtype=dtype),
                    Conv3d(mid, out_channels, (1, 3, 3), (1, 2, 2), (0, 1, 1), rng=rng, dtype=dtype),
                ]
            )
        else:
            kernel = _clamp_temporal((3, 4, 4), video)
            stride = _clamp_temporal((2, 4, 4), video)
            padding = (1, 0, 0) if video else (0, 0, 0)
            self.convs = ModuleList(
                [Conv3d(IN_CHANNELS, out_channels, kernel, stride, padding, rng=rng, dtype=dtype)]
            )
        self.norm = LayerNorm(out_channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i + 1 < len(self.convs):
                x = x.gelu()
        return self.norm(x)

    def output_shape(self, in_shape):
        shape = in_shape
        for conv in self.convs:
            shape = conv.output_shape(shape)
        return shape


class Downsample(Module):
    """Spatial halving between stages: 1x2x2 stride-1x2x2 convolution
    (1x3x3 overlapped variant) followed by an extra layer normalization."""

    def __init__(self, in_channels: int, out_channels: int, overlapped: bool, rng, dtype=np.float64):
        super().__init__()
        if overlapped:
            self.conv = Conv3d(
                in_channels, out_channels, (1, 3, 3), (1, 2, 2), (0, 1, 1), rng=rng, dtype=dtype
            )
        else:
            self.conv = Conv3d(
                in_channels, out_channels, (1, 2, 2), (1, 2, 2), (0, 0, 0), rng=rng, dtype=dtype
            )
        self.norm = LayerNorm(out_channels, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(self.conv(x))

    def output_shape(self, in_shape):
        return self.conv.output_shape(in_shape)


class Stage(Module):
    def __init__(self, downsample: Downsample | None, blocks: ModuleList):
        super().__init__()
        self.downsample = downsample
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        if self.downsample is not None:
            x = self.downsample(x)
        for block in self.blocks:
            x = block(x)
        return x


class ClassifierHead(Module):
    """Spatiotemporal average pooling then a fully connected layer."""

    def __init__(self, channels: int, num_classes: int, rng, dtype=np.float64):
        super().__init__()
        self.fc = Linear(channels, num_classes, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc(global_avg_pool(x))


class UniformerModel(Module):
    """Hierarchical four-stage network; parameters addressable by name."""

    def __init__(self, config: ModelConfig, stem, stages, head):
        super().__init__()
        self.config = config
        self.stem = stem
        self.stages = stages
        self.head = head

    def validate_input_shape(self, shape):
        """Check a (C, T, H, W) input against stem geometry."""
        c, t, h, w = shape
        if c != IN_CHANNELS:
            raise ValueError(f"expected {IN_CHANNELS} input channels, got {c}")
        if self.config.video:
            if t < 2 or t % 2 != 0:
                raise ValueError(f"video mode needs an even frame count >= 2, got T={t}")
        elif t != 1:
            raise ValueError(f"image mode needs T=1, got T={t}")
        for name, extent in (("height", h), ("width", w)):
            if extent % SPATIAL_STRIDE_TOTAL != 0 or extent <= 0:
                raise ValueError(
                    f"{name} {extent} not divisible by the cumulative stride "
                    f"{SPATIAL_STRIDE_TOTAL}"
                )

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 5:
            raise ValueError(f"expected [B, C, T, H, W] input, got shape {x.shape}")
        self.validate_input_shape(x.shape[1:])
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return self.head(x)

    def block_drop_path_rates(self) -> list[float]:
        return [block.drop_path.rate for stage in self.stages for block in stage.blocks]

    def set_drop_path(self, max_rate: float, schedule: str | None = None):
        """Re-derive per-block stochastic-depth rates across the full depth."""
        schedule = schedule or self.config.drop_path_schedule
        blocks = [block for stage in self.stages for block in stage.blocks]
        rates = drop_path_rates(len(blocks), max_rate, schedule)
        for block, rate in zip(blocks, rates):
            block.drop_path.rate = rate

    def seed_stochastic(self, seed: int):
        """One shared generator drives every drop-path decision in order."""
        rng = np.random.default_rng(seed)
        for m in self.modules():
            if isinstance(m, DropPath):
                m.rng = rng
        return rng


def drop_path_rates(num_blocks: int, max_rate: float, schedule: str) -> list[float]:
    """Per-block rates in depth order, ending at ``max_rate``."""
    if schedule not in SCHEDULES:
        raise ValueError(f"unknown drop-path schedule {schedule!r}")
    if num_blocks == 0:
        return []
    if schedule == "constant" or num_blocks == 1:
        return [max_rate] * num_blocks
    return [max_rate * i / (num_blocks - 1) for i in range(num_blocks)]


class _ZeroDraws:
    """Stand-in generator that yields zero weights; used for analytic
    builds (parameter counting, shape tracing) where sampling millions of
    values would be wasted work."""

    @staticmethod
    def standard_normal(size=None):
        return np.zeros(() if size is None else size)


def build_model(
    config: ModelConfig, seed: int = 0, dtype=np.float64, init: str = "random"
) -> UniformerModel:
    """Construct the network described by ``config``.

    Initialization is deterministic in ``seed``: truncated-normal (std
    0.02) convolution/linear weights, zero biases and norm shifts, unit
    norm scales.  ``init='zeros'`` skips weight sampling for analysis-only
    uses.
    """
    if init not in ("random", "zeros"):
        raise ValueError(f"init must be 'random' or 'zeros', got {init!r}")
    rng = np.random.default_rng(seed) if init == "random" else _ZeroDraws()
    video = config.video
    stem = PatchStem(config.stage_channels[0], video, config.overlapped_stem, rng, dtype)
    rates = drop_path_rates(sum(config.stage_depths), config.drop_path_max, config.drop_path_schedule)
    rate_iter = iter(rates)

    stages = ModuleList()
    for i, letter in enumerate(config.stage_types):
        kind = LOCAL if letter == "L" else GLOBAL
        channels = config.stage_channels[i]
        down = None
        if i > 0:
            down = Downsample(
                config.stage_channels[i - 1],
                channels,
                config.overlapped_stem and not video,
                rng,
                dtype,
            )
        blocks = ModuleList()
        for _ in range(config.stage_depths[i]):
            bc = BlockConfig(
                kind=kind,
                channels=channels,
                tube=_clamp_temporal(config.tube, video),
                head_dim=config.head_dim,
                dpe_kernel=_clamp_temporal((3, 3, 3), video),
                drop_path_rate=next(rate_iter),
            )
            blocks.append(UniformerBlock(bc, rng=rng, dtype=dtype))
        stages.append(Stage(down, blocks))

    head = ClassifierHead(config.stage_channels[-1], config.num_classes, rng, dtype)
    return UniformerModel(config, stem, stages, head)


# ----------------------------------------------------------------------
# 2D -> 3D kernel inflation


def inflate_2d(weights_2d, kt: int):
    """Replicate a [Co, Ci, kh, kw] kernel across ``kt`` temporal slices.

    Each slice carries 1/kt of the original weight so that the response to
    a temporally constant input is preserved.  Slices are built as
    differences of cumulative fractions, which keeps every slice within one
    ulp of ``weights_2d / kt`` while making the slice sum reproduce the
    original kernel bit-exactly.
    """
    if kt < 1:
        raise ValueError(f"temporal extent must be >= 1, got {kt}")
    is_tensor = isinstance(weights_2d, Tensor)
    w = weights_2d.data if is_tensor else np.asarray(weights_2d)
    if w.ndim != 4:
        raise ValueError(f"expected [Co, Ci, kh, kw] weights, got shape {w.shape}")
    slices = []
    prev = np.zeros_like(w)
    for j in range(1, kt + 1):
        cur = w if j == kt else w * (j / kt)
        slices.append(cur - prev)
        prev = cur
    out = np.stack(slices, axis=2)
    return Tensor(out) if is_tensor else out


# ----------------------------------------------------------------------
# parameter checkpoints


def _state_records(model: UniformerModel) -> dict[str, np.ndarray]:
    records = {name: p.data for name, p in model.named_parameters()}
    for name, buf in model.named_buffers():
        if name in records:
            raise ValueError(f"parameter/buffer name clash: {name}")
        records[name] = buf
    return records


def save_params(model: UniformerModel, path) -> None:
    """Write all parameters and running statistics, sorted by name."""
    tensorfile.write_records(path, _state_records(model))


def load_params(model: UniformerModel, path) -> None:
    """Load a checkpoint; names and shapes must match the architecture.

    Values are cast into the model dtype (float32 files widen exactly into
    float64 models).
    """
    records = tensorfile.read_records(path)
    expected = _state_records(model)
    missing = sorted(set(expected) - set(records))
    extra = sorted(set(records) - set(expected))
    if missing:
        raise ValueError(f"checkpoint is missing parameter {missing[0]!r}")
    if extra:
        raise ValueError(f"checkpoint has unknown parameter {extra[0]!r}")
    for name in sorted(expected):
        arr, target = records[name], expected[name]
        if arr.shape != target.shape:
            raise ValueError(
                f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {target.shape}"
            )
    params = dict(model.named_parameters())
    for name, p in params.items():
        p.data[...] = records[name].astype(p.data.dtype)
    for name, module, attr in model.named_buffer_owners():
        buf = getattr(module, attr)
        setattr(module, attr, records[name].astype(buf.dtype))
