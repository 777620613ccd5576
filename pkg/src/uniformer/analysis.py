"""Analytic per-layer parameter and FLOP accounting plus shape tracing.

Conventions (applied uniformly so totals are meaningful):

* one multiply-accumulate counts as one FLOP;
* convolution: Co*To*Ho*Wo*(Ci/groups)*kt*kh*kw MACs (bias adds ignored);
* linear over tokens: tokens*C_in*C_out MACs;
* attention per head: L^2*d MACs for the query-key products plus L^2*d for
  the affinity-weighted values, with query/key/value/fusion projections
  counted as linears and softmax at 4 ops per logit;
* normalizations, activations, residual adds, pooling: one op per element.

Everything is computed symbolically from layer geometry, so tracing a
224x224 video costs nothing, and the analysis is read-only (safe to run
concurrently).  Reports can be emitted as aligned text or as CSV (columns:
name, out_shape, params, flops), the machine contract.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

from .blocks import GlobalMHRA, LocalMHRA, UniformerBlock
from .model import UniformerModel
from .nn import Conv3d, Module


@dataclass
class LayerCost:
    name: str
    out_shape: tuple[int, ...]
    params: int
    flops: int


@dataclass
class CostReport:
    """Per-layer costs with totals; multi-view totals scale exactly."""

    entries: list[LayerCost] = field(default_factory=list)
    views: int = 1

    @property
    def params_total(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def flops_one_view(self) -> int:
        return sum(e.flops for e in self.entries)

    @property
    def flops_total(self) -> int:
        return self.flops_one_view * self.views

    def entry(self, name: str) -> LayerCost:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("name,out_shape,params,flops\n")
        for e in self.entries:
            shape = "x".join(str(s) for s in e.out_shape)
            out.write(f"{e.name},{shape},{e.params},{e.flops}\n")
        out.write(f"TOTAL,,{self.params_total},{self.flops_one_view}\n")
        out.write(f"TOTAL_{self.views}_VIEWS,,{self.params_total},{self.flops_total}\n")
        return out.getvalue()

    def to_text(self) -> str:
        rows = [("layer", "out shape", "params", "flops")]
        for e in self.entries:
            shape = "x".join(str(s) for s in e.out_shape)
            rows.append((e.name, shape, f"{e.params:,}", f"{e.flops:,}"))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = [
            "  ".join(col.ljust(widths[i]) for i, col in enumerate(row)) for row in rows
        ]
        lines.append("")
        lines.append(f"total parameters: {self.params_total:,}")
        lines.append(f"flops (1 view):   {self.flops_one_view:,}")
        if self.views != 1:
            lines.append(f"flops ({self.views} views): {self.flops_total:,}")
        return "\n".join(lines)


def count_params(model: Module) -> int:
    """Exact number of learnable scalars (running statistics excluded)."""
    return sum(p.size for _, p in model.named_parameters())


def _module_params(m: Module) -> int:
    return sum(p.size for _, p in m.named_parameters())


def _conv_macs(conv: Conv3d, out_shape) -> int:
    co, to, ho, wo = out_shape
    kt, kh, kw = conv.kernel
    return co * to * ho * wo * (conv.in_channels // conv.groups) * kt * kh * kw


def _elems(shape) -> int:
    n = 1
    for s in shape:
        n *= s
    return n


def _stem_entries(stem, in_shape):
    flops = 0
    shape = in_shape
    for i, conv in enumerate(stem.convs):
        shape = conv.output_shape(shape)
        flops += _conv_macs(conv, shape)
        if i + 1 < len(stem.convs):
            flops += _elems(shape)  # gelu between overlapped convs
    flops += _elems(shape)  # layer norm
    return [LayerCost("stem", shape, _module_params(stem), flops)], shape


def _block_entries(prefix: str, block: UniformerBlock, shape):
    c, t, h, w = shape
    tokens = t * h * w
    elems = c * tokens
    entries = [
        LayerCost(f"{prefix}.dpe", shape, _module_params(block.dpe), _conv_macs(block.dpe.conv, shape)),
        LayerCost(f"{prefix}.norm1", shape, _module_params(block.norm1), elems),
    ]
    mhra = block.mhra
    if isinstance(mhra, LocalMHRA):
        macs = (
            _conv_macs(mhra.value, shape)
            + _conv_macs(mhra.affinity, shape)
            + _conv_macs(mhra.fuse, shape)
        )
        entries.append(LayerCost(f"{prefix}.mhra", shape, _module_params(mhra), macs))
    elif isinstance(mhra, GlobalMHRA):
        qkv_params = sum(_module_params(m) for m in (mhra.query, mhra.key, mhra.value))
        entries.append(
            LayerCost(f"{prefix}.mhra.qkv", (3 * c, t, h, w), qkv_params, 3 * tokens * c * c)
        )
        attn_flops = 2 * tokens * tokens * c + 4 * mhra.heads * tokens * tokens
        entries.append(
            LayerCost(
                f"{prefix}.mhra.attention", (mhra.heads, tokens, tokens), 0, attn_flops
            )
        )
        entries.append(
            LayerCost(f"{prefix}.mhra.proj", shape, _module_params(mhra.fuse), tokens * c * c)
        )
    else:  # pragma: no cover
        raise TypeError(f"unknown aggregator {type(mhra).__name__}")
    hidden = block.ffn.expand.out_channels
    ffn_flops = 2 * tokens * c * hidden + hidden * tokens  # two linears + gelu
    entries.append(LayerCost(f"{prefix}.norm2", shape, _module_params(block.norm2), elems))
    entries.append(LayerCost(f"{prefix}.ffn", shape, _module_params(block.ffn), ffn_flops))
    entries.append(LayerCost(f"{prefix}.residual", shape, 0, 3 * elems))
    return entries


def count_flops(model: UniformerModel, input_shape, views: int = 1) -> CostReport:
    """Symbolic cost of one forward pass on a (C, T, H, W) input.

    The multi-view total is exactly ``views`` times the single-view total.
    """
    if views < 1:
        raise ValueError(f"views must be >= 1, got {views}")
    input_shape = tuple(int(s) for s in input_shape)
    if len(input_shape) != 4:
        raise ValueError(f"expected a (C, T, H, W) input shape, got {input_shape}")
    model.validate_input_shape(input_shape)
    report = CostReport(views=views)
    entries, shape = _stem_entries(model.stem, input_shape)
    report.entries.extend(entries)
    for i, stage in enumerate(model.stages):
        if stage.downsample is not None:
            shape = stage.downsample.output_shape(shape)
            flops = _conv_macs(stage.downsample.conv, shape) + _elems(shape)
            report.entries.append(
                LayerCost(f"stages.{i}.downsample", shape, _module_params(stage.downsample), flops)
            )
        for j, block in enumerate(stage.blocks):
            report.entries.extend(_block_entries(f"stages.{i}.blocks.{j}", block, shape))
    pooled = (shape[0],)
    report.entries.append(LayerCost("head.pool", pooled, 0, _elems(shape)))
    fc = model.head.fc
    report.entries.append(
        LayerCost(
            "head.fc", (fc.out_features,), _module_params(model.head), fc.in_features * fc.out_features
        )
    )
    return report


def shape_trace(model: UniformerModel, input_shape) -> list[tuple[str, tuple[int, ...]]]:
    """Module-level (name, output shape) trace without allocating activations.

    Raises a descriptive error naming the layer if any output extent would
    be non-positive.
    """
    input_shape = tuple(int(s) for s in input_shape)
    model.validate_input_shape(input_shape)
    trace: list[tuple[str, tuple[int, ...]]] = []

    def step(name, fn, shape):
        try:
            return fn(shape)
        except ValueError as err:
            raise ValueError(f"{name}: {err}") from None

    shape = step("stem", model.stem.output_shape, input_shape)
    trace.append(("stem", shape))
    for i, stage in enumerate(model.stages):
        if stage.downsample is not None:
            shape = step(f"stages.{i}.downsample", stage.downsample.output_shape, shape)
            trace.append((f"stages.{i}.downsample", shape))
        for j, _ in enumerate(stage.blocks):
            trace.append((f"stages.{i}.blocks.{j}", shape))
    trace.append(("head.pool", (shape[0],)))
    trace.append(("head.fc", (model.head.fc.out_features,)))
    return trace


def stage_output_shapes(model: UniformerModel, input_shape) -> list[tuple[int, ...]]:
    """The (C, T, H, W) grid at the end of each of the four stages."""
    trace = dict(shape_trace(model, input_shape))
    shapes = []
    for i, stage in enumerate(model.stages):
        last = len(stage.blocks) - 1
        shapes.append(trace[f"stages.{i}.blocks.{last}"])
    return shapes
