import numpy as np
import pytest

from uniformer.analysis import count_flops, count_params, shape_trace, stage_output_shapes
from uniformer.model import ModelConfig, build_model, preset_config
from uniformer.nn import Linear, Module


def tiny_config(**over):
    base = dict(
        stage_channels=(8, 16, 32, 64),
        stage_depths=(1, 1, 1, 1),
        stage_types="LLGG",
        tube=(3, 3, 3),
        head_dim=16,
        num_classes=4,
    )
    base.update(over)
    return ModelConfig(**base)


class TestParams:
    def test_single_linear(self):
        class Wrap(Module):
            def __init__(self):
                super().__init__()
                self.fc = Linear(8, 4)

        assert count_params(Wrap()) == 8 * 4 + 4

    def test_entries_sum_to_total(self):
        net = build_model(tiny_config(), init="zeros")
        report = count_flops(net, (3, 2, 32, 32))
        assert report.params_total == count_params(net)

    def test_running_stats_not_counted(self):
        net = build_model(tiny_config(), init="zeros")
        buffered = sum(b.size for _, b in net.named_buffers())
        assert buffered > 0
        assert count_params(net) == sum(p.size for _, p in net.named_parameters())

    def test_image_variant_calibration(self):
        # published image-classification figures for the same architecture
        net = build_model(preset_config("S", num_classes=1000, input_mode="image"), init="zeros")
        assert abs(count_params(net) - 21.5e6) / 21.5e6 < 0.01
        net = build_model(
            preset_config("Sdagger", num_classes=1000, input_mode="image"), init="zeros"
        )
        assert abs(count_params(net) - 24e6) / 24e6 < 0.01
        net = build_model(preset_config("L", num_classes=1000, input_mode="image"), init="zeros")
        assert abs(count_params(net) - 100e6) / 100e6 < 0.01


class TestFlops:
    def test_views_multiplier_exact(self):
        net = build_model(tiny_config(), init="zeros")
        one = count_flops(net, (3, 2, 32, 32), views=1)
        seven = count_flops(net, (3, 2, 32, 32), views=7)
        assert seven.flops_total == 7 * one.flops_total
        assert seven.flops_one_view == one.flops_one_view

    def test_invalid_views(self):
        net = build_model(tiny_config(), init="zeros")
        with pytest.raises(ValueError, match="views"):
            count_flops(net, (3, 2, 32, 32), views=0)

    def test_doubling_frames_per_layer(self):
        net = build_model(tiny_config(), init="zeros")
        short = count_flops(net, (3, 4, 32, 32))
        long = count_flops(net, (3, 8, 32, 32))
        for a, b in zip(short.entries, long.entries):
            assert a.name == b.name
            ratio = b.flops / a.flops
            if "attention" in a.name:
                assert ratio == pytest.approx(4.0)  # both terms scale with L^2
            elif a.name == "head.fc":
                assert ratio == 1.0  # runs on pooled features, constant in T
            else:
                assert abs(ratio - 2.0) < 0.005 * 2.0

    def test_pointwise_conv_counted_like_linear(self):
        net = build_model(tiny_config(), init="zeros")
        rep = count_flops(net, (3, 2, 32, 32))
        c, t, h, w = 8, 1, 8, 8
        tokens = t * h * w
        # local stage-1 aggregation: two pointwise convs plus the tube conv
        want = 2 * tokens * c * c + (c * tokens) * 27
        assert rep.entry("stages.0.blocks.0.mhra").flops == want

    def test_attention_entry_formula(self):
        net = build_model(tiny_config(), init="zeros")
        rep = count_flops(net, (3, 2, 32, 32))
        c, tokens, heads = 32, 2 * 2, 2  # stage 3 on a 32x32 input
        want = 2 * tokens * tokens * c + 4 * heads * tokens * tokens
        assert rep.entry("stages.2.blocks.0.mhra.attention").flops == want

    def test_csv_contract(self):
        net = build_model(tiny_config(), init="zeros")
        rep = count_flops(net, (3, 2, 32, 32), views=3)
        lines = rep.to_csv().strip().splitlines()
        assert lines[0] == "name,out_shape,params,flops"
        body = [ln.split(",") for ln in lines[1:-2]]
        assert all(len(row) == 4 for row in body)
        params = sum(int(row[2]) for row in body)
        flops = sum(int(row[3]) for row in body)
        assert lines[-2] == f"TOTAL,,{params},{flops}"
        assert lines[-1] == f"TOTAL_3_VIEWS,,{params},{3 * flops}"

    def test_bad_input_shape(self):
        net = build_model(tiny_config(), init="zeros")
        with pytest.raises(ValueError):
            count_flops(net, (3, 2, 32))
        with pytest.raises(ValueError, match="channels"):
            count_flops(net, (4, 2, 32, 32))


class TestShapeTrace:
    def test_stem_and_grids_for_s_preset(self):
        net = build_model(preset_config("S"), init="zeros")
        trace = dict(shape_trace(net, (3, 16, 224, 224)))
        assert trace["stem"] == (64, 8, 56, 56)
        shapes = stage_output_shapes(net, (3, 16, 224, 224))
        assert shapes == [(64, 8, 56, 56), (128, 8, 28, 28), (320, 8, 14, 14), (512, 8, 7, 7)]
        # stage-3 and stage-4 token grids
        assert np.prod(shapes[2][1:]) == 1568
        assert np.prod(shapes[3][1:]) == 392

    def test_head_entries(self):
        net = build_model(tiny_config(), init="zeros")
        trace = shape_trace(net, (3, 2, 32, 32))
        assert trace[-2] == ("head.pool", (64,))
        assert trace[-1] == ("head.fc", (4,))

    def test_error_names_offending_layer(self):
        net = build_model(tiny_config(), init="zeros")
        with pytest.raises(ValueError, match="cumulative stride"):
            shape_trace(net, (3, 2, 16, 16))

    @pytest.mark.parametrize("preset", ["S", "Sdagger", "B", "L"])
    def test_trace_positive_on_presets(self, preset):
        net = build_model(preset_config(preset), init="zeros", dtype=np.float32)
        trace = shape_trace(net, (3, 16, 224, 224))
        assert all(all(s > 0 for s in shape) for _, shape in trace)
