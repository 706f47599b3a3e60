import numpy as np
import pytest

from fungnet.layers import output_extent
from fungnet.models import (
    ARCHITECTURES,
    DENSENET121_BLOCKS,
    ModelGraph,
    apply_weights,
    build_model,
    count_params,
    forward,
    freeze_backbone,
    replace_head,
)
from fungnet.tensor import ShapeError, Tensor

from param_oracle import ORACLE

SMALL = 1 / 16


@pytest.fixture(scope="module")
def small_models():
    return {a: build_model(a, 2, np.random.default_rng(3), SMALL) for a in ARCHITECTURES}


@pytest.fixture(scope="module")
def batch():
    return Tensor(np.random.default_rng(0).standard_normal((2, 3, 224, 224)).astype(np.float32))


@pytest.mark.parametrize("arch,width", [("alexnet", 4096), ("vgg16", 4096), ("densenet121", 1024), ("resnet50", 2048)])
def test_head_width(arch, width):
    m = build_model(arch, 2)
    assert m.params[f"{m.head}.weight"].shape == (2, width)
    assert m.params[f"{m.head}.bias"].shape == (2,)
    assert m.feature_width == width


def test_lone_linear_count():
    g = ModelGraph("custom", 2, input_shape=(10,))
    g.linear("fc", "input", 10, 2)
    assert count_params(g) == (22, 22)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_head_replacement_changes_count(arch):
    m = build_model(arch, 1000, width_multiplier=SMALL)
    before = count_params(m)[0]
    replace_head(m, 2)
    assert before - count_params(m)[0] == (1000 - 2) * (m.feature_width + 1)
    assert m.num_classes == 2


@pytest.mark.parametrize("arch", ["densenet121", "resnet50"])
def test_total_includes_running_stats(arch):
    m = build_model(arch, 2, width_multiplier=SMALL)
    trainable, total = count_params(m)
    assert total - trainable == sum(b.size for b in m.buffers.values()) > 0


def test_graph_invariants(small_models):
    for m in small_models.values():
        names = [n.name for n in m.nodes]
        assert len(names) == len(set(names))
        seen = {"input"}
        for n in m.nodes:
            assert set(n.inputs) <= seen
            seen.add(n.name)
        for n in m.nodes:
            if n.op in ("conv", "linear", "bn"):
                assert f"{n.name}.weight" in m.params


def test_duplicate_names_rejected():
    g = ModelGraph("custom", 2)
    g.relu("a", "input")
    with pytest.raises(ValueError, match="duplicate"):
        g.relu("a", "input")
    with pytest.raises(ValueError, match="before it is defined"):
        g.relu("b", "nowhere")


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_spatial_extents_follow_formula(small_models, batch, arch):
    m = small_models[arch]
    trace = {}
    forward(m, batch, "eval", trace=trace)
    shapes = {"input": batch.shape}
    shapes.update(trace)
    checked = 0
    for n in m.nodes:
        if n.op == "conv":
            k = m.params[f"{n.name}.weight"].shape[2]
            s, p = n.attrs["stride"], n.attrs["padding"]
        elif n.op == "pool" and n.attrs["spec"].kind != "global_average":
            spec = n.attrs["spec"]
            k, s, p = spec.kernel[0], spec.stride[0], spec.padding[0]
        else:
            continue
        h = shapes[n.inputs[0]][2]
        assert trace[n.name][2] == trace[n.name][3] == output_extent(h, k, s, p), n.name
        checked += 1
    assert checked > 0


def test_reference_feature_map_sizes(small_models, batch):
    trace = {}
    forward(small_models["alexnet"], batch, "eval", trace=trace)
    assert trace["features.12"][2:] == (6, 6)
    trace = {}
    forward(small_models["resnet50"], batch, "eval", trace=trace)
    assert trace["conv1"][2:] == (112, 112) and trace["maxpool"][2:] == (56, 56)
    assert trace["layer4.2.relu3"][2:] == (7, 7)
    trace = {}
    forward(small_models["vgg16"], batch, "eval", trace=trace)
    assert trace["features.30"][2:] == (7, 7)


def test_densenet_channel_bookkeeping(small_models, batch):
    m = small_models["densenet121"]
    trace = {}
    forward(m, batch, "eval", trace=trace)
    growth = m.params["features.denseblock1.denselayer1.conv2.weight"].shape[0]
    c = m.params["features.conv0.weight"].shape[0]
    for b, n in enumerate(DENSENET121_BLOCKS, start=1):
        c += growth * n
        assert trace[f"features.denseblock{b}.denselayer{n}.concat"][1] == c
        if b < len(DENSENET121_BLOCKS):
            c //= 2


def test_densenet_full_width_channels():
    m = build_model("densenet121", 2)
    assert m.params["features.transition1.conv.weight"].shape[:2] == (128, 256)
    assert m.params["features.transition2.conv.weight"].shape[:2] == (256, 512)
    assert m.params["features.transition3.conv.weight"].shape[:2] == (512, 1024)
    assert m.params["features.norm5.weight"].shape == (1024,)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_small_models_shape_and_determinism(small_models, batch, arch):
    m = small_models[arch]
    a = forward(m, batch, "eval").data
    b = forward(m, batch, "eval").data
    assert a.shape == (2, 2) and a.tobytes() == b.tobytes()
    assert forward(m, batch, "train", np.random.default_rng(0)).shape == (2, 2)


def test_wrong_input_shape(small_models):
    with pytest.raises(ShapeError, match=r"\(N, 3, 224, 224\)"):
        forward(small_models["resnet50"], Tensor(np.zeros((1, 3, 256, 256), dtype=np.float32)))


def test_arch_and_classes_validated():
    with pytest.raises(ValueError, match="unknown architecture"):
        build_model("inception_v3", 2)
    with pytest.raises(ValueError, match="num_classes"):
        build_model("alexnet", 1)


class TestApplyWeights:
    def test_round_trip_bit_identical(self, batch):
        src = build_model("resnet50", 2, np.random.default_rng(1), SMALL)
        forward(src, batch, "train", np.random.default_rng(0))  # move running stats off their init
        dst = build_model("resnet50", 2, np.random.default_rng(2), SMALL)
        apply_weights(dst, {k: v.copy() for k, v in src.state().items()})
        assert forward(src, batch).data.tobytes() == forward(dst, batch).data.tobytes()

    def test_shape_mismatch(self):
        m = build_model("resnet50", 2, width_multiplier=SMALL)
        w = m.params["fc.weight"]
        with pytest.raises(ShapeError, match=rf"\({w.shape[1]}, 2\).*\(2, {w.shape[1]}\)"):
            apply_weights(m, {"fc.weight": np.zeros(w.shape[::-1])}, strict=False)

    def test_unknown_name(self):
        m = build_model("alexnet", 2, width_multiplier=SMALL)
        with pytest.raises(KeyError, match="classifier.9.weight"):
            apply_weights(m, {"classifier.9.weight": np.zeros(2)}, strict=False)

    def test_strict_lists_missing(self):
        m = build_model("alexnet", 2, width_multiplier=SMALL)
        state = dict(m.state())
        del state["features.3.bias"]
        with pytest.raises(KeyError) as err:
            apply_weights(m, state)
        assert err.value.args[0] == "missing parameters: features.3.bias"

    def test_partial_non_strict(self):
        m = build_model("alexnet", 2, width_multiplier=SMALL)
        before = m.params["features.0.weight"].data.copy()
        apply_weights(m, {"classifier.6.bias": np.array([1.0, -1.0])}, strict=False)
        assert m.params["classifier.6.bias"].data.tolist() == [1.0, -1.0]
        np.testing.assert_array_equal(m.params["features.0.weight"].data, before)


def test_freeze_backbone():
    m = build_model("alexnet", 2, width_multiplier=SMALL)
    freeze_backbone(m)
    assert set(m.trainable()) == {"classifier.6.weight", "classifier.6.bias"}
    freeze_backbone(m, False)
    assert len(m.trainable()) == len(m.params)


def test_oracle_module_is_standalone():
    import param_oracle
    src = open(param_oracle.__file__).read()
    assert "fungnet" not in src.replace("nothing here imports the package", "")
    assert ORACLE["alexnet"](2) == 61_100_840 - 998 * 4097
