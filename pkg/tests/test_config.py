import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from tilestream.accel import PeProfile
from tilestream.cli import CONFIG_DIR
from tilestream.config import (
    ConnectedLayer,
    ConvLayer,
    HwConfig,
    LayerParams,
    MaxpoolLayer,
    NetworkConfig,
    SoftmaxLayer,
    format_hw_config,
    format_network_cfg,
    load_weights,
    parse_hw_config,
    parse_hw_text,
    parse_network_cfg,
    parse_network_text,
    random_weights,
    save_weights,
)
from tilestream.errors import ConfigError, ParseError, WeightsFormatError
from tilestream.scheduler import MappingMode

MINIMAL = """
[net]
channels=1
height=28
width=28

[conv]
filters=4
size=3
stride=1
pad=1

[maxpool]
size=2
stride=2

[fully_connected]
output=10

[softmax]
"""


class TestNetworkParse:
    def test_minimal(self):
        net = parse_network_text(MINIMAL)
        assert len(net.layers) == 4
        assert net.in_shapes[2] == (4, 14, 14)
        assert net.param_shapes()[2] == [((10, 4 * 14 * 14), 10)]

    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.cfg"
        p.write_text("")
        with pytest.raises(ParseError) as info:
            parse_network_cfg(p)
        assert str(p) in str(info.value)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ParseError):
            parse_network_cfg(tmp_path / "nope.cfg")

    @pytest.mark.parametrize("name,convs,total", [("cifar_darknet", 4, 9), ("mnist", 2, 7),
                                                  ("cifar_alex", 3, 8)])
    def test_shipped_models(self, name, convs, total):
        net = parse_network_cfg(CONFIG_DIR / f"{name}.cfg")
        assert len(net.conv_indices) == convs and len(net.layers) == total

    def test_aliases(self):
        net = parse_network_text("[net]\nchannels=1\nheight=4\nwidth=4\n[convolutional]\nfilters=2\nkernel=3\n"
                                 "[connected]\noutputs=3\n")
        assert net.layers == (ConvLayer(2, 3), ConnectedLayer(3))

    @pytest.mark.parametrize("text,line", [
        ("[net]\nchannels=1\nheight=4\nwidth=4\n\n[pool]\nsize=2\n", 6),
        ("[net]\nchannels=1\nheight=4\nwidth=4\n[conv]\nfilters=two\nsize=3\n", 6),
        ("[net]\nchannels=1\nheight=4\nwidth=4\n[conv]\nfilters=2\nsize=7\n", 5),
        ("[net]\nchannels=1\nheight=4\nwidth=4\n[maxpool]\nsize=2\nsize=2\n", 7),
        ("[net]\nchannels=1\nheight=4\nwidth=4\n[maxpool]\nsize=2\nwobble=1\n", 7),
        ("[net]\nchannels=1\nheight=4\nwidth=4\n[conv]\nfilters=2\nsize=1\nactivation=tanh\n", 8),
    ])
    def test_errors_carry_line_numbers(self, text, line):
        with pytest.raises(ParseError) as info:
            parse_network_text(text, "net.cfg")
        assert info.value.line == line
        assert str(info.value).startswith(f"net.cfg:{line}:")

    def test_no_layers(self):
        with pytest.raises(ParseError):
            parse_network_text("[net]\nchannels=1\nheight=4\nwidth=4\n")


layer_st = st.one_of(
    st.builds(ConvLayer, filters=st.integers(1, 6), kernel=st.integers(1, 3), stride=st.integers(1, 2),
              pad=st.integers(0, 1), activation=st.sampled_from(["linear", "relu", "leaky", "logistic"])),
    st.builds(MaxpoolLayer, size=st.integers(1, 2), stride=st.integers(1, 2)),
)


@st.composite
def networks(draw):
    shape = (draw(st.integers(1, 3)), draw(st.integers(4, 12)), draw(st.integers(4, 12)))
    layers = draw(st.lists(layer_st, min_size=0, max_size=4))
    if draw(st.booleans()):
        layers.append(ConnectedLayer(draw(st.integers(1, 10)), draw(st.sampled_from(["linear", "relu"]))))
        if draw(st.booleans()):
            layers.append(SoftmaxLayer())
    assume(layers)
    try:
        return NetworkConfig(shape, layers, draw(st.booleans()))
    except ConfigError:
        assume(False)


@settings(max_examples=80, deadline=None)
@given(networks())
def test_network_round_trip(net):
    assert parse_network_text(format_network_cfg(net)) == net


class TestHwParse:
    def test_default(self):
        hw = parse_hw_config(CONFIG_DIR / "default.hw_config")
        assert hw.tile_size == 32 and len(hw.clusters) == 2
        assert sorted(p.kind for p in hw.clusters[0]) == ["S-PE", "S-PE", "VEC", "VEC"]
        assert [p.kind for p in hw.clusters[1]] == ["F-PE"] * 6

    def test_single_pe(self):
        hw = parse_hw_text("tile_size = 8\n[cluster]\npe = F-PE\n")
        assert hw.clusters == ((PeProfile("F-PE"),),)
        assert hw.mode is MappingMode.WS

    def test_pe_options(self):
        hw = parse_hw_text("tile_size = 8\n[cluster]\npe = s-pe 2 slowdown=3 overhead=0.001\n")
        assert hw.clusters[0] == (PeProfile("S-PE", 3.0, 0.001),) * 2

    @pytest.mark.parametrize("text,line", [
        ("tile_size = 0\n[cluster]\npe = F-PE\n", 1),
        ("tile_size = 8\n", 1),
        ("[cluster]\npe = F-PE\n", 1),
        ("tile_size = 8\n[cluster]\npe = F-PE slowdown=0\n", 3),
        ("tile_size = 8\n[cluster]\npe = F-PE slowdown=-2\n", 3),
        ("tile_size = 8\n[cluster]\npe = TPU\n", 3),
        ("tile_size = 8\n[cluster]\n", 2),
        ("tile_size = 8\nmode = rr\n[cluster]\npe = F-PE\n", 2),
    ])
    def test_rejected(self, text, line):
        with pytest.raises(ParseError) as info:
            parse_hw_text(text, "x.hw_config")
        assert info.value.line == line and "x.hw_config" in str(info.value)

    def test_sc_fallback(self):
        hw = parse_hw_text("tile_size = 8\n[cluster]\npe = F-PE\n")
        assert hw.clusters_for("sc") == (hw.clusters, None)

    def test_shipped_hw_configs_parse(self):
        for p in sorted(CONFIG_DIR.glob("*.hw_config")):
            parse_hw_config(p)


profile_st = st.builds(PeProfile, kind=st.sampled_from(["F-PE", "S-PE", "VEC"]),
                       slowdown=st.floats(0.1, 10), overhead=st.floats(0, 0.01))
cluster_st = st.lists(profile_st, min_size=1, max_size=4).map(tuple)


@settings(max_examples=80, deadline=None)
@given(clusters=st.lists(cluster_st, min_size=1, max_size=3), sc=st.lists(cluster_st, max_size=2),
       ts=st.integers(1, 64), spm=st.floats(0, 1e-6), cap=st.integers(1, 4), depth=st.integers(1, 3),
       mode=st.sampled_from(list(MappingMode)), smap=st.none() | st.lists(st.integers(0, 3), min_size=1).map(tuple))
def test_hw_round_trip(clusters, sc, ts, spm, cap, depth, mode, smap):
    hw = HwConfig(clusters, ts, spm, cap, depth, mode, smap, sc, smap)
    assert parse_hw_text(format_hw_config(hw)) == hw


class TestWeights:
    def test_round_trip_bitwise(self, tmp_path, tiny_net):
        params = random_weights(tiny_net, 3)
        path = tmp_path / "w.bin"
        save_weights(path, tiny_net, params)
        loaded = load_weights(path, tiny_net)
        for p, q in zip(params, loaded):
            if p is None:
                assert q is None
            else:
                assert p.weights == q.weights and np.array_equal(p.bias, q.bias)
        assert path.stat().st_size == 8 + 4 * tiny_net.param_count()

    def test_seeded(self, tiny_net):
        a, b = random_weights(tiny_net, 1), random_weights(tiny_net, 1)
        assert a[0].weights == b[0].weights
        assert not random_weights(tiny_net, 2)[0].weights == a[0].weights

    def test_truncated_names_layer(self, tmp_path, tiny_net):
        path = tmp_path / "w.bin"
        save_weights(path, tiny_net, random_weights(tiny_net))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(WeightsFormatError, match="layer 2"):
            load_weights(path, tiny_net)

    def test_trailing_bytes(self, tmp_path, tiny_net):
        path = tmp_path / "w.bin"
        save_weights(path, tiny_net, random_weights(tiny_net))
        path.write_bytes(path.read_bytes() + b"\0\0\0\0")
        with pytest.raises(WeightsFormatError, match="size mismatch"):
            load_weights(path, tiny_net)

    def test_bad_magic(self, tmp_path, tiny_net):
        path = tmp_path / "w.bin"
        path.write_bytes(b"DARK" + b"\x01\0\0\0")
        with pytest.raises(WeightsFormatError, match="magic"):
            load_weights(path, tiny_net)

    def test_header_only_for_parameterless_net(self, tmp_path):
        net = parse_network_text("[net]\nchannels=1\nheight=4\nwidth=4\n[maxpool]\nsize=2\n[softmax]\n")
        path = tmp_path / "w.bin"
        save_weights(path, net, random_weights(net))
        assert path.read_bytes() == b"SYNW\x01\x00\x00\x00"
        assert load_weights(path, net) == [None, None]

    def test_save_rejects_wrong_shapes(self, tmp_path, tiny_net):
        params = random_weights(tiny_net)
        params[0] = LayerParams(params[2].weights, params[2].bias)
        with pytest.raises(ConfigError):
            save_weights(tmp_path / "w.bin", tiny_net, params)
