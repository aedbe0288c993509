import threading

import numpy as np
import pytest

from conftest import rel_err
from tilestream.cli import CONFIG_DIR
from tilestream.config import ConvLayer, NetworkConfig, parse_hw_text, parse_network_cfg, parse_network_text
from tilestream.errors import ConfigError, LifecycleError, PipelineError
from tilestream.pipeline import (
    CLOSED,
    Cancelled,
    Frame,
    Mailbox,
    build_pipeline,
    collect_utilization,
    run_sequential,
    stage_overlaps,
    synthetic_frames,
)

TWO_STAGE_NET = """
[net]
channels=4
height=16
width=16

[conv]
filters=4
size=3
pad=1
activation=leaky

[conv]
filters=4
size=3
pad=1
"""

TWO_STAGE_HW = """
tile_size = 32
seconds_per_mac = 8e-9
mode = sf
static_map = 0, 1

[cluster]
pe = F-PE 1

[cluster]
pe = F-PE 1
"""


class TestMailbox:
    def test_fifo_and_capacity(self):
        box = Mailbox(2)
        box.send(Frame(0, "a"))
        box.send(Frame(1, "b"))
        assert len(box) == 2
        cancel = threading.Event()
        cancel.set()
        with pytest.raises(Cancelled):
            box.send(Frame(2, "c"), cancel)
        assert box.receive().payload == "a"
        assert box.receive().payload == "b"

    def test_receive_cancel(self):
        cancel = threading.Event()
        cancel.set()
        with pytest.raises(Cancelled):
            Mailbox(1).receive(cancel)

    def test_frame_ids_must_increase(self):
        box = Mailbox(4)
        box.send(Frame(3, None))
        with pytest.raises(ConfigError):
            box.send(Frame(3, None))
        box.send(CLOSED)

    def test_zero_capacity(self):
        with pytest.raises(ConfigError):
            Mailbox(0)


class TestBuild:
    def test_mnist_stages_and_mailboxes(self):
        net = parse_network_cfg(CONFIG_DIR / "mnist.cfg")
        hw = parse_hw_text("tile_size = 32\nseconds_per_mac = 0\n[cluster]\npe = F-PE 2\n")
        with build_pipeline(net, hw) as pipe:
            assert len(pipe.stages) == 7 and len(pipe.mailboxes) == 6
            assert all(m.capacity == 2 for m in pipe.mailboxes)

    def test_single_layer(self, two_cluster_hw):
        net = parse_network_text("[net]\nchannels=1\nheight=2\nwidth=2\n[maxpool]\nsize=2\n")
        with build_pipeline(net, two_cluster_hw) as pipe:
            assert len(pipe.stages) == 1 and pipe.mailboxes == []
            assert pipe.runtime is None
            outputs, _ = pipe.run_stream([np.arange(4, dtype=np.float32).reshape(1, 2, 2)])
        assert outputs[0].output.tolist() == [3.0]

    def test_zero_size_input(self):
        with pytest.raises(ConfigError):
            NetworkConfig((1, 0, 28), [ConvLayer(1, 1)])

    def test_weight_count_mismatch(self, tiny_net, two_cluster_hw):
        with pytest.raises(ConfigError):
            build_pipeline(tiny_net, two_cluster_hw, weights=[None])

    def test_closed_pipeline(self, tiny_net, two_cluster_hw):
        pipe = build_pipeline(tiny_net, two_cluster_hw)
        pipe.close()
        with pytest.raises(LifecycleError):
            pipe.run_stream([])


class TestStreaming:
    def test_single_frame_matches_sequential(self, three_conv_net, two_cluster_hw):
        frames = list(synthetic_frames(three_conv_net, 1, seed=4))
        with build_pipeline(three_conv_net, two_cluster_hw, "sf") as pipe:
            streamed, _ = pipe.run_stream(frames)
            seq, _ = pipe.run_sequential(frames)
        assert np.array_equal(streamed[0].output, seq[0].output)
        assert streamed[0].output.shape == (7,)
        assert streamed[0].output.sum() == pytest.approx(1.0, abs=1e-6)

    def test_identical_frames_identical_outputs(self, tiny_net, two_cluster_hw):
        frame = next(synthetic_frames(tiny_net, 1, seed=2)).payload
        with build_pipeline(tiny_net, two_cluster_hw, "ws") as pipe:
            outputs, metrics = pipe.run_stream([frame] * 100)
        assert [f.frame_id for f in outputs] == list(range(100))
        first = outputs[0].output
        assert all(np.array_equal(f.output, first) for f in outputs)
        assert metrics.frames == 100 and len(metrics.latencies_s) == 100

    def test_caller_frames_untouched(self, tiny_net, two_cluster_hw):
        frames = list(synthetic_frames(tiny_net, 3))
        before = [f.payload.copy() for f in frames]
        with build_pipeline(tiny_net, two_cluster_hw) as pipe:
            pipe.run_stream(frames)
            pipe.run_stream(frames)
        assert all(np.array_equal(a, f.payload) and not f.timestamps for a, f in zip(before, frames))

    def test_pipelining_overlaps_stages(self):
        net = parse_network_text(TWO_STAGE_NET)
        hw = parse_hw_text(TWO_STAGE_HW)
        frames = list(synthetic_frames(net, 40, seed=1))
        with build_pipeline(net, hw) as pipe:
            seq, seq_m = pipe.run_sequential(frames)
            par, par_m = pipe.run_stream(frames)
        assert [f.frame_id for f in par] == list(range(40))
        assert all(np.array_equal(a.output, b.output) for a, b in zip(seq, par))
        assert stage_overlaps(par) and not stage_overlaps(seq)
        assert par_m.wall_time_s < 0.75 * seq_m.wall_time_s

    def test_stage_failure(self, tiny_net, two_cluster_hw):
        pipe = build_pipeline(tiny_net, two_cluster_hw)
        stage = pipe.stages[2]
        original = stage.compute
        calls = []

        def flaky(payload, cancel=None):
            calls.append(1)
            if len(calls) == 3:
                raise RuntimeError("boom")
            return original(payload, cancel)

        stage.compute = flaky
        try:
            with pytest.raises(PipelineError, match="boom"):
                pipe.run_stream(list(synthetic_frames(tiny_net, 10)))
            with pytest.raises(LifecycleError):
                pipe.run_stream([])
        finally:
            pipe.close()

    def test_empty_stream(self, tiny_net, two_cluster_hw):
        with build_pipeline(tiny_net, two_cluster_hw) as pipe:
            outputs, m = pipe.run_stream([])
        assert outputs == [] and m.frames == 0
        assert m.throughput_fps == 0.0 and m.latency_ms_mean == 0.0
        assert m.per_cluster_utilization == [0.0, 0.0]

    def test_cpu_only_matches_accelerated(self, three_conv_net, two_cluster_hw):
        frames = list(synthetic_frames(three_conv_net, 3, seed=9))
        cpu, m_cpu = run_sequential(three_conv_net, two_cluster_hw, frames, accelerated=False, seed=1)
        acc, _ = run_sequential(three_conv_net, two_cluster_hw, frames, mode="ws", seed=1)
        assert m_cpu.mode == "cpu" and not m_cpu.accelerated
        for a, b in zip(cpu, acc):
            assert rel_err(a.output, b.output) <= 1e-4

    def test_synthetic_frames_are_seeded(self, tiny_net, three_conv_net):
        a = [f.payload for f in synthetic_frames(tiny_net, 2, seed=5)]
        b = [f.payload for f in synthetic_frames(tiny_net, 2, seed=5)]
        assert all(np.array_equal(x, y) for x, y in zip(a, b)) and a[0].dtype == np.float32
        assert next(synthetic_frames(three_conv_net, 1)).payload.dtype == np.uint8


class _FakeCluster:
    def __init__(self, busy, pes):
        self._busy, self.pes = busy, [None] * pes

    def busy_time(self):
        return self._busy


class TestUtilization:
    def test_no_jobs(self):
        assert collect_utilization([_FakeCluster(0.0, 2)], 1.0) == [0.0]

    def test_fully_busy(self):
        assert collect_utilization([_FakeCluster(2.0, 2), _FakeCluster(0.5, 1)], 1.0) == [1.0, 0.5]

    def test_zero_wall(self):
        assert collect_utilization([_FakeCluster(1.0, 1)], 0.0) == [0.0]

    def test_fraction_bounds(self, tiny_net, two_cluster_hw):
        with build_pipeline(tiny_net, two_cluster_hw) as pipe:
            _, m = pipe.run_stream(list(synthetic_frames(tiny_net, 5)))
        assert all(0.0 <= u <= 1.0 for u in m.per_cluster_utilization)
        assert len(m.per_layer_ms) == 4
