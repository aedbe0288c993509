"""Layer-per-thread pipelined execution of a whole network.

Each layer is a stage running on its own thread; adjacent stages are joined
by bounded mailboxes, so consecutive frames occupy different layers at the
same time. CONV stages hand their matrix product to the accelerator
clusters through a courier; every other layer runs on the host thread of
its stage.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .accel import AcceleratorRuntime
from .config import (
    ConnectedLayer,
    ConvLayer,
    HwConfig,
    MaxpoolLayer,
    NetworkConfig,
    SoftmaxLayer,
    random_weights,
)
from .errors import ConfigError, LifecycleError, PipelineError
from .scheduler import MappingMode, Thief, capability, static_map
from .tensor import (
    DTYPE,
    Tensor3,
    activate,
    conv_im2col,
    fully_connected,
    im2col,
    maxpool,
    normalize,
    softmax,
)

log = logging.getLogger(__name__)

CLOSED = object()
_POLL = 0.05


class Cancelled(Exception):
    pass


class Mailbox:
    """Bounded FIFO between two stages; blocks on full send and empty receive."""

    def __init__(self, capacity=2, name="mailbox"):
        if capacity < 1:
            raise ConfigError(f"mailbox capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.name = name
        self._q = queue.Queue(maxsize=capacity)
        self._last_id = None

    def send(self, frame, cancel=None):
        if frame is not CLOSED:
            if self._last_id is not None and frame.frame_id <= self._last_id:
                raise ConfigError(f"{self.name}: frame {frame.frame_id} after {self._last_id}")
            self._last_id = frame.frame_id
        while True:
            try:
                self._q.put(frame, timeout=_POLL)
                return
            except queue.Full:
                if cancel is not None and cancel.is_set():
                    raise Cancelled from None

    def receive(self, cancel=None):
        while True:
            try:
                return self._q.get(timeout=_POLL)
            except queue.Empty:
                if cancel is not None and cancel.is_set():
                    raise Cancelled from None

    def __len__(self):
        return self._q.qsize()


@dataclass
class Frame:
    frame_id: int
    payload: object
    timestamps: dict = field(default_factory=dict)

    @property
    def output(self) -> np.ndarray:
        p = self.payload
        return p.flatten() if isinstance(p, Tensor3) else np.asarray(p)


@dataclass
class RunMetrics:
    frames: int
    wall_time_s: float
    latencies_s: list
    per_layer_s: list
    cluster_busy_s: list
    per_cluster_utilization: list
    mode: str
    pipelined: bool
    accelerated: bool = True
    jobs_stolen: int = 0

    @property
    def throughput_fps(self):
        return self.frames / self.wall_time_s if self.frames and self.wall_time_s > 0 else 0.0

    @property
    def latency_ms_mean(self):
        return 1000.0 * float(np.mean(self.latencies_s)) if self.latencies_s else 0.0

    @property
    def per_layer_ms(self):
        return [1000.0 * t for t in self.per_layer_s]

    @property
    def mean_utilization(self):
        u = self.per_cluster_utilization
        return float(np.mean(u)) if u else 0.0


def collect_utilization(clusters, wall_time):
    """Busy fraction per cluster: engine busy time over engines x wall time."""
    if wall_time <= 0:
        return [0.0 for _ in clusters]
    return [min(1.0, c.busy_time() / (len(c.pes) * wall_time)) for c in clusters]


def stage_overlaps(frames):
    """True when two different stages were busy at the same moment."""
    spans = [(s, t0, t1) for f in frames for s, (t0, t1) in f.timestamps.items()]
    spans.sort(key=lambda x: x[1])
    for i, (s, t0, t1) in enumerate(spans):
        for s2, u0, u1 in spans[i + 1:]:
            if u0 >= t1:
                break
            if s2 != s and u0 < t1 and t0 < u1:
                return True
    return False


# -- stages --------------------------------------------------------------------


class LayerStage:
    def __init__(self, index, layer, in_shape, out_shape, params=None, normalize_input=False):
        self.index = index
        self.layer = layer
        self.in_shape = in_shape
        self.out_shape = out_shape
        self.params = params
        self.normalize_input = normalize_input

    @property
    def name(self):
        return f"{self.index}:{self.layer.kind}"

    def prepare(self, payload):
        if self.normalize_input and isinstance(payload, np.ndarray) and payload.dtype == np.uint8:
            return normalize(payload)
        if isinstance(payload, np.ndarray) and payload.ndim == 3:
            return Tensor3(payload)
        return payload

    def compute(self, payload, cancel=None):
        payload = self.prepare(payload)
        layer = self.layer
        if isinstance(layer, MaxpoolLayer):
            return maxpool(_as_tensor(payload, self.in_shape), layer.size, layer.stride)
        if isinstance(layer, ConnectedLayer):
            vec = payload.flatten() if isinstance(payload, Tensor3) else np.asarray(payload, DTYPE).ravel()
            y = fully_connected(vec, self.params.weights, self.params.bias)
            return activate(y, layer.activation)
        if isinstance(layer, SoftmaxLayer):
            vec = payload.flatten() if isinstance(payload, Tensor3) else payload
            return softmax(vec)
        raise ConfigError(f"no host kernel for {layer!r}")


class ConvStage(LayerStage):
    """CONV layer: im2col, then the product as tile jobs on a cluster (or on
    the host when ``runtime`` is None), then bias and activation."""

    def __init__(self, *args, runtime=None, cluster_id=0, **kw):
        super().__init__(*args, **kw)
        self.runtime = runtime
        self.cluster_id = cluster_id

    def compute(self, payload, cancel=None):
        inp = _as_tensor(self.prepare(payload), self.in_shape)
        p = self.layer.params
        if self.runtime is None:
            out = conv_im2col(inp, self.params.weights, self.params.bias, p)
        else:
            cols = im2col(inp, p)
            prod = self.runtime.run_product(self.params.weights, cols, self.index, self.cluster_id, cancel)
            data = prod.data + np.asarray(self.params.bias, DTYPE)[:, None]
            out = Tensor3(data.reshape(self.out_shape))
        return activate(out, self.layer.activation)


def _as_tensor(payload, shape):
    if isinstance(payload, Tensor3):
        if payload.shape != tuple(shape):
            raise ConfigError(f"expected a {shape} feature map, got {payload.shape}")
        return payload
    arr = np.asarray(payload, dtype=DTYPE)
    return Tensor3(arr.reshape(shape))


# -- pipeline ------------------------------------------------------------------


class Pipeline:
    """A built network: stages, the accelerator runtime and mailboxes.

    Use as a context manager, or call :meth:`close` when done.
    """

    def __init__(self, net, stages, runtime, mode, mailbox_capacity=2, thief=None, mapping=None):
        self.net = net
        self.stages = stages
        self.runtime = runtime
        self.mode = mode
        self.mailbox_capacity = mailbox_capacity
        self.thief = thief
        self.mapping = mapping or {}
        self.mailboxes = self._make_mailboxes()
        self._broken = None
        self._closed = False

    def _make_mailboxes(self):
        return [Mailbox(self.mailbox_capacity, f"mailbox{i}->{i + 1}") for i in range(len(self.stages) - 1)]

    @property
    def clusters(self):
        return self.runtime.clusters if self.runtime is not None else []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if not self._closed and self.runtime is not None:
            self.runtime.stop()
        self._closed = True

    def _check_usable(self):
        if self._closed:
            raise LifecycleError("pipeline is closed")
        if self._broken is not None:
            raise LifecycleError("pipeline is unusable after a stage failure") from self._broken

    def _begin(self):
        self._check_usable()
        if self.runtime is not None:
            self.runtime.reset_stats()
        self._stolen0 = self.thief.jobs_stolen if self.thief else 0
        return time.perf_counter()

    def _metrics(self, outputs, t_start, t_end, pipelined):
        wall = t_end - t_start
        n = len(self.stages)
        per_layer = [0.0] * n
        latencies = []
        for f in outputs:
            for s, (a, b) in f.timestamps.items():
                per_layer[s] += b - a
            latencies.append(f.timestamps[n - 1][1] - f.timestamps[0][0])
        if outputs:
            per_layer = [t / len(outputs) for t in per_layer]
        return RunMetrics(
            frames=len(outputs),
            wall_time_s=wall,
            latencies_s=latencies,
            per_layer_s=per_layer,
            cluster_busy_s=self.runtime.busy_times() if self.runtime else [],
            per_cluster_utilization=collect_utilization(self.clusters, wall) if outputs else [0.0] * len(self.clusters),
            mode=str(self.mode) if self.runtime else "cpu",
            pipelined=pipelined,
            accelerated=self.runtime is not None,
            jobs_stolen=(self.thief.jobs_stolen - self._stolen0) if self.thief else 0,
        )

    def run_sequential(self, frames):
        """One frame at a time, one layer at a time, on the calling thread."""
        t_start = self._begin()
        outputs = []
        for frame in _frames(frames):
            for i, stage in enumerate(self.stages):
                t0 = time.perf_counter()
                frame.payload = stage.compute(frame.payload)
                frame.timestamps[i] = (t0, time.perf_counter())
            outputs.append(frame)
        return outputs, self._metrics(outputs, t_start, time.perf_counter(), pipelined=False)

    def run_stream(self, frames):
        """Push frames through all stages concurrently; outputs come back in
        frame order. A failing stage cancels the run and the error is
        raised as :class:`PipelineError`."""
        t_start = self._begin()
        n = len(self.stages)
        self.mailboxes = self._make_mailboxes()
        source = Mailbox(self.mailbox_capacity, "source")
        sink = Mailbox(self.mailbox_capacity, "sink")
        inboxes = [source, *self.mailboxes]
        outboxes = [*self.mailboxes, sink]
        cancel = threading.Event()
        errors = []

        def fail(exc):
            errors.append(exc)
            cancel.set()

        def feeder():
            try:
                for frame in _frames(frames):
                    source.send(frame, cancel)
                source.send(CLOSED, cancel)
            except Cancelled:
                pass
            except Exception as exc:  # bad input frames
                fail(exc)

        def stage_loop(i):
            stage, inbox, outbox = self.stages[i], inboxes[i], outboxes[i]
            try:
                while True:
                    frame = inbox.receive(cancel)
                    if frame is CLOSED:
                        outbox.send(CLOSED, cancel)
                        return
                    t0 = time.perf_counter()
                    frame.payload = stage.compute(frame.payload, cancel)
                    frame.timestamps[i] = (t0, time.perf_counter())
                    outbox.send(frame, cancel)
            except Cancelled:
                pass
            except Exception as exc:
                log.error("stage %s failed: %s", stage.name, exc)
                fail(exc)

        threads = [threading.Thread(target=feeder, name="feeder", daemon=True)]
        threads += [threading.Thread(target=stage_loop, args=(i,), name=f"stage-{self.stages[i].name}",
                                     daemon=True) for i in range(n)]
        for t in threads:
            t.start()
        outputs = []
        try:
            while True:
                frame = sink.receive(cancel)
                if frame is CLOSED:
                    break
                outputs.append(frame)
        except Cancelled:
            pass
        t_end = time.perf_counter()
        for t in threads:
            t.join()
        if errors:
            self._broken = errors[0]
            raise PipelineError(f"pipeline stage failed: {errors[0]}") from errors[0]
        return outputs, self._metrics(outputs, t_start, t_end, pipelined=True)


def _frames(frames):
    """Fresh Frames for a run; raw payloads are numbered from 0. Caller
    frames are not mutated, so one input list can feed several runs."""
    for i, f in enumerate(frames):
        yield Frame(f.frame_id, f.payload) if isinstance(f, Frame) else Frame(i, f)


def resolve_mapping(net: NetworkConfig, hw: HwConfig, mode):
    """Clusters used by ``mode`` and the CONV layer -> cluster map."""
    profiles, explicit = hw.clusters_for(mode)
    convs = net.conv_indices
    if explicit is not None:
        if len(explicit) != len(convs):
            raise ConfigError(f"static map lists {len(explicit)} clusters for {len(convs)} CONV layers")
        for cid in explicit:
            if not 0 <= cid < len(profiles):
                raise ConfigError(f"static map names cluster {cid}, only {len(profiles)} exist")
        return profiles, dict(zip(convs, explicit))
    return profiles, static_map(net.job_counts(hw.tile_size), [capability(p) for p in profiles])


def build_pipeline(net: NetworkConfig, hw: HwConfig, mode=None, weights=None, *,
                   accelerated=True, record_executions=False, seed=0,
                   reaction_time=None) -> Pipeline:
    """Instantiate stages, clusters and (in WS mode) the thief.

    ``weights`` defaults to :func:`random_weights` with ``seed``. With
    ``accelerated=False`` CONV layers run on the host and no clusters are
    created.
    """
    mode = MappingMode.parse(mode if mode is not None else hw.mode)
    if weights is None:
        weights = random_weights(net, seed)
    if len(weights) != len(net.layers):
        raise ConfigError(f"{len(weights)} parameter sets for {len(net.layers)} layers")
    runtime = thief = None
    mapping = {}
    if accelerated and net.conv_indices:
        profiles, mapping = resolve_mapping(net, hw, mode)
        runtime = AcceleratorRuntime(profiles, hw.tile_size, hw.seconds_per_mac, hw.feed_depth,
                                     record_executions=record_executions)
        if mode is MappingMode.WS:
            kw = {} if reaction_time is None else {"reaction_time": reaction_time}
            thief = Thief(runtime.clusters, **kw)
            runtime.attach(thief)
    stages = []
    for i, layer in enumerate(net.layers):
        args = (i, layer, net.in_shapes[i], net.out_shapes[i], weights[i], net.normalize and i == 0)
        if isinstance(layer, ConvLayer):
            stages.append(ConvStage(*args, runtime=runtime, cluster_id=mapping.get(i, 0)))
        else:
            stages.append(LayerStage(*args))
    if runtime is not None:
        runtime.start()
    return Pipeline(net, stages, runtime, mode, hw.mailbox_capacity, thief, mapping)


def run_stream(pipeline: Pipeline, frames):
    return pipeline.run_stream(frames)


def run_sequential(net, hw, frames, weights=None, *, mode=None, accelerated=True, seed=0):
    """Non-pipelined baseline; builds and tears down its own pipeline."""
    with build_pipeline(net, hw, mode, weights, accelerated=accelerated, seed=seed) as pipe:
        return pipe.run_sequential(frames)


def synthetic_frames(net: NetworkConfig, count, seed=0):
    """Deterministic input frames from PCG64 seeded with ``[seed, 0]``:
    uint8 pixels when the net normalizes its input, else float32 in [0, 1)."""
    rng = np.random.Generator(np.random.PCG64([seed, 0]))
    shape = net.input_shape
    for i in range(count):
        if net.normalize:
            data = rng.integers(0, 256, size=shape, dtype=np.uint8)
        else:
            data = rng.random(size=shape, dtype=np.float32)
        yield Frame(i, data)
