"""Simulated heterogeneous processing engines and their clusters.

Every engine computes its jobs with full numeric fidelity and then pads the
job out to the time its performance profile allows, so fast and slow
engines produce identical results but different timelines.

Threads per cluster: one dispatcher moving jobs from the shared job queue
into per-engine feed buffers (round robin), and one worker per engine that
runs the request / compute / acknowledge loop. Acknowledgments go to a
:class:`CompletionBoard` keyed by layer, so a layer's courier learns about
completion no matter which cluster ran each job.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass

from .errors import ConfigError, LifecycleError, ProtocolError
from .jobs import DEFAULT_TILE_SIZE, execute_job, generate_jobs, parse_job
from .tensor import Matrix

log = logging.getLogger(__name__)

PE_KINDS = {"F-PE": 1.0, "S-PE": 2.5, "VEC": 1.8}
DEFAULT_SECONDS_PER_MAC = 1e-9
IDLE, BUSY = "idle", "busy"

# Poll interval for blocking waits that must also notice cancellation.
_POLL = 0.05


@dataclass(frozen=True)
class PeProfile:
    """Performance profile of one engine.

    ``slowdown`` multiplies the nominal job time; ``overhead`` is a fixed
    per-job cost in seconds. ``slowdown=None`` takes the kind's preset.
    """

    kind: str
    slowdown: float | None = None
    overhead: float = 0.0

    def __post_init__(self):
        if self.kind not in PE_KINDS:
            raise ConfigError(f"unknown PE kind {self.kind!r}; expected one of {', '.join(PE_KINDS)}")
        if self.slowdown is None:
            object.__setattr__(self, "slowdown", PE_KINDS[self.kind])
        if not self.slowdown > 0:
            raise ConfigError(f"PE slowdown must be > 0, got {self.slowdown}")
        if self.overhead < 0:
            raise ConfigError(f"PE overhead must be >= 0, got {self.overhead}")


@dataclass(frozen=True)
class ServiceModel:
    tile_size: int = DEFAULT_TILE_SIZE
    seconds_per_mac: float = DEFAULT_SECONDS_PER_MAC

    def nominal(self, job) -> float:
        # 2*TS^3 operations per t3 step of the tile loop
        steps = math.ceil(job.k / self.tile_size)
        return 2 * self.tile_size ** 3 * steps * self.seconds_per_mac

    def service_time(self, job, profile: PeProfile) -> float:
        return profile.slowdown * self.nominal(job) + profile.overhead


class CompletionBoard:
    """Outstanding-job counters per layer with a blocking wait."""

    def __init__(self):
        self._cv = threading.Condition()
        self._outstanding = Counter()
        self._acks = Counter()
        self._submitted = Counter()
        self._error = None

    def add(self, layer_id, count=1):
        with self._cv:
            self._outstanding[layer_id] += count
            self._submitted[layer_id] += count

    def ack(self, layer_id):
        with self._cv:
            if self._outstanding[layer_id] <= 0:
                raise ProtocolError(f"acknowledgment for layer {layer_id} with no outstanding jobs")
            self._outstanding[layer_id] -= 1
            self._acks[layer_id] += 1
            if self._outstanding[layer_id] == 0:
                self._cv.notify_all()

    def outstanding(self, layer_id) -> int:
        with self._cv:
            return self._outstanding[layer_id]

    def acks(self, layer_id) -> int:
        with self._cv:
            return self._acks[layer_id]

    def submitted(self, layer_id) -> int:
        with self._cv:
            return self._submitted[layer_id]

    def wait(self, layer_id, cancel: threading.Event | None = None):
        """Block until ``layer_id`` has no outstanding jobs."""
        with self._cv:
            while self._outstanding[layer_id] > 0:
                if self._error is not None:
                    raise LifecycleError(f"runtime stopped while waiting on layer {layer_id}") from self._error
                if cancel is not None and cancel.is_set():
                    raise LifecycleError(f"wait on layer {layer_id} cancelled")
                self._cv.wait(_POLL)

    def fail(self, error):
        with self._cv:
            self._error = error
            self._cv.notify_all()


class ProcessingEngine:
    """One engine of a cluster together with its delegate endpoints."""

    def __init__(self, cluster, index, profile: PeProfile):
        self.cluster = cluster
        self.index = index
        self.profile = profile
        self.busy_time = 0.0
        self.jobs_done = 0
        self._start = threading.Event()
        self.thread = None

    @property
    def name(self):
        return f"c{self.cluster.cluster_id}.pe{self.index}:{self.profile.kind}"

    # delegate side of the control channel
    def start_signal(self):
        self._start.set()

    def wait_for_start_signal(self):
        self._start.wait()

    def ask_for_a_job(self):
        return self.cluster._next_job(self.index)

    def send_acknowledgment(self, layer_id):
        self.cluster._acknowledge(self.index, layer_id)


def pe_worker_loop(pe: ProcessingEngine):
    """Request a job, compute it, charge the profile's service time,
    acknowledge; until the cluster shuts down."""
    cluster = pe.cluster
    service = cluster.service
    pe.wait_for_start_signal()
    while True:
        job = pe.ask_for_a_job()
        if job is None:
            return
        try:
            layer_id = parse_job(job)[-1]
            t0 = time.perf_counter()
            execute_job(job, service.tile_size)
            remaining = t0 + service.service_time(job, pe.profile) - time.perf_counter()
            if remaining > 0:
                time.sleep(remaining)
            pe.busy_time += time.perf_counter() - t0
            pe.jobs_done += 1
            if cluster.execution_log is not None:
                cluster.execution_log.append((job.job_id, layer_id, cluster.cluster_id, pe.index))
            pe.send_acknowledgment(layer_id)
        except Exception as exc:
            log.error("%s: fatal error on %r: %s", pe.name, job, exc)
            cluster._fatal(exc)
            return


class Cluster:
    """Engines sharing one synchronized job queue.

    A single condition variable guards the job queue, the feed buffers, the
    busy flags and the in-flight count; the stealer takes it too (see
    :meth:`lock`). Status listeners get ``(cluster_id, "idle"|"busy")``:
    idle when nothing is queued, buffered or executing, busy when work
    arrives at an idle cluster, emitted before that work can be dispatched.
    """

    def __init__(self, cluster_id, profiles, board: CompletionBoard, service: ServiceModel,
                 feed_depth=1, execution_log=None):
        if not profiles:
            raise ConfigError(f"cluster {cluster_id} has no processing engines")
        if feed_depth < 1:
            raise ConfigError(f"feed buffer depth must be >= 1, got {feed_depth}")
        self.cluster_id = cluster_id
        self.board = board
        self.service = service
        self.feed_depth = feed_depth
        self.execution_log = execution_log
        self.pes = [ProcessingEngine(self, i, p) for i, p in enumerate(profiles)]
        self.listeners = []
        self.status_log = []
        self.error = None
        self._cv = threading.Condition()
        self._queue = deque()
        self._feeds = [deque() for _ in self.pes]
        self._busy = [False] * len(self.pes)
        self._inflight = 0
        self._status = None
        self._rr = 0
        self._running = False
        self._stopping = False
        self._dispatcher = None

    def __repr__(self):
        kinds = Counter(pe.profile.kind for pe in self.pes)
        desc = " + ".join(f"{n} {k}" for k, n in kinds.items())
        return f"Cluster-{self.cluster_id}({desc})"

    @property
    def lock(self):
        return self._cv

    @property
    def capability(self) -> float:
        return sum(1.0 / pe.profile.slowdown for pe in self.pes)

    @property
    def running(self):
        return self._running and not self._stopping

    def queue_length(self) -> int:
        with self._cv:
            return len(self._queue)

    def inflight(self) -> int:
        with self._cv:
            return self._inflight

    def busy_time(self) -> float:
        return sum(pe.busy_time for pe in self.pes)

    def reset_stats(self):
        for pe in self.pes:
            pe.busy_time = 0.0
            pe.jobs_done = 0

    # -- lifecycle -----------------------------------------------------
    def start(self, engines=True):
        """Start the dispatcher and, unless ``engines`` is False, the engine
        workers (see :meth:`start_engines`)."""
        if self._running:
            return
        self._running = True
        with self._cv:
            self._update_status_locked()
        self._dispatcher = threading.Thread(
            target=self.dispatch_loop, name=f"cluster{self.cluster_id}-dispatch", daemon=True)
        self._dispatcher.start()
        if engines:
            self.start_engines()

    def start_engines(self):
        for pe in self.pes:
            if pe.thread is None:
                pe.thread = threading.Thread(target=pe_worker_loop, args=(pe,), name=pe.name, daemon=True)
                pe.thread.start()
            pe.start_signal()

    def stop(self, timeout=5.0):
        with self._cv:
            self._stopping = True
            self._cv.notify_all()
        for t in [self._dispatcher, *(pe.thread for pe in self.pes)]:
            if t is not None:
                t.join(timeout)
        self._running = False

    # -- producers -----------------------------------------------------
    def submit(self, jobs):
        """Enqueue jobs; the completion board is charged first."""
        jobs = list(jobs)
        if not self.running:
            raise LifecycleError(f"cluster {self.cluster_id} is not running")
        if not jobs:
            return
        for layer_id, n in Counter(job.layer_id for job in jobs).items():
            self.board.add(layer_id, n)
        with self._cv:
            self._push_locked(jobs)

    def _push_locked(self, jobs):
        self._inflight += len(jobs)
        self._update_status_locked()
        self._queue.extend(jobs)
        self._cv.notify_all()

    def _take_tail_locked(self, count):
        taken = [self._queue.pop() for _ in range(min(count, len(self._queue)))]
        taken.reverse()
        self._inflight -= len(taken)
        self._update_status_locked()
        return taken

    # -- status --------------------------------------------------------
    def _update_status_locked(self):
        status = IDLE if self._inflight == 0 else BUSY
        if status != self._status:
            self._status = status
            self.status_log.append(status)
            for listener in self.listeners:
                listener(self.cluster_id, status)

    @property
    def status(self):
        with self._cv:
            return self._status

    # -- dispatcher ----------------------------------------------------
    def _free_slot_locked(self):
        n = len(self.pes)
        for step in range(n):
            idx = (self._rr + step) % n
            if len(self._feeds[idx]) < self.feed_depth:
                return idx
        return None

    def dispatch_once(self) -> bool:
        """Move the head job into the next engine with room, round robin.
        Returns False when nothing could be moved."""
        with self._cv:
            if not self._queue:
                return False
            idx = self._free_slot_locked()
            if idx is None:
                return False
            self._feeds[idx].append(self._queue.popleft())
            self._rr = (idx + 1) % len(self.pes)
            self._cv.notify_all()
            return True

    def dispatch_loop(self):
        while True:
            with self._cv:
                while not self._stopping and not (self._queue and self._free_slot_locked() is not None):
                    self._cv.wait()
                if self._stopping:
                    return
            self.dispatch_once()

    # -- engine side ---------------------------------------------------
    def _next_job(self, index):
        with self._cv:
            while not self._feeds[index]:
                if self._stopping:
                    return None
                self._cv.wait()
            if self._stopping:
                return None
            self._busy[index] = True
            job = self._feeds[index].popleft()
            self._cv.notify_all()
            return job

    def _acknowledge(self, index, layer_id):
        with self._cv:
            self._busy[index] = False
            self._inflight -= 1
            self._update_status_locked()
            self._cv.notify_all()
        self.board.ack(layer_id)

    def _fatal(self, exc):
        self.error = exc
        self.board.fail(exc)


class AcceleratorRuntime:
    """All clusters of one hardware configuration plus the completion board.

    ``services`` are extra components (the work-stealing thief) started
    before and stopped after the clusters.
    """

    def __init__(self, cluster_profiles, tile_size=DEFAULT_TILE_SIZE,
                 seconds_per_mac=DEFAULT_SECONDS_PER_MAC, feed_depth=1, record_executions=False):
        self.service = ServiceModel(tile_size, seconds_per_mac)
        self.board = CompletionBoard()
        self.execution_log = [] if record_executions else None
        self.clusters = [
            Cluster(i, list(profiles), self.board, self.service, feed_depth, self.execution_log)
            for i, profiles in enumerate(cluster_profiles)
        ]
        if not self.clusters:
            raise ConfigError("at least one cluster is required")
        self.services = []
        self._started = False

    @property
    def tile_size(self):
        return self.service.tile_size

    def attach(self, service):
        self.services.append(service)

    def start(self):
        if self._started:
            return self
        for svc in self.services:
            svc.start()
        for cluster in self.clusters:
            cluster.start()
        self._started = True
        return self

    def stop(self):
        for cluster in self.clusters:
            cluster.stop()
        for svc in self.services:
            svc.stop()
        self.board.fail(LifecycleError("accelerator runtime stopped"))
        self._started = False

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def submit(self, cluster_id, jobs):
        self.clusters[cluster_id].submit(jobs)

    def courier_wait(self, layer_id, cancel=None):
        self.board.wait(layer_id, cancel)

    def run_product(self, a: Matrix, b: Matrix, layer_id, cluster_id, cancel=None) -> Matrix:
        """Courier for one layer invocation: generate the tile jobs of
        ``a @ b``, submit them to ``cluster_id`` and wait for all of them."""
        c = Matrix.zeros(a.rows, b.cols)
        jobs = generate_jobs(a.rows, b.cols, a.cols, layer_id, a, b, c, self.tile_size)
        self.submit(cluster_id, jobs)
        self.courier_wait(layer_id, cancel)
        return c

    def reset_stats(self):
        for cluster in self.clusters:
            cluster.reset_stats()

    def busy_times(self):
        return [cluster.busy_time() for cluster in self.clusters]
