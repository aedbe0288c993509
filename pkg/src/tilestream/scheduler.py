"""Layer-to-cluster mapping and the work-stealing thief.

Static mapping (SF, SC) pins each CONV layer's jobs to one cluster. Work
stealing (WS) starts from the same placement and lets a thief thread move
queued jobs from busy clusters to idle ones at runtime.
"""

from __future__ import annotations

import enum
import logging
import math
import queue
import threading
import time

from .accel import BUSY, IDLE
from .errors import ConfigError, LifecycleError

log = logging.getLogger(__name__)

DEFAULT_REACTION_TIME = 0.001


class MappingMode(str, enum.Enum):
    SF = "sf"  # static mapping, fixed architecture
    SC = "sc"  # static mapping, per-model custom architecture
    WS = "ws"  # work stealing on the fixed architecture

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown mapping mode {value!r}; expected sf, sc or ws") from None

    def __str__(self):
        return self.value


def capability(profiles) -> float:
    """Aggregate speed of a cluster: the sum of its engines' 1/slowdown."""
    return sum(1.0 / p.slowdown for p in profiles)


def static_map(job_counts, capabilities):
    """Map layers to clusters by workload.

    ``job_counts`` is a sequence (layer index -> jobs) or a dict
    (layer id -> jobs); ``capabilities`` is one score per cluster. Layers
    sorted by job count (descending, ties by ascending id) are dealt to
    clusters sorted by capability (descending, ties by ascending id),
    wrapping round robin.
    """
    if not capabilities:
        raise ConfigError("static mapping needs at least one cluster")
    if not isinstance(job_counts, dict):
        job_counts = dict(enumerate(job_counts))
    layers = sorted(job_counts, key=lambda lid: (-job_counts[lid], lid))
    clusters = sorted(range(len(capabilities)), key=lambda cid: (-capabilities[cid], cid))
    return {lid: clusters[rank % len(clusters)] for rank, lid in enumerate(layers)}


def transfer_jobs(victim, dest) -> int:
    """Atomically move half (rounded up) of ``victim``'s queued jobs from its
    tail to ``dest``. Both queue locks are held, taken in cluster-id order."""
    first, second = sorted((victim, dest), key=lambda c: c.cluster_id)
    with first.lock, second.lock:
        pending = len(victim._queue)
        if pending == 0:
            return 0
        jobs = victim._take_tail_locked(math.ceil(pending / 2))
        dest._push_locked(jobs)
        return len(jobs)


class Thief:
    """Manager, idle book and stealer running on one thread.

    Clusters report status changes through :meth:`notify`. The manager
    keeps the idle book; while it is non-empty the stealer is active and
    runs a steal round after every batch of notifications and at least
    once per ``reaction_time``. ``events`` records the protocol as tuples:

    ``("notify", cid, status)``, ``("idle_book_add", cid)``,
    ``("stealer_activated",)``, ``("steal", victim, dest, count)``,
    ``("idle_book_remove", cid)``, ``("stealer_deactivated",)``.
    """

    _STOP = object()

    def __init__(self, clusters, reaction_time=DEFAULT_REACTION_TIME):
        self.clusters = list(clusters)
        self._by_id = {c.cluster_id: c for c in self.clusters}
        self.reaction_time = reaction_time
        self.idle_book = set()
        self.active = False
        self.events = []
        self.jobs_stolen = 0
        self._inbox = queue.Queue()
        self._thread = None
        self._running = False
        for cluster in self.clusters:
            cluster.listeners.append(self.notify)

    def notify(self, cluster_id, status):
        self._inbox.put((cluster_id, status))

    def _record(self, *event):
        self.events.append(event)

    def manager_on_notify(self, cluster_id, status):
        if cluster_id not in self._by_id:
            raise ConfigError(f"notification from unknown cluster {cluster_id}")
        self._record("notify", cluster_id, status)
        if status == IDLE:
            if cluster_id not in self.idle_book:
                self.idle_book.add(cluster_id)
                self._record("idle_book_add", cluster_id)
            if not self.active:
                self.active = True
                self._record("stealer_activated")
        elif status == BUSY:
            if cluster_id in self.idle_book:
                self.idle_book.discard(cluster_id)
                self._record("idle_book_remove", cluster_id)
            self._maybe_deactivate()
        else:
            raise ConfigError(f"unknown cluster status {status!r}")

    def _maybe_deactivate(self):
        if self.active and not self.idle_book:
            self.active = False
            self._record("stealer_deactivated")

    def steal_round(self) -> int:
        """One pass of the stealer over the idle book; returns jobs moved."""
        moved = 0
        for dest_id in sorted(self.idle_book):
            victims = [c for c in self.clusters
                       if c.cluster_id not in self.idle_book and c.cluster_id != dest_id]
            if not victims:
                continue
            victim = max(victims, key=lambda c: (c.queue_length(), -c.cluster_id))
            n = transfer_jobs(victim, self._by_id[dest_id])
            if n:
                moved += n
                self._record("steal", victim.cluster_id, dest_id, n)
                self.idle_book.discard(dest_id)
                self._record("idle_book_remove", dest_id)
        self.jobs_stolen += moved
        self._maybe_deactivate()
        return moved

    # -- thread ----------------------------------------------------------
    def start(self):
        if self._running:
            return
        self._running = True
        self._thread = threading.Thread(target=self._loop, name="thief", daemon=True)
        self._thread.start()

    def stop(self, timeout=5.0):
        if not self._running:
            return
        self._inbox.put(self._STOP)
        self._thread.join(timeout)
        self._running = False

    def _drain(self, first):
        msg = first
        while True:
            if msg is self._STOP:
                return False
            if msg is not None:
                self.manager_on_notify(*msg)
            try:
                msg = self._inbox.get_nowait()
            except queue.Empty:
                return True

    def _loop(self):
        while True:
            timeout = self.reaction_time if (self.active and self.idle_book) else None
            try:
                msg = self._inbox.get(timeout=timeout)
            except queue.Empty:
                msg = None
            if not self._drain(msg):
                return
            if self.active and self.idle_book:
                self.steal_round()


def wait_quiescent(clusters, timeout=10.0):
    """Block until every cluster reports idle; for tests and benchmarks."""
    deadline = time.monotonic() + timeout
    while any(c.inflight() for c in clusters):
        if time.monotonic() > deadline:
            raise LifecycleError("clusters did not drain before the timeout")
        time.sleep(0.001)
