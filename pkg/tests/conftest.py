import os

import numpy as np
import pytest

from tilestream.accel import AcceleratorRuntime, CompletionBoard, Cluster, PeProfile, ServiceModel
from tilestream.config import parse_hw_text, parse_network_text
from tilestream.jobs import generate_jobs
from tilestream.tensor import Matrix

ACCEPTANCE_LINES = []


def rel_err(got, want):
    """max |got - want| / max |want| (norm-wise relative error)."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    scale = np.abs(want).max() if want.size else 0.0
    diff = np.abs(got - want).max() if want.size else 0.0
    return diff / scale if scale > 0 else diff


def random_product(rng, m, n, k, layer_id=0, ts=32):
    a = Matrix(rng.standard_normal((m, k)))
    b = Matrix(rng.standard_normal((k, n)))
    c = Matrix.zeros(m, n)
    return a, b, c, generate_jobs(m, n, k, layer_id, a, b, c, ts)


def load_queue(cluster, jobs, board=True):
    """Put jobs straight into a cluster's queue without starting it."""
    jobs = list(jobs)
    if board:
        for job in jobs:
            cluster.board.add(job.layer_id)
    with cluster.lock:
        cluster._push_locked(jobs)


def make_cluster(cid=0, kinds=("F-PE",), board=None, spm=0.0, ts=32, feed_depth=1, log=None):
    board = board or CompletionBoard()
    return Cluster(cid, [PeProfile(k) for k in kinds], board, ServiceModel(ts, spm), feed_depth, log)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def runtime_factory():
    made = []

    def factory(clusters, ts=32, spm=0.0, record=True, feed_depth=1):
        profiles = [[p if isinstance(p, PeProfile) else PeProfile(*p) if isinstance(p, tuple) else PeProfile(p)
                     for p in c] for c in clusters]
        rt = AcceleratorRuntime(profiles, ts, spm, feed_depth, record_executions=record)
        made.append(rt)
        return rt

    yield factory
    for rt in made:
        rt.stop()


TINY_NET = """
[net]
channels=2
height=6
width=6

[conv]
filters=3
size=3
pad=1
activation=leaky

[maxpool]
size=2
stride=2

[fully_connected]
output=5
activation=relu

[softmax]
"""

THREE_CONV_NET = """
[net]
channels=3
height=12
width=12
normalize=1

[conv]
filters=8
size=3
pad=1
activation=relu

[conv]
filters=40
size=3
pad=1
activation=leaky

[maxpool]
size=2
stride=2

[conv]
filters=6
size=1
activation=linear

[fully_connected]
output=7

[softmax]
"""

TWO_CLUSTER_HW = """
tile_size = 8
seconds_per_mac = 0
mailbox_capacity = 2

[cluster]
pe = VEC 1
pe = S-PE 1

[cluster]
pe = F-PE 2

[sc_cluster]
pe = F-PE 1

[sc_cluster]
pe = S-PE 1
pe = F-PE 2
"""


@pytest.fixture
def tiny_net():
    return parse_network_text(TINY_NET)


@pytest.fixture
def three_conv_net():
    return parse_network_text(THREE_CONV_NET)


@pytest.fixture
def two_cluster_hw():
    return parse_hw_text(TWO_CLUSTER_HW)


def record_acceptance(number, passed, detail):
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


def host_cores():
    return os.cpu_count() or 1
