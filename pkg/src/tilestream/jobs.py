"""Tile jobs: the schedulable unit of a CONV layer's matrix product.

A CONV layer computes ``C = A @ B`` with ``A`` the F x (C*k*k) filter
matrix and ``B`` the im2col matrix. ``C`` is cut into TS x TS tiles and
every tile becomes one :class:`Job`. A job reduces over the whole inner
dimension on its own, so jobs never share output elements and can run on
any engine in any order.

Ragged borders are handled by zero-filling out-of-range reads and dropping
out-of-range writes, so the loop bounds are ``ceil(dim / TS)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ProtocolError
from .tensor import DTYPE, Matrix

DEFAULT_TILE_SIZE = 32

# Upper bound on the number of inner-dimension columns multiplied in one
# numpy call; keeps the (TS, chunk, TS) product buffer around 1 MiB.
_CHUNK_ELEMS = 1 << 18

_job_ids = itertools.count()


@dataclass(frozen=True)
class TilingParams:
    tile_size: int = DEFAULT_TILE_SIZE

    def __post_init__(self):
        if self.tile_size < 1:
            raise ConfigError(f"tile size must be >= 1, got {self.tile_size}")


@dataclass(frozen=True, eq=False)
class Job:
    """One output tile ``C(t1, t2)`` of one layer's product.

    ``a``, ``b`` and ``c`` are handles to the shared matrices, not copies.
    """

    a: Matrix
    b: Matrix
    c: Matrix
    m: int
    n: int
    k: int
    t1: int
    t2: int
    layer_id: int
    job_id: int = field(default_factory=lambda: next(_job_ids))

    def __repr__(self):
        return (f"Job(layer={self.layer_id}, tile=({self.t1},{self.t2}), "
                f"m={self.m}, n={self.n}, k={self.k}, id={self.job_id})")


def tile_grid(m, n, tile_size):
    return math.ceil(m / tile_size), math.ceil(n / tile_size)


def generate_jobs(m, n, k, layer_id, a, b, c, tile_size=DEFAULT_TILE_SIZE):
    """All tile jobs of ``c = a @ b``, row-major over ``(t1, t2)``."""
    if min(m, n, k) < 1:
        raise ConfigError(f"matrix bounds must be >= 1, got m={m} n={n} k={k}")
    TilingParams(tile_size)
    if a.shape != (m, k) or b.shape != (k, n) or c.shape != (m, n):
        raise ConfigError(
            f"matrices {a.shape} x {b.shape} -> {c.shape} do not match m={m} n={n} k={k}"
        )
    rows, cols = tile_grid(m, n, tile_size)
    return [
        Job(a, b, c, m, n, k, t1, t2, layer_id)
        for t1 in range(rows)
        for t2 in range(cols)
    ]


def jobs_for_product(a: Matrix, b: Matrix, c: Matrix, layer_id, tile_size=DEFAULT_TILE_SIZE):
    return generate_jobs(a.rows, b.cols, a.cols, layer_id, a, b, c, tile_size)


def fetch_tile(mat: Matrix, row0, col0, rows, cols=None) -> np.ndarray:
    """Copy a ``rows x cols`` block starting at ``(row0, col0)`` into a fresh
    local buffer. Positions past the matrix border read as 0.0.

    ``cols`` defaults to ``rows`` (a square TS x TS tile).
    """
    if cols is None:
        cols = rows
    if row0 < 0 or col0 < 0:
        raise ConfigError(f"tile origin must be non-negative, got ({row0}, {col0})")
    buf = np.zeros((rows, cols), dtype=DTYPE)
    r = max(0, min(rows, mat.rows - row0))
    q = max(0, min(cols, mat.cols - col0))
    if r and q:
        buf[:r, :q] = mat.data[row0:row0 + r, col0:col0 + q]
    return buf


def store_tile(tile: np.ndarray, mat: Matrix, row0, col0) -> None:
    """Write ``tile`` at ``(row0, col0)``; elements past the border are dropped."""
    if row0 < 0 or col0 < 0:
        raise ConfigError(f"tile origin must be non-negative, got ({row0}, {col0})")
    r = max(0, min(tile.shape[0], mat.rows - row0))
    q = max(0, min(tile.shape[1], mat.cols - col0))
    if r and q:
        mat.data[row0:row0 + r, col0:col0 + q] = tile[:r, :q]


def accumulate_tiles(c_local: np.ndarray, a_panel: np.ndarray, b_panel: np.ndarray) -> np.ndarray:
    """``c[i, j] += a[i, kk] * b[kk, j]`` for ``kk`` ascending, each product
    and each addition rounded to float32.

    This is the i/j/k loop nest of one tile step with the i and j loops
    vectorized; ``np.cumsum`` is used because it is defined as a strictly
    sequential accumulation.
    """
    ts_r, depth = a_panel.shape
    ts_c = b_panel.shape[1]
    step = max(1, _CHUNK_ELEMS // max(1, ts_r * ts_c))
    for k0 in range(0, depth, step):
        k1 = min(depth, k0 + step)
        terms = np.empty((ts_r, k1 - k0 + 1, ts_c), dtype=DTYPE)
        terms[:, 0, :] = c_local
        np.multiply(a_panel[:, k0:k1, None], b_panel[None, k0:k1, :], out=terms[:, 1:, :])
        c_local = np.cumsum(terms, axis=1, dtype=DTYPE)[:, -1, :]
    return c_local


def parse_job(job):
    """Unpack and validate a job handle; anything malformed is a protocol
    violation on the engine side."""
    if not isinstance(job, Job):
        raise ProtocolError(f"expected a Job handle, got {type(job).__name__}")
    if job.a.shape != (job.m, job.k) or job.b.shape != (job.k, job.n) or job.c.shape != (job.m, job.n):
        raise ProtocolError(f"{job!r} does not match the shapes of its matrices")
    return job.a, job.b, job.c, job.m, job.n, job.k, job.t1, job.t2, job.layer_id


def execute_job(job: Job, tile_size=DEFAULT_TILE_SIZE) -> None:
    """Compute and store output tile ``C(t1, t2)``.

    The accumulator starts at zero and sweeps ``t3 = 0 .. ceil(k/TS)-1``.
    The A tiles of one output row-panel are fetched side by side (and the B
    tiles stacked), which is the same zero-filled data the per-``t3``
    fetches would return, so the reduction order is unchanged: ascending
    ``t3`` and, inside a tile, ascending inner index.
    """
    a, b, c, m, n, k, t1, t2, _ = parse_job(job)
    ts = tile_size
    rows, cols = tile_grid(m, n, ts)
    if not (0 <= t1 < rows and 0 <= t2 < cols):
        raise ProtocolError(f"{job!r} is outside the {rows}x{cols} tile grid for TS={ts}")
    depth = math.ceil(k / ts) * ts
    row0, col0 = t1 * ts, t2 * ts
    a_panel = fetch_tile(a, row0, 0, ts, depth)
    b_panel = fetch_tile(b, 0, col0, depth, ts)
    c_local = accumulate_tiles(np.zeros((ts, ts), dtype=DTYPE), a_panel, b_panel)
    store_tile(c_local, c, row0, col0)


def execute_all(jobs, tile_size=DEFAULT_TILE_SIZE) -> None:
    for job in jobs:
        execute_job(job, tile_size)


def tiled_matmul(a: Matrix, b: Matrix, tile_size=DEFAULT_TILE_SIZE, layer_id=0) -> Matrix:
    """Host-side convenience: run every job of ``a @ b`` in order."""
    if a.cols != b.rows:
        raise ConfigError(f"cannot multiply {a.shape} by {b.shape}")
    c = Matrix.zeros(a.rows, b.cols)
    execute_all(jobs_for_product(a, b, c, layer_id, tile_size), tile_size)
    return c
