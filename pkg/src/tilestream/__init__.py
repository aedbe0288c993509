"""Pipelined CNN inference over tiled matrix-multiplication jobs.

CONV layers are lowered with im2col and split into TS x TS output-tile
jobs, which run on clusters of simulated processing engines of different
speeds. A work-stealing thief rebalances queued jobs between clusters, and
every layer runs as its own pipeline stage so consecutive frames overlap.
"""

from .accel import AcceleratorRuntime, Cluster, CompletionBoard, PeProfile
from .config import (
    HwConfig,
    NetworkConfig,
    load_weights,
    parse_hw_config,
    parse_network_cfg,
    random_weights,
    save_weights,
)
from .errors import (
    ConfigError,
    LifecycleError,
    ParseError,
    PipelineError,
    ProtocolError,
    TilestreamError,
    WeightsFormatError,
)
from .jobs import Job, execute_job, fetch_tile, generate_jobs, store_tile, tiled_matmul
from .pipeline import (
    Frame,
    Mailbox,
    Pipeline,
    RunMetrics,
    build_pipeline,
    run_sequential,
    run_stream,
    synthetic_frames,
)
from .scheduler import MappingMode, Thief, static_map
from .tensor import ConvParams, Matrix, Tensor3

__version__ = "0.1.0"
