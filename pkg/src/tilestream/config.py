"""Network configs, hardware configs and weights files.

Network grammar (Darknet-style INI, layers in order)::

    [net]
    channels=1
    height=28
    width=28
    normalize=1          # input frames are 8-bit, scaled to [0, 1]

    [conv]               # alias [convolutional]
    filters=20
    size=5               # alias kernel
    stride=1
    pad=0                # zero rows/cols added on every side
    activation=relu      # linear | relu | leaky | logistic

    [maxpool]
    size=2
    stride=2

    [fully_connected]    # alias [connected]
    output=10            # alias outputs
    activation=linear

    [softmax]

Hardware grammar: flat ``key = value`` lines, then repeated ``[cluster]``
sections (the fixed architecture) and optional ``[sc_cluster]`` sections
(the per-model custom architecture used in SC mode)::

    tile_size = 32
    seconds_per_mac = 1e-9
    mailbox_capacity = 2
    feed_depth = 1
    mode = ws
    static_map = 0, 1, 1        # optional: cluster per CONV layer, in order
    sc_static_map = 0, 1, 1     # optional: same for the sc clusters

    [cluster]
    pe = VEC 2
    pe = S-PE 2 slowdown=2.5 overhead=0.0

Comments start with ``#`` or ``;``. Every parse error names the file and
line.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .accel import DEFAULT_SECONDS_PER_MAC, PE_KINDS, PeProfile
from .errors import ConfigError, ParseError, WeightsFormatError
from .jobs import DEFAULT_TILE_SIZE
from .scheduler import MappingMode
from .tensor import ACTIVATIONS, DTYPE, ConvParams, Matrix, conv_output_shape

# -- network layers ---------------------------------------------------------


@dataclass(frozen=True)
class ConvLayer:
    filters: int
    kernel: int
    stride: int = 1
    pad: int = 0
    activation: str = "linear"
    kind = "conv"

    @property
    def params(self):
        return ConvParams(self.filters, self.kernel, self.stride, self.pad)


@dataclass(frozen=True)
class MaxpoolLayer:
    size: int
    stride: int
    kind = "maxpool"


@dataclass(frozen=True)
class ConnectedLayer:
    outputs: int
    activation: str = "linear"
    kind = "fully_connected"


@dataclass(frozen=True)
class SoftmaxLayer:
    kind = "softmax"


@dataclass(frozen=True)
class NetworkConfig:
    """A linear chain of layers with derived input/output shapes.

    Shapes are ``(C, H, W)`` for feature maps and ``(n,)`` for vectors.
    """

    input_shape: tuple
    layers: tuple
    normalize: bool = False
    in_shapes: tuple = field(init=False, repr=False)
    out_shapes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        ins, outs = [], []
        shape = self.input_shape
        if len(shape) != 3 or min(shape) < 1:
            raise ConfigError(f"input dimensions must be three positive counts, got {shape}")
        if not self.layers:
            raise ConfigError("a network needs at least one layer")
        for i, layer in enumerate(self.layers):
            ins.append(shape)
            try:
                shape = layer_output_shape(layer, shape)
            except ConfigError as exc:
                raise ConfigError(f"layer {i} ({layer.kind}): {exc}") from None
            outs.append(shape)
        object.__setattr__(self, "in_shapes", tuple(ins))
        object.__setattr__(self, "out_shapes", tuple(outs))

    @property
    def conv_indices(self):
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, ConvLayer)]

    def conv_product_dims(self, index):
        """``(m, n, k)`` of the matrix product of CONV layer ``index``."""
        layer = self.layers[index]
        c, _, _ = self.in_shapes[index]
        _, h_out, w_out = self.out_shapes[index]
        return layer.filters, h_out * w_out, c * layer.kernel * layer.kernel

    def job_counts(self, tile_size):
        """Jobs per CONV layer, keyed by layer index."""
        counts = {}
        for i in self.conv_indices:
            m, n, _ = self.conv_product_dims(i)
            counts[i] = math.ceil(m / tile_size) * math.ceil(n / tile_size)
        return counts

    def param_shapes(self):
        """Per layer: ``[(weights_shape, bias_len)]`` or ``[]``."""
        shapes = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, ConvLayer):
                c = self.in_shapes[i][0]
                shapes.append([((layer.filters, c * layer.kernel ** 2), layer.filters)])
            elif isinstance(layer, ConnectedLayer):
                n_in = int(np.prod(self.in_shapes[i]))
                shapes.append([((layer.outputs, n_in), layer.outputs)])
            else:
                shapes.append([])
        return shapes

    def param_count(self):
        return sum(r * c + nb for ps in self.param_shapes() for (r, c), nb in ps)


def _check_activation(name):
    if name not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {name!r}; expected one of {', '.join(ACTIVATIONS)}")


def layer_output_shape(layer, shape):
    if isinstance(layer, ConvLayer):
        _check_activation(layer.activation)
        if len(shape) != 3:
            raise ConfigError("conv needs a feature-map input, got a vector")
        c, h, w = shape
        out_h, out_w = conv_output_shape(h, w, layer.params)
        if out_h < 1 or out_w < 1:
            raise ConfigError(f"conv output would be {out_h}x{out_w}")
        return (layer.filters, out_h, out_w)
    if isinstance(layer, MaxpoolLayer):
        if layer.size < 1 or layer.stride < 1:
            raise ConfigError("maxpool size and stride must be >= 1")
        if len(shape) != 3:
            raise ConfigError("maxpool needs a feature-map input, got a vector")
        c, h, w = shape
        if layer.size > h or layer.size > w:
            raise ConfigError(f"maxpool window {layer.size} is larger than the {h}x{w} input")
        return (c, (h - layer.size) // layer.stride + 1, (w - layer.size) // layer.stride + 1)
    if isinstance(layer, ConnectedLayer):
        _check_activation(layer.activation)
        if layer.outputs < 1:
            raise ConfigError("fully connected outputs must be >= 1")
        return (layer.outputs,)
    if isinstance(layer, SoftmaxLayer):
        return (int(np.prod(shape)),)
    raise ConfigError(f"unsupported layer {layer!r}")


# -- INI reader ----------------------------------------------------------------


def _read_sections(path, text):
    """Yield ``(name, header_line, {key: (value, line)})`` plus a leading
    section named ``None`` for keys before any header."""
    sections = [(None, 0, {})]
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ParseError(path, f"malformed section header {raw.strip()!r}", lineno)
            sections.append((line[1:-1].strip().lower(), lineno, {}))
            continue
        if "=" not in line:
            raise ParseError(path, f"expected key=value, got {raw.strip()!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        entries = sections[-1][2]
        entries.setdefault(key.lower(), []).append((value, lineno))
    return sections


class _Fields:
    """Typed access to a section's entries with line-numbered errors."""

    def __init__(self, path, name, header_line, entries, aliases=None):
        self.path, self.name, self.header_line = path, name, header_line
        self.entries = dict(entries)
        for alias, key in (aliases or {}).items():
            if alias in self.entries:
                if key in self.entries:
                    raise ParseError(path, f"both {alias!r} and {key!r} given", self.entries[alias][0][1])
                self.entries[key] = self.entries.pop(alias)
        self.used = set()

    def _one(self, key):
        values = self.entries[key]
        if len(values) > 1:
            raise ParseError(self.path, f"duplicate key {key!r}", values[1][1])
        return values[0]

    def get(self, key, conv, default=None, required=False):
        if key not in self.entries:
            if required:
                raise ParseError(self.path, f"[{self.name}] is missing {key!r}", self.header_line)
            return default
        self.used.add(key)
        value, line = self._one(key)
        try:
            return conv(value)
        except (ValueError, ConfigError) as exc:
            raise ParseError(self.path, f"bad value for {key!r}: {value!r} ({exc})", line) from None

    def all(self, key):
        self.used.add(key)
        return self.entries.get(key, [])

    def finish(self):
        for key, values in self.entries.items():
            if key not in self.used:
                raise ParseError(self.path, f"unknown key {key!r} in [{self.name or 'top level'}]",
                                 values[0][1])


def _int(value):
    value = value.strip()
    if not value.lstrip("+-").isdigit():
        raise ValueError("not an integer")
    return int(value)


def _flag(value):
    v = _int(value)
    if v not in (0, 1):
        raise ValueError("expected 0 or 1")
    return bool(v)


def _activation(value):
    value = value.strip().lower()
    _check_activation(value)
    return value


def _positive_float(value):
    v = float(value)
    if not v > 0 or not math.isfinite(v):
        raise ValueError("expected a positive number")
    return v


def _int_list(value):
    return tuple(_int(v) for v in value.split(",") if v.strip())


# -- network config --------------------------------------------------------------

_LAYER_SECTIONS = {
    "conv": "conv", "convolutional": "conv",
    "maxpool": "maxpool",
    "fully_connected": "fully_connected", "connected": "fully_connected",
    "softmax": "softmax",
}


def parse_network_text(text, path="<string>"):
    sections = _read_sections(path, text)
    top = sections[0]
    if top[2]:
        first_line = min(v[0][1] for v in top[2].values())
        raise ParseError(path, "keys must appear inside a section", first_line)
    sections = sections[1:]
    if not sections:
        raise ParseError(path, "empty network config", 1)
    name, line, entries = sections[0]
    if name not in ("net", "network", "input"):
        raise ParseError(path, f"first section must be [net], got [{name}]", line)
    f = _Fields(path, name, line, entries)
    input_shape = tuple(f.get(k, _int, required=True) for k in ("channels", "height", "width"))
    normalize = f.get("normalize", _flag, default=False)
    f.finish()
    for k, v in zip(("channels", "height", "width"), input_shape):
        if v < 1:
            raise ParseError(path, f"input {k} must be >= 1", line)

    layers, lines = [], []
    for name, line, entries in sections[1:]:
        kind = _LAYER_SECTIONS.get(name)
        if kind is None:
            raise ParseError(path, f"unknown layer kind [{name}]", line)
        if kind == "conv":
            f = _Fields(path, name, line, entries, aliases={"kernel": "size"})
            layer = ConvLayer(
                filters=f.get("filters", _int, required=True),
                kernel=f.get("size", _int, required=True),
                stride=f.get("stride", _int, default=1),
                pad=f.get("pad", _int, default=0),
                activation=f.get("activation", _activation, default="linear"),
            )
        elif kind == "maxpool":
            f = _Fields(path, name, line, entries)
            size = f.get("size", _int, required=True)
            layer = MaxpoolLayer(size=size, stride=f.get("stride", _int, default=size))
        elif kind == "fully_connected":
            f = _Fields(path, name, line, entries, aliases={"outputs": "output"})
            layer = ConnectedLayer(
                outputs=f.get("output", _int, required=True),
                activation=f.get("activation", _activation, default="linear"),
            )
        else:
            f = _Fields(path, name, line, entries)
            layer = SoftmaxLayer()
        f.finish()
        layers.append(layer)
        lines.append(line)
    if not layers:
        raise ParseError(path, "network has no layers", sections[0][1])

    shape = input_shape
    for layer, line in zip(layers, lines):
        try:
            shape = layer_output_shape(layer, shape)
        except ConfigError as exc:
            raise ParseError(path, f"[{layer.kind}]: {exc}", line) from None
    return NetworkConfig(input_shape, tuple(layers), normalize)


def parse_network_cfg(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(path, f"cannot read: {exc.strerror or exc}") from None
    return parse_network_text(text, path)


def format_network_cfg(net: NetworkConfig) -> str:
    c, h, w = net.input_shape
    out = ["[net]", f"channels={c}", f"height={h}", f"width={w}", f"normalize={int(net.normalize)}"]
    for layer in net.layers:
        out.append("")
        if isinstance(layer, ConvLayer):
            out += ["[conv]", f"filters={layer.filters}", f"size={layer.kernel}",
                    f"stride={layer.stride}", f"pad={layer.pad}", f"activation={layer.activation}"]
        elif isinstance(layer, MaxpoolLayer):
            out += ["[maxpool]", f"size={layer.size}", f"stride={layer.stride}"]
        elif isinstance(layer, ConnectedLayer):
            out += ["[fully_connected]", f"output={layer.outputs}", f"activation={layer.activation}"]
        else:
            out.append("[softmax]")
    return "\n".join(out) + "\n"


# -- hardware config ---------------------------------------------------------------


@dataclass(frozen=True)
class HwConfig:
    clusters: tuple
    tile_size: int = DEFAULT_TILE_SIZE
    seconds_per_mac: float = DEFAULT_SECONDS_PER_MAC
    mailbox_capacity: int = 2
    feed_depth: int = 1
    mode: MappingMode = MappingMode.WS
    static_map: tuple | None = None
    sc_clusters: tuple = ()
    sc_static_map: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(tuple(c) for c in self.clusters))
        object.__setattr__(self, "sc_clusters", tuple(tuple(c) for c in self.sc_clusters))
        object.__setattr__(self, "mode", MappingMode.parse(self.mode))
        if self.tile_size < 1:
            raise ConfigError(f"tile_size must be >= 1, got {self.tile_size}")
        if not self.clusters:
            raise ConfigError("hardware config needs at least one [cluster]")
        for i, pes in enumerate(self.clusters + self.sc_clusters):
            if not pes:
                raise ConfigError(f"cluster {i} has no processing engines")
        if self.mailbox_capacity < 1:
            raise ConfigError(f"mailbox_capacity must be >= 1, got {self.mailbox_capacity}")
        if self.feed_depth < 1:
            raise ConfigError(f"feed_depth must be >= 1, got {self.feed_depth}")
        if not self.seconds_per_mac >= 0:
            raise ConfigError(f"seconds_per_mac must be >= 0, got {self.seconds_per_mac}")

    def clusters_for(self, mode):
        """Cluster list and explicit static map used by ``mode``; SC falls
        back to the fixed clusters when no ``[sc_cluster]`` is declared."""
        if MappingMode.parse(mode) is MappingMode.SC and self.sc_clusters:
            return self.sc_clusters, self.sc_static_map
        return self.clusters, self.static_map


def _parse_pe(path, value, line):
    parts = value.split()
    if not parts:
        raise ParseError(path, "empty pe entry", line)
    kind, count, opts = parts[0].upper(), 1, {}
    for tok in parts[1:]:
        if "=" in tok:
            k, v = tok.split("=", 1)
            opts[k.lower()] = v
        else:
            try:
                count = _int(tok)
            except ValueError:
                raise ParseError(path, f"bad pe count {tok!r}", line) from None
    if kind not in PE_KINDS:
        raise ParseError(path, f"unknown PE kind {parts[0]!r}; expected one of {', '.join(PE_KINDS)}", line)
    if count < 1:
        raise ParseError(path, f"pe count must be >= 1, got {count}", line)
    unknown = set(opts) - {"slowdown", "overhead"}
    if unknown:
        raise ParseError(path, f"unknown pe option {sorted(unknown)[0]!r}", line)
    try:
        slowdown = _positive_float(opts["slowdown"]) if "slowdown" in opts else None
        overhead = float(opts.get("overhead", 0.0))
        profile = PeProfile(kind, slowdown, overhead)
    except (ValueError, ConfigError) as exc:
        raise ParseError(path, f"bad pe entry {value!r} ({exc})", line) from None
    return [profile] * count


def parse_hw_text(text, path="<string>"):
    sections = _read_sections(path, text)
    _, _, top_entries = sections[0]
    top = _Fields(path, None, 1, top_entries)
    if "tile_size" not in top.entries:
        raise ParseError(path, "missing tile_size", 1)
    kw = dict(
        tile_size=top.get("tile_size", _int),
        seconds_per_mac=top.get("seconds_per_mac", float, default=DEFAULT_SECONDS_PER_MAC),
        mailbox_capacity=top.get("mailbox_capacity", _int, default=2),
        feed_depth=top.get("feed_depth", _int, default=1),
        mode=top.get("mode", MappingMode.parse, default=MappingMode.WS),
        static_map=top.get("static_map", _int_list),
        sc_static_map=top.get("sc_static_map", _int_list),
    )
    top.finish()
    if kw["tile_size"] < 1:
        raise ParseError(path, f"tile_size must be >= 1, got {kw['tile_size']}",
                         top.entries["tile_size"][0][1])

    clusters, sc_clusters = [], []
    for name, line, entries in sections[1:]:
        if name not in ("cluster", "sc_cluster"):
            raise ParseError(path, f"unknown section [{name}]", line)
        f = _Fields(path, name, line, entries)
        pes = []
        for value, pe_line in f.all("pe"):
            pes.extend(_parse_pe(path, value, pe_line))
        f.finish()
        if not pes:
            raise ParseError(path, f"[{name}] has no pe entries", line)
        (clusters if name == "cluster" else sc_clusters).append(tuple(pes))
    if not clusters:
        raise ParseError(path, "no [cluster] sections", 1)
    try:
        return HwConfig(clusters=clusters, sc_clusters=sc_clusters, **kw)
    except ConfigError as exc:
        raise ParseError(path, str(exc)) from None


def parse_hw_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(path, f"cannot read: {exc.strerror or exc}") from None
    return parse_hw_text(text, path)


def format_hw_config(hw: HwConfig) -> str:
    out = [
        f"tile_size = {hw.tile_size}",
        f"seconds_per_mac = {hw.seconds_per_mac!r}",
        f"mailbox_capacity = {hw.mailbox_capacity}",
        f"feed_depth = {hw.feed_depth}",
        f"mode = {hw.mode.value}",
    ]
    if hw.static_map is not None:
        out.append("static_map = " + ", ".join(map(str, hw.static_map)))
    if hw.sc_static_map is not None:
        out.append("sc_static_map = " + ", ".join(map(str, hw.sc_static_map)))
    for name, group in (("cluster", hw.clusters), ("sc_cluster", hw.sc_clusters)):
        for pes in group:
            out += ["", f"[{name}]"]
            out += [f"pe = {p.kind} slowdown={p.slowdown!r} overhead={p.overhead!r}" for p in pes]
    return "\n".join(out) + "\n"


# -- weights -----------------------------------------------------------------------

WEIGHTS_MAGIC = b"SYNW"
WEIGHTS_VERSION = 1
_HEADER = struct.Struct("<4sI")


@dataclass(frozen=True, eq=False)
class LayerParams:
    weights: Matrix
    bias: np.ndarray


def random_weights(net: NetworkConfig, seed=0):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases from
    PCG64 seeded with ``[seed, 1]``."""
    rng = np.random.Generator(np.random.PCG64([seed, 1]))
    params = []
    for shapes in net.param_shapes():
        if not shapes:
            params.append(None)
            continue
        (rows, cols), nb = shapes[0]
        bound = 1.0 / math.sqrt(cols)
        w = rng.uniform(-bound, bound, size=(rows, cols)).astype(DTYPE)
        b = rng.uniform(-bound, bound, size=nb).astype(DTYPE)
        params.append(LayerParams(Matrix(w), b))
    return params


def save_weights(path, net: NetworkConfig, params):
    chunks = [_HEADER.pack(WEIGHTS_MAGIC, WEIGHTS_VERSION)]
    for i, (shapes, p) in enumerate(zip(net.param_shapes(), params)):
        if not shapes:
            continue
        (rows, cols), nb = shapes[0]
        if p is None or p.weights.shape != (rows, cols) or np.asarray(p.bias).size != nb:
            raise ConfigError(f"layer {i}: parameters do not match shape {(rows, cols)} + {nb}")
        chunks.append(np.asarray(p.weights.data, dtype="<f4").tobytes())
        chunks.append(np.asarray(p.bias, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path, net: NetworkConfig):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise WeightsFormatError(f"{path}: cannot read: {exc.strerror or exc}") from None
    if len(blob) < _HEADER.size:
        raise WeightsFormatError(f"{path}: file too short for a header")
    magic, version = _HEADER.unpack_from(blob)
    if magic != WEIGHTS_MAGIC:
        raise WeightsFormatError(f"{path}: bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}")
    if version != WEIGHTS_VERSION:
        raise WeightsFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * net.param_count()
    offset = _HEADER.size
    params = []
    for i, shapes in enumerate(net.param_shapes()):
        if not shapes:
            params.append(None)
            continue
        (rows, cols), nb = shapes[0]
        need = 4 * (rows * cols + nb)
        if offset + need > len(blob):
            raise WeightsFormatError(
                f"{path}: size mismatch at layer {i} ({net.layers[i].kind}): needs {need} bytes "
                f"at offset {offset}, file has {len(blob)} (expected {expected})")
        arr = np.frombuffer(blob, dtype="<f4", count=rows * cols + nb, offset=offset).astype(DTYPE)
        params.append(LayerParams(Matrix(arr[:rows * cols].reshape(rows, cols)), arr[rows * cols:].copy()))
        offset += need
    if offset != len(blob):
        raise WeightsFormatError(
            f"{path}: size mismatch: {len(blob) - offset} trailing bytes after the last layer "
            f"(expected {expected} bytes)")
    return params
