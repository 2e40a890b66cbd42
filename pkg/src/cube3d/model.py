"""Network assembly, weight init, checkpoints and the layer-shape audit.

``build_model`` produces the fine-tuned C3D-style recognition network:
eight same-padded 3x3x3 convolutions, five ceil-mode max-pool stages,
three batch-norm insertions (after conv1, after pool5, after fc6) and a
three-layer dense head.  The dense head keeps the historical layer names
fc6/fc7/fc9 so checkpoints line up with the reference layer table.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError, ShapeError, StateError
from .layers import (
    BatchNorm,
    Conv3D,
    Dense,
    Dropout,
    Flatten,
    Layer,
    MaxPool3D,
    ReLU,
)

VCKPT_MAGIC = b"VCK1"
VCKPT_VERSION = 1
META_PREFIX = "meta/"

ARCH_CUSTOM = 0
ARCH_STANDARD = 1
ARCH_COMPACT = 2

# Expected per-layer output shapes (T, H, W, C) of the standard network on a
# 16x170x170x3 input; the dense tail is listed by feature extent.  fc9 is
# pinned at 14 classes.
REFERENCE_OUTPUT_SHAPES = {
    "conv1": (16, 170, 170, 64),
    "bn1": (16, 170, 170, 64),
    "pool1": (16, 85, 85, 64),
    "conv2": (16, 85, 85, 128),
    "pool2": (8, 43, 43, 128),
    "conv3a": (8, 43, 43, 256),
    "conv3b": (8, 43, 43, 256),
    "pool3": (4, 22, 22, 256),
    "conv4a": (4, 22, 22, 512),
    "conv4b": (4, 22, 22, 512),
    "pool4": (2, 11, 11, 512),
    "conv5a": (2, 11, 11, 512),
    "conv5b": (2, 11, 11, 512),
    "pool5": (1, 6, 6, 512),
    "bn2": (1, 6, 6, 512),
    "flatten": (18432,),
    "fc6": (4096,),
    "bn3": (4096,),
    "fc7": (4096,),
    "fc9": (14,),
}

# The reference layer table lists the pool5 input as 2x13x13x512, but the
# realized input is the conv5b output 2x11x11x512; both pool to 1x6x6x512
# under ceil mode, so the chain is reported as a note, not a deviation.
POOL5_INPUT_NOTE = (
    "pool5 input is conv5b output 2x11x11x512 (reference table lists "
    "2x13x13x512); ceil-mode pooling of 2x11x11 still yields 1x6x6"
)


class AnomalyNet:
    """An ordered stack of named layers with whole-network passes.

    ``forward`` in eval mode is a pure function of (parameters, input);
    train mode caches per-layer state so ``backward`` can produce a
    gradient for every learnable parameter.
    """

    def __init__(self, layers, input_shape=None, arch=ARCH_CUSTOM, arch_params=None):
        names = [name for name, _ in layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate layer names in {names}")
        self.layers = list(layers)
        self.input_shape = tuple(input_shape) if input_shape else None
        self.arch = arch
        self.arch_params = dict(arch_params or {})
        self._forward_mode = None

    @property
    def num_classes(self):
        for _, layer in reversed(self.layers):
            if isinstance(layer, Dense):
                return layer.weight.shape[1]
        raise ConfigError("network has no dense head")

    def params(self):
        out = {}
        for name, layer in self.layers:
            for key, value in layer.params().items():
                out[f"{name}/{key}"] = value
        return out

    def state(self):
        out = {}
        for name, layer in self.layers:
            for key, value in layer.state().items():
                out[f"{name}/{key}"] = value
        return out

    def astype(self, dtype):
        for _, layer in self.layers:
            layer.astype(dtype)
        return self

    def forward(self, x, mode="eval", rng=None, trace=None):
        if self.input_shape is not None and tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(
                f"input shape {tuple(x.shape[1:])} does not match the "
                f"network's expected {self.input_shape}"
            )
        for name, layer in self.layers:
            y = layer.forward(x, mode=mode, rng=rng)
            if trace is not None:
                trace.append((name, tuple(x.shape), tuple(y.shape)))
            x = y
        self._forward_mode = mode
        return x

    def backward(self, grad_logits):
        """Backpropagate to every learnable parameter.

        Returns ``(param_grads, grad_input)`` where ``param_grads`` is keyed
        like :meth:`params` (running stats excluded).
        """
        if self._forward_mode != "train":
            raise StateError("backward requires a preceding train-mode forward")
        grad = grad_logits
        for name, layer in reversed(self.layers):
            grad = layer.backward(grad)
        out = {}
        for name, layer in self.layers:
            for key, value in layer.grads().items():
                out[f"{name}/{key}"] = value
        return out, grad

    def output_shape(self, in_shape):
        shape = tuple(in_shape)
        for _, layer in self.layers:
            shape = layer.output_shape(shape)
        return shape


@dataclass
class InitSpec:
    """Gaussian init: weights ~ Normal(0, std^2), biases zero."""

    seed: int = 0
    std: float = 0.01

    def __post_init__(self):
        if self.std <= 0:
            raise ConfigError(f"init std must be positive, got {self.std}")


def init_weights(net, spec=InitSpec()):
    """Seeded Gaussian init for conv/dense weights; biases 0; BN reset to
    gamma=1, beta=0, running mean 0, running var 1.  The same seed yields
    bit-identical parameters."""
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    for _, layer in net.layers:
        if isinstance(layer, Conv3D):
            layer.kernel[...] = rng.standard_normal(layer.kernel.shape) * spec.std
            layer.bias[...] = 0.0
        elif isinstance(layer, Dense):
            layer.weight[...] = rng.standard_normal(layer.weight.shape) * spec.std
            layer.bias[...] = 0.0
        elif isinstance(layer, BatchNorm):
            layer.gamma[...] = 1.0
            layer.beta[...] = 0.0
            layer.running_mean[...] = 0.0
            layer.running_var[...] = 1.0
    return net


def build_model(
    num_classes=14,
    frames=16,
    height=170,
    width=170,
    channels=3,
    dropout_rate=0.6,
    dtype=np.float32,
):
    """Assemble the standard recognition network with zero parameters.

    All convolutions are 3x3x3, stride 1, same padding.  pool1 halves only
    H and W (window and stride 1x2x2); the remaining pools act on all
    three axes.  Call :func:`init_weights` to randomize.
    """
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")

    def conv(ci, co):
        return Conv3D(ci, co, dtype=dtype)

    layers = [
        ("conv1", conv(channels, 64)),
        ("bn1", BatchNorm(64, dtype=dtype)),
        ("relu1", ReLU()),
        ("pool1", MaxPool3D((1, 2, 2), (1, 2, 2))),
        ("conv2", conv(64, 128)),
        ("relu2", ReLU()),
        ("pool2", MaxPool3D((2, 2, 2))),
        ("conv3a", conv(128, 256)),
        ("relu3a", ReLU()),
        ("conv3b", conv(256, 256)),
        ("relu3b", ReLU()),
        ("pool3", MaxPool3D((2, 2, 2))),
        ("conv4a", conv(256, 512)),
        ("relu4a", ReLU()),
        ("conv4b", conv(512, 512)),
        ("relu4b", ReLU()),
        ("pool4", MaxPool3D((2, 2, 2))),
        ("conv5a", conv(512, 512)),
        ("relu5a", ReLU()),
        ("conv5b", conv(512, 512)),
        ("relu5b", ReLU()),
        ("pool5", MaxPool3D((2, 2, 2))),
    ]
    # Flattened extent below pool5 depends on the input resolution.
    probe = (1, frames, height, width, channels)
    for _, layer in layers:
        probe = layer.output_shape(probe)
    flat = int(np.prod(probe[1:]))
    layers += [
        ("bn2", BatchNorm(probe[4], dtype=dtype)),
        ("flatten", Flatten()),
        ("fc6", Dense(flat, 4096, dtype=dtype)),
        ("relu6", ReLU()),
        ("dropout6", Dropout(dropout_rate)),
        ("bn3", BatchNorm(4096, dtype=dtype)),
        ("fc7", Dense(4096, 4096, dtype=dtype)),
        ("relu7", ReLU()),
        ("dropout7", Dropout(dropout_rate)),
        ("fc9", Dense(4096, num_classes, dtype=dtype)),
    ]
    return AnomalyNet(
        layers,
        input_shape=(frames, height, width, channels),
        arch=ARCH_STANDARD,
        arch_params={
            "num_classes": num_classes,
            "frames": frames,
            "height": height,
            "width": width,
            "channels": channels,
            "dropout_rate": dropout_rate,
        },
    )


def build_compact_model(
    num_classes,
    frames=16,
    height=32,
    width=32,
    channels=3,
    conv_channels=(8, 16),
    fc_width=64,
    dropout_rate=0.6,
    dtype=np.float32,
):
    """Desk-scale variant of the same layer pattern for small inputs:
    conv+BN+pool, conv+pool, then a dense head with dropout and BN."""
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    c1, c2 = conv_channels
    layers = [
        ("conv1", Conv3D(channels, c1, dtype=dtype)),
        ("bn1", BatchNorm(c1, dtype=dtype)),
        ("relu1", ReLU()),
        ("pool1", MaxPool3D((2, 2, 2))),
        ("conv2", Conv3D(c1, c2, dtype=dtype)),
        ("relu2", ReLU()),
        ("pool2", MaxPool3D((2, 2, 2))),
    ]
    probe = (1, frames, height, width, channels)
    for _, layer in layers:
        probe = layer.output_shape(probe)
    flat = int(np.prod(probe[1:]))
    layers += [
        ("flatten", Flatten()),
        ("fc1", Dense(flat, fc_width, dtype=dtype)),
        ("relu3", ReLU()),
        ("dropout1", Dropout(dropout_rate)),
        ("bn2", BatchNorm(fc_width, dtype=dtype)),
        ("fc2", Dense(fc_width, num_classes, dtype=dtype)),
    ]
    return AnomalyNet(
        layers,
        input_shape=(frames, height, width, channels),
        arch=ARCH_COMPACT,
        arch_params={
            "num_classes": num_classes,
            "frames": frames,
            "height": height,
            "width": width,
            "channels": channels,
            "conv_channels_1": c1,
            "conv_channels_2": c2,
            "fc_width": fc_width,
            "dropout_rate": dropout_rate,
        },
    )


def rebuild_from_arch(arch, arch_params):
    p = arch_params
    if arch == ARCH_STANDARD:
        return build_model(
            num_classes=int(p["num_classes"]),
            frames=int(p["frames"]),
            height=int(p["height"]),
            width=int(p["width"]),
            channels=int(p["channels"]),
            dropout_rate=float(p["dropout_rate"]),
        )
    if arch == ARCH_COMPACT:
        return build_compact_model(
            num_classes=int(p["num_classes"]),
            frames=int(p["frames"]),
            height=int(p["height"]),
            width=int(p["width"]),
            channels=int(p["channels"]),
            conv_channels=(int(p["conv_channels_1"]), int(p["conv_channels_2"])),
            fc_width=int(p["fc_width"]),
            dropout_rate=float(p["dropout_rate"]),
        )
    raise FormatError(f"checkpoint carries unknown architecture id {arch}")


# --- checkpoint container ---------------------------------------------------


def _write_entry(fh, name, array):
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    arr = np.asarray(array, dtype="<f4")  # scalars stay rank 0
    if arr.ndim:
        arr = np.ascontiguousarray(arr)
    fh.write(struct.pack("<B", arr.ndim))
    if arr.ndim:
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def save_checkpoint(net, path, epoch=0, learning_rate=0.0):
    """Write every parameter and BN running statistic plus metadata.

    Save -> load round trips are bit exact for float32 networks.
    """
    entries = {}
    entries.update(net.params())
    entries.update(net.state())
    meta = {f"{META_PREFIX}arch": float(net.arch)}
    for key, value in net.arch_params.items():
        meta[f"{META_PREFIX}{key}"] = float(value)
    meta[f"{META_PREFIX}epoch"] = float(epoch)
    meta[f"{META_PREFIX}learning_rate"] = float(learning_rate)
    with open(path, "wb") as fh:
        fh.write(VCKPT_MAGIC)
        fh.write(struct.pack("<I", VCKPT_VERSION))
        fh.write(struct.pack("<I", len(entries) + len(meta)))
        for name in sorted(meta):
            _write_entry(fh, name, np.float32(meta[name]))
        for name in sorted(entries):
            _write_entry(fh, name, entries[name])


class _Reader:
    def __init__(self, raw, name):
        self.raw = raw
        self.pos = 0
        self.name = name

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.name}: truncated while reading {what}")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk


def read_checkpoint(path):
    """Parse a checkpoint into (tensor entries, metadata) dicts."""
    with open(path, "rb") as fh:
        raw = fh.read()
    rd = _Reader(raw, str(path))
    magic = rd.take(4, "magic")
    if magic != VCKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    (version,) = struct.unpack("<I", rd.take(4, "version"))
    if version != VCKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack("<I", rd.take(4, "entry count"))
    entries, meta = {}, {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", rd.take(2, f"entry {i} name length"))
        name = rd.take(name_len, f"entry {i} name").decode("utf-8")
        (rank,) = struct.unpack("<B", rd.take(1, f"{name}: rank"))
        shape = ()
        if rank:
            shape = struct.unpack(f"<{rank}I", rd.take(4 * rank, f"{name}: extents"))
        n_elem = int(np.prod(shape)) if rank else 1
        payload = rd.take(4 * n_elem, f"{name}: payload")
        value = np.frombuffer(payload, dtype="<f4", count=n_elem).reshape(shape)
        if name.startswith(META_PREFIX):
            meta[name[len(META_PREFIX) :]] = float(value)
        else:
            entries[name] = value.copy()
    if rd.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - rd.pos} trailing bytes after entries")
    return entries, meta


def load_checkpoint(path):
    """Rebuild the architecture recorded in the checkpoint and restore every
    parameter and running statistic, strictly."""
    entries, meta = read_checkpoint(path)
    if "arch" not in meta:
        raise FormatError(f"{path}: missing meta/arch entry")
    net = rebuild_from_arch(int(meta["arch"]), meta)
    targets = {}
    targets.update(net.params())
    targets.update(net.state())
    missing = sorted(set(targets) - set(entries))
    extra = sorted(set(entries) - set(targets))
    if missing:
        raise FormatError(f"{path}: missing tensors {missing}")
    if extra:
        raise FormatError(f"{path}: unexpected tensors {extra}")
    for name, value in entries.items():
        if targets[name].shape != value.shape:
            raise FormatError(
                f"{path}: {name} has shape {value.shape}, expected "
                f"{targets[name].shape}"
            )
        targets[name][...] = value
    net.meta = meta
    return net


@dataclass
class LoadReport:
    matched: list = field(default_factory=list)
    initialized: list = field(default_factory=list)
    unused: list = field(default_factory=list)

    def lines(self):
        out = [f"{name}: matched" for name in self.matched]
        out += [f"{name}: initialized" for name in self.initialized]
        out += [f"{name}: unused in target" for name in self.unused]
        return out


def load_pretrained(net, source):
    """Copy name-matched tensors from ``source`` (checkpoint path or a
    name->array dict) into ``net``.

    Targets absent from the source keep their current initialization.  A
    name match with a shape mismatch is a hard error; nothing is ever
    silently truncated or reshaped.
    """
    if isinstance(source, dict):
        entries = source
    else:
        entries, _ = read_checkpoint(source)
    targets = {}
    targets.update(net.params())
    targets.update(net.state())
    report = LoadReport()
    for name in sorted(targets):
        if name in entries:
            if entries[name].shape != targets[name].shape:
                raise ShapeError(
                    f"pretrained tensor {name} has shape {entries[name].shape}, "
                    f"target expects {targets[name].shape}"
                )
            targets[name][...] = entries[name]
            report.matched.append(name)
        else:
            report.initialized.append(name)
    report.unused = sorted(set(entries) - set(targets))
    return report


# --- shape audit -------------------------------------------------------------


@dataclass
class ShapeAuditReport:
    rows: list  # (layer name, input shape, output shape), batch axis included
    deviations: list
    notes: list
    total_params: int

    def format(self):
        width = max(len(name) for name, _, _ in self.rows)
        lines = [f"{'layer':<{width}}  {'input':<20} output"]
        for name, i, o in self.rows:
            lines.append(f"{name:<{width}}  {_fmt(i):<20} {_fmt(o)}")
        lines.append(f"total learnable parameters: {self.total_params:,}")
        if self.deviations:
            lines += [f"DEVIATION: {d}" for d in self.deviations]
        else:
            lines.append("deviations: none")
        lines += [f"note: {n}" for n in self.notes]
        return "\n".join(lines)


def _fmt(shape):
    return "x".join(str(d) for d in shape)


def shape_audit(net, input_shape=None, compare=True):
    """Propagate shapes through the stack and, for the standard
    architecture, diff each named layer against the reference table."""
    if input_shape is None:
        if net.input_shape is None:
            raise ConfigError("network has no declared input shape; pass one")
        input_shape = (1, *net.input_shape)
    rows = []
    shape = tuple(input_shape)
    for name, layer in net.layers:
        out = layer.output_shape(shape)
        rows.append((name, shape, out))
        shape = out
    total = sum(int(v.size) for v in net.params().values())
    deviations, notes = [], []
    if compare and net.arch == ARCH_STANDARD:
        for name, _, out in rows:
            expected = REFERENCE_OUTPUT_SHAPES.get(name)
            if expected is None:
                continue
            if tuple(out[1:]) != expected:
                deviations.append(
                    f"{name}: produced {_fmt(out[1:])}, reference says {_fmt(expected)}"
                )
        notes.append(POOL5_INPUT_NOTE)
    return ShapeAuditReport(rows, deviations, notes, total)
