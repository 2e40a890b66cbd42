"""SGD-with-momentum training, plateau learning-rate schedule, and
sliding-window video inference.

Training is bit-reproducible: the shuffle order, dropout masks and weight
init all derive from explicit seeds, so identical (config, seed, data)
runs produce identical checkpoints.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    CUBE_FRAMES,
    assemble_cubes,
    frame_labels,
    label_name,
    load_entry_frames,
    validate_annotations,
)
from .errors import ConfigError, DivergenceError, ShapeError, ValidationError
from .layers import softmax, softmax_cross_entropy


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 0.0001
    momentum: float = 0.09
    plateau_patience_epochs: int = 3
    plateau_factor: float = 0.1
    plateau_threshold: float = 1e-4
    max_epochs: int = 10
    seed: int = 0
    dropout_rate: float = 0.6

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError(
                f"plateau_factor must be in (0, 1), got {self.plateau_factor}"
            )
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(
                f"dropout_rate must be in [0, 1), got {self.dropout_rate}"
            )


class SGDMomentum:
    """Classic momentum: v <- momentum*v - lr*g; w <- w + v.

    Velocities start at zero and mirror parameter shapes.  With momentum 0
    this is exactly vanilla gradient descent.
    """

    def __init__(self):
        self.velocity = {}

    def step(self, params, grads, lr, momentum):
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                raise ConfigError(f"no gradient supplied for {name}")
            if g.shape != p.shape:
                raise ShapeError(
                    f"{name}: gradient shape {g.shape} != parameter {p.shape}"
                )
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p)
            v = momentum * v - lr * g
            self.velocity[name] = v
            p += v.astype(p.dtype, copy=False)


class PlateauScheduler:
    """Cut the learning rate by ``factor`` after ``patience`` consecutive
    epochs without the loss improving by more than ``threshold``."""

    def __init__(self, lr, factor=0.1, patience=3, threshold=1e-4):
        self.lr = float(lr)
        self.factor = float(factor)
        self.patience = int(patience)
        self.threshold = float(threshold)
        self.best = np.inf
        self.wait = 0

    def update(self, loss):
        if loss < self.best - self.threshold:
            self.best = float(loss)
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr *= self.factor
                self.wait = 0
        return self.lr


@dataclass
class EpochReport:
    epoch: int
    loss: float
    accuracy: float
    lr: float


@dataclass
class PredictionRecord:
    start_frame: int
    end_frame: int  # inclusive
    probs: np.ndarray
    label: int
    prob: float


@dataclass
class PredictionTrace:
    video_id: str
    records: list = field(default_factory=list)


def cubes_for_entry(entry, annotations, root=".", window=CUBE_FRAMES):
    """Load one manifest entry and cut it into labeled cubes.

    Annotations are looked up under the entry's source id, so augmented
    entries inherit the original's labels (flips never change them).
    """
    seq = load_entry_frames(entry, root)
    anns = [
        replace(a, video_id=entry.video_id)
        for a in annotations
        if a.video_id == entry.source_id
    ]
    return assemble_cubes(seq, anns, window)


def load_split_cubes(manifest, annotations, root=".", split="train", window=CUBE_FRAMES):
    """Stack every cube of a split into (X, y) arrays."""
    xs, ys = [], []
    for entry in manifest.split(split):
        for cube in cubes_for_entry(entry, annotations, root, window):
            xs.append(cube.data)
            ys.append(cube.label)
    if not xs:
        raise ConfigError(f"no cubes in split {split!r}")
    return np.stack(xs), np.asarray(ys, dtype=np.int64)


def _batches(order, batch_size):
    for i in range(0, len(order), batch_size):
        yield order[i : i + batch_size]


def train(net, manifest, annotations, config, root="."):
    """Run the epoch loop on the train split; returns (net, epoch reports).

    Per epoch: seeded shuffle, mini-batches, train-mode forward, softmax
    cross-entropy, backward, SGD step; the plateau schedule updates after
    each epoch.  Training accuracy is measured on the training-mode
    forward outputs of the epoch.
    """
    x, y = load_split_cubes(manifest, annotations, root, "train")
    return train_on_arrays(net, x, y, config)


def train_on_arrays(net, x, y, config):
    """Epoch loop on pre-assembled cube arrays (see :func:`train`)."""
    if y.max() >= net.num_classes:
        raise ValidationError(
            f"label {int(y.max())} exceeds the network's {net.num_classes} classes"
        )
    rng = np.random.Generator(np.random.PCG64(config.seed))
    optimizer = SGDMomentum()
    scheduler = PlateauScheduler(
        config.learning_rate,
        factor=config.plateau_factor,
        patience=config.plateau_patience_epochs,
        threshold=config.plateau_threshold,
    )
    params = net.params()
    reports = []
    n = x.shape[0]
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        lr = scheduler.lr
        total_loss = 0.0
        correct = 0
        for b, batch in enumerate(_batches(order, config.batch_size)):
            xb = x[batch]
            logits = net.forward(xb, mode="train", rng=rng)
            loss, grad_logits = softmax_cross_entropy(logits, y[batch])
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss in epoch {epoch}, batch {b}"
                )
            grads, _ = net.backward(grad_logits)
            optimizer.step(params, grads, lr, config.momentum)
            total_loss += loss * len(batch)
            correct += int((logits.argmax(axis=1) == y[batch]).sum())
        reports.append(
            EpochReport(epoch, total_loss / n, correct / n, lr)
        )
        scheduler.update(total_loss / n)
    return net, reports


def write_epoch_log(path, reports):
    with open(path, "w") as fh:
        for r in reports:
            fh.write(f"{r.epoch},{r.loss:.6f},{r.accuracy:.6f},{r.lr:.8f}\n")


# --- inference ---------------------------------------------------------------


def predict_cubes(net, cube_stack, batch_size=32):
    """Eval-mode class probabilities for a stack of cubes."""
    probs = []
    for i in range(0, cube_stack.shape[0], batch_size):
        logits = net.forward(cube_stack[i : i + batch_size], mode="eval")
        probs.append(softmax(logits))
    return np.concatenate(probs, axis=0)


def predict_video(net, seq, window=CUBE_FRAMES, batch_size=32):
    """Slide non-overlapping windows over a sequence and classify each.

    Every frame of a window inherits the window's prediction, recorded as
    an inclusive frame range.  Sequences shorter than one window are an
    error.
    """
    n = len(seq)
    if n < window:
        raise ValidationError(
            f"{seq.video_id}: {n} frames is shorter than one {window}-frame window"
        )
    starts = list(range(0, n - window + 1, window))
    stack = np.stack([seq.frames[s : s + window] for s in starts])
    probs = predict_cubes(net, stack, batch_size)
    trace = PredictionTrace(seq.video_id)
    for s, p in zip(starts, probs):
        top = int(p.argmax())
        trace.records.append(
            PredictionRecord(s, s + window - 1, p, top, float(p[top]))
        )
    return trace


def evaluate_split(net, manifest, annotations, root=".", window=CUBE_FRAMES):
    """Score every test cube; returns (true labels, score matrix, traces).

    Ground truth per cube uses the same majority rule as training.  Test
    videos without any annotation record are rejected.
    """
    annotated = {a.video_id for a in annotations}
    y_true, rows, traces = [], [], []
    for entry in manifest.split("test"):
        if entry.source_id not in annotated:
            raise ValidationError(f"unlabeled test video {entry.video_id}")
        seq = load_entry_frames(entry, root)
        anns = [
            replace(a, video_id=entry.video_id)
            for a in annotations
            if a.video_id == entry.source_id
        ]
        validate_annotations(anns, frame_count=len(seq))
        labels = frame_labels(anns, len(seq))
        trace = predict_video(net, seq, window)
        traces.append(trace)
        for rec in trace.records:
            win = labels[rec.start_frame : rec.end_frame + 1]
            vals, counts = np.unique(win, return_counts=True)
            contenders = vals[counts == counts.max()]
            if len(contenders) == 1:
                true = int(contenders[0])
            else:
                true = min(
                    (int(np.argmax(win == v)), int(v)) for v in contenders
                )[1]
            y_true.append(true)
            rows.append(rec.probs)
    if not rows:
        raise ValidationError("test split produced no prediction windows")
    return np.asarray(y_true, dtype=np.int64), np.stack(rows), traces


# --- trace files -------------------------------------------------------------


def write_trace(path, traces, num_classes):
    header = ["video_id", "start_frame", "end_frame", "pred_label", "pred_prob"]
    header += [f"p_{i}" for i in range(num_classes)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for trace in traces:
            for r in trace.records:
                row = [
                    trace.video_id,
                    r.start_frame,
                    r.end_frame,
                    label_name(r.label),
                    f"{r.prob:.6f}",
                ]
                row += [f"{p:.6f}" for p in r.probs]
                writer.writerow(row)


def read_trace(path):
    """Parse a prediction trace CSV; returns (rows, num_classes) where each
    row is (video_id, start_frame, end_frame, probs)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:5] != [
            "video_id",
            "start_frame",
            "end_frame",
            "pred_label",
            "pred_prob",
        ]:
            raise ValidationError(f"{path}: not a prediction trace (header {header})")
        prob_cols = header[5:]
        if not prob_cols or prob_cols != [f"p_{i}" for i in range(len(prob_cols))]:
            raise ValidationError(f"{path}: malformed probability columns")
        rows = []
        for row in reader:
            if not row:
                continue
            probs = np.asarray([float(v) for v in row[5:]], dtype=np.float64)
            rows.append((row[0], int(row[1]), int(row[2]), probs))
    return rows, len(prob_cols)
