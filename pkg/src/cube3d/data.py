"""Data pipeline: frame ingestion, preprocessing, flip augmentation,
16-frame cube assembly, manifests, and the synthetic desk-scale fixture.

Frame data lives either as numbered binary PPM (P6) files in a directory
or as a single rank-4 ``.vten`` container (T x H x W x 3).  Pixel values
are scaled to [0, 1] on ingestion and stay there through the pipeline.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError, ValidationError
from .tensor import load_vten, peek_vten_shape, save_vten

CLASS_NAMES = (
    "Abuse",
    "Arrest",
    "Arson",
    "Assault",
    "Burglary",
    "Explosion",
    "Fight",
    "Normal",
    "RoadAccidents",
    "Robbery",
    "Shooting",
    "Shoplifting",
    "Stealing",
    "Vandalism",
)
NUM_CLASSES = len(CLASS_NAMES)
NORMAL_INDEX = CLASS_NAMES.index("Normal")

_NAME_TO_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}

DEFAULT_FPS = 30.0
CUBE_FRAMES = 16

SPLITS = ("train", "test")
ORIGINS = ("original", "hflip", "vflip")

_FRAME_RE = re.compile(r"^frame_(\d{6})\.ppm$")


def label_index(name):
    try:
        return _NAME_TO_INDEX[name]
    except KeyError:
        raise ValidationError(f"unknown class name {name!r}") from None


def label_name(index):
    if not 0 <= index < NUM_CLASSES:
        raise ValidationError(f"class index {index} outside 0..{NUM_CLASSES - 1}")
    return CLASS_NAMES[index]


@dataclass
class FrameSequence:
    """An ordered stack of frames belonging to one video."""

    video_id: str
    frames: np.ndarray  # T x H x W x 3, float32 in [0, 1]
    fps: float = DEFAULT_FPS

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[3] != 3:
            raise ShapeError(
                f"frames must be T x H x W x 3, got {self.frames.shape}"
            )

    def __len__(self):
        return self.frames.shape[0]


@dataclass
class AnnotationRecord:
    """Inclusive 0-based frame range carrying one class label."""

    video_id: str
    start_frame: int
    end_frame: int
    label: int

    def __post_init__(self):
        if self.start_frame < 0 or self.end_frame < self.start_frame:
            raise ValidationError(
                f"{self.video_id}: bad range {self.start_frame}..{self.end_frame}"
            )
        if not 0 <= self.label < NUM_CLASSES:
            raise ValidationError(f"{self.video_id}: label {self.label} out of range")


@dataclass
class Cube:
    """One fixed-length block of consecutive frames with its label."""

    data: np.ndarray  # CUBE_FRAMES x H x W x 3
    label: int
    video_id: str
    start_frame: int


@dataclass
class ManifestEntry:
    video_id: str
    path: str
    split: str
    origin: str = "original"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"{self.video_id}: bad split {self.split!r}")
        if self.origin not in ORIGINS:
            raise ValidationError(f"{self.video_id}: bad origin {self.origin!r}")

    @property
    def source_id(self):
        """Video id of the original this entry was derived from."""
        suffix = f"__{self.origin}"
        if self.origin != "original" and self.video_id.endswith(suffix):
            return self.video_id[: -len(suffix)]
        return self.video_id


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)

    def __post_init__(self):
        ids = [e.video_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({v for v in ids if ids.count(v) > 1})
            raise ValidationError(f"duplicate video ids in manifest: {dupes}")

    def split(self, tag):
        return [e for e in self.entries if e.split == tag]


# --- PPM (P6) ----------------------------------------------------------------


def _ppm_token(buf, pos, what):
    while pos < len(buf):
        c = buf[pos]
        if c in b" \t\r\n":
            pos += 1
        elif c == ord("#"):
            while pos < len(buf) and buf[pos] not in b"\r\n":
                pos += 1
        else:
            break
    start = pos
    while pos < len(buf) and buf[pos] not in b" \t\r\n":
        pos += 1
    if start == pos:
        raise FormatError(f"PPM header ended while reading {what}")
    return buf[start:pos], pos


def read_ppm(path):
    """Read a binary P6 image with maxval 255; returns H x W x 3 uint8."""
    buf = Path(path).read_bytes()
    magic, pos = _ppm_token(buf, 0, "magic")
    if magic != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {magic!r})")
    fields = []
    for what in ("width", "height", "maxval"):
        tok, pos = _ppm_token(buf, pos, what)
        if not tok.isdigit():
            raise FormatError(f"{path}: non-numeric {what} {tok!r}")
        fields.append(int(tok))
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}, expected 255")
    if w < 1 or h < 1:
        raise FormatError(f"{path}: degenerate dimensions {w}x{h}")
    pos += 1  # single whitespace byte after maxval
    raster = buf[pos:]
    if len(raster) != 3 * w * h:
        raise FormatError(
            f"{path}: raster holds {len(raster)} bytes, expected {3 * w * h}"
        )
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, image):
    """Write an H x W x 3 image; floats in [0, 1] are quantized to 8 bits."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"PPM image must be H x W x 3, got {img.shape}")
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes(order="C"))


# --- ingestion ---------------------------------------------------------------


def ingest_frames(path, video_id=None, fps=DEFAULT_FPS):
    """Load a frame sequence from a PPM directory or a ``.vten`` container.

    PPM pixels are mapped to [0, 1] by p/255.  Directory frames must be
    named ``frame_NNNNNN.ppm`` with contiguous numbering.
    """
    path = Path(path)
    vid = video_id or path.stem
    if path.is_dir():
        found = {}
        for item in sorted(path.iterdir()):
            m = _FRAME_RE.match(item.name)
            if m:
                found[int(m.group(1))] = item
        if not found:
            raise FormatError(f"{path}: no frame_NNNNNN.ppm files")
        indices = sorted(found)
        lo = indices[0]
        expected = list(range(lo, lo + len(indices)))
        if indices != expected:
            missing = sorted(set(expected) - set(indices))[:5]
            raise FormatError(f"{path}: missing frame indices {missing}")
        frames = []
        shape = None
        for i in indices:
            img = read_ppm(found[i])
            if shape is None:
                shape = img.shape
            elif img.shape != shape:
                raise ShapeError(
                    f"{found[i]}: frame shape {img.shape} differs from {shape}"
                )
            frames.append(img)
        data = np.stack(frames).astype(np.float32) / 255.0
        return FrameSequence(vid, data, fps)
    if not path.exists():
        raise FormatError(f"{path}: no such frame source")
    data = load_vten(path)
    if data.ndim != 4 or data.shape[3] != 3:
        raise ShapeError(f"{path}: container must be T x H x W x 3, got {data.shape}")
    if data.min() < 0.0 or data.max() > 1.0:
        raise ValidationError(f"{path}: container values outside [0, 1]")
    return FrameSequence(vid, data, fps)


# --- preprocessing -----------------------------------------------------------


def resize_bilinear(frame, out_h, out_w):
    """Bilinear resample with half-pixel-center sampling.

    Resizing to the source size is an exact identity; outputs never leave
    the [min, max] range of the source.
    """
    h, w = frame.shape[:2]
    if h < 2 or w < 2:
        raise ShapeError(f"source {h}x{w} too small to interpolate")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"degenerate target {out_h}x{out_w}")
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(frame.dtype)[:, None, None]
    fx = (xs - x0).astype(frame.dtype)[None, :, None]
    r0 = frame[y0]
    r1 = frame[y1]
    out = (
        (1 - fy) * ((1 - fx) * r0[:, x0] + fx * r0[:, x1])
        + fy * ((1 - fx) * r1[:, x0] + fx * r1[:, x1])
    )
    return out


def preprocess_sequence(seq, size=170, subtract_mean=False):
    """Resize every frame to ``size x size``; optional per-channel mean
    subtraction (off by default)."""
    frames = np.stack(
        [resize_bilinear(f, size, size) for f in seq.frames]
    ).astype(np.float32)
    if subtract_mean:
        frames = frames - frames.mean(axis=(0, 1, 2))
    return FrameSequence(seq.video_id, frames, seq.fps)


# --- augmentation ------------------------------------------------------------


def flip_frames(frames, origin):
    """Apply the flip named by a manifest origin tag to a T x H x W x 3 stack."""
    if origin == "original":
        return frames
    if origin == "hflip":
        return np.ascontiguousarray(frames[:, :, ::-1, :])
    if origin == "vflip":
        return np.ascontiguousarray(frames[:, ::-1, :, :])
    raise ValidationError(f"unknown origin {origin!r}")


def augment_flips(seq):
    """Return (original, hflip, vflip) sequences.

    Flips act on every frame identically, so frame order, count and labels
    are untouched and temporal structure is preserved.
    """
    h = FrameSequence(f"{seq.video_id}__hflip", flip_frames(seq.frames, "hflip"), seq.fps)
    v = FrameSequence(f"{seq.video_id}__vflip", flip_frames(seq.frames, "vflip"), seq.fps)
    return seq, h, v


def augment_manifest(manifest):
    """Triple every original training entry with hflip/vflip twins.

    The twins reference the original frame data; the origin tag tells the
    loader which flip to apply.  The test split is never augmented.
    """
    existing = {e.video_id for e in manifest.entries}
    entries = []
    for e in manifest.entries:
        entries.append(e)
        if e.split == "train" and e.origin == "original":
            for origin in ("hflip", "vflip"):
                twin = f"{e.video_id}__{origin}"
                if twin not in existing:
                    entries.append(ManifestEntry(twin, e.path, e.split, origin))
    return DatasetManifest(entries)


def load_entry_frames(entry, root=".", fps=DEFAULT_FPS):
    """Materialize one manifest entry: ingest its source and apply the flip
    named by the origin tag."""
    path = Path(entry.path)
    if not path.is_absolute():
        path = Path(root) / path
    seq = ingest_frames(path, video_id=entry.video_id, fps=fps)
    return FrameSequence(entry.video_id, flip_frames(seq.frames, entry.origin), seq.fps)


# --- cube assembly -----------------------------------------------------------


def validate_annotations(annotations, frame_count=None):
    """Per-video validation: in-range, non-inverted, non-overlapping."""
    by_video = {}
    for ann in annotations:
        by_video.setdefault(ann.video_id, []).append(ann)
    for vid, anns in by_video.items():
        anns.sort(key=lambda a: a.start_frame)
        prev = None
        for ann in anns:
            if frame_count is not None and ann.end_frame >= frame_count:
                raise ValidationError(
                    f"{vid}: annotation {ann.start_frame}..{ann.end_frame} "
                    f"exceeds frame count {frame_count}"
                )
            if prev is not None and ann.start_frame <= prev.end_frame:
                raise ValidationError(
                    f"{vid}: annotations overlap at frame {ann.start_frame}"
                )
            prev = ann
    return by_video


def frame_labels(annotations, frame_count):
    """Per-frame label array; frames outside every annotation are Normal."""
    labels = np.full(frame_count, NORMAL_INDEX, dtype=np.int64)
    for ann in annotations:
        labels[ann.start_frame : ann.end_frame + 1] = ann.label
    return labels


def _majority(window_labels):
    vals, counts = np.unique(window_labels, return_counts=True)
    top = counts.max()
    contenders = vals[counts == top]
    if len(contenders) == 1:
        return int(contenders[0])
    # tie: the label appearing earliest in the window wins, which matches
    # the earlier-starting annotation for non-overlapping ranges
    firsts = [(int(np.argmax(window_labels == v)), int(v)) for v in contenders]
    return min(firsts)[1]


def assemble_cubes(seq, annotations, window=CUBE_FRAMES):
    """Cut a sequence into non-overlapping ``window``-frame cubes.

    The trailing partial window is dropped.  Each cube takes the majority
    label of its frames; unannotated frames count as Normal.
    """
    anns = [a for a in annotations if a.video_id == seq.video_id]
    validate_annotations(anns, frame_count=len(seq))
    labels = frame_labels(anns, len(seq))
    cubes = []
    for start in range(0, len(seq) - window + 1, window):
        data = np.ascontiguousarray(seq.frames[start : start + window])
        label = _majority(labels[start : start + window])
        cubes.append(Cube(data, label, seq.video_id, start))
    return cubes


# --- annotation and manifest files -------------------------------------------

ANNOTATION_HEADER = ["video_id", "start_frame", "end_frame", "label"]


def write_annotations(path, annotations):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_HEADER)
        for a in annotations:
            writer.writerow(
                [a.video_id, a.start_frame, a.end_frame, label_name(a.label)]
            )


def read_annotations(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ANNOTATION_HEADER:
            raise FormatError(
                f"{path}: header {header} != {ANNOTATION_HEADER}"
            )
        out = []
        for row in reader:
            if not row:
                continue
            if len(row) != 4:
                raise FormatError(f"{path}: malformed row {row}")
            vid, start, end, name = row
            out.append(
                AnnotationRecord(vid, int(start), int(end), label_index(name))
            )
    return out


def write_manifest(path, manifest):
    with open(path, "w") as fh:
        for e in manifest.entries:
            fh.write(f"{e.video_id}\t{e.path}\t{e.split}\t{e.origin}\n")


def read_manifest(path):
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 tab-separated fields")
            entries.append(ManifestEntry(*parts))
    return DatasetManifest(entries)


# --- synthetic fixture -------------------------------------------------------


def _render_clip(rng, class_index, num_classes, resolution, length):
    """One clip whose class identity is its motion: a block translating
    with a class-specific direction and speed over a static background."""
    angle = 2.0 * math.pi * class_index / num_classes
    speed = 1.0 + 0.5 * (class_index % 3)
    vy, vx = speed * math.sin(angle), speed * math.cos(angle)
    size = max(2, resolution // 4)
    jitter = resolution // 8
    cy = resolution / 2 + rng.uniform(-jitter, jitter)
    cx = resolution / 2 + rng.uniform(-jitter, jitter)
    background = rng.uniform(0.0, 0.15, (resolution, resolution, 3)).astype(np.float32)
    color = np.array([0.95, 0.75, 0.55], dtype=np.float32)
    frames = np.empty((length, resolution, resolution, 3), dtype=np.float32)
    for t in range(length):
        frame = background.copy()
        rows = (int(round(cy + vy * t)) + np.arange(size)) % resolution
        cols = (int(round(cx + vx * t)) + np.arange(size)) % resolution
        frame[np.ix_(rows, cols)] = color
        frames[t] = frame
    return frames


def synth_fixture(
    seed,
    num_classes,
    clips_per_class,
    resolution,
    length,
    out_dir,
    test_clips_per_class=2,
    fps=DEFAULT_FPS,
):
    """Generate a deterministic stand-in dataset at desk scale.

    Writes one ``.vten`` container per clip under ``out_dir/frames``, an
    annotation CSV covering every clip end to end, and a manifest with
    train and test splits.  The same seed yields bit-identical output.
    """
    if not 2 <= num_classes <= NUM_CLASSES:
        raise ValidationError(f"num_classes must be 2..{NUM_CLASSES}")
    out_dir = Path(out_dir)
    frames_dir = out_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(seed))
    entries, annotations = [], []
    for k in range(num_classes):
        stem = CLASS_NAMES[k].lower()
        for split, count in (("train", clips_per_class), ("test", test_clips_per_class)):
            for i in range(count):
                vid = f"{stem}_{split}_{i:03d}"
                clip = _render_clip(rng, k, num_classes, resolution, length)
                rel = f"frames/{vid}.vten"
                save_vten(out_dir / rel, clip)
                entries.append(ManifestEntry(vid, rel, split))
                annotations.append(AnnotationRecord(vid, 0, length - 1, k))
    manifest = DatasetManifest(entries)
    write_manifest(out_dir / "manifest.tsv", manifest)
    write_annotations(out_dir / "annotations.csv", annotations)
    return manifest, annotations


# --- statistics --------------------------------------------------------------


@dataclass
class GroupStats:
    count: int = 0
    total_s: float = 0.0
    min_s: float = 0.0
    max_s: float = 0.0
    mean_s: float = 0.0


@dataclass
class StatsReport:
    """Per-split counts and durations, anomalous vs normal."""

    groups: dict  # (split, "anomalous"|"normal") -> GroupStats

    def format(self):
        lines = [f"{'split':<6} {'group':<10} {'videos':>6} {'total_s':>10} "
                 f"{'min_s':>8} {'max_s':>9} {'mean_s':>8}"]
        for (split, group), g in sorted(self.groups.items()):
            lines.append(
                f"{split:<6} {group:<10} {g.count:>6} {g.total_s:>10.2f} "
                f"{g.min_s:>8.2f} {g.max_s:>9.2f} {g.mean_s:>8.2f}"
            )
        return "\n".join(lines)


def frame_count(path):
    """Frame count of a source without loading pixel data."""
    path = Path(path)
    if path.is_dir():
        return sum(1 for item in path.iterdir() if _FRAME_RE.match(item.name))
    return int(peek_vten_shape(path)[0])


def dataset_stats(manifest, annotations, root=".", fps=DEFAULT_FPS):
    """Video counts and length statistics per split and per group.

    A video is anomalous when any of its annotations carries a non-Normal
    label; durations are frame counts divided by the frame rate.
    """
    anomalous_ids = {
        a.video_id for a in annotations if a.label != NORMAL_INDEX
    }
    durations = {}
    for split in SPLITS:
        for group in ("anomalous", "normal"):
            durations[(split, group)] = []
    for e in manifest.entries:
        path = Path(e.path)
        if not path.is_absolute():
            path = Path(root) / path
        seconds = frame_count(path) / fps
        group = "anomalous" if e.source_id in anomalous_ids else "normal"
        durations[(e.split, group)].append(seconds)
    groups = {}
    for key, vals in durations.items():
        if vals:
            groups[key] = GroupStats(
                count=len(vals),
                total_s=float(np.sum(vals)),
                min_s=float(np.min(vals)),
                max_s=float(np.max(vals)),
                mean_s=float(np.mean(vals)),
            )
        else:
            groups[key] = GroupStats()
    return StatsReport(groups)
