"""Annotation-file parsing, synthetic dataset generation, and persistence.

`.pts` files follow the common landmark annotation grammar::

    version: 1
    n_points: 68
    {
    x y            (one pair per line)
    }

The synthetic generator produces face-like shape records at desk scale: a
fixed template deformed along fixed orthonormal low-frequency modes, posed by
an in-plane roll rotation plus axis foreshortening for yaw and pitch, and
paired with a jittered / partially occluded copy of the points that serves as
the regression input. Everything is driven by seeded generators, so a config
reproduces its dataset exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ._textio import LineCursor, fmt, parse_float, parse_int
from .errors import FormatError, InvalidConfig, ShapeMismatch
from .losses import PoseTriple
from .shape_core import Shape

_DATA_MAGIC = "ASMDATA v1"


@dataclass(frozen=True)
class PtsRecord:
    """One parsed annotation file: format version and the landmark shape."""

    version: int
    n_points: int
    shape: Shape

    def __post_init__(self):
        if self.n_points != self.shape.n_points:
            raise ShapeMismatch(
                f"record declares {self.n_points} points, shape has "
                f"{self.shape.n_points}")


def parse_pts(text: str) -> PtsRecord:
    """Parse annotation text into a record.

    Tolerates surrounding whitespace, blank lines, and CRLF endings;
    anything else that deviates from the grammar raises FormatError with
    the offending 1-based line number.
    """
    cursor = LineCursor(text)

    line_no, line = cursor.next("'version:' line")
    key, _, value = line.partition(":")
    if key.strip() != "version" or not value:
        raise FormatError(f"expected 'version: <int>', got {line!r}", line=line_no)
    version = parse_int(value.strip(), line_no)

    line_no, line = cursor.next("'n_points:' line")
    key, _, value = line.partition(":")
    if key.strip() != "n_points" or not value:
        raise FormatError(f"expected 'n_points: <int>', got {line!r}", line=line_no)
    n_points = parse_int(value.strip(), line_no)
    if n_points < 3:
        raise FormatError(f"n_points must be >= 3, got {n_points}", line=line_no)

    line_no, line = cursor.next("'{' line")
    if line != "{":
        raise FormatError(f"expected '{{', got {line!r}", line=line_no)

    rows = []
    for i in range(n_points):
        line_no, line = cursor.next(f"coordinate line {i + 1} of {n_points}")
        if line == "}":
            raise FormatError(
                f"declared {n_points} points but found only {i} coordinate lines",
                line=line_no)
        tokens = line.split()
        if len(tokens) != 2:
            raise FormatError(
                f"expected two coordinates per line, got {len(tokens)}", line=line_no)
        rows.append((parse_float(tokens[0], line_no), parse_float(tokens[1], line_no)))
    points = np.array(rows)

    line_no, line = cursor.next("'}' line")
    if line != "}":
        raise FormatError(
            f"declared {n_points} points but found more coordinate lines",
            line=line_no)
    cursor.expect_end()
    return PtsRecord(version=version, n_points=n_points, shape=Shape(points))


def write_pts(record: PtsRecord) -> str:
    """Render a record in canonical form: LF endings, 17-significant-digit
    coordinates, single-space separators."""
    lines = [f"version: {record.version}", f"n_points: {record.n_points}", "{"]
    lines.extend(f"{fmt(x)} {fmt(y)}" for x, y in record.shape.points)
    lines.append("}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the synthetic shape generator.

    mode_stds gives the standard deviation of the coefficient on each
    deformation mode; None selects the default geometric decay
    0.1 * 0.75**k. Pose ranges are half-widths in degrees (angles are drawn
    uniformly in +/- range). Observation corruption adds Normal(0,
    noise_std^2) jitter per coordinate and, with probability occlusion_prob,
    zeroes a contiguous block of occlusion_block points.
    """

    n_points: int = 68
    n_modes: int = 6
    mode_stds: tuple[float, ...] | None = None
    roll_range: float = 30.0
    yaw_range: float = 45.0
    pitch_range: float = 30.0
    noise_std: float = 0.02
    occlusion_prob: float = 0.0
    occlusion_block: int = 8
    train_count: int = 2000
    test_count: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 3:
            raise InvalidConfig(f"n_points must be >= 3, got {self.n_points}")
        if self.n_modes < 0 or self.n_modes > 2 * self.n_points:
            raise InvalidConfig(f"n_modes must lie in [0, 2n], got {self.n_modes}")
        if self.mode_stds is not None:
            if len(self.mode_stds) != self.n_modes:
                raise InvalidConfig("mode_stds length must equal n_modes")
            if any(s < 0 for s in self.mode_stds):
                raise InvalidConfig("mode standard deviations must be >= 0")
        for name in ("roll_range", "yaw_range", "pitch_range", "noise_std"):
            if getattr(self, name) < 0:
                raise InvalidConfig(f"{name} must be >= 0")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise InvalidConfig("occlusion_prob must lie in [0, 1]")
        if self.occlusion_block < 1:
            raise InvalidConfig("occlusion_block must be >= 1")
        if self.train_count < 1 or self.test_count < 1:
            raise InvalidConfig("train and test counts must be >= 1")
        if self.seed < 0:
            raise InvalidConfig("seed must be non-negative")

    def resolved_mode_stds(self) -> tuple[float, ...]:
        if self.mode_stds is not None:
            return tuple(float(s) for s in self.mode_stds)
        return tuple(0.1 * 0.75 ** k for k in range(self.n_modes))


@dataclass(frozen=True)
class DatasetRecord:
    """One paired training sample.

    observation is the corrupted flattened point vector the regressor
    consumes; gt_shape is the clean ground truth; asm_shape is its
    model-smoothed counterpart, filled in by the training loop; pose is the
    ground-truth orientation in degrees.
    """

    observation: np.ndarray
    gt_shape: Shape
    asm_shape: Shape | None
    pose: PoseTriple
    split: str

    def __post_init__(self):
        obs = np.ascontiguousarray(np.asarray(self.observation, dtype=float))
        if obs.shape != (2 * self.gt_shape.n_points,):
            raise ShapeMismatch(
                f"observation length {obs.shape} does not match "
                f"{self.gt_shape.n_points} points")
        if not np.all(np.isfinite(obs)):
            raise ValueError("observation must be finite")
        if self.asm_shape is not None and self.asm_shape.n_points != self.gt_shape.n_points:
            raise ShapeMismatch("asm_shape point count differs from gt_shape")
        if not all(math.isfinite(v) for v in self.pose):
            raise ValueError("pose angles must be finite")
        if not self.split or any(c.isspace() for c in self.split):
            raise ValueError(f"split tag must be a single word, got {self.split!r}")
        obs.setflags(write=False)
        object.__setattr__(self, "observation", obs)


@dataclass
class Dataset:
    """A list of records sharing one point count."""

    records: list[DatasetRecord]
    n_points: int

    def __post_init__(self):
        for r in self.records:
            if r.gt_shape.n_points != self.n_points:
                raise ShapeMismatch("record point count differs from dataset")

    def split(self, tag: str) -> list[DatasetRecord]:
        return [r for r in self.records if r.split == tag]

    def __len__(self) -> int:
        return len(self.records)


def template_shape(n_points: int) -> Shape:
    """Deterministic face-like template.

    Points lie on an ellipse outline except for two small eye rings whose
    placement follows the common annotation layouts: for n >= 76 the rings
    occupy indices 60-67 and 68-75 with outer corners at 60 and 72, and for
    48 <= n < 76 they occupy 36-41 and 42-47 with outer corners at 36 and
    45. Below 48 points everything lies on the ellipse and (0, n // 2) is
    the natural normalizer pair. The result is centred on its centroid and
    scaled to unit RMS point radius, so "shape scale" is 1.
    """
    if n_points < 3:
        raise InvalidConfig(f"template needs at least 3 points, got {n_points}")
    points = np.zeros((n_points, 2))
    if n_points >= 76:
        eye_rings = [(range(60, 68), (-0.45, -0.25)), (range(68, 76), (0.45, -0.25))]
    elif n_points >= 48:
        eye_rings = [(range(36, 42), (-0.45, -0.25)), (range(42, 48), (0.45, -0.25))]
    else:
        eye_rings = []
    eye_indices = {i for ring, _ in eye_rings for i in ring}

    outline = [i for i in range(n_points) if i not in eye_indices]
    for j, i in enumerate(outline):
        theta = 2.0 * math.pi * j / len(outline)
        points[i] = (math.cos(theta), 1.3 * math.sin(theta))
    for ring, (cx, cy) in eye_rings:
        size = len(ring)
        for j, i in enumerate(ring):
            theta = math.pi - 2.0 * math.pi * j / size
            points[i] = (cx + 0.12 * math.cos(theta), cy + 0.12 * math.sin(theta))

    points -= points.mean(axis=0)
    rms = math.sqrt(float(np.mean(np.sum(points * points, axis=1))))
    return Shape(points / rms)


def deformation_modes(n_points: int, n_modes: int) -> np.ndarray:
    """Fixed orthonormal deformation fields, (n_modes, 2n).

    Built from low-frequency sinusoids over the point index and
    orthonormalized, so they are smooth, independent of any seed, and
    identical for every dataset with the same (n_points, n_modes).
    """
    if n_modes == 0:
        return np.zeros((0, 2 * n_points))
    if n_modes > 2 * n_points:
        raise InvalidConfig(f"cannot build {n_modes} modes over {2 * n_points} coords")
    t = 2.0 * math.pi * np.arange(n_points) / n_points
    raw = np.empty((2 * n_points, n_modes))
    for k in range(n_modes):
        raw[0::2, k] = np.cos((k + 1) * t + 0.1 * k)
        raw[1::2, k] = np.sin((k + 2) * t + 0.2 * k)
    q, r = np.linalg.qr(raw)
    if np.min(np.abs(np.diag(r))) < 1e-8:
        raise InvalidConfig(f"{n_modes} modes are degenerate for {n_points} points")
    modes = q.T.copy()
    for row in modes:
        nonzero = np.nonzero(row)[0]
        if nonzero.size and row[nonzero[0]] < 0:
            row *= -1.0
    return modes


def corrupt_observation(shape: Shape, config: SyntheticConfig, record_seed) -> np.ndarray:
    """Produce the observed point vector for one record.

    Adds per-coordinate Gaussian jitter, then with probability
    occlusion_prob zeroes a contiguous block of points (sentinel 0 in
    observation space; the ground truth stays untouched). Draw order is
    fixed: jitter, occlusion decision, block start.
    """
    rng = np.random.default_rng(record_seed)
    n = shape.n_points
    observation = shape.flat + rng.normal(0.0, config.noise_std, size=2 * n)
    if rng.uniform() < config.occlusion_prob:
        block = min(config.occlusion_block, n)
        start = int(rng.integers(0, n - block + 1))
        observation[2 * start:2 * (start + block)] = 0.0
    return observation


def _pose_matrix(roll_deg: float, yaw_deg: float, pitch_deg: float) -> np.ndarray:
    """Linear part of the pose transform: roll rotation, then foreshortening."""
    roll = math.radians(roll_deg)
    c, s = math.cos(roll), math.sin(roll)
    rotation = np.array([[c, -s], [s, c]])
    foreshorten = np.diag([math.cos(math.radians(yaw_deg)),
                           math.cos(math.radians(pitch_deg))])
    return foreshorten @ rotation


def generate_synthetic(config: SyntheticConfig) -> Dataset:
    """Generate the train and test splits described by the config.

    Each ground truth is template + sum_k c_k * mode_k with
    c_k ~ Normal(0, sigma_k^2), rotated in-plane by the roll angle about its
    centroid and then foreshortened horizontally by cos(yaw) and vertically
    by cos(pitch) about the same centroid. The drawn angles, in degrees, are
    the pose labels. Per-split streams are seeded as (seed, split_index) and
    per-record corruption as (seed, split_index, record_index), so identical
    configs yield identical datasets record-for-record.
    """
    template = template_shape(config.n_points)
    modes = deformation_modes(config.n_points, config.n_modes)
    stds = np.asarray(config.resolved_mode_stds())

    records = []
    for split_index, (tag, count) in enumerate((("train", config.train_count),
                                                ("test", config.test_count))):
        rng = np.random.default_rng([config.seed, split_index])
        for i in range(count):
            flat = template.flat.copy()
            if config.n_modes:
                coeffs = rng.normal(0.0, stds)
                flat = flat + coeffs @ modes
            roll = float(rng.uniform(-config.roll_range, config.roll_range))
            yaw = float(rng.uniform(-config.yaw_range, config.yaw_range))
            pitch = float(rng.uniform(-config.pitch_range, config.pitch_range))

            points = flat.reshape(-1, 2)
            centre = points.mean(axis=0)
            posed = (points - centre) @ _pose_matrix(roll, yaw, pitch).T + centre
            gt = Shape(posed)
            observation = corrupt_observation(
                gt, config, (config.seed, split_index, i))
            records.append(DatasetRecord(
                observation=observation, gt_shape=gt, asm_shape=None,
                pose=PoseTriple(yaw, pitch, roll), split=tag))
    return Dataset(records=records, n_points=config.n_points)


def dataset_to_text(dataset: Dataset, comments=()) -> str:
    """Render a dataset in its container format.

    One record per line: split tag, pose (yaw pitch roll), the observation
    vector, the ground-truth vector, and either the smoothed vector or '-'
    when it has not been filled in.
    """
    lines = [_DATA_MAGIC]
    lines.extend(f"# {c}" for c in comments)
    lines.append(f"n_points {dataset.n_points}")
    lines.append(f"n_records {len(dataset.records)}")
    for r in dataset.records:
        fields = [
            "record", r.split,
            fmt(r.pose.yaw), fmt(r.pose.pitch), fmt(r.pose.roll),
            " ".join(fmt(x) for x in r.observation),
            " ".join(fmt(x) for x in r.gt_shape.flat),
        ]
        fields.append("-" if r.asm_shape is None
                      else " ".join(fmt(x) for x in r.asm_shape.flat))
        lines.append(" ".join(fields))
    return "\n".join(lines) + "\n"


def dataset_from_text(text: str) -> Dataset:
    """Parse the container format; inverse of `dataset_to_text`."""
    cursor = LineCursor(text)
    line_no, line = cursor.next(f"'{_DATA_MAGIC}' header")
    if line != _DATA_MAGIC:
        raise FormatError(f"bad header {line!r}, expected {_DATA_MAGIC!r}",
                          line=line_no)
    cursor.allow_comments()

    line_no, line = cursor.next("'n_points' line")
    tokens = line.split()
    if tokens[0] != "n_points" or len(tokens) != 2:
        raise FormatError(f"expected 'n_points <n>', got {line!r}", line=line_no)
    n_points = parse_int(tokens[1], line_no)
    if n_points < 3:
        raise FormatError(f"n_points must be >= 3, got {n_points}", line=line_no)

    line_no, line = cursor.next("'n_records' line")
    tokens = line.split()
    if tokens[0] != "n_records" or len(tokens) != 2:
        raise FormatError(f"expected 'n_records <count>', got {line!r}", line=line_no)
    n_records = parse_int(tokens[1], line_no)
    if n_records < 0:
        raise FormatError("n_records must be >= 0", line=line_no)

    width = 2 * n_points
    records = []
    for index in range(n_records):
        line_no, line = cursor.next(
            f"record {index + 1} of the {n_records} declared records")
        tokens = line.split()
        if tokens[0] != "record":
            raise FormatError(f"expected a 'record' line, got {tokens[0]!r}",
                              line=line_no)
        base = 5 + 2 * width
        if len(tokens) not in (base + 1, base + width):
            raise FormatError(
                f"record has {len(tokens)} fields, expected {base + 1} or "
                f"{base + width}", line=line_no)
        split = tokens[1]
        pose = PoseTriple(*(parse_float(tok, line_no) for tok in tokens[2:5]))
        observation = np.array([parse_float(tok, line_no)
                                for tok in tokens[5:5 + width]])
        gt = np.array([parse_float(tok, line_no)
                       for tok in tokens[5 + width:5 + 2 * width]])
        rest = tokens[5 + 2 * width:]
        if rest == ["-"]:
            asm = None
        else:
            asm = Shape.from_flat(np.array([parse_float(tok, line_no)
                                            for tok in rest]))
        try:
            records.append(DatasetRecord(
                observation=observation, gt_shape=Shape.from_flat(gt),
                asm_shape=asm, pose=pose, split=split))
        except (ValueError, ShapeMismatch) as exc:
            raise FormatError(f"invalid record: {exc}", line=line_no) from exc
    cursor.expect_end()
    return Dataset(records=records, n_points=n_points)


def save_dataset(dataset: Dataset, path, comments=()) -> None:
    Path(path).write_text(dataset_to_text(dataset, comments), encoding="ascii")


def load_dataset(path) -> Dataset:
    return dataset_from_text(Path(path).read_text(encoding="ascii"))


def with_asm_shapes(dataset: Dataset, smooth) -> Dataset:
    """Return a copy with asm_shape = smooth(gt_shape) for every record."""
    records = [replace(r, asm_shape=smooth(r.gt_shape)) for r in dataset.records]
    return Dataset(records=records, n_points=dataset.n_points)
