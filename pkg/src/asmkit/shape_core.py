"""PCA point-distribution shape models and the constrained smoothing operator.

A shape is an ordered list of n 2-D landmark points. A model holds the sample
mean of a training collection together with the leading eigenvectors and
eigenvalues of the coordinate covariance. Any shape with the same layout can
be projected into the eigenbasis, its coordinates clamped to +/- 3 standard
deviations per mode, and reconstructed; the composition of the three steps is
the smoothing operator `asm_transform`, which maps a shape to the nearest
plausible member of the modelled population.

Models can be built either on coordinates as given (`raw` mode) or after
generalized similarity alignment of the training set (`aligned` mode).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._textio import LineCursor, fmt, parse_float, parse_int
from .errors import (
    DegenerateShape,
    FormatError,
    InsufficientData,
    ParamMismatch,
    RetentionUnsatisfiable,
    ShapeMismatch,
)

MODES = ("raw", "aligned")

_MODEL_MAGIC = "ASMMODEL v1"


@dataclass(frozen=True, eq=False)
class Shape:
    """An ordered set of n >= 3 finite 2-D landmark points.

    Stored as a read-only (n, 2) float64 array. The flattened layout is
    fixed as (x1, y1, x2, y2, ..., xn, yn).
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ShapeMismatch(f"points must have shape (n, 2), got {pts.shape}")
        if pts.shape[0] < 3:
            raise ShapeMismatch(f"a shape needs at least 3 points, got {pts.shape[0]}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("shape coordinates must be finite")
        pts = np.ascontiguousarray(pts)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @classmethod
    def from_flat(cls, flat) -> "Shape":
        """Build a shape from the flattened (x1, y1, ..., xn, yn) layout."""
        arr = np.asarray(flat, dtype=float)
        if arr.ndim != 1 or arr.size % 2 != 0:
            raise ShapeMismatch(f"flat shape vector must have even length, got {arr.shape}")
        return cls(arr.reshape(-1, 2))

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def flat(self) -> np.ndarray:
        """Read-only view of the points in flattened layout, length 2n."""
        return self.points.reshape(-1)

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


@dataclass(frozen=True)
class SimilarityTransform:
    """p -> scale * R(rotation) @ p + translation for 2-D points.

    scale is strictly positive and rotation is in radians.
    """

    scale: float
    rotation: float
    translation: tuple[float, float]

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be positive and finite, got {self.scale}")
        tx, ty = self.translation
        object.__setattr__(self, "translation", (float(tx), float(ty)))

    def matrix(self) -> np.ndarray:
        """The 2x2 linear part, scale * R(rotation)."""
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return pts @ self.matrix().T + np.asarray(self.translation)

    def apply_shape(self, shape: Shape) -> Shape:
        return Shape(self.apply(shape.points))

    def inverse(self) -> "SimilarityTransform":
        inv_scale = 1.0 / self.scale
        c, s = math.cos(-self.rotation), math.sin(-self.rotation)
        tx, ty = self.translation
        itx = -inv_scale * (c * tx - s * ty)
        ity = -inv_scale * (s * tx + c * ty)
        return SimilarityTransform(inv_scale, -self.rotation, (itx, ity))


@dataclass(frozen=True, eq=False)
class ShapeModel:
    """A point-distribution model: mean, principal modes, and eigenvalues.

    `mean` has length 2n in flattened layout. `components` holds t
    orthonormal row vectors of length 2n sorted by non-increasing
    eigenvalue; `eigenvalues` are the matching positive variances.
    """

    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    mode: str
    n_points: int

    def __post_init__(self):
        mean = np.ascontiguousarray(np.asarray(self.mean, dtype=float))
        comps = np.ascontiguousarray(np.asarray(self.components, dtype=float))
        vals = np.ascontiguousarray(np.asarray(self.eigenvalues, dtype=float))
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if mean.ndim != 1 or mean.size != 2 * self.n_points:
            raise ValueError("mean length must be 2 * n_points")
        if comps.ndim != 2 or comps.shape[1] != mean.size:
            raise ValueError("components must be (t, 2 * n_points)")
        t = comps.shape[0]
        if not 1 <= t <= mean.size:
            raise ValueError(f"component count {t} outside [1, {mean.size}]")
        if vals.shape != (t,):
            raise ValueError("eigenvalues must match the component count")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(comps))
                and np.all(np.isfinite(vals))):
            raise ValueError("model entries must be finite")
        if np.any(vals <= 0):
            raise ValueError("eigenvalues must be positive")
        if np.any(np.diff(vals) > 0):
            raise ValueError("eigenvalues must be non-increasing")
        gram = comps @ comps.T
        if np.max(np.abs(gram - np.eye(t))) >= 1e-9:
            raise ValueError("component rows must be orthonormal")
        mean.setflags(write=False)
        comps.setflags(write=False)
        vals.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "eigenvalues", vals)

    @property
    def t(self) -> int:
        """Number of retained components."""
        return self.components.shape[0]

    def mean_shape(self) -> Shape:
        return Shape.from_flat(self.mean)


def similarity_fit(source: Shape, target: Shape) -> SimilarityTransform:
    """Least-squares similarity transform taking source points onto target points.

    Closed form: centre both point sets, form the 2-D centered
    cross-covariance, and read scale and rotation off its similarity part
    (the polar factor); the translation then maps the source centroid onto
    the target centroid.
    """
    if source.n_points != target.n_points:
        raise ShapeMismatch(
            f"point counts differ: {source.n_points} vs {target.n_points}")
    src, tgt = source.points, target.points
    c_src, c_tgt = src.mean(axis=0), tgt.mean(axis=0)
    x, y = src - c_src, tgt - c_tgt
    spread = float(np.sum(x * x))
    if spread == 0.0:
        raise DegenerateShape("source shape has zero spread")
    a = float(np.sum(x * y)) / spread
    b = float(np.sum(x[:, 0] * y[:, 1] - x[:, 1] * y[:, 0])) / spread
    scale = math.hypot(a, b)
    if scale == 0.0:
        raise DegenerateShape("target shape has zero spread")
    rotation = math.atan2(b, a)
    c, s = math.cos(rotation), math.sin(rotation)
    tx = c_tgt[0] - scale * (c * c_src[0] - s * c_src[1])
    ty = c_tgt[1] - scale * (s * c_src[0] + c * c_src[1])
    return SimilarityTransform(scale, rotation, (tx, ty))


def _normalized(points: np.ndarray) -> np.ndarray:
    """Centre on the centroid and scale to unit RMS point radius."""
    pts = points - points.mean(axis=0)
    rms = math.sqrt(float(np.mean(np.sum(pts * pts, axis=1))))
    return pts / rms


def align_shapes(shapes, tol: float = 1e-10, max_iterations: int = 100):
    """Generalized similarity alignment of a shape collection.

    Repeatedly fits every shape onto the current mean, recomputes the mean,
    and renormalizes it to centroid (0, 0) and unit RMS radius, until the
    mean moves less than `tol` (max-abs over coordinates). Returns the
    aligned shapes and each input's similarity transform into the common
    frame.
    """
    shapes = list(shapes)
    if len(shapes) < 2:
        raise InsufficientData(f"alignment needs at least 2 shapes, got {len(shapes)}")
    n = shapes[0].n_points
    for s in shapes:
        if s.n_points != n:
            raise ShapeMismatch("all shapes must share the same point count")
        if float(np.sum((s.points - s.centroid()) ** 2)) == 0.0:
            raise DegenerateShape("cannot align a shape with zero spread")

    mean = _normalized(shapes[0].points)
    for _ in range(max_iterations):
        target = Shape(mean)
        aligned = [similarity_fit(s, target).apply(s.points) for s in shapes]
        new_mean = _normalized(np.mean(aligned, axis=0))
        converged = float(np.max(np.abs(new_mean - mean))) < tol
        mean = new_mean
        if converged:
            break

    target = Shape(mean)
    transforms = [similarity_fit(s, target) for s in shapes]
    aligned = [Shape(t.apply(s.points)) for t, s in zip(transforms, shapes)]
    return aligned, transforms


def build_shape_model(shapes, retention: float | int = 0.95,
                      mode: str = "raw") -> ShapeModel:
    """Build a PCA point-distribution model from K >= 2 shapes.

    retention selects the component count: a float in (0, 1] keeps the
    smallest count whose cumulative eigenvalue fraction reaches it, while
    an int keeps exactly that many leading components. Components with an
    eigenvalue at or below 1e-12 times the largest are dropped before
    either rule applies. In `aligned` mode the collection is aligned into
    a common frame first; `raw` uses the coordinates as given.

    Eigendecomposition uses the sample covariance (divisor K - 1), and each
    eigenvector's sign is fixed by making its first nonzero entry positive.
    """
    shapes = list(shapes)
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    K = len(shapes)
    if K < 2:
        raise InsufficientData(f"need at least 2 shapes to build a model, got {K}")
    n = shapes[0].n_points
    for s in shapes:
        if s.n_points != n:
            raise ShapeMismatch("all shapes must share the same point count")

    if mode == "aligned":
        aligned, _ = align_shapes(shapes)
        data = np.stack([s.flat for s in aligned])
    else:
        data = np.stack([s.flat for s in shapes])

    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / (K - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order].T  # rows are eigenvectors

    if eigvals.size == 0 or eigvals[0] <= 0:
        available = 0
    else:
        available = int(np.sum(eigvals > 1e-12 * eigvals[0]))
    if available == 0:
        raise RetentionUnsatisfiable("covariance has no positive eigenvalue modes")
    eigvals = eigvals[:available]
    eigvecs = eigvecs[:available]

    if isinstance(retention, bool):
        raise ValueError("retention must be a fraction or an integer count")
    if isinstance(retention, (int, np.integer)):
        t = int(retention)
        if t < 1:
            raise ValueError(f"explicit component count must be >= 1, got {t}")
        if t > available:
            raise RetentionUnsatisfiable(
                f"requested {t} components but only {available} positive modes exist")
    else:
        fraction = float(retention)
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f"variance fraction must lie in (0, 1], got {fraction}")
        cumulative = np.cumsum(eigvals) / np.sum(eigvals)
        t = int(np.searchsorted(cumulative, fraction - 1e-12)) + 1
        t = min(t, available)

    components = eigvecs[:t].copy()
    for row in components:
        nonzero = np.nonzero(row)[0]
        if nonzero.size and row[nonzero[0]] < 0:
            row *= -1.0
    return ShapeModel(mean=mean, components=components,
                      eigenvalues=eigvals[:t].copy(), mode=mode, n_points=n)


def explained_variance_fraction(model: ShapeModel, shapes) -> float:
    """Fraction of the collection's total coordinate variance the model retains.

    For `aligned` models the collection is aligned first so the variance is
    measured in the model's frame.
    """
    shapes = list(shapes)
    if model.mode == "aligned":
        shapes, _ = align_shapes(shapes)
    data = np.stack([s.flat for s in shapes])
    total = float(np.var(data, axis=0, ddof=1).sum())
    if total == 0.0:
        return 1.0
    return float(model.eigenvalues.sum() / total)


def reconstruction_rms(model: ShapeModel, shapes) -> float:
    """RMS coordinate error of the unclamped project/reconstruct round trip.

    For `aligned` models the shapes are aligned into the model frame first.
    Full-retention models reproduce their training set to numerical noise.
    """
    shapes = list(shapes)
    if model.mode == "aligned":
        shapes, _ = align_shapes(shapes)
    total = 0.0
    count = 0
    for s in shapes:
        recon = reconstruct(model, project(model, s))
        total += float(np.sum((recon.flat - s.flat) ** 2))
        count += s.flat.size
    return math.sqrt(total / count)


def project(model: ShapeModel, shape: Shape) -> np.ndarray:
    """Coordinates of a shape in the model eigenbasis: b = P (S - mean)."""
    if shape.n_points != model.n_points:
        raise ShapeMismatch(
            f"shape has {shape.n_points} points, model expects {model.n_points}")
    return model.components @ (shape.flat - model.mean)


def clamp_params(model: ShapeModel, params) -> np.ndarray:
    """Clamp each coordinate to +/- 3 sqrt(eigenvalue) of its mode.

    Entries already inside the bounds pass through unchanged bit-for-bit.
    """
    b = np.asarray(params, dtype=float)
    if b.shape != (model.t,):
        raise ParamMismatch(f"expected {model.t} parameters, got shape {b.shape}")
    bound = 3.0 * np.sqrt(model.eigenvalues)
    return np.clip(b, -bound, bound)


def reconstruct(model: ShapeModel, params) -> Shape:
    """Rebuild a shape from eigenbasis coordinates: mean + b P."""
    b = np.asarray(params, dtype=float)
    if b.shape != (model.t,):
        raise ParamMismatch(f"expected {model.t} parameters, got shape {b.shape}")
    return Shape.from_flat(model.mean + b @ model.components)


def asm_transform(model: ShapeModel, shape: Shape) -> Shape:
    """Smooth a shape through the model: project, clamp, reconstruct.

    For `aligned` models the shape is first carried into the model frame by
    a similarity fit onto the mean and the result is carried back, so the
    output always lives in the input's original coordinate frame.
    """
    if shape.n_points != model.n_points:
        raise ShapeMismatch(
            f"shape has {shape.n_points} points, model expects {model.n_points}")
    frame = None
    working = shape
    if model.mode == "aligned":
        frame = similarity_fit(shape, model.mean_shape())
        working = frame.apply_shape(shape)
    smoothed = reconstruct(model, clamp_params(model, project(model, working)))
    if frame is not None:
        smoothed = frame.inverse().apply_shape(smoothed)
    return smoothed


def serialize_model(model: ShapeModel, comments=()) -> str:
    """Render a model in its canonical text form.

    Optional comment strings are emitted as '#' lines directly after the
    header; the canonical form produced with no comments round-trips
    byte-identically through `deserialize_model`.
    """
    lines = [_MODEL_MAGIC]
    lines.extend(f"# {c}" for c in comments)
    lines.append(f"mode {model.mode}")
    lines.append(f"n_points {model.n_points}")
    lines.append(f"n_components {model.t}")
    lines.append("mean " + " ".join(fmt(x) for x in model.mean))
    lines.append("eigenvalues " + " ".join(fmt(x) for x in model.eigenvalues))
    for i, row in enumerate(model.components, start=1):
        lines.append(f"ev {i} " + " ".join(fmt(x) for x in row))
    return "\n".join(lines) + "\n"


def _expect_keyword(cursor: LineCursor, keyword: str) -> tuple[int, list[str]]:
    line_no, line = cursor.next(f"'{keyword}' line")
    tokens = line.split()
    if tokens[0] != keyword:
        raise FormatError(f"expected '{keyword}' line, got {tokens[0]!r}", line=line_no)
    return line_no, tokens[1:]


def _parse_floats(tokens, count, what, line_no):
    if len(tokens) != count:
        raise FormatError(f"{what} needs {count} values, got {len(tokens)}",
                          line=line_no)
    return np.array([parse_float(tok, line_no) for tok in tokens])


def deserialize_model(text: str) -> ShapeModel:
    """Parse the canonical model text form; inverse of `serialize_model`."""
    cursor = LineCursor(text)
    line_no, line = cursor.next(f"'{_MODEL_MAGIC}' header")
    if line != _MODEL_MAGIC:
        raise FormatError(f"bad header {line!r}, expected {_MODEL_MAGIC!r}",
                          line=line_no)
    cursor.allow_comments()

    line_no, rest = _expect_keyword(cursor, "mode")
    if len(rest) != 1 or rest[0] not in MODES:
        raise FormatError(f"mode must be one of {MODES}", line=line_no)
    mode = rest[0]

    line_no, rest = _expect_keyword(cursor, "n_points")
    if len(rest) != 1:
        raise FormatError("n_points needs exactly one value", line=line_no)
    n_points = parse_int(rest[0], line_no)
    if n_points < 3:
        raise FormatError(f"n_points must be >= 3, got {n_points}", line=line_no)

    line_no, rest = _expect_keyword(cursor, "n_components")
    if len(rest) != 1:
        raise FormatError("n_components needs exactly one value", line=line_no)
    t = parse_int(rest[0], line_no)
    if t < 1:
        raise FormatError(f"n_components must be >= 1, got {t}", line=line_no)

    line_no, rest = _expect_keyword(cursor, "mean")
    mean = _parse_floats(rest, 2 * n_points, "mean", line_no)

    line_no, rest = _expect_keyword(cursor, "eigenvalues")
    eigenvalues = _parse_floats(rest, t, "eigenvalues", line_no)

    components = np.empty((t, 2 * n_points))
    for i in range(1, t + 1):
        line_no, rest = _expect_keyword(cursor, "ev")
        if not rest:
            raise FormatError("ev line needs an index", line=line_no)
        index = parse_int(rest[0], line_no)
        if index != i:
            raise FormatError(f"expected eigenvector {i}, got index {index}",
                              line=line_no)
        components[i - 1] = _parse_floats(rest[1:], 2 * n_points,
                                          f"eigenvector {i}", line_no)
    cursor.expect_end()

    try:
        return ShapeModel(mean=mean, components=components,
                          eigenvalues=eigenvalues, mode=mode, n_points=n_points)
    except ValueError as exc:
        raise FormatError(f"model invariants violated: {exc}") from exc
