"""A compact two-head point regressor and its staged training loop.

The regressor is a small rectifier network over the flattened observed
points, with one linear head for the 2n landmark coordinates and one for the
three pose angles, both reading the final hidden layer. Training runs Adam
with an inverse-time learning-rate decay and the three-phase weighting of
the smoothed-target loss term; the smoothed targets themselves are computed
once from the shape model before the first epoch, never inside the batch
loop.

Everything is deterministic given (dataset, configs, seed): initialization
draws from a generator seeded with `seed`, each epoch's shuffle from
`seed ^ epoch`, and the validation split from a fixed derivation of `seed`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ._textio import LineCursor, fmt, parse_float, parse_int
from .errors import (
    DimensionMismatch,
    EmptyDataset,
    FormatError,
    InvalidConfig,
    ShapeMismatch,
)
from .losses import (
    LossReport,
    LossWeights,
    alpha_schedule,
    loss_gradients,
    loss_total,
)
from .metrics import EvalConfig, nme
from .shape_core import ShapeModel, asm_transform
from .errors import DegenerateNormalizer

_REG_MAGIC = "ASMREG v1"


@dataclass(frozen=True)
class RegressorConfig:
    """Dimensions of the regressor: point count and hidden layer widths."""

    n_points: int
    hidden_widths: tuple[int, ...] = (128,)

    def __post_init__(self):
        if self.n_points < 1:
            raise InvalidConfig(f"n_points must be >= 1, got {self.n_points}")
        widths = tuple(int(w) for w in self.hidden_widths)
        if not widths or any(w < 1 for w in widths):
            raise InvalidConfig("hidden_widths must be a non-empty tuple of "
                                "positive integers")
        object.__setattr__(self, "hidden_widths", widths)

    @property
    def input_dim(self) -> int:
        return 2 * self.n_points


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam settings plus batch size and epoch count."""

    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    decay: float = 1e-5
    epsilon: float = 1e-7
    batch_size: int = 50
    epochs: int = 150

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidConfig("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InvalidConfig("beta1 and beta2 must lie in (0, 1)")
        if self.decay < 0 or self.epsilon <= 0:
            raise InvalidConfig("decay must be >= 0 and epsilon > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidConfig("batch_size and epochs must be >= 1")


@dataclass(frozen=True)
class Regressor:
    """Parameter container; all arrays are owned and never mutated in place."""

    config: RegressorConfig
    hidden: tuple[tuple[np.ndarray, np.ndarray], ...]
    landmark_head: tuple[np.ndarray, np.ndarray]
    pose_head: tuple[np.ndarray, np.ndarray]

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list in fixed order: hidden (W, b) pairs, then the
        landmark head, then the pose head."""
        params = []
        for w, b in self.hidden:
            params.extend((w, b))
        params.extend(self.landmark_head)
        params.extend(self.pose_head)
        return params

    def with_parameters(self, params) -> "Regressor":
        """Rebuild the regressor around a replacement parameter list."""
        params = list(params)
        if len(params) != 2 * len(self.hidden) + 4:
            raise ShapeMismatch(f"expected {2 * len(self.hidden) + 4} arrays")
        hidden = tuple((params[2 * i], params[2 * i + 1])
                       for i in range(len(self.hidden)))
        return Regressor(config=self.config, hidden=hidden,
                         landmark_head=(params[-4], params[-3]),
                         pose_head=(params[-2], params[-1]))


def init_regressor(config: RegressorConfig, seed: int) -> Regressor:
    """Deterministic initialization from the seed.

    Each weight matrix is drawn uniformly in +/- sqrt(6 / (fan_in +
    fan_out)); every bias starts at exactly zero. Matrices are drawn in
    layer order, then landmark head, then pose head.
    """
    rng = np.random.default_rng(seed)

    def draw(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    dims = [config.input_dim, *config.hidden_widths]
    hidden = tuple((draw(fan_in, fan_out), np.zeros(fan_out))
                   for fan_in, fan_out in zip(dims[:-1], dims[1:]))
    last = dims[-1]
    landmark_head = (draw(last, config.input_dim), np.zeros(config.input_dim))
    pose_head = (draw(last, 3), np.zeros(3))
    return Regressor(config=config, hidden=hidden,
                     landmark_head=landmark_head, pose_head=pose_head)


def _as_batch(regressor: Regressor, observation):
    obs = np.asarray(observation, dtype=float)
    single = obs.ndim == 1
    batch = np.atleast_2d(obs)
    if batch.ndim != 2 or batch.shape[1] != regressor.config.input_dim:
        raise DimensionMismatch(
            f"observation must have {regressor.config.input_dim} features, "
            f"got shape {obs.shape}")
    return batch, single


def _forward_cached(regressor: Regressor, batch: np.ndarray):
    """Forward pass keeping pre-activations for the backward pass."""
    activations = [batch]
    pre_activations = []
    h = batch
    for w, b in regressor.hidden:
        z = h @ w + b
        pre_activations.append(z)
        h = np.maximum(z, 0.0)
        activations.append(h)
    w_lm, b_lm = regressor.landmark_head
    w_pose, b_pose = regressor.pose_head
    return activations, pre_activations, h @ w_lm + b_lm, h @ w_pose + b_pose


def forward(regressor: Regressor, observation):
    """Predict (landmarks, pose) for one observation vector or a batch.

    A 1-D input of length 2n yields 1-D outputs of length 2n and 3; an
    (N, 2n) batch yields (N, 2n) and (N, 3). Pose columns are yaw, pitch,
    roll in degrees.
    """
    batch, single = _as_batch(regressor, observation)
    _, _, landmarks, pose = _forward_cached(regressor, batch)
    if single:
        return landmarks[0], pose[0]
    return landmarks, pose


def backward(regressor: Regressor, observation, d_landmarks, d_pose):
    """Parameter gradients for given upstream output gradients.

    Accepts a single sample or a batch; batch contributions are summed.
    Returns arrays in `Regressor.parameters()` order. The rectifier
    derivative at exactly zero is taken as zero, so units that never
    activate receive no gradient.
    """
    batch, single = _as_batch(regressor, observation)
    d_lm = np.atleast_2d(np.asarray(d_landmarks, dtype=float))
    d_ps = np.atleast_2d(np.asarray(d_pose, dtype=float))
    if d_lm.shape != (batch.shape[0], regressor.config.input_dim):
        raise DimensionMismatch(f"d_landmarks has shape {d_lm.shape}")
    if d_ps.shape != (batch.shape[0], 3):
        raise DimensionMismatch(f"d_pose has shape {d_ps.shape}")

    activations, pre_activations, _, _ = _forward_cached(regressor, batch)
    h_last = activations[-1]
    w_lm, _ = regressor.landmark_head
    w_pose, _ = regressor.pose_head

    grad_lm = (h_last.T @ d_lm, d_lm.sum(axis=0))
    grad_pose = (h_last.T @ d_ps, d_ps.sum(axis=0))
    d_hidden = d_lm @ w_lm.T + d_ps @ w_pose.T

    hidden_grads = [None] * len(regressor.hidden)
    for k in range(len(regressor.hidden) - 1, -1, -1):
        dz = d_hidden * (pre_activations[k] > 0)
        hidden_grads[k] = (activations[k].T @ dz, dz.sum(axis=0))
        d_hidden = dz @ regressor.hidden[k][0].T

    grads = []
    for gw, gb in hidden_grads:
        grads.extend((gw, gb))
    grads.extend(grad_lm)
    grads.extend(grad_pose)
    return grads


@dataclass(frozen=True)
class OptimizerState:
    """Adam accumulators: first and second moments plus the step counter."""

    m: tuple[np.ndarray, ...]
    v: tuple[np.ndarray, ...]
    step: int = 0


def init_adam_state(params) -> OptimizerState:
    return OptimizerState(m=tuple(np.zeros_like(p) for p in params),
                          v=tuple(np.zeros_like(p) for p in params))


def adam_step(state: OptimizerState, params, grads, config: OptimizerConfig):
    """One Adam update with bias correction and inverse-time rate decay.

    With 1-based step counter t: m and v are the usual exponential moving
    averages, m_hat = m / (1 - beta1^t), v_hat = v / (1 - beta2^t), the
    effective rate is lr / (1 + decay * t), and parameters move by
    -rate * m_hat / (sqrt(v_hat) + epsilon). Returns (new_state, new_params).
    """
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("parameter, gradient, and state lists disagree")
    t = state.step + 1
    rate = config.learning_rate / (1.0 + config.decay * t)
    bias1 = 1.0 - config.beta1 ** t
    bias2 = 1.0 - config.beta2 ** t

    new_m, new_v, new_params = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter {p.shape}")
        m = config.beta1 * m + (1.0 - config.beta1) * g
        v = config.beta2 * v + (1.0 - config.beta2) * g * g
        m_hat = m / bias1
        v_hat = v / bias2
        new_params.append(p - rate * m_hat / (np.sqrt(v_hat) + config.epsilon))
        new_m.append(m)
        new_v.append(v)
    return (OptimizerState(m=tuple(new_m), v=tuple(new_v), step=t), new_params)


@dataclass(frozen=True)
class TrainingHistory:
    """Per-epoch training record.

    `seconds` holds measured wall-clock only when training was run with
    measure_time=True; the default records zeros so that runs with the same
    inputs and seed produce identical histories and exports bit-for-bit.
    """

    reports: tuple[LossReport, ...]
    val_nme: tuple[float, ...]
    alpha: tuple[float, ...]
    seconds: tuple[float, ...]

    @property
    def epochs(self) -> int:
        return len(self.reports)


def history_to_csv(history: TrainingHistory, comments=()) -> str:
    """Render the history as CSV with 17-significant-digit decimals."""
    lines = [f"# {c}" for c in comments]
    lines.append("epoch,alpha,l_mse,l_asm,l_facial,l_pose,l_total,val_nme,seconds")
    for e, (report, val, alpha, secs) in enumerate(zip(
            history.reports, history.val_nme, history.alpha, history.seconds)):
        lines.append(",".join([
            str(e), fmt(alpha), fmt(report.l_mse), fmt(report.l_asm),
            fmt(report.l_facial), fmt(report.l_pose), fmt(report.l_total),
            fmt(val), fmt(secs),
        ]))
    return "\n".join(lines) + "\n"


def _fisher_yates(count: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded Fisher-Yates permutation of range(count)."""
    order = np.arange(count)
    for i in range(count - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    return order


def _mean_val_nme(gt_shapes, predictions, eval_config) -> float:
    errors = []
    for gt, pred in zip(gt_shapes, predictions):
        try:
            errors.append(nme(gt, pred.reshape(-1, 2), eval_config))
        except DegenerateNormalizer:
            continue
    return float(np.mean(errors)) if errors else float("nan")


def train(records, shape_model: ShapeModel,
          regressor_config: RegressorConfig | None = None,
          optimizer_config: OptimizerConfig | None = None,
          loss_weights: LossWeights | None = None,
          seed: int = 0, *,
          alpha_override: float | None = None,
          eval_config: EvalConfig | None = None,
          measure_time: bool = False):
    """Train the regressor on a record list; returns (regressor, history).

    Smoothed targets are computed exactly once per ground-truth shape with
    the given model before epoch 0. Ten percent of the records (at least
    one) are reserved as a validation split for the per-epoch NME series.
    Passing alpha_override pins the smoothed-term weight for every epoch
    (0.0 gives the plain baseline); otherwise it follows `alpha_schedule`.
    """
    records = list(records)
    if len(records) < 2:
        raise EmptyDataset(f"training needs at least 2 records, got {len(records)}")
    n = records[0].gt_shape.n_points
    for r in records:
        if r.gt_shape.n_points != n:
            raise ShapeMismatch("records disagree on point count")
    if shape_model.n_points != n:
        raise ShapeMismatch(
            f"model has {shape_model.n_points} points, records have {n}")

    regressor_config = regressor_config or RegressorConfig(n_points=n)
    if regressor_config.n_points != n:
        raise ShapeMismatch("regressor_config.n_points does not match the records")
    optimizer_config = optimizer_config or OptimizerConfig()
    loss_weights = loss_weights or LossWeights()
    eval_config = eval_config or EvalConfig.for_layout(n)
    if alpha_override is not None and alpha_override < 0:
        raise InvalidConfig("alpha_override must be >= 0")

    observations = np.stack([r.observation for r in records])
    gt = np.stack([r.gt_shape.flat for r in records])
    smoothed = np.stack([asm_transform(shape_model, r.gt_shape).flat
                         for r in records])
    poses = np.array([list(r.pose) for r in records])
    gt_shapes = [r.gt_shape for r in records]

    count = len(records)
    val_count = max(1, count // 10)
    split_order = _fisher_yates(count, np.random.default_rng([seed, 0x76414C]))
    val_idx = np.sort(split_order[:val_count])
    train_idx = np.sort(split_order[val_count:])
    if train_idx.size == 0:
        raise EmptyDataset("no records left to train on after the validation split")

    regressor = init_regressor(regressor_config, seed)
    params = regressor.parameters()
    state = init_adam_state(params)

    reports, val_series, alphas, seconds = [], [], [], []
    for epoch in range(optimizer_config.epochs):
        started = time.perf_counter() if measure_time else 0.0
        alpha = (alpha_override if alpha_override is not None
                 else alpha_schedule(epoch, optimizer_config.epochs))
        order = train_idx[_fisher_yates(train_idx.size,
                                        np.random.default_rng(seed ^ epoch))]

        sum_mse = sum_asm = sum_pose = 0.0
        for start in range(0, order.size, optimizer_config.batch_size):
            idx = order[start:start + optimizer_config.batch_size]
            regressor = regressor.with_parameters(params)
            lm_pred, pose_pred = forward(regressor, observations[idx])
            d_lm, d_pose = loss_gradients(gt[idx], smoothed[idx], lm_pred,
                                          poses[idx], pose_pred, alpha,
                                          loss_weights)
            grads = backward(regressor, observations[idx], d_lm, d_pose)
            state, params = adam_step(state, params, grads, optimizer_config)

            batch_n = idx.size
            g3 = gt[idx].reshape(batch_n, -1, 2)
            a3 = smoothed[idx].reshape(batch_n, -1, 2)
            p3 = lm_pred.reshape(batch_n, -1, 2)
            sum_mse += float(np.linalg.norm(g3 - p3, axis=2).mean()) * batch_n
            sum_asm += float(np.linalg.norm(a3 - p3, axis=2).mean()) * batch_n
            sum_pose += float(
                (((pose_pred - poses[idx]) ** 2).sum(axis=1) / 3.0).mean()) * batch_n

        l_mse = sum_mse / order.size
        l_asm = sum_asm / order.size
        l_pose = sum_pose / order.size
        l_facial = l_mse + alpha * l_asm
        reports.append(LossReport(
            l_mse=l_mse, l_asm=l_asm, l_facial=l_facial, l_pose=l_pose,
            l_total=loss_total(l_facial, l_pose, loss_weights),
            alpha_used=alpha))
        alphas.append(alpha)

        regressor = regressor.with_parameters(params)
        val_pred, _ = forward(regressor, observations[val_idx])
        val_series.append(_mean_val_nme([gt_shapes[i] for i in val_idx],
                                        val_pred, eval_config))
        seconds.append(time.perf_counter() - started if measure_time else 0.0)

    regressor = regressor.with_parameters(params)
    history = TrainingHistory(reports=tuple(reports), val_nme=tuple(val_series),
                              alpha=tuple(alphas), seconds=tuple(seconds))
    return regressor, history


@dataclass(frozen=True)
class GradientCheckReport:
    """Outcome of comparing analytic and finite-difference gradients."""

    max_relative_error: float
    n_parameters: int


def gradient_check(regressor_config: RegressorConfig, seed: int = 0, *,
                   alpha: float = 1.0, loss_weights: LossWeights | None = None,
                   step: float = 1e-5,
                   batch_size: int = 3) -> GradientCheckReport:
    """Check the full analytic gradient path against central differences.

    Builds a small regressor and a random batch, composes the weighted
    total loss with the forward pass, and compares the backward-propagated
    gradients to central finite differences entry by entry. Restricted to
    small dimensions (hidden widths <= 16, n_points <= 8) to keep the sweep
    over all parameters cheap.
    """
    if regressor_config.n_points > 8:
        raise InvalidConfig("gradient_check supports n_points <= 8")
    if any(w > 16 for w in regressor_config.hidden_widths):
        raise InvalidConfig("gradient_check supports hidden widths <= 16")
    loss_weights = loss_weights or LossWeights()

    rng = np.random.default_rng([seed, 0xC4EC])
    dim = regressor_config.input_dim
    observations = rng.normal(0.0, 1.0, size=(batch_size, dim))
    gt = rng.normal(0.0, 1.0, size=(batch_size, dim))
    smoothed = gt + rng.normal(0.0, 0.3, size=(batch_size, dim))
    gt_pose = rng.uniform(-30.0, 30.0, size=(batch_size, 3))

    regressor = init_regressor(regressor_config, seed)
    params = regressor.parameters()

    def total_loss(param_list):
        reg = regressor.with_parameters(param_list)
        lm_pred, pose_pred = forward(reg, observations)
        facial = (np.linalg.norm(gt.reshape(batch_size, -1, 2)
                                 - lm_pred.reshape(batch_size, -1, 2),
                                 axis=2).mean()
                  + alpha * np.linalg.norm(smoothed.reshape(batch_size, -1, 2)
                                           - lm_pred.reshape(batch_size, -1, 2),
                                           axis=2).mean())
        pose = float((((pose_pred - gt_pose) ** 2).sum(axis=1) / 3.0).mean())
        return loss_total(facial, pose, loss_weights)

    lm_pred, pose_pred = forward(regressor, observations)
    d_lm, d_pose = loss_gradients(gt, smoothed, lm_pred, gt_pose, pose_pred,
                                  alpha, loss_weights)
    analytic = backward(regressor, observations, d_lm, d_pose)

    worst = 0.0
    n_checked = 0
    for index, tensor in enumerate(params):
        flat = tensor.reshape(-1)
        for k in range(flat.size):
            plus = [p.copy() for p in params]
            minus = [p.copy() for p in params]
            plus[index].reshape(-1)[k] += step
            minus[index].reshape(-1)[k] -= step
            numeric = (total_loss(plus) - total_loss(minus)) / (2.0 * step)
            exact = analytic[index].reshape(-1)[k]
            denom = max(abs(numeric), abs(exact), 1e-8)
            worst = max(worst, abs(numeric - exact) / denom)
            n_checked += 1
    return GradientCheckReport(max_relative_error=worst, n_parameters=n_checked)


def serialize_regressor(regressor: Regressor, comments=()) -> str:
    """Render the regressor weights in their canonical text form."""
    lines = [_REG_MAGIC]
    lines.extend(f"# {c}" for c in comments)
    lines.append(f"n_points {regressor.config.n_points}")
    lines.append("hidden " + " ".join(str(w) for w in regressor.config.hidden_widths))

    def emit(label, weight, bias):
        lines.append(f"weight {label} {weight.shape[0]} {weight.shape[1]}")
        lines.extend(" ".join(fmt(x) for x in row) for row in weight)
        lines.append(f"bias {label} {bias.size}")
        lines.append(" ".join(fmt(x) for x in bias))

    for i, (w, b) in enumerate(regressor.hidden, start=1):
        emit(f"hidden{i}", w, b)
    emit("landmarks", *regressor.landmark_head)
    emit("pose", *regressor.pose_head)
    return "\n".join(lines) + "\n"


def _read_matrix(cursor, label, rows, cols):
    matrix = np.empty((rows, cols))
    for r in range(rows):
        line_no, line = cursor.next(f"row {r + 1} of {label}")
        tokens = line.split()
        if len(tokens) != cols:
            raise FormatError(f"{label} row needs {cols} values, got {len(tokens)}",
                              line=line_no)
        matrix[r] = [parse_float(tok, line_no) for tok in tokens]
    return matrix


def _read_block(cursor, label, fan_in, fan_out):
    line_no, line = cursor.next(f"'weight {label}' line")
    tokens = line.split()
    if tokens[:2] != ["weight", label] or len(tokens) != 4:
        raise FormatError(f"expected 'weight {label} <in> <out>', got {line!r}",
                          line=line_no)
    rows, cols = parse_int(tokens[2], line_no), parse_int(tokens[3], line_no)
    if (rows, cols) != (fan_in, fan_out):
        raise FormatError(
            f"{label} must be {fan_in} x {fan_out}, file says {rows} x {cols}",
            line=line_no)
    weight = _read_matrix(cursor, label, rows, cols)

    line_no, line = cursor.next(f"'bias {label}' line")
    tokens = line.split()
    if tokens[:2] != ["bias", label] or len(tokens) != 3:
        raise FormatError(f"expected 'bias {label} <size>', got {line!r}",
                          line=line_no)
    if parse_int(tokens[2], line_no) != fan_out:
        raise FormatError(f"{label} bias must have {fan_out} entries", line=line_no)
    bias = _read_matrix(cursor, f"bias {label}", 1, fan_out)[0]
    return weight, bias


def deserialize_regressor(text: str) -> Regressor:
    """Parse the canonical weights form; inverse of `serialize_regressor`."""
    cursor = LineCursor(text)
    line_no, line = cursor.next(f"'{_REG_MAGIC}' header")
    if line != _REG_MAGIC:
        raise FormatError(f"bad header {line!r}, expected {_REG_MAGIC!r}",
                          line=line_no)
    cursor.allow_comments()

    line_no, line = cursor.next("'n_points' line")
    tokens = line.split()
    if tokens[0] != "n_points" or len(tokens) != 2:
        raise FormatError(f"expected 'n_points <n>', got {line!r}", line=line_no)
    n_points = parse_int(tokens[1], line_no)

    line_no, line = cursor.next("'hidden' line")
    tokens = line.split()
    if tokens[0] != "hidden" or len(tokens) < 2:
        raise FormatError(f"expected 'hidden <widths...>', got {line!r}",
                          line=line_no)
    widths = tuple(parse_int(tok, line_no) for tok in tokens[1:])

    try:
        config = RegressorConfig(n_points=n_points, hidden_widths=widths)
    except InvalidConfig as exc:
        raise FormatError(str(exc), line=line_no) from exc

    dims = [config.input_dim, *widths]
    hidden = tuple(_read_block(cursor, f"hidden{i + 1}", dims[i], dims[i + 1])
                   for i in range(len(widths)))
    landmark_head = _read_block(cursor, "landmarks", dims[-1], config.input_dim)
    pose_head = _read_block(cursor, "pose", dims[-1], 3)
    cursor.expect_end()
    return Regressor(config=config, hidden=hidden,
                     landmark_head=landmark_head, pose_head=pose_head)
