"""Command-line pipeline: generate data, build models, smooth, train, evaluate.

Configuration comes from an INI-style file (`[section]` headers, `key =
value` lines, `#` comments). Every key has a default, command-line flags
override file values, and the effective configuration is echoed into each
output artifact as comment lines so any result can be reproduced from its
own header.

Exit codes: 0 success, 1 usage or configuration errors, 2 data or I/O
errors.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from . import shape_core, trainer
from .errors import (
    AsmKitError,
    EmptyDataset,
    EmptyInput,
    FormatError,
    InsufficientData,
    InvalidConfig,
    RetentionUnsatisfiable,
    ShapeMismatch,
)
from .losses import LossWeights

_SECTIONS = ("data", "model", "optimizer", "loss", "eval")

_DEFAULTS: dict[tuple[str, str], str] = {
    ("data", "n_points"): "68",
    ("data", "n_modes"): "6",
    ("data", "mode_stds"): "auto",
    ("data", "roll_range"): "30.0",
    ("data", "yaw_range"): "45.0",
    ("data", "pitch_range"): "30.0",
    ("data", "noise_std"): "0.02",
    ("data", "occlusion_prob"): "0.0",
    ("data", "occlusion_block"): "8",
    ("data", "train_count"): "2000",
    ("data", "test_count"): "500",
    ("data", "seed"): "0",
    ("model", "retention"): "0.95",
    ("model", "mode"): "raw",
    ("optimizer", "learning_rate"): "0.01",
    ("optimizer", "beta1"): "0.9",
    ("optimizer", "beta2"): "0.999",
    ("optimizer", "decay"): "1e-05",
    ("optimizer", "epsilon"): "1e-07",
    ("optimizer", "batch_size"): "50",
    ("optimizer", "epochs"): "150",
    ("loss", "w_facial"): "1.0",
    ("loss", "w_pose"): "0.5",
    ("eval", "left_eye_index"): "auto",
    ("eval", "right_eye_index"): "auto",
    ("eval", "failure_threshold"): "0.1",
    ("eval", "auc_upper"): "0.1",
}


def _parse_config_file(text: str) -> list[tuple[int, str, str, str]]:
    """Yield (line_no, section, key, raw_value) entries from INI text."""
    entries = []
    section = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise InvalidConfig(
                    f"unknown section '[{section}]' at line {line_no}")
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise InvalidConfig(f"cannot parse config line {line_no}: {raw!r}")
        if section is None:
            raise InvalidConfig(
                f"key {key.strip()!r} at line {line_no} appears before any section")
        entries.append((line_no, section, key.strip(), value.strip()))
    return entries


class CliConfig:
    """Effective configuration: defaults, then file values, then flag overrides."""

    def __init__(self, config_path=None, overrides=None):
        self.values = dict(_DEFAULTS)
        if config_path is not None:
            text = Path(config_path).read_text()
            for line_no, section, key, value in _parse_config_file(text):
                if (section, key) not in self.values:
                    raise InvalidConfig(
                        f"unknown key '{key}' in section '[{section}]' "
                        f"(line {line_no})")
                self.values[(section, key)] = value
        for (section, key), value in (overrides or {}).items():
            self.values[(section, key)] = str(value)

    def _get(self, section, key, convert, describe):
        raw = self.values[(section, key)]
        try:
            return convert(raw)
        except (ValueError, TypeError):
            raise InvalidConfig(
                f"{section}.{key} must be {describe}, got {raw!r}") from None

    def _int(self, section, key):
        return self._get(section, key, int, "an integer")

    def _float(self, section, key):
        return self._get(section, key, float, "a number")

    def echo_lines(self) -> list[str]:
        """Canonical `section.key = value` lines for provenance comments."""
        lines = []
        for section in _SECTIONS:
            for (sec, key), value in _DEFAULTS.items():
                if sec == section:
                    lines.append(f"{section}.{key} = {self.values[(section, key)]}")
        return lines

    def synthetic_config(self) -> data_mod.SyntheticConfig:
        raw_stds = self.values[("data", "mode_stds")]
        if raw_stds == "auto":
            mode_stds = None
        else:
            try:
                mode_stds = tuple(float(tok) for tok in
                                  raw_stds.replace(",", " ").split())
            except ValueError:
                raise InvalidConfig(
                    f"data.mode_stds must be numbers or 'auto', got {raw_stds!r}"
                ) from None
        return data_mod.SyntheticConfig(
            n_points=self._int("data", "n_points"),
            n_modes=self._int("data", "n_modes"),
            mode_stds=mode_stds,
            roll_range=self._float("data", "roll_range"),
            yaw_range=self._float("data", "yaw_range"),
            pitch_range=self._float("data", "pitch_range"),
            noise_std=self._float("data", "noise_std"),
            occlusion_prob=self._float("data", "occlusion_prob"),
            occlusion_block=self._int("data", "occlusion_block"),
            train_count=self._int("data", "train_count"),
            test_count=self._int("data", "test_count"),
            seed=self._int("data", "seed"),
        )

    def seed(self) -> int:
        return self._int("data", "seed")

    def retention(self) -> float | int:
        raw = self.values[("model", "retention")]
        try:
            if any(c in raw for c in ".eE"):
                return float(raw)
            return int(raw)
        except ValueError:
            raise InvalidConfig(
                f"model.retention must be a fraction or a component count, "
                f"got {raw!r}") from None

    def model_mode(self) -> str:
        mode = self.values[("model", "mode")]
        if mode not in shape_core.MODES:
            raise InvalidConfig(f"model.mode must be one of {shape_core.MODES}, "
                                f"got {mode!r}")
        return mode

    def optimizer_config(self) -> trainer.OptimizerConfig:
        return trainer.OptimizerConfig(
            learning_rate=self._float("optimizer", "learning_rate"),
            beta1=self._float("optimizer", "beta1"),
            beta2=self._float("optimizer", "beta2"),
            decay=self._float("optimizer", "decay"),
            epsilon=self._float("optimizer", "epsilon"),
            batch_size=self._int("optimizer", "batch_size"),
            epochs=self._int("optimizer", "epochs"),
        )

    def loss_weights(self) -> LossWeights:
        try:
            return LossWeights(w_facial=self._float("loss", "w_facial"),
                               w_pose=self._float("loss", "w_pose"))
        except ValueError as exc:
            raise InvalidConfig(str(exc)) from None

    def eval_config(self, n_points: int) -> metrics_mod.EvalConfig:
        def index(key):
            raw = self.values[("eval", key)]
            if raw == "auto":
                return None
            return self._get("eval", key, int, "an index or 'auto'")

        left = index("left_eye_index")
        right = index("right_eye_index")
        if (left is None) != (right is None):
            raise InvalidConfig("eye indices must both be 'auto' or both explicit")
        if left is None:
            left, right = metrics_mod.default_eye_indices(n_points)
        return metrics_mod.EvalConfig(
            left_eye_index=left, right_eye_index=right,
            failure_threshold=self._float("eval", "failure_threshold"),
            auc_upper=self._float("eval", "auc_upper"),
        )


class _Parser(argparse.ArgumentParser):
    """argparse parser whose usage errors exit with code 1, not 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults otherwise)")
    common.add_argument("--seed", type=int,
                        help="override data.seed (also the training seed)")

    parser = _Parser(prog="asmkit",
                     description="Shape-model training and evaluation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="generate a synthetic dataset file")
    p.add_argument("--out", required=True, help="output dataset file")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("build-asm", parents=[common],
                       help="build a shape model from .pts files or a dataset")
    p.add_argument("input", help="directory of .pts files or a dataset file")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--retention", help="variance fraction (e.g. 0.95) or "
                                       "explicit component count (e.g. 12)")
    p.add_argument("--mode", choices=shape_core.MODES, help="model frame mode")
    p.set_defaults(func=cmd_build_asm)

    p = sub.add_parser("smooth", parents=[common],
                       help="apply the model smoothing operator to shapes")
    p.add_argument("input", help="directory of .pts files or a dataset file")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--out", required=True,
                   help="output directory (.pts input) or dataset file")
    p.set_defaults(func=cmd_smooth)

    p = sub.add_parser("train", parents=[common],
                       help="train the regressor with the staged loss")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--model", required=True, help="shape model file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--loss", choices=("asm", "mse"), default="asm",
                   help="'asm' uses the staged smoothed-target term, 'mse' "
                        "pins its weight to 0")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate saved weights on a dataset split")
    p.add_argument("--weights", help="regressor weights file")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", default="test", help="dataset split to evaluate")
    p.add_argument("--gt-as-prediction", action="store_true",
                   help="debug: score the ground truth against itself")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="compare analytic gradients to finite differences")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _overrides(args) -> dict:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides[("data", "seed")] = args.seed
    return overrides


def _config(args) -> CliConfig:
    return CliConfig(config_path=args.config, overrides=_overrides(args))


def _echo(config: CliConfig, extra=()) -> list[str]:
    return [*config.echo_lines(), *extra]


def _load_gt_shapes(input_path: Path):
    """Ground-truth shapes from a .pts directory or a dataset file.

    Returns (shapes, description). Directory reads are sorted by file name
    so results do not depend on listing order.
    """
    if input_path.is_dir():
        files = sorted(input_path.glob("*.pts"))
        if not files:
            raise EmptyDataset(f"no .pts files in {input_path}")
        shapes = []
        for f in files:
            try:
                shapes.append(data_mod.parse_pts(f.read_text()).shape)
            except FormatError as exc:
                raise FormatError(f"{f}: {exc}") from exc
        return shapes, f"{len(files)} .pts files"
    dataset = data_mod.load_dataset(input_path)
    return [r.gt_shape for r in dataset.records], f"{len(dataset)} records"


def cmd_gen_data(args) -> int:
    config = _config(args)
    synth = config.synthetic_config()
    dataset = data_mod.generate_synthetic(synth)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data_mod.save_dataset(dataset, out, comments=_echo(config))
    print(f"wrote {out}: {synth.train_count} train + {synth.test_count} test "
          f"records, n_points={synth.n_points}")
    return 0


def cmd_build_asm(args) -> int:
    config = _config(args)
    overrides = {}
    if args.retention is not None:
        overrides[("model", "retention")] = args.retention
    if args.mode is not None:
        overrides[("model", "mode")] = args.mode
    if overrides:
        config.values.update({k: str(v) for k, v in overrides.items()})

    shapes, source = _load_gt_shapes(Path(args.input))
    model = shape_core.build_shape_model(shapes, retention=config.retention(),
                                         mode=config.model_mode())
    fraction = shape_core.explained_variance_fraction(model, shapes)
    rms = shape_core.reconstruction_rms(model, shapes)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(shape_core.serialize_model(model, comments=_echo(config)))
    print(f"built model from {source} (K={len(shapes)}): t={model.t}, "
          f"retained variance fraction={fraction:.6f}, "
          f"reconstruction RMS={rms:.9e}")
    return 0


def cmd_smooth(args) -> int:
    config = _config(args)
    model = shape_core.deserialize_model(Path(args.model).read_text())
    input_path = Path(args.input)
    displacement_sum = 0.0
    count = 0

    if input_path.is_dir():
        files = sorted(input_path.glob("*.pts"))
        if not files:
            raise EmptyDataset(f"no .pts files in {input_path}")
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for f in files:
            record = data_mod.parse_pts(f.read_text())
            if record.n_points != model.n_points:
                print(f"point count mismatch: model has {model.n_points}, "
                      f"{f.name} has {record.n_points}", file=sys.stderr)
                return 1
            smoothed = shape_core.asm_transform(model, record.shape)
            displacement_sum += float(np.linalg.norm(
                smoothed.points - record.shape.points, axis=1).mean())
            count += 1
            (out_dir / f.name).write_text(data_mod.write_pts(
                data_mod.PtsRecord(record.version, record.n_points, smoothed)))
    else:
        dataset = data_mod.load_dataset(input_path)
        if dataset.n_points != model.n_points:
            print(f"point count mismatch: model has {model.n_points}, "
                  f"dataset has {dataset.n_points}", file=sys.stderr)
            return 1
        smoothed_dataset = data_mod.with_asm_shapes(
            dataset, lambda s: shape_core.asm_transform(model, s))
        for record in smoothed_dataset.records:
            displacement_sum += float(np.linalg.norm(
                record.asm_shape.points - record.gt_shape.points, axis=1).mean())
            count += 1
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        data_mod.save_dataset(smoothed_dataset, out, comments=_echo(config))
    print(f"smoothed {count} shapes, mean per-point displacement "
          f"{displacement_sum / count:.9e}")
    return 0


def cmd_train(args) -> int:
    config = _config(args)
    dataset = data_mod.load_dataset(args.data)
    model = shape_core.deserialize_model(Path(args.model).read_text())
    if dataset.n_points != model.n_points:
        print(f"point count mismatch: model has {model.n_points}, dataset has "
              f"{dataset.n_points}", file=sys.stderr)
        return 1
    train_records = dataset.split("train")
    test_records = dataset.split("test")
    if not train_records:
        raise EmptyDataset("dataset has no 'train' records")
    if not test_records:
        raise EmptyDataset("dataset has no 'test' records")

    eval_config = config.eval_config(dataset.n_points)
    started = time.perf_counter()
    regressor, history = trainer.train(
        train_records, model,
        optimizer_config=config.optimizer_config(),
        loss_weights=config.loss_weights(),
        seed=config.seed(),
        alpha_override=0.0 if args.loss == "mse" else None,
        eval_config=eval_config,
    )
    elapsed = time.perf_counter() - started

    echo = _echo(config, extra=[f"loss_variant = {args.loss}"])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "regressor.txt").write_text(
        trainer.serialize_regressor(regressor, comments=echo))
    (out_dir / "history.csv").write_text(
        trainer.history_to_csv(history, comments=echo))

    predictions, pose_predictions = trainer.forward(
        regressor, np.stack([r.observation for r in test_records]))
    report = metrics_mod.evaluate(
        [r.gt_shape for r in test_records],
        [p.reshape(-1, 2) for p in predictions],
        np.array([list(r.pose) for r in test_records]),
        pose_predictions, eval_config)
    (out_dir / "report.csv").write_text(
        metrics_mod.report_to_csv(report, comments=echo))

    final = history.reports[-1]
    print(f"trained {history.epochs} epochs ({elapsed:.1f}s wall): final "
          f"l_total={final.l_total:.6f}, val NME={history.val_nme[-1]:.6f}")
    print(f"test split: NME {report.mean_nme_percent:.4f}%  FR "
          f"{report.failure_rate_percent:.2f}%  AUC {report.auc:.4f}")
    print(f"wrote {out_dir / 'regressor.txt'}, {out_dir / 'history.csv'}, "
          f"{out_dir / 'report.csv'}")
    return 0


def cmd_eval(args) -> int:
    config = _config(args)
    dataset = data_mod.load_dataset(args.data)
    records = dataset.split(args.split)
    if not records:
        raise EmptyDataset(f"dataset has no {args.split!r} records")
    eval_config = config.eval_config(dataset.n_points)

    if args.gt_as_prediction:
        predictions = [r.gt_shape.points for r in records]
        pose_predictions = np.array([list(r.pose) for r in records])
    else:
        if args.weights is None:
            print("either --weights or --gt-as-prediction is required",
                  file=sys.stderr)
            return 1
        regressor = trainer.deserialize_regressor(Path(args.weights).read_text())
        if regressor.config.n_points != dataset.n_points:
            print(f"point count mismatch: weights have "
                  f"{regressor.config.n_points}, dataset has {dataset.n_points}",
                  file=sys.stderr)
            return 1
        landmark_pred, pose_predictions = trainer.forward(
            regressor, np.stack([r.observation for r in records]))
        predictions = [p.reshape(-1, 2) for p in landmark_pred]

    report = metrics_mod.evaluate(
        [r.gt_shape for r in records], predictions,
        np.array([list(r.pose) for r in records]), pose_predictions, eval_config)

    echo = _echo(config, extra=[f"split = {args.split}",
                                f"gt_as_prediction = {args.gt_as_prediction}"])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.csv").write_text(
        metrics_mod.report_to_csv(report, comments=echo))
    (out_dir / "ced.csv").write_text(
        metrics_mod.ced_to_csv(report.ced, comments=echo))

    mae = report.pose_mae
    print(f"samples={len(report.nmes)} excluded={report.n_excluded}")
    print(f"NME {report.mean_nme_percent:.4f}%  FR "
          f"{report.failure_rate_percent:.2f}%  AUC {report.auc:.4f}  "
          f"MAE yaw/pitch/roll {mae.yaw:.4f}/{mae.pitch:.4f}/{mae.roll:.4f}")
    print(f"wrote {out_dir / 'report.csv'}, {out_dir / 'ced.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    config = _config(args)
    seed = config.seed()
    reg_config = trainer.RegressorConfig(n_points=5, hidden_widths=(8,))
    checks = [
        ("default (alpha=1, weights 1/0.5)", dict(alpha=1.0)),
        ("alpha=0 (plain landmark path)", dict(alpha=0.0)),
        ("w_pose=0 (landmark-only weights)",
         dict(alpha=1.0, loss_weights=LossWeights(w_facial=1.0, w_pose=0.0))),
    ]
    worst = 0.0
    for label, kwargs in checks:
        report = trainer.gradient_check(reg_config, seed, **kwargs)
        worst = max(worst, report.max_relative_error)
        print(f"{label}: max relative error {report.max_relative_error:.3e} "
              f"over {report.n_parameters} parameters")
    if worst < 1e-4:
        print(f"gradcheck OK: max relative error {worst:.3e} < 1e-04")
        return 0
    print(f"gradcheck FAILED: max relative error {worst:.3e} >= 1e-04",
          file=sys.stderr)
    return 1


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else int(exc.code)
    try:
        return args.func(args)
    except (InvalidConfig, InsufficientData, RetentionUnsatisfiable,
            EmptyDataset, EmptyInput, ShapeMismatch, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except AsmKitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
