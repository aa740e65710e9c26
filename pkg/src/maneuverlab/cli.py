"""Command-line interface: synthesis, labeling, training, encoding, evaluation.

Every run resolves its configuration (defaults < MANEUVERLAB_SEED <
config file < --set/--seed overrides), writes its outputs, and drops a
manifest beside them recording the resolved config, its hash, the seed
and the SHA-256 digests of all inputs.  Re-running against an existing
manifest verifies the input digests first and refuses to proceed on a
mismatch unless --force is given.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import evaluation, signals
from .dlg import DlgRepresentationLearner
from .ndtensor import load_checkpoint
from .signals import four_state_config, label_states, load_csv, normalize, save_csv, synthesize
from .stationarity import adf_test
from .tnc import TncRepresentationLearner

__all__ = ["TrainConfig", "load_config", "main"]

ENV_SEED = "MANEUVERLAB_SEED"


@dataclass
class TrainConfig:
    """Training hyperparameters with the published defaults."""

    window: int = 19
    repr_size: int = 16
    global_size: int = 2
    lr: float = 0.001
    batch_size: int = 5
    epochs: int = 30
    pu_weight: float = 0.05
    reg_weight: float = 0.8
    kl_weight: float = 0.01
    adf_threshold: float = 0.01
    prior_kernels: tuple = ("rbf", "matern32")
    prior_scales: tuple = (2.0, 1.0, 0.5, 0.25)
    seed: int = 0

    def validate(self):
        if self.global_size > self.repr_size:
            raise ValueError(f"global_size ({self.global_size}) must be <= repr_size ({self.repr_size})")
        if not 0.0 <= self.kl_weight <= 1.0:
            raise ValueError(f"kl_weight must be in [0, 1], got {self.kl_weight}")
        if not 0.0 <= self.pu_weight <= 1.0:
            raise ValueError(f"pu_weight must be in [0, 1], got {self.pu_weight}")
        if min(self.window, self.repr_size, self.global_size, self.batch_size, self.epochs) < 1:
            raise ValueError("window, repr_size, global_size, batch_size and epochs must be >= 1")
        if self.lr <= 0 or self.adf_threshold <= 0:
            raise ValueError("lr and adf_threshold must be positive")
        if any(s <= 0 for s in self.prior_scales):
            raise ValueError("prior scales must be positive")
        return self

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["prior_kernels"] = list(self.prior_kernels)
        out["prior_scales"] = list(self.prior_scales)
        return out


# Short names from the published hyperparameter table are accepted as aliases.
CONFIG_ALIASES = {
    "W_t": "window",
    "M": "repr_size",
    "m": "global_size",
    "w_t": "pu_weight",
    "lambda": "reg_weight",
    "B": "kl_weight",
    "kappa": "batch_size",
    "ADF": "adf_threshold",
}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    if key in ("prior_kernels",):
        return tuple(part.strip() for part in raw.split(",") if part.strip())
    if key in ("prior_scales",):
        return tuple(float(part) for part in raw.split(",") if part.strip())
    if key in ("window", "repr_size", "global_size", "batch_size", "epochs", "seed"):
        return int(raw)
    return float(raw)


def _resolve_key(key: str) -> str:
    key = key.strip()
    key = CONFIG_ALIASES.get(key, key)
    if key not in _FIELD_TYPES:
        valid = sorted(set(_FIELD_TYPES) | set(CONFIG_ALIASES))
        raise ValueError(f"unknown config key {key!r}; valid keys: {', '.join(valid)}")
    return key


def load_config(path=None, overrides: dict[str, str] | None = None,
                seed_flag: int | None = None) -> TrainConfig:
    """Resolve a config from defaults, environment seed, file, and overrides."""
    resolved: dict = {}
    env_seed = os.environ.get(ENV_SEED)
    if env_seed is not None:
        resolved["seed"] = int(env_seed)
    if path is not None:
        for line_number, line in enumerate(Path(path).read_text().splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}: line {line_number}: expected key=value, got {line!r}")
            raw_key, raw_value = stripped.split("=", 1)
            key = _resolve_key(raw_key)
            try:
                resolved[key] = _parse_value(key, raw_value)
            except ValueError as exc:
                raise ValueError(f"{path}: line {line_number}: bad value for {key}: {exc}") from None
    for raw_key, raw_value in (overrides or {}).items():
        key = _resolve_key(raw_key)
        resolved[key] = _parse_value(key, raw_value)
    if seed_flag is not None:
        resolved["seed"] = int(seed_flag)
    return TrainConfig(**resolved).validate()


# ---------------------------------------------------------------------------
# manifests


def file_digest(path) -> str:
    hasher = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            hasher.update(chunk)
    return hasher.hexdigest()


def _manifest_path(anchor: Path) -> Path:
    return anchor / "manifest.json" if anchor.is_dir() else anchor.with_name(anchor.name + ".manifest.json")


def check_inputs_against_manifest(anchor: Path, inputs: list[Path], force: bool):
    """Refuse to overwrite outputs whose manifest records different inputs."""
    manifest_path = _manifest_path(anchor)
    if not manifest_path.exists() or force:
        return
    recorded = json.loads(manifest_path.read_text()).get("inputs", {})
    for path in inputs:
        digest = file_digest(path)
        old = recorded.get(str(path))
        if old is not None and old != digest:
            raise ValueError(
                f"input {path} no longer matches the digest in {manifest_path} "
                f"(recorded {old[:12]}..., found {digest[:12]}...); pass --force to override"
            )


def write_manifest(anchor: Path, command: str, config: dict, seed: int,
                   inputs: list[Path], outputs: list[Path]):
    config_text = json.dumps(config, sort_keys=True)
    manifest = {
        "command": command,
        "config": config,
        "config_sha256": hashlib.sha256(config_text.encode()).hexdigest(),
        "seed": seed,
        "inputs": {str(p): file_digest(p) for p in inputs},
        "outputs": {str(p): file_digest(p) for p in outputs},
    }
    _manifest_path(anchor).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_rows_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _format_cell(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = load_config(args.config, dict(args.set or {}), args.seed)
    if args.preset != "four-state":
        raise ValueError(f"unknown preset {args.preset!r}; available: four-state")
    series = synthesize(four_state_config(length=args.length, seed=cfg.seed,
                                          missing_rate=args.missing_rate))
    out = Path(args.out)
    check_inputs_against_manifest(out, [], args.force)
    save_csv(series, out)
    write_manifest(out, "synth", {**cfg.as_dict(), "preset": args.preset,
                                  "length": args.length, "missing_rate": args.missing_rate},
                   cfg.seed, [], [out])
    return 0


def cmd_label(args) -> int:
    data = Path(args.data)
    out = Path(args.out)
    check_inputs_against_manifest(out, [data], args.force)
    series = load_csv(data)
    labeled = label_states(series, window=args.window, p_threshold=args.p_threshold,
                           reject_means_stationary=not args.flip_stationarity)
    save_csv(labeled, out)
    write_manifest(out, "label", {"window": args.window, "p_threshold": args.p_threshold,
                                  "flip_stationarity": args.flip_stationarity},
                   0, [data], [out])
    return 0


def cmd_adf(args) -> int:
    data = Path(args.data)
    out = Path(args.out)
    check_inputs_against_manifest(out, [data], args.force)
    series = load_csv(data)
    rows = []
    for start in range(0, series.length, args.window):
        stop = min(start + args.window, series.length)
        for f, name in enumerate(signals.FEATURE_NAMES):
            block = series.values[f, start:stop]
            try:
                result = adf_test(block)
                rows.append([start, name, repr(result.statistic), repr(result.p_value),
                             result.lags_used])
            except ValueError:
                rows.append([start, name, "nan", "nan", 0])
    _write_rows_csv(out, ["start", "feature", "statistic", "p_value", "lags"], rows)
    write_manifest(out, "adf", {"window": args.window}, 0, [data], [out])
    return 0


def cmd_train_tnc(args) -> int:
    cfg = load_config(args.config, dict(args.set or {}), args.seed)
    data = Path(args.data)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    check_inputs_against_manifest(out_dir, [data], args.force)
    series = normalize(load_csv(data))
    learner = TncRepresentationLearner(
        window=cfg.window, repr_size=cfg.repr_size, lr=cfg.lr, batch_size=cfg.batch_size,
        epochs=cfg.epochs, pu_weight=cfg.pu_weight, adf_threshold=cfg.adf_threshold,
        seed=cfg.seed,
    ).fit(series)
    ckpt = out_dir / "tnc.npz"
    log = out_dir / "tnc_log.csv"
    learner.save(ckpt)
    _write_rows_csv(log, ["epoch", "train_loss", "heldout_loss", "disc_accuracy"],
                    [[row["epoch"], repr(row["train_loss"]), repr(row["heldout_loss"]),
                      repr(row["disc_accuracy"])] for row in learner.history_])
    write_manifest(out_dir, "train-tnc", cfg.as_dict(), cfg.seed, [data], [ckpt, log])
    return 0


def cmd_train_dlg(args) -> int:
    cfg = load_config(args.config, dict(args.set or {}), args.seed)
    data = Path(args.data)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    check_inputs_against_manifest(out_dir, [data], args.force)
    series = normalize(load_csv(data))
    learner = DlgRepresentationLearner(
        window=cfg.window, repr_size=cfg.repr_size, global_size=cfg.global_size,
        lr=cfg.lr, batch_size=cfg.batch_size, epochs=cfg.epochs,
        kl_weight=cfg.kl_weight, reg_weight=cfg.reg_weight,
        prior_kernels=cfg.prior_kernels, prior_scales=cfg.prior_scales, seed=cfg.seed,
    ).fit(series)
    ckpt = out_dir / "dlg.npz"
    log = out_dir / "dlg_log.csv"
    learner.save(ckpt)
    _write_rows_csv(
        log,
        ["epoch", "train_loss", "mse", "kl_local", "kl_global", "l_reg", "heldout_mse"],
        [[row["epoch"]] + [repr(row[k]) for k in
                           ("train_loss", "mse", "kl_local", "kl_global", "l_reg", "heldout_mse")]
         for row in learner.history_])
    write_manifest(out_dir, "train-dlg", cfg.as_dict(), cfg.seed, [data], [ckpt, log])
    return 0


def _load_learner(path: Path):
    if not path.exists():
        raise ValueError(f"checkpoint not found: {path}")
    _, meta = load_checkpoint(path)
    model = meta.get("model")
    if model == "tnc":
        return TncRepresentationLearner.load(path)
    if model == "dlg":
        return DlgRepresentationLearner.load(path)
    raise ValueError(f"{path}: unknown model kind {model!r}")


def cmd_encode(args) -> int:
    ckpt = Path(args.checkpoint)
    data = Path(args.data)
    out = Path(args.out)
    check_inputs_against_manifest(out, [ckpt, data], args.force)
    learner = _load_learner(ckpt)
    series = normalize(load_csv(data))
    reps = learner.encode(series)
    header = ["window_start"] + [f"z_{i}" for i in range(reps.Z.shape[1])]
    if reps.z_g is not None:
        header += [f"zg_{i}" for i in range(reps.z_g.shape[1])]
    rows = []
    for i in range(reps.n_windows):
        row = [int(reps.start_indices[i])] + [repr(v) for v in reps.Z[i]]
        if reps.z_g is not None:
            row += [repr(v) for v in reps.z_g[i]]
        rows.append(row)
    _write_rows_csv(out, header, rows)
    write_manifest(out, "encode", {"checkpoint": str(ckpt)}, 0, [ckpt, data], [out])
    return 0


def _write_reconstruction_csv(path, series, recon, sigma):
    header = ["t", "a_lat", "a_lon", "hat_a_lat", "hat_a_lon", "sigma_lat", "sigma_lon"]
    rows = []
    for t in range(series.values.shape[1]):
        rows.append([t, repr(series.values[0, t]), repr(series.values[1, t]),
                     repr(recon[0, t]), repr(recon[1, t]), repr(sigma[0]), repr(sigma[1])])
    _write_rows_csv(path, header, rows)


def cmd_reconstruct(args) -> int:
    ckpt = Path(args.checkpoint)
    data = Path(args.data)
    out = Path(args.out)
    check_inputs_against_manifest(out, [ckpt, data], args.force)
    learner = _load_learner(ckpt)
    if not isinstance(learner, DlgRepresentationLearner):
        raise ValueError("reconstruction needs a dlg checkpoint")
    series = normalize(load_csv(data))
    recon, sigma = learner.reconstruct(series)
    _write_reconstruction_csv(out, series, recon, sigma)
    write_manifest(out, "reconstruct", {"checkpoint": str(ckpt)}, 0, [ckpt, data], [out])
    return 0


def _render_table(header, rows) -> str:
    cells = [list(map(str, header))] + [[_format_cell(v) for v in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = []
    for r, row in enumerate(cells):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
        if r == 0:
            lines.append("  ".join("-" * widths[i] for i in range(len(header))))
    return "\n".join(lines)


def cmd_evaluate(args) -> int:
    if not args.tnc and not args.dlg:
        raise ValueError("evaluation needs at least one checkpoint (--tnc and/or --dlg)")
    data = Path(args.data)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = [data]
    learners = []
    for path in (args.tnc, args.dlg):
        if path:
            ckpt = Path(path)
            if not ckpt.exists():
                raise ValueError(f"checkpoint not found: {ckpt}")
            inputs.append(ckpt)
            learners.append(_load_learner(ckpt))
    check_inputs_against_manifest(out_dir, inputs, args.force)

    series = load_csv(data)
    if series.labels is None:
        raise ValueError(f"{data} has no 'state' column; run `maneuverlab label` first")
    series = normalize(series)
    windows = {learner.window for learner in learners}
    if len(windows) > 1:
        raise ValueError(f"checkpoints disagree on window size: {sorted(windows)}")
    window = windows.pop()

    reps = [learner.encode(series) for learner in learners]
    rows = evaluation.evaluate_all(reps, series, window, seed=args.seed or 0)
    eval_csv = out_dir / "evaluation.csv"
    evaluation.report_to_csv(rows, eval_csv)
    outputs = [eval_csv]

    for learner in learners:
        if isinstance(learner, DlgRepresentationLearner):
            recon, sigma = learner.reconstruct(series)
            plot_csv = out_dir / "reconstruction.csv"
            _write_reconstruction_csv(plot_csv, series, recon, sigma)
            outputs.append(plot_csv)

    print(_render_table(evaluation.EVAL_COLUMNS,
                        [[row[c] for c in evaluation.EVAL_COLUMNS] for row in rows]))
    write_manifest(out_dir, "evaluate", {"window": window}, args.seed or 0, inputs, outputs)
    return 0


def cmd_report(args) -> int:
    path = Path(args.eval)
    if not path.exists():
        raise ValueError(f"evaluation report not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    print(_render_table(header, rows))
    return 0


# ---------------------------------------------------------------------------
# parser


class _KeyValue(argparse.Action):
    def __call__(self, parser, namespace, value, option_string=None):
        if "=" not in value:
            raise argparse.ArgumentError(self, f"expected key=value, got {value!r}")
        key, raw = value.split("=", 1)
        current = getattr(namespace, self.dest) or []
        current.append((key, raw))
        setattr(namespace, self.dest, current)


def _add_config_flags(sub):
    sub.add_argument("--config", help="plain-text key=value config file")
    sub.add_argument("--set", action=_KeyValue, metavar="KEY=VALUE",
                     help="override one config key (repeatable)")
    sub.add_argument("--seed", type=int, help="seed override (highest priority)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maneuverlab",
        description="Representation learning for bivariate acceleration signals.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("synth", help="generate a synthetic labeled series")
    p.add_argument("--preset", default="four-state")
    p.add_argument("--length", type=int, default=2000)
    p.add_argument("--missing-rate", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_synth)

    p = commands.add_parser("label", help="attach ADF-based maneuver states")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=250)
    p.add_argument("--p-threshold", type=float, default=0.01)
    p.add_argument("--flip-stationarity", action="store_true",
                   help="treat non-rejection of the unit root as stationary")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_label)

    p = commands.add_parser("adf", help="per-window unit-root tests")
    p.add_argument("--data", required=True)
    p.add_argument("--window", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_adf)

    p = commands.add_parser("train-tnc", help="train the contrastive learner")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_tnc)

    p = commands.add_parser("train-dlg", help="train the generative learner")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--force", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_dlg)

    p = commands.add_parser("encode", help="encode a series with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_encode)

    p = commands.add_parser("evaluate", help="downstream metrics for trained checkpoints")
    p.add_argument("--data", required=True, help="labeled CSV (with a state column)")
    p.add_argument("--tnc", help="tnc checkpoint")
    p.add_argument("--dlg", help="dlg checkpoint")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = commands.add_parser("reconstruct", help="posterior-mean reconstruction with error band")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_reconstruct)

    p = commands.add_parser("report", help="render an evaluation CSV as a table")
    p.add_argument("--eval", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
