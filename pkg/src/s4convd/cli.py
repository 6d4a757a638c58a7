"""Command-line entry point: ``s4cd <command> [--flags]``.

Settings resolve as defaults < config file(s) < flags. Exit codes: 0 ok,
2 configuration error, 3 data error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import pandas as pd

from . import dataio, kernelgen, metrics, perf, plotting, training
from .core import NumericalError, ValidationError
from .dataio import DataError
from .model import ModelConfig, load_checkpoint, predict, save_checkpoint

log = logging.getLogger("s4cd")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

CHECKPOINT_NAME = "model.s4cd"
RUN_CONFIG_NAME = "config.txt"


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    # model
    input_dim: int = 4
    measurement_dim: int = 128
    state_dim: int = 64
    output_dim: int = 1
    dropout_p: float = 0.01
    seq_len: int = 168
    kernel_variant: str = "s4convd"
    # optimizer / loop
    batch_size: int = 16
    lr: float = 0.001
    momentum: float = 0.9
    log_interval: int = 200
    num_epochs: int = 100
    clip_norm: float = 0.0  # 0 disables clipping
    seed: int = 0
    # data
    data: str = "synth"
    meter_csv: str = ""
    weather_csv: str = ""
    metadata_csv: str = ""
    feature_set: str = "minimal4"
    train_stride: int = 24
    synth_seed: int = 42
    synth_buildings: int = 8
    synth_hours: int = 8 * 7 * 24
    # outputs and evaluation
    output_dir: str = "runs"
    checkpoint: str = ""
    split: str = "test"
    length: int = 0  # kernel-dump length; 0 means seq_len

    def model_config(self) -> ModelConfig:
        try:
            width = dataio.FeatureSet(self.feature_set).width
        except ValueError as exc:
            raise ConfigError(f"unknown feature_set {self.feature_set!r}") from exc
        if width != self.input_dim:
            raise ConfigError(f"feature_set {self.feature_set} has {width} features but input_dim is {self.input_dim}")
        try:
            return ModelConfig(self.input_dim, self.measurement_dim, self.state_dim, self.output_dim,
                               self.dropout_p, self.seq_len, self.kernel_variant)
        except ValidationError as exc:
            raise ConfigError(str(exc)) from exc

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = FIELD_TYPES[key]
    try:
        return kind(raw) if kind is not str else raw
    except ValueError as exc:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from exc


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FIELD_TYPES:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), str(path))


def resolve_config(flags: dict, config_path=None, base: dict | None = None) -> RunConfig:
    """Defaults, then ``base`` (a run's saved config), then the config file, then flags."""
    merged = {}
    merged.update(base or {})
    if config_path:
        merged.update(read_config_file(config_path))
    merged.update({k: _coerce(k, v) for k, v in flags.items()})
    return RunConfig(**merged)


# ---------------------------------------------------------------- data


def load_records(cfg: RunConfig) -> pd.DataFrame:
    if cfg.data == "synth":
        return dataio.synth_dataset(cfg.synth_seed, cfg.synth_buildings, cfg.synth_hours)
    if cfg.meter_csv or cfg.weather_csv or cfg.metadata_csv:
        if not (cfg.meter_csv and cfg.weather_csv and cfg.metadata_csv):
            raise ConfigError("meter_csv, weather_csv and metadata_csv must be given together")
        return dataio.load_csv(cfg.meter_csv, cfg.weather_csv, cfg.metadata_csv)
    root = Path(cfg.data)
    if not root.is_dir():
        raise DataError(f"data directory not found: {root}")
    return dataio.load_csv(root / "train.csv", root / "weather_train.csv", root / "building_metadata.csv")


def load_windows(cfg: RunConfig) -> dict:
    records = load_records(cfg)
    split = dataio.temporal_split(records)
    return dataio.split_windows(split, cfg.feature_set, cfg.seq_len, cfg.train_stride)


def _checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.output_dir) / CHECKPOINT_NAME


def _saved_config(flags: dict, config_path) -> dict:
    """Settings stored next to the checkpoint by ``train`` (used as a base layer)."""
    probe = resolve_config(flags, config_path)
    sibling = _checkpoint_path(probe).parent / RUN_CONFIG_NAME
    if not sibling.is_file():
        return {}
    saved = read_config_file(sibling)
    # paths of the original run are not inherited
    for key in ("output_dir", "checkpoint"):
        saved.pop(key, None)
    return saved


def _load_model(cfg: RunConfig):
    path = _checkpoint_path(cfg)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        params = load_checkpoint(path)
    except ValidationError as exc:
        raise DataError(str(exc)) from exc
    cfg.input_dim, cfg.measurement_dim, cfg.state_dim, cfg.output_dim = params.dims
    return params, cfg.model_config()


def prediction_frame(params, windows, config: ModelConfig) -> pd.DataFrame:
    """One row per (building, meter, target hour); overlapping windows keep the first prediction."""
    if len(windows) == 0:
        raise DataError("no complete windows to predict on")
    preds = np.concatenate([
        predict(params, windows.inputs[i : i + 64], config)[..., 0] for i in range(0, len(windows), 64)
    ])
    n_win, length = preds.shape
    frame = pd.DataFrame({
        "building_id": np.repeat(windows.building_id, length),
        "meter": np.repeat(windows.meter, length),
        "timestamp": pd.to_datetime(windows.target_time.ravel()),
        "prediction": preds.ravel(),
        "actual": np.where(windows.mask, np.expm1(windows.targets), np.nan).ravel(),
    })
    frame = frame.drop_duplicates(["building_id", "meter", "timestamp"], keep="first")
    return frame.sort_values(["building_id", "meter", "timestamp"], kind="mergesort").reset_index(drop=True)


def write_predictions(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame[["building_id", "meter", "timestamp", "prediction"]].to_csv(
        path, index=False, date_format=dataio.TIMESTAMP_FORMAT, float_format="%.10g", lineterminator="\n"
    )
    return path


# ---------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig) -> int:
    model_cfg = cfg.model_config()
    windows = load_windows(cfg)
    if len(windows["train"]) == 0:
        raise DataError(f"no training windows of length {cfg.seq_len}")
    params, history = training.train(
        model_cfg, windows, epochs=cfg.num_epochs, batch_size=cfg.batch_size, log_interval=cfg.log_interval,
        seed=cfg.seed, lr=cfg.lr, momentum=cfg.momentum, clip_norm=cfg.clip_norm or None,
    )
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / CHECKPOINT_NAME)
    frame = pd.DataFrame([asdict(r) for r in history], columns=["epoch", "split", "loss", "rmsle"])
    frame.to_csv(out / "history.csv", index=False, float_format="%.10g", lineterminator="\n")
    (out / RUN_CONFIG_NAME).write_text(cfg.to_text())
    plotting.plot_history(history, out / "history.png", title=f"{model_cfg.kernel_variant.value}, seed {cfg.seed}")
    val = [r for r in history if r.split == "val"]
    if val:
        print(f"val_rmsle={val[-1].rmsle:.6f}")
    else:
        print(f"train_rmsle={history[-1].rmsle:.6f}")
    return 0


def _predict_split(cfg: RunConfig):
    params, model_cfg = _load_model(cfg)
    windows = load_windows(cfg)
    if cfg.split not in windows:
        raise ConfigError(f"split must be one of {sorted(windows)}, got {cfg.split!r}")
    return prediction_frame(params, windows[cfg.split], model_cfg)


def cmd_eval(cfg: RunConfig) -> int:
    frame = _predict_split(cfg)
    write_predictions(frame, Path(cfg.output_dir) / "predictions.csv")
    scored = frame.dropna(subset=["actual"])
    if scored.empty:
        raise DataError(f"{cfg.split} split has no observed readings to score")
    print(f"{cfg.split}_rmsle={metrics.rmsle(scored['prediction'], scored['actual']):.6f}")
    return 0


def cmd_predict(cfg: RunConfig) -> int:
    frame = _predict_split(cfg)
    path = write_predictions(frame, Path(cfg.output_dir) / "predictions.csv")
    print(path)
    return 0


def cmd_kernel_dump(cfg: RunConfig) -> int:
    params, model_cfg = _load_model(cfg)
    length = cfg.length or cfg.seq_len
    try:
        values = kernelgen.materialize(params.ssm, model_cfg.kernel_variant, length).values
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "kernel.csv", values, fmt="%.17g", delimiter=",")
    plotting.plot_kernel(values, out / "kernel.png", title=f"{model_cfg.kernel_variant.value} kernels, L={length}")
    print(out / "kernel.csv")
    return 0


def cmd_bench(args) -> int:
    try:
        tiles = [int(t) for t in str(args.tiles).split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"tiles must be comma-separated integers, got {args.tiles!r}") from exc
    rows = perf.bench_tiling(args.n, args.l, tiles, repeats=args.repeats, seed=args.seed)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    text = perf.bench_csv(rows)
    (out / "bench_tiling.csv").write_text(text)
    if rows:
        plotting.plot_bench(rows, out / "bench_tiling.png")
    sys.stdout.write(text)
    return 0


GPU_FIELDS = [f.name for f in fields(perf.GpuSpec) if f.name != "register_alloc_granularity"]
USAGE_FIELDS = [f.name for f in fields(perf.KernelResourceUsage)]


def cmd_occupancy(args) -> int:
    spec = perf.GpuSpec(**{k: getattr(args, k) for k in GPU_FIELDS if getattr(args, k) is not None})
    usage = perf.KernelResourceUsage(**{k: getattr(args, k) for k in USAGE_FIELDS if getattr(args, k) is not None})
    report = perf.occupancy(spec, usage)
    if args.format in ("text", "both"):
        print(report.as_text())
    if args.format in ("json", "both"):
        print(report.as_keyvalue())
    return 0


def cmd_make_synth(cfg: RunConfig) -> int:
    tables = dataio.synth_tables(cfg.synth_seed, cfg.synth_buildings, cfg.synth_hours)
    for path in dataio.write_tables(cfg.output_dir, *tables).values():
        print(path)
    return 0


# ---------------------------------------------------------------- parsing


RUN_COMMANDS = {
    "train": (cmd_train, "train a model and write model.s4cd, history.csv and history.png"),
    "eval": (cmd_eval, "score a checkpoint on a split and write predictions.csv"),
    "predict": (cmd_predict, "write predictions.csv for a split"),
    "kernel-dump": (cmd_kernel_dump, "write the per-channel kernels as an H x L CSV and heat map"),
    "make-synth": (cmd_make_synth, "write a synthetic dataset in the three-file CSV layout"),
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="flat key = value settings file")
    for f in fields(RunConfig):
        names = ["--" + f.name.replace("_", "-")]
        if f.name == "num_epochs":
            names.append("--epochs")
        p.add_argument(*names, dest=f.name, default=argparse.SUPPRESS, metavar=FIELD_TYPES[f.name].__name__.upper(),
                       help=f"default: {f.default!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s4cd", description="Diagonal state-space forecasting of building energy use.")
    parser.add_argument("--quiet", action="store_true", help="only warnings on stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in RUN_COMMANDS.items():
        _add_run_flags(sub.add_parser(name, help=help_text))

    bench = sub.add_parser("bench-tiling", help="time tiled kernel materialization against the naive path")
    bench.add_argument("--n", type=int, default=4096, help="state size")
    bench.add_argument("--l", type=int, default=8192, help="kernel length")
    bench.add_argument("--tiles", "--tile", default="8,16,32,64", help="comma-separated tile sizes")
    bench.add_argument("--repeats", type=int, default=3)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--output-dir", default="runs")

    occ = sub.add_parser("occupancy", help="blocks and warps resident per multiprocessor")
    for name in GPU_FIELDS + USAGE_FIELDS:
        occ.add_argument("--" + name.replace("_", "-"), type=int, default=None)
    occ.add_argument("--format", choices=("text", "json", "both"), default="both")
    return parser


def _dispatch(args) -> int:
    if args.command == "bench-tiling":
        return cmd_bench(args)
    if args.command == "occupancy":
        return cmd_occupancy(args)
    flags = {k: v for k, v in vars(args).items() if k in FIELD_TYPES}
    base = _saved_config(flags, args.config) if args.command in ("eval", "predict", "kernel-dump") else None
    cfg = resolve_config(flags, args.config, base)
    return RUN_COMMANDS[args.command][0](cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericalError as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERIC
    except ValidationError as exc:
        log.error("invalid setting: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
