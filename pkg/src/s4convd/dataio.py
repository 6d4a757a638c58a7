"""ASHRAE-format ingestion, feature assembly, temporal split, synthetic data.

Records are pandas DataFrames with one row per (building, meter, hour):

    building_id, meter, timestamp, meter_reading, site_id,
    air_temperature, cloud_coverage, dew_temperature
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .core import ValidationError

log = logging.getLogger(__name__)

METER_COLUMNS = ["building_id", "meter", "timestamp", "meter_reading"]
WEATHER_COLUMNS = ["site_id", "timestamp", "air_temperature", "cloud_coverage", "dew_temperature"]
METADATA_COLUMNS = ["site_id", "building_id", "primary_use", "square_feet", "year_built", "floor_count"]
WEATHER_FIELDS = ["air_temperature", "cloud_coverage", "dew_temperature"]
RECORD_COLUMNS = ["building_id", "meter", "timestamp", "meter_reading", "site_id"] + WEATHER_FIELDS

TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"
METER_NAMES = {0: "electricity", 1: "chilledwater", 2: "steam", 3: "hotwater"}
HOLIDAYS = {(1, 1), (12, 25), (12, 26)}

# row counts of the train/val/test partition, normalized to four decimals
DEFAULT_SPLIT_RATIOS = (0.5770, 0.1694, 0.2536)

FFILL_LIMIT_HOURS = 24


class FeatureSet(str, enum.Enum):
    FULL11 = "full11"
    MINIMAL4 = "minimal4"

    @property
    def width(self) -> int:
        return 11 if self is FeatureSet.FULL11 else 4


class DataError(Exception):
    """Input data that cannot be used (bad headers, empty splits, ...)."""


# ---------------------------------------------------------------- loading


def _read_table(path, required: list[str], label: str) -> tuple[pd.DataFrame, int]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{label} file not found: {path}")
    bad = 0

    def on_bad(_line):
        nonlocal bad
        bad += 1
        return None

    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, on_bad_lines=on_bad, engine="python")
    except pd.errors.EmptyDataError as exc:
        raise DataError(f"{label} file {path} has no header") from exc
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataError(f"{label} file {path} is missing columns {missing}")
    return df, bad


def _numeric(df: pd.DataFrame, cols: list[str]) -> pd.DataFrame:
    for c in cols:
        df[c] = pd.to_numeric(df[c].replace("", np.nan), errors="coerce")
    return df


def _timestamps(series: pd.Series) -> pd.Series:
    return pd.to_datetime(series, format=TIMESTAMP_FORMAT, errors="coerce")


def join_tables(meter: pd.DataFrame, weather: pd.DataFrame, metadata: pd.DataFrame) -> pd.DataFrame:
    """Attach site ids and weather to meter rows; unmatched weather stays NaN."""
    sites = metadata[["building_id", "site_id"]].drop_duplicates("building_id")
    out = meter.merge(sites, on="building_id", how="left")
    wx = weather[["site_id", "timestamp"] + WEATHER_FIELDS].drop_duplicates(["site_id", "timestamp"])
    out = out.merge(wx, on=["site_id", "timestamp"], how="left")
    return out[RECORD_COLUMNS].reset_index(drop=True)


def load_csv(meter_path, weather_path, metadata_path) -> pd.DataFrame:
    """Read the three ASHRAE tables and join them.

    Malformed rows are skipped; their count is kept in
    ``records.attrs["malformed_rows"]``.
    """
    meter, bad_m = _read_table(meter_path, METER_COLUMNS, "meter")
    weather, bad_w = _read_table(weather_path, WEATHER_COLUMNS, "weather")
    meta, bad_md = _read_table(metadata_path, ["site_id", "building_id"], "metadata")

    meter = _numeric(meter[METER_COLUMNS].copy(), ["building_id", "meter", "meter_reading"])
    meter["timestamp"] = _timestamps(meter["timestamp"])
    ok = meter[["building_id", "meter", "timestamp"]].notna().all(axis=1) & meter["meter"].isin([0, 1, 2, 3])
    ok &= ~(meter["meter_reading"] < 0)
    bad_m += int((~ok).sum())
    meter = meter[ok].astype({"building_id": np.int64, "meter": np.int64})

    weather = _numeric(weather[WEATHER_COLUMNS].copy(), ["site_id"] + WEATHER_FIELDS)
    weather["timestamp"] = _timestamps(weather["timestamp"])
    ok = weather[["site_id", "timestamp"]].notna().all(axis=1)
    bad_w += int((~ok).sum())
    weather = weather[ok].astype({"site_id": np.int64})

    meta = _numeric(meta[["site_id", "building_id"]].copy(), ["site_id", "building_id"])
    ok = meta.notna().all(axis=1)
    bad_md += int((~ok).sum())
    meta = meta[ok].astype(np.int64)

    records = join_tables(meter, weather, meta)
    bad = bad_m + bad_w + bad_md
    if bad:
        log.warning("skipped %d malformed rows (meter %d, weather %d, metadata %d)", bad, bad_m, bad_w, bad_md)
    records.attrs["malformed_rows"] = bad
    return records


# ---------------------------------------------------------------- cleaning


def clean(records: pd.DataFrame) -> pd.DataFrame:
    """Fill missing weather; readings and anomalies are left untouched.

    A gap is forward-filled from the last observation of the same site if
    that observation is at most 24 h old, otherwise it takes the site mean
    (falling back to the global mean, then 0 when a column is entirely empty).
    """
    out = records.copy()
    if out.empty:
        return out
    wx = out[["site_id", "timestamp"] + WEATHER_FIELDS].drop_duplicates(["site_id", "timestamp"])
    wx = wx.sort_values(["site_id", "timestamp"], kind="mergesort").reset_index(drop=True)
    site_key = wx["site_id"].fillna(-1)
    for col in WEATHER_FIELDS:
        seen = wx["timestamp"].where(wx[col].notna())
        last_val = wx[col].groupby(site_key).ffill()
        last_seen = seen.groupby(site_key).ffill()
        fresh = (wx["timestamp"] - last_seen) <= pd.Timedelta(hours=FFILL_LIMIT_HOURS)
        filled = wx[col].where(wx[col].notna(), last_val.where(fresh))
        site_mean = wx[col].groupby(site_key).transform("mean")
        global_mean = wx[col].mean()
        fallback = site_mean.fillna(0.0 if np.isnan(global_mean) else global_mean)
        wx[col] = filled.fillna(fallback)
    out = out.drop(columns=WEATHER_FIELDS).merge(wx, on=["site_id", "timestamp"], how="left")
    out = out[RECORD_COLUMNS]
    out.attrs = dict(records.attrs)
    return out


# ---------------------------------------------------------------- features


@dataclass(frozen=True)
class TimeFeatures:
    hour_sin: np.ndarray
    hour_cos: np.ndarray
    day_of_week: np.ndarray
    is_holiday: np.ndarray


def time_features(timestamps) -> TimeFeatures:
    ts = pd.DatetimeIndex(timestamps)
    angle = 2.0 * np.pi * ts.hour.to_numpy() / 24.0
    holiday = np.array([(m, d) in HOLIDAYS for m, d in zip(ts.month, ts.day)], dtype=bool)
    return TimeFeatures(np.sin(angle), np.cos(angle), ts.dayofweek.to_numpy(), holiday)


@dataclass
class SeriesFeatures:
    """One (building, meter) series on a regular hourly grid."""

    building_id: int
    meter: int
    timestamps: np.ndarray  # datetime64, (T,)
    inputs: np.ndarray  # (T, F)
    readings: np.ndarray  # (T,), NaN where missing


def _hourly(group: pd.DataFrame) -> pd.DataFrame:
    group = group.sort_values("timestamp", kind="mergesort").drop_duplicates("timestamp")
    grid = pd.date_range(group["timestamp"].iloc[0], group["timestamp"].iloc[-1], freq="h")
    group = group.set_index("timestamp").reindex(grid)
    group.index.name = "timestamp"
    for col in WEATHER_FIELDS:
        group[col] = group[col].ffill().bfill().fillna(0.0)
    return group


def assemble_features(records: pd.DataFrame, feature_set=FeatureSet.MINIMAL4) -> list[SeriesFeatures]:
    """Per-series input vectors.

    MINIMAL4: [log1p(reading), T_a/50, hour_sin, hour_cos].
    FULL11: [E, C, S, H, T_a, CC, T_d, hour_sin, hour_cos, day_of_week/6, is_holiday]
    with the four meter readings log1p'd and temperatures divided by 50.
    Missing readings in the inputs carry the last observed value (0 before
    the first one).
    """
    try:
        feature_set = FeatureSet(feature_set)
    except ValueError as exc:
        raise ValidationError(f"unknown feature set {feature_set!r}") from exc
    if records.empty:
        return []
    pivots = {}
    if feature_set is FeatureSet.FULL11:
        wide = records.pivot_table(
            index=["building_id", "timestamp"], columns="meter", values="meter_reading", aggfunc="first"
        )
        pivots = {b: g.droplevel(0) for b, g in wide.groupby(level=0)}

    series = []
    for (building, meter), group in records.groupby(["building_id", "meter"], sort=True):
        g = _hourly(group)
        ts = g.index
        readings = g["meter_reading"].to_numpy(dtype=np.float64)
        tf = time_features(ts)
        if feature_set is FeatureSet.MINIMAL4:
            carried = np.log1p(pd.Series(readings).ffill().fillna(0.0).to_numpy())
            cols = [carried, g["air_temperature"].to_numpy() / 50.0, tf.hour_sin, tf.hour_cos]
        else:
            wide = pivots[building].reindex(index=ts, columns=[0, 1, 2, 3]).ffill().fillna(0.0)
            cols = [np.log1p(wide[m].to_numpy(dtype=np.float64)) for m in (0, 1, 2, 3)]
            cols += [
                g["air_temperature"].to_numpy() / 50.0,
                g["cloud_coverage"].to_numpy(),
                g["dew_temperature"].to_numpy() / 50.0,
                tf.hour_sin,
                tf.hour_cos,
                tf.day_of_week / 6.0,
                tf.is_holiday.astype(np.float64),
            ]
        inputs = np.column_stack(cols).astype(np.float64)
        series.append(SeriesFeatures(int(building), int(meter), ts.to_numpy(), inputs, readings))
    return series


@dataclass
class WindowSet:
    """Fixed-length windows; inputs at step t are paired with the reading at t+1."""

    inputs: np.ndarray  # (W, L, F)
    targets: np.ndarray  # (W, L), log1p readings, 0 where masked
    mask: np.ndarray  # (W, L) bool
    building_id: np.ndarray  # (W,)
    meter: np.ndarray  # (W,)
    target_time: np.ndarray  # (W, L) datetime64

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx) -> "WindowSet":
        return WindowSet(
            self.inputs[idx], self.targets[idx], self.mask[idx],
            self.building_id[idx], self.meter[idx], self.target_time[idx],
        )


def make_windows(
    series: list[SeriesFeatures],
    seq_len: int,
    stride: int | None = None,
    include_tail: bool = True,
    max_missing: float = 0.5,
    n_features: int | None = None,
) -> WindowSet:
    """Cut each series into windows of ``seq_len`` input/target pairs.

    Windows with more than ``max_missing`` of their targets missing are dropped.
    """
    stride = seq_len if stride is None else stride
    if stride < 1 or seq_len < 1:
        raise ValidationError("seq_len and stride must be >= 1")
    xs, ys, ms, bs, mts, tts = [], [], [], [], [], []
    for s in series:
        n_pairs = len(s.readings) - 1
        if n_pairs < seq_len:
            continue
        target = np.log1p(s.readings[1:])
        starts = list(range(0, n_pairs - seq_len + 1, stride))
        if include_tail and starts[-1] != n_pairs - seq_len:
            starts.append(n_pairs - seq_len)
        for st in starts:
            y = target[st : st + seq_len]
            m = np.isfinite(y)
            if 1.0 - m.mean() > max_missing:
                continue
            xs.append(s.inputs[st : st + seq_len])
            ys.append(np.where(m, y, 0.0))
            ms.append(m)
            bs.append(s.building_id)
            mts.append(s.meter)
            tts.append(s.timestamps[st + 1 : st + 1 + seq_len])
    if not xs:
        width = n_features if n_features is not None else (series[0].inputs.shape[1] if series else 0)
        return WindowSet(
            np.zeros((0, seq_len, width)), np.zeros((0, seq_len)), np.zeros((0, seq_len), dtype=bool),
            np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64),
            np.zeros((0, seq_len), dtype="datetime64[ns]"),
        )
    return WindowSet(
        np.stack(xs), np.stack(ys), np.stack(ms),
        np.array(bs, dtype=np.int64), np.array(mts, dtype=np.int64), np.stack(tts),
    )


# ---------------------------------------------------------------- splitting


@dataclass
class DatasetSplit:
    train: pd.DataFrame
    val: pd.DataFrame
    test: pd.DataFrame
    boundaries: tuple  # (first val timestamp, first test timestamp)

    def parts(self) -> dict[str, pd.DataFrame]:
        return {"train": self.train, "val": self.val, "test": self.test}


def _snap(ts: np.ndarray, cut: int) -> int:
    """Move a row cut to the nearest position where the timestamp changes."""
    n = len(ts)
    if cut <= 0 or cut >= n or ts[cut - 1] != ts[cut]:
        return cut
    lo = int(np.searchsorted(ts, ts[cut], side="left"))
    hi = int(np.searchsorted(ts, ts[cut], side="right"))
    return lo if cut - lo <= hi - cut else hi


def temporal_split(records: pd.DataFrame, ratios=DEFAULT_SPLIT_RATIOS) -> DatasetSplit:
    """Contiguous train/val/test cuts in time at the given row fractions.

    Cuts are snapped to timestamp boundaries so no hour straddles two splits.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    ordered = records.sort_values("timestamp", kind="mergesort").reset_index(drop=True)
    ts = ordered["timestamp"].to_numpy()
    if len(np.unique(ts)) < 3:
        raise DataError("temporal split needs at least 3 distinct timestamps")
    n = len(ordered)
    c1 = _snap(ts, int(round(ratios[0] * n)))
    c2 = _snap(ts, int(round((ratios[0] + ratios[1]) * n)))
    if not 0 < c1 < c2 < n:
        raise DataError(f"split cuts ({c1}, {c2}) leave an empty partition for {n} rows")
    return DatasetSplit(
        ordered.iloc[:c1].reset_index(drop=True),
        ordered.iloc[c1:c2].reset_index(drop=True),
        ordered.iloc[c2:].reset_index(drop=True),
        (ts[c1], ts[c2]),
    )


def split_windows(
    split: DatasetSplit,
    feature_set,
    seq_len: int,
    train_stride: int = 24,
) -> dict[str, WindowSet]:
    """Window each partition separately; evaluation splits use non-overlapping windows plus a tail."""
    width = FeatureSet(feature_set).width
    out = {}
    for name, part in split.parts().items():
        series = assemble_features(clean(part), feature_set)
        stride = train_stride if name == "train" else seq_len
        out[name] = make_windows(series, seq_len, stride, n_features=width)
    return out


# ---------------------------------------------------------------- synthetic data

SYNTH_START = pd.Timestamp("2016-01-01 00:00:00")


def _synth_weather(rng: np.random.Generator, n_sites: int, hours: np.ndarray, noise: float) -> dict:
    day = 2.0 * np.pi * hours / 24.0
    week = 2.0 * np.pi * hours / 168.0
    out = {}
    for site in range(n_sites):
        offset = rng.uniform(-5.0, 5.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        t_air = 15.0 + offset + 6.0 * np.sin(day - 2.0) + 3.0 * np.sin(week + phase)
        t_air = t_air + noise * rng.normal(0.0, 1.0, hours.shape)
        spread = 3.0 + 1.5 * (1.0 + np.cos(day))
        cloud = np.clip(np.round(4.5 + 3.5 * np.sin(week * 2.0 + phase)), 0, 9)
        out[site] = (t_air, cloud, t_air - spread)
    return out


def synth_tables(seed: int, n_buildings: int, L_total: int, noise: float = 0.1):
    """Meter, weather and metadata tables for a desk-scale synthetic dataset.

    Each building's reading is a positive daily sinusoid times a weekday/weekend
    square wave plus a temperature term, times log-normal noise. With
    ``noise=0`` every series repeats exactly every 168 hours.
    """
    if n_buildings < 1:
        raise ValidationError("n_buildings must be >= 1")
    if L_total < 1:
        raise ValidationError("L_total must be >= 1")
    rng = np.random.default_rng(seed)
    hours = np.arange(L_total, dtype=np.float64)
    stamps = SYNTH_START + pd.to_timedelta(hours, unit="h")
    n_sites = max(1, (n_buildings + 3) // 4)
    weather = _synth_weather(rng, n_sites, hours, noise)

    weekday = (stamps.dayofweek.to_numpy() < 5).astype(np.float64)
    meters, metas = [], []
    for b in range(n_buildings):
        site = b // 4
        base = float(np.exp(rng.uniform(np.log(20.0), np.log(500.0))))
        phase = rng.uniform(0.0, 24.0)
        t_air = weather[site][0]
        mean = base * (
            1.0
            + 0.3 * np.sin(2.0 * np.pi * (hours - phase) / 24.0)
            + 0.2 * (2.0 * weekday - 1.0)
            + 0.01 * (t_air - 15.0)
        )
        eps = rng.normal(0.0, 1.0, L_total)
        reading = mean * np.exp(noise * eps)
        meters.append(pd.DataFrame({
            "building_id": b, "meter": 0, "timestamp": stamps, "meter_reading": reading,
        }))
        metas.append({"site_id": site, "building_id": b, "primary_use": "Office",
                      "square_feet": int(base * 100), "year_built": "", "floor_count": ""})
    meter_df = pd.concat(meters, ignore_index=True)
    weather_df = pd.concat([
        pd.DataFrame({"site_id": s, "timestamp": stamps, "air_temperature": w[0],
                      "cloud_coverage": w[1], "dew_temperature": w[2]})
        for s, w in weather.items()
    ], ignore_index=True)
    meta_df = pd.DataFrame(metas, columns=METADATA_COLUMNS)
    return meter_df, weather_df, meta_df


def synth_dataset(seed: int, n_buildings: int, L_total: int, noise: float = 0.1) -> pd.DataFrame:
    """Joined records of :func:`synth_tables`."""
    return join_tables(*synth_tables(seed, n_buildings, L_total, noise))


def synth_mean(seed: int, n_buildings: int, L_total: int) -> pd.DataFrame:
    """Noise-free expected readings of the generator (same seed gives the same structure)."""
    return synth_dataset(seed, n_buildings, L_total, noise=0.0)


def write_tables(out_dir, meter: pd.DataFrame, weather: pd.DataFrame, metadata: pd.DataFrame) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "meter": out_dir / "train.csv",
        "weather": out_dir / "weather_train.csv",
        "metadata": out_dir / "building_metadata.csv",
    }
    for key, df in (("meter", meter), ("weather", weather), ("metadata", metadata)):
        df.to_csv(paths[key], index=False, date_format=TIMESTAMP_FORMAT, float_format="%.6f",
                  lineterminator="\n")
    return paths
