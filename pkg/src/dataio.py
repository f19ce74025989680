import json
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
from keboola.component.exceptions import UserException
from keboola.csvwriter import ElasticDictWriter
from pydantic import BaseModel, Field, ValidationError, field_validator

from configuration import DeclineStyle, SynthConfig

logger = logging.getLogger(__name__)

HYPOTENSION_THRESHOLD = 65.0
MAP_UPPER_BOUND = 300.0

SERIES_FILE = "series.csv"
STATIC_FILE = "patients.jsonl"
SERIES_META_FILE = "series_meta.jsonl"
SERIES_COLUMNS = ["patient_id", "index", "value", "missing"]


class SchemaError(UserException):
    """A persisted table does not match its documented schema."""


class Gender(StrEnum):
    MALE = "male"
    FEMALE = "female"


class PatientStatic(BaseModel):
    patient_id: str = Field(min_length=1)
    age: int = Field(ge=0, le=130)
    gender: Gender
    surgery_type: str

    @field_validator("surgery_type")
    @classmethod
    def _non_empty(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("surgery_type must be non-empty")
        return value


@dataclass(frozen=True)
class RawPressurePoint:
    time_s: float
    sbp: float
    dbp: float

    def __post_init__(self):
        if not self.sbp >= self.dbp > 0:
            raise ValueError(f"invalid pressure pair at {self.time_s} s: sbp={self.sbp}, dbp={self.dbp}")


@dataclass(eq=False)
class MapSeries:
    """Uniformly sampled MAP readings; ``missing_mask`` is True where a reading is absent."""

    patient_id: str
    sampling_interval_s: float
    values: np.ndarray
    missing_mask: np.ndarray | None = None
    start_offset_s: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.missing_mask is None:
            self.missing_mask = np.isnan(self.values)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)
        if self.values.ndim != 1 or self.values.shape != self.missing_mask.shape:
            raise ValueError(f"series {self.patient_id}: values and missing_mask must be 1-D of equal length")
        if self.sampling_interval_s <= 0:
            raise ValueError(f"series {self.patient_id}: sampling_interval_s must be positive")
        valid = self.values[~self.missing_mask]
        if not np.all(np.isfinite(valid)) or np.any(valid <= 0) or np.any(valid >= MAP_UPPER_BOUND):
            raise ValueError(f"series {self.patient_id}: valid readings must be finite and within (0, 300) mmHg")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def duration_s(self) -> float:
        return len(self.values) * self.sampling_interval_s

    @property
    def missing_fraction(self) -> float:
        return float(self.missing_mask.mean()) if len(self.values) else 1.0


class QualityDecision(NamedTuple):
    accepted: bool
    reason: str | None = None


class SynthCohort(NamedTuple):
    patients: list[PatientStatic]
    series: list[MapSeries]
    planted: dict[str, list[tuple[int, int]]]


def compute_map(sbp: float, dbp: float) -> float:
    if not sbp >= dbp > 0:
        raise ValueError(f"compute_map requires sbp >= dbp > 0, got sbp={sbp}, dbp={dbp}")
    return (sbp + 2.0 * dbp) / 3.0


def map_points_from_pressure(points: Iterable[RawPressurePoint]) -> list[tuple[float, float]]:
    return [(p.time_s, compute_map(p.sbp, p.dbp)) for p in points]


def resample_map(
    points: Sequence[tuple[float, float]], target_interval_s: float, patient_id: str = ""
) -> MapSeries:
    """Average valid readings into bins of ``target_interval_s`` starting at the first timestamp."""
    if target_interval_s <= 0:
        raise ValueError("target_interval_s must be positive")
    if len(points) == 0:
        raise ValueError(f"cannot resample an empty track for '{patient_id}'")
    data = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    times, readings = data[:, 0], data[:, 1]
    if np.any(np.diff(times) < 0):
        raise ValueError(f"track for '{patient_id}' is not time-sorted")

    bins = np.floor((times - times[0]) / target_interval_s).astype(np.int64)
    n_bins = int(bins[-1]) + 1
    valid = np.isfinite(readings) & (readings > 0) & (readings < MAP_UPPER_BOUND)
    counts = np.bincount(bins[valid], minlength=n_bins)
    sums = np.bincount(bins[valid], weights=readings[valid], minlength=n_bins)
    values = np.full(n_bins, np.nan)
    np.divide(sums, counts, out=values, where=counts > 0)
    return MapSeries(
        patient_id=patient_id,
        sampling_interval_s=target_interval_s,
        values=values,
        missing_mask=counts == 0,
        start_offset_s=float(times[0]),
    )


def quality_filter(
    series: MapSeries, min_duration_s: float = 1000.0, max_missing_frac: float = 0.20
) -> QualityDecision:
    if series.duration_s < min_duration_s:
        return QualityDecision(False, "short")
    if series.missing_fraction > max_missing_frac:
        return QualityDecision(False, "missing")
    return QualityDecision(True)


def impute_missing(series: MapSeries) -> MapSeries:
    """Linear interpolation between valid neighbours, nearest-value fill at the edges."""
    missing = series.missing_mask
    if missing.all():
        raise ValueError(f"series {series.patient_id} has no valid readings to impute from")
    index = np.arange(len(series.values))
    filled = series.values.copy()
    if missing.any():
        filled[missing] = np.interp(index[missing], index[~missing], series.values[~missing])
    return MapSeries(
        patient_id=series.patient_id,
        sampling_interval_s=series.sampling_interval_s,
        values=filled,
        missing_mask=missing.copy(),
        start_offset_s=series.start_offset_s,
    )


def _samples(seconds: float, interval: float) -> int:
    return max(1, math.ceil(seconds / interval - 1e-9))


def _plant_episode(
    values: np.ndarray,
    rng: np.random.Generator,
    slot: tuple[int, int],
    style: DeclineStyle,
    config: SynthConfig,
) -> tuple[int, int, int, int]:
    """Write precursor, dip and recovery into ``values`` inside ``slot``; return the touched bounds."""
    interval = config.sampling_interval_s
    precursor_range = config.gradual_precursor_s if style == DeclineStyle.GRADUAL else config.rapid_precursor_s
    n_pre = _samples(rng.uniform(*precursor_range), interval)
    n_ep = max(_samples(60.0, interval), _samples(rng.uniform(*config.episode_duration_s), interval))
    n_rec = _samples(rng.uniform(*config.recovery_s), interval)

    slot_start, slot_end = slot
    slack = slot_end - slot_start - (n_pre + n_ep + n_rec)
    pre_start = slot_start + int(rng.integers(0, max(slack, 0) + 1))
    ep_start = pre_start + n_pre
    ep_end = ep_start + n_ep - 1
    rec_end = min(ep_end + n_rec, len(values) - 1)

    level = values[pre_start]
    floor = 66.0
    ramp = np.linspace(0.0, 1.0, n_pre + 1)[1:]
    if style == DeclineStyle.RAPID:
        ramp = 1.0 - np.exp(-4.0 * ramp)
        ramp /= ramp[-1]
    noise = rng.normal(0.0, config.noise_sd * 0.5, n_pre)
    values[pre_start:ep_start] = np.maximum(level + (floor - level) * ramp + noise, 65.5)

    dip = rng.uniform(50.0, 60.0)
    values[ep_start : ep_end + 1] = np.minimum(dip + rng.normal(0.0, 1.0, n_ep), 63.5)

    if rec_end > ep_end:
        n_back = rec_end - ep_end
        target = values[min(rec_end + 1, len(values) - 1)]
        back = np.linspace(floor, max(target, floor), n_back)
        values[ep_end + 1 : rec_end + 1] = np.maximum(back + rng.normal(0.0, config.noise_sd * 0.5, n_back), 65.5)
    return pre_start, ep_start, ep_end, rec_end


def synth_cohort(config: SynthConfig, seed: int) -> SynthCohort:
    """Generate a reproducible cohort of MAP traces with planted IOH episodes.

    Baselines follow a mean-reverting random walk kept above 65 mmHg; each planted episode
    is preceded by a gradual or rapid decline and lasts at least one minute below 65 mmHg.
    """
    rng = np.random.default_rng(seed)
    interval = config.sampling_interval_s
    patients, series, planted = [], [], {}
    whole = math.floor(config.ioh_rate)
    fraction = config.ioh_rate - whole

    for idx in range(config.n_patients):
        patient_id = f"P{idx:05d}"
        patients.append(
            PatientStatic(
                patient_id=patient_id,
                age=int(rng.integers(config.age_range[0], config.age_range[1] + 1)),
                gender=Gender.MALE if rng.random() < 0.5 else Gender.FEMALE,
                surgery_type=config.surgery_types[int(rng.integers(len(config.surgery_types)))],
            )
        )

        n = _samples(rng.uniform(*config.duration_s), interval)
        base = rng.uniform(*config.baseline_map)
        walk = np.empty(n)
        walk[0] = base
        shocks = rng.normal(0.0, config.drift_sd, n)
        for i in range(1, n):
            walk[i] = walk[i - 1] + 0.05 * (base - walk[i - 1]) + shocks[i]
        values = np.clip(walk + rng.normal(0.0, config.noise_sd, n), 66.5, MAP_UPPER_BOUND - 1)

        n_episodes = whole + int(rng.random() < fraction)
        episodes, protected = [], np.zeros(n, dtype=bool)
        if n_episodes:
            slot_len = n // n_episodes
            for j in range(n_episodes):
                style = config.decline_styles[int(rng.integers(len(config.decline_styles)))]
                pre_start, ep_start, ep_end, rec_end = _plant_episode(
                    values, rng, (j * slot_len, (j + 1) * slot_len), style, config
                )
                episodes.append((ep_start, ep_end))
                protected[pre_start : rec_end + 1] = True

        missing = np.zeros(n, dtype=bool)
        if config.missing_frac > 0:
            missing = (rng.random(n) < config.missing_frac) & ~protected
            values = np.where(missing, np.nan, values)

        series.append(MapSeries(patient_id, interval, values, missing))
        planted[patient_id] = episodes
        logger.debug(f"Synthesized {patient_id}: {n} samples, {len(episodes)} planted episode(s)")

    logger.info(f"Synthesized {config.n_patients} patients with {sum(map(len, planted.values()))} planted episodes")
    return SynthCohort(patients, series, planted)


def store_cohort(path: str | Path, patients: list[PatientStatic], series: list[MapSeries]) -> None:
    """Persist static attributes as JSONL and series as long-format CSV (6 significant digits)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    with (path / STATIC_FILE).open("w", encoding="utf-8") as fh:
        for patient in patients:
            fh.write(patient.model_dump_json() + "\n")

    with (path / SERIES_META_FILE).open("w", encoding="utf-8") as fh:
        for s in series:
            meta = {
                "patient_id": s.patient_id,
                "sampling_interval_s": s.sampling_interval_s,
                "start_offset_s": s.start_offset_s,
            }
            fh.write(json.dumps(meta) + "\n")

    writer = ElasticDictWriter(str(path / SERIES_FILE), SERIES_COLUMNS)
    for s in series:
        for i, (value, missing) in enumerate(zip(s.values, s.missing_mask)):
            writer.writerow(
                {
                    "patient_id": s.patient_id,
                    "index": i,
                    "value": "" if missing else f"{value:.6g}",
                    "missing": int(missing),
                }
            )
    writer.writeheader()
    writer.close()
    logger.info(f"Stored {len(patients)} patients and {len(series)} series in {path}")


def _read_jsonl(path: Path) -> Iterable[tuple[int, str]]:
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if line.strip():
                yield line_no, line


def load_patients(path: str | Path) -> list[PatientStatic]:
    path = Path(path)
    patients = []
    for line_no, line in _read_jsonl(path):
        try:
            patients.append(PatientStatic.model_validate_json(line))
        except ValidationError as exc:
            fields = ", ".join(".".join(map(str, e["loc"])) or "record" for e in exc.errors())
            raise SchemaError(f"{path.name} line {line_no}: invalid or missing field(s): {fields}") from exc
    return patients


def load_cohort(path: str | Path) -> tuple[list[PatientStatic], list[MapSeries]]:
    path = Path(path)
    patients = load_patients(path / STATIC_FILE)

    meta = {}
    for line_no, line in _read_jsonl(path / SERIES_META_FILE):
        record = json.loads(line)
        for key in ("patient_id", "sampling_interval_s", "start_offset_s"):
            if key not in record:
                raise SchemaError(f"{SERIES_META_FILE} line {line_no}: missing field '{key}'")
        meta[record["patient_id"]] = record

    frame = pd.read_csv(path / SERIES_FILE, dtype=str, keep_default_na=False)
    for column in SERIES_COLUMNS:
        if column not in frame.columns:
            raise SchemaError(f"{SERIES_FILE} line 1: missing column '{column}'")

    index = pd.to_numeric(frame["index"], errors="coerce")
    missing = pd.to_numeric(frame["missing"], errors="coerce")
    values = pd.to_numeric(frame["value"].where(frame["value"] != ""), errors="coerce")
    bad = index.isna() | ~missing.isin([0, 1]) | (values.isna() & (missing == 0))
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise SchemaError(f"{SERIES_FILE} line {row + 2}: malformed row {frame.iloc[row].to_dict()}")

    frame = frame.assign(index=index.astype(np.int64), missing=missing.astype(bool), value=values)
    series = []
    for patient_id, group in frame.groupby("patient_id", sort=False):
        if patient_id not in meta:
            raise SchemaError(f"{SERIES_META_FILE}: no metadata for patient '{patient_id}'")
        group = group.sort_values("index")
        series.append(
            MapSeries(
                patient_id=patient_id,
                sampling_interval_s=float(meta[patient_id]["sampling_interval_s"]),
                values=group["value"].to_numpy(dtype=np.float64),
                missing_mask=group["missing"].to_numpy(dtype=bool),
                start_offset_s=float(meta[patient_id]["start_offset_s"]),
            )
        )
    logger.info(f"Loaded {len(patients)} patients and {len(series)} series from {path}")
    return patients, series


def load_raw_track(path: str | Path) -> list[tuple[float, float]]:
    """Read a local raw track CSV with ``time_s`` and either ``map`` or ``sbp``/``dbp`` columns."""
    path = Path(path)
    frame = pd.read_csv(path)
    if "time_s" not in frame.columns:
        raise SchemaError(f"{path.name} line 1: missing column 'time_s'")
    frame = frame.sort_values("time_s", kind="stable")
    if "map" in frame.columns:
        return list(zip(frame["time_s"].astype(float), frame["map"].astype(float)))
    for column in ("sbp", "dbp"):
        if column not in frame.columns:
            raise SchemaError(f"{path.name} line 1: missing column '{column}' (or 'map')")
    points = []
    for row_no, row in enumerate(frame.itertuples(index=False), start=2):
        try:
            points.append(RawPressurePoint(float(row.time_s), float(row.sbp), float(row.dbp)))
        except ValueError:
            logger.debug(f"{path.name} line {row_no}: dropping invalid pressure pair")
    return map_points_from_pressure(points)
