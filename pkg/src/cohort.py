import hashlib
import json
import logging
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path

import numpy as np

from configuration import SplitConfig, WindowPolicy
from dataio import HYPOTENSION_THRESHOLD, MapSeries, PatientStatic, SchemaError

logger = logging.getLogger(__name__)

MIN_EPISODE_S = 60.0


@dataclass(frozen=True)
class IOHEpisode:
    start_index: int
    end_index: int
    duration_s: float

    def overlaps(self, start: int, end: int) -> bool:
        """True when the inclusive sample range [start, end] touches this episode."""
        return start <= self.end_index and self.start_index <= end


@dataclass(eq=False)
class ForecastInstance:
    patient_id: str
    anchor_index: int
    history: np.ndarray
    target: np.ndarray
    label: bool
    sampling_interval_s: float
    ioh_mask: np.ndarray
    description_ref: str | None = None
    source: str = "original"

    def __post_init__(self):
        self.history = np.asarray(self.history, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        self.ioh_mask = np.asarray(self.ioh_mask, dtype=bool)
        if self.description_ref is None:
            self.description_ref = self.patient_id
        if self.ioh_mask.shape != self.target.shape:
            raise ValueError(f"instance {self.instance_id}: ioh_mask must match the target length")

    @property
    def base_id(self) -> str:
        return f"{self.patient_id}:{self.anchor_index}"

    @property
    def instance_id(self) -> str:
        return self.base_id if self.source == "original" else f"{self.base_id}#{self.source}"

    def to_record(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "patient_id": self.patient_id,
            "anchor": self.anchor_index,
            "history": [float(v) for v in self.history],
            "target": [float(v) for v in self.target],
            "label": bool(self.label),
            "ioh_mask": [int(v) for v in self.ioh_mask],
            "sampling_interval_s": self.sampling_interval_s,
            "description_ref": self.description_ref,
            "source": self.source,
        }

    @classmethod
    def from_record(cls, record: dict) -> "ForecastInstance":
        return cls(
            patient_id=record["patient_id"],
            anchor_index=int(record["anchor"]),
            history=record["history"],
            target=record["target"],
            label=bool(record["label"]),
            sampling_interval_s=float(record["sampling_interval_s"]),
            ioh_mask=record.get("ioh_mask", [0] * len(record["target"])),
            description_ref=record.get("description_ref"),
            source=record.get("source", "original"),
        )


class Partition(StrEnum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass
class SplitAssignment:
    partitions: dict[str, Partition] = field(default_factory=dict)

    def members(self, partition: Partition) -> list[str]:
        return sorted(pid for pid, part in self.partitions.items() if part == partition)

    def sizes(self) -> tuple[int, int, int]:
        return tuple(len(self.members(p)) for p in Partition)

    def to_dict(self) -> dict[str, str]:
        return {pid: str(part) for pid, part in sorted(self.partitions.items())}


def detect_ioh_episodes(series: MapSeries) -> list[IOHEpisode]:
    """Maximal runs of readings below 65 mmHg lasting at least one minute."""
    below = np.concatenate(([False], series.values < HYPOTENSION_THRESHOLD, [False]))
    edges = np.flatnonzero(np.diff(below.astype(np.int8)))
    episodes = []
    for start, stop in zip(edges[::2], edges[1::2]):
        duration = (stop - start) * series.sampling_interval_s
        if duration >= MIN_EPISODE_S - 1e-9:
            episodes.append(IOHEpisode(int(start), int(stop - 1), float(duration)))
    return episodes


def label_target(target: Sequence[float], policy: WindowPolicy) -> bool:
    """True when a full event window after the warning window stays strictly below 65 mmHg."""
    target = np.asarray(target, dtype=np.float64)
    warning, event = policy.warning_samples, policy.event_samples
    if len(target) < warning + event:
        raise ValueError(f"target of {len(target)} samples is shorter than warning+event windows ({warning + event})")
    below = (target[warning:] < HYPOTENSION_THRESHOLD).astype(np.int64)
    run_sums = np.convolve(below, np.ones(event, dtype=np.int64), mode="valid")
    return bool(np.any(run_sums == event))


def ioh_timestamp_mask(
    target_start: int, target: np.ndarray, episodes: Iterable[IOHEpisode], strict: bool = False
) -> np.ndarray:
    """Target timestamps below 65 mmHg inside a detected episode; ``strict`` drops the episode condition."""
    below = target < HYPOTENSION_THRESHOLD
    if strict:
        return below
    inside = np.zeros(len(target), dtype=bool)
    for episode in episodes:
        lo = max(episode.start_index - target_start, 0)
        hi = min(episode.end_index - target_start + 1, len(target))
        if lo < hi:
            inside[lo:hi] = True
    return below & inside


def slice_instances(
    series: MapSeries,
    episodes: list[IOHEpisode],
    policy: WindowPolicy,
    strict_ioh_mask: bool = False,
) -> list[ForecastInstance]:
    """Adaptive slicing: short stride after positive candidates, long stride after negative ones.

    A candidate whose history touches an episode is dropped, but its label still picks the stride.
    """
    l, t = policy.history_len, policy.horizon
    values = series.values
    instances = []
    anchor = 0
    while anchor + l + t <= len(values):
        history = values[anchor : anchor + l]
        target = values[anchor + l : anchor + l + t]
        label = label_target(target, policy)
        if not any(ep.overlaps(anchor, anchor + l - 1) for ep in episodes):
            mask = ioh_timestamp_mask(anchor + l, target, episodes, strict=strict_ioh_mask)
            instances.append(
                ForecastInstance(
                    patient_id=series.patient_id,
                    anchor_index=anchor,
                    history=history.copy(),
                    target=target.copy(),
                    label=label,
                    sampling_interval_s=series.sampling_interval_s,
                    ioh_mask=mask,
                )
            )
        anchor += policy.stride_ioh if label else policy.stride_normal
    return instances


def _shuffle_key(seed: int, patient_id: str) -> str:
    return hashlib.sha256(f"{seed}:{patient_id}".encode()).hexdigest()


def _partition_sizes(n: int, ratios: tuple[int, int, int]) -> list[int]:
    """Largest-remainder apportionment; ties go to the earlier partition."""
    total = sum(ratios)
    exact = [n * r / total for r in ratios]
    sizes = [int(np.floor(e)) for e in exact]
    order = sorted(range(3), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_by_surgery(patients: list[PatientStatic], config: SplitConfig, seed: int) -> SplitAssignment:
    """Patient-level split stratified by surgery type.

    Within each surgery group patients are ordered by a seeded hash of their id and cut by the
    configured ratios. Groups smaller than ``min_group_size`` go entirely to train. With
    ``group_exclusive`` whole groups are assigned to one partition each instead.
    """
    if not patients:
        raise ValueError("split_by_surgery needs at least one patient")
    groups = defaultdict(list)
    for patient in patients:
        groups[patient.surgery_type].append(patient.patient_id)

    assignment = SplitAssignment()
    partitions = list(Partition)
    if config.group_exclusive:
        names = sorted(groups, key=lambda name: _shuffle_key(seed, name))
        sizes = _partition_sizes(len(names), config.ratios)
        cursor = 0
        for partition, size in zip(partitions, sizes):
            for name in names[cursor : cursor + size]:
                for pid in groups[name]:
                    assignment.partitions[pid] = partition
            cursor += size
        logger.info(f"Group-exclusive split of {len(names)} surgery groups: {assignment.sizes()}")
        return assignment

    for name in sorted(groups):
        members = sorted(groups[name], key=lambda pid: _shuffle_key(seed, pid))
        if len(members) < config.min_group_size:
            logger.warning(f"Surgery group '{name}' has {len(members)} patient(s); assigning all to train")
            for pid in members:
                assignment.partitions[pid] = Partition.TRAIN
            continue
        cursor = 0
        for partition, size in zip(partitions, _partition_sizes(len(members), config.ratios)):
            for pid in members[cursor : cursor + size]:
                assignment.partitions[pid] = partition
            cursor += size
    logger.info(f"Split {len(patients)} patients over {len(groups)} surgery groups: {assignment.sizes()}")
    return assignment


def store_instances(path: str | Path, instances: Iterable[ForecastInstance]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as fh:
        for instance in instances:
            fh.write(json.dumps(instance.to_record()) + "\n")
            count += 1
    return count


def load_instances(path: str | Path) -> list[ForecastInstance]:
    path = Path(path)
    instances = []
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                instances.append(ForecastInstance.from_record(json.loads(line)))
            except (KeyError, ValueError, TypeError) as exc:
                raise SchemaError(f"{path.name} line {line_no}: malformed instance ({exc})") from exc
    return instances
