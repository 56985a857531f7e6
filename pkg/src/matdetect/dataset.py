"""AIR containers, WAV I/O and the line-delimited dataset manifest."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.io import wavfile

DEFAULT_SAMPLE_RATE = 16000
MANIFEST_NAME = "manifest.jsonl"
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Air:
    """Sampled acoustic impulse response with provenance."""

    taps: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE
    room_id: int = -1
    source_id: int = -1
    receiver_id: int = -1

    def __post_init__(self):
        taps = np.asarray(self.taps)
        if taps.ndim != 1:
            raise ValueError("AIR taps must be one-dimensional")
        if not np.all(np.isfinite(taps)):
            raise ValueError("AIR taps must be finite")
        object.__setattr__(self, "taps", taps)

    @property
    def duration(self) -> float:
        return len(self.taps) / self.sample_rate


def write_air(air: Air, path: str | Path) -> None:
    """Write a single-channel 32-bit float WAV."""
    wavfile.write(str(path), int(air.sample_rate), np.asarray(air.taps, dtype=np.float32))


def read_air(path: str | Path, room_id: int = -1, source_id: int = -1, receiver_id: int = -1) -> Air:
    fs, data = wavfile.read(str(path))
    if data.ndim > 1:
        data = data[:, 0]
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(np.float64) / float(np.iinfo(data.dtype).max)
    return Air(data.astype(np.float64), int(fs), room_id, source_id, receiver_id)


@dataclass
class AirRecord:
    air_path: str
    room_id: int
    source_id: int
    receiver_id: int
    split: str | None
    dims: list[float]
    wall_material_ids: list[int]
    label_vector: list[int]

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "AirRecord":
        return cls(**json.loads(line))


@dataclass
class DatasetManifest:
    records: list[AirRecord]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[AirRecord]:
        return [r for r in self.records if r.split == name]

    def rooms(self) -> dict[int, list[AirRecord]]:
        out: dict[int, list[AirRecord]] = {}
        for r in self.records:
            out.setdefault(r.room_id, []).append(r)
        return out

    def labels(self, records: Iterable[AirRecord] | None = None) -> np.ndarray:
        recs = self.records if records is None else list(records)
        return np.array([r.label_vector for r in recs], dtype=np.int8)

    def resolve(self, record: AirRecord) -> Path:
        return self.root / record.air_path

    def load_air(self, record: AirRecord) -> Air:
        return read_air(self.resolve(record), record.room_id, record.source_id, record.receiver_id)

    def save(self, path: str | Path | None = None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        path.write_text("".join(r.to_json() + "\n" for r in self.records), encoding="utf-8")
        return path


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    records = [AirRecord.from_json(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    return DatasetManifest(records, path.parent)
