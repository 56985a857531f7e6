"""Material absorption data and the reflection/absorption relations.

Material files are line-oriented UTF-8 text, one record per line::

    # comment
    0;Concrete, painted;0.01,0.01,0.01,0.02,0.02,0.02,0.03,0.03

Each record holds an integer id, a name and eight energy absorption
coefficients ordered by octave band.  Coefficients must lie strictly
inside (0, 1); nothing is clamped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CoefficientOutOfRange,
    DomainError,
    DuplicateName,
    MalformedRecord,
    UnknownMaterial,
)

N_BANDS = 8
# 125 Hz .. 8 kHz octave centres plus an upper-edge band centred at 8k*sqrt(2)
BAND_CENTERS: tuple[float, ...] = (125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0, 8000.0 * math.sqrt(2.0))


def reflection_magnitude(alpha: float) -> float:
    """Magnitude of the reflection factor for an energy absorption ``alpha``."""
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"absorption coefficient {alpha!r} outside [0, 1]")
    return math.sqrt(1.0 - alpha)


def absorption_of(r_mag: float) -> float:
    """Energy absorption coefficient for a reflection magnitude ``r_mag``."""
    if not 0.0 <= r_mag <= 1.0:
        raise DomainError(f"reflection magnitude {r_mag!r} outside [0, 1]")
    return 1.0 - r_mag * r_mag


def reflection_magnitudes(alphas) -> np.ndarray:
    """Vectorised :func:`reflection_magnitude`."""
    a = np.asarray(alphas, dtype=float)
    if np.any((a < 0.0) | (a > 1.0)) or not np.all(np.isfinite(a)):
        raise DomainError("absorption coefficients must lie in [0, 1]")
    return np.sqrt(1.0 - a)


@dataclass(frozen=True)
class AbsorptionSpectrum:
    coefficients: tuple[float, ...]
    band_centers: tuple[float, ...] = BAND_CENTERS

    def __post_init__(self):
        coefs = tuple(float(c) for c in self.coefficients)
        centers = tuple(float(c) for c in self.band_centers)
        object.__setattr__(self, "coefficients", coefs)
        object.__setattr__(self, "band_centers", centers)
        if len(coefs) != N_BANDS:
            raise ValueError(f"expected {N_BANDS} coefficients, got {len(coefs)}")
        if len(centers) != N_BANDS or any(b <= a for a, b in zip(centers, centers[1:])):
            raise ValueError("band_centers must be 8 strictly increasing frequencies")
        for c in coefs:
            if not (0.0 < c < 1.0):
                raise CoefficientOutOfRange(f"coefficient {c!r} not in the open interval (0, 1)")

    def as_array(self) -> np.ndarray:
        return np.array(self.coefficients, dtype=float)


@dataclass(frozen=True)
class Material:
    id: int
    name: str
    spectrum: AbsorptionSpectrum

    def __post_init__(self):
        if not self.name or not self.name.strip():
            raise ValueError("material name must be non-empty")


@dataclass(frozen=True)
class MaterialDatabase:
    materials: tuple[Material, ...]
    _by_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mats = tuple(self.materials)
        object.__setattr__(self, "materials", mats)
        if not mats:
            raise ValueError("material database is empty")
        by_id: dict[int, Material] = {}
        names: set[str] = set()
        for m in mats:
            if m.id in by_id:
                raise ValueError(f"duplicate material id {m.id}")
            if m.name in names:
                raise DuplicateName(m.name)
            by_id[m.id] = m
            names.add(m.name)
        object.__setattr__(self, "_by_id", by_id)

    def __len__(self) -> int:
        return len(self.materials)

    def __iter__(self):
        return iter(self.materials)

    def __getitem__(self, material_id: int) -> Material:
        try:
            return self._by_id[material_id]
        except KeyError:
            raise UnknownMaterial(material_id) from None

    def __contains__(self, material_id: int) -> bool:
        return material_id in self._by_id

    @property
    def ids(self) -> list[int]:
        return [m.id for m in self.materials]

    def matrix(self) -> np.ndarray:
        """n x 8 array of absorption coefficients in database order."""
        return np.array([m.spectrum.coefficients for m in self.materials], dtype=float)


def parse_record(line: str, line_no: int) -> tuple[int, str, tuple[float, ...]]:
    parts = line.split(";")
    if len(parts) != 3:
        raise MalformedRecord(line_no, f"expected 3 ';'-separated fields, got {len(parts)}")
    id_text, name, coef_text = (p.strip() for p in parts)
    try:
        mid = int(id_text)
    except ValueError:
        raise MalformedRecord(line_no, f"id {id_text!r} is not an integer") from None
    if not name:
        raise MalformedRecord(line_no, "empty name")
    tokens = [t.strip() for t in coef_text.split(",")]
    if len(tokens) != N_BANDS:
        raise MalformedRecord(line_no, f"expected {N_BANDS} coefficients, got {len(tokens)}")
    try:
        coefs = tuple(float(t) for t in tokens)
    except ValueError:
        raise MalformedRecord(line_no, f"non-numeric coefficient in {coef_text!r}") from None
    for c in coefs:
        if not math.isfinite(c):
            raise MalformedRecord(line_no, "non-finite coefficient")
        if not (0.0 < c < 1.0):
            raise CoefficientOutOfRange(f"line {line_no}: coefficient {c!r} not in (0, 1)")
    return mid, name, coefs


def iter_records(lines: Iterable[str]):
    """Yield ``(line_no, id, name, coefficients)`` for every non-comment line."""
    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        yield (line_no, *parse_record(line, line_no))


def parse_materials(text: str) -> MaterialDatabase:
    materials = []
    seen_ids: set[int] = set()
    seen_names: set[str] = set()
    for line_no, mid, name, coefs in iter_records(text.splitlines()):
        if mid in seen_ids:
            raise MalformedRecord(line_no, f"duplicate id {mid}")
        if name in seen_names:
            raise DuplicateName(f"line {line_no}: duplicate name {name!r}")
        seen_ids.add(mid)
        seen_names.add(name)
        materials.append(Material(mid, name, AbsorptionSpectrum(coefs)))
    if not materials:
        raise MalformedRecord(0, "no material records found")
    return MaterialDatabase(tuple(materials))


def load_materials(path: str | Path) -> MaterialDatabase:
    """Read a material file into a :class:`MaterialDatabase`."""
    return parse_materials(Path(path).read_text(encoding="utf-8"))


def format_coefficients(coefs: Sequence[float]) -> str:
    return ",".join(repr(float(c)) for c in coefs)


def dump_materials(db: MaterialDatabase) -> str:
    return "".join(f"{m.id};{m.name};{format_coefficients(m.spectrum.coefficients)}\n" for m in db)


def save_materials(db: MaterialDatabase, path: str | Path) -> None:
    Path(path).write_text(dump_materials(db), encoding="utf-8")


def sample_database_path(name: str = "sample_materials.txt") -> Path:
    return Path(str(resources.files("matdetect") / "data" / name))


def load_sample_database() -> MaterialDatabase:
    """The 24-material database bundled with the package."""
    return load_materials(sample_database_path())
