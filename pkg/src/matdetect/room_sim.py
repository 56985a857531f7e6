"""Shoebox-room impulse responses with frequency-dependent wall absorption.

The image-source lattice is rendered once per octave band with that band's
wall reflection magnitudes, each band is isolated with a zero-phase
Butterworth band filter, and the bands are summed.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.fft import next_fast_len

from .clustering import CategoryTable
from .dataset import Air, AirRecord, DatasetManifest, write_air
from .errors import InfeasibleGeometry, UnknownMaterial, UnstableFilter
from .material_db import BAND_CENTERS, MaterialDatabase, reflection_magnitudes

log = logging.getLogger(__name__)

DEFAULT_BOUNDS = ((2.5, 2.5, 2.5), (7.0, 7.0, 2.6))
# walls are ordered x=0, x=Lx, y=0, y=Ly, z=0, z=Lz
N_WALLS = 6
# extra simulated time on both sides of the output window, absorbs filter transients
_GUARD_S = 0.03
# fractional-delay kernel resolution, in steps per sample
_PHASES = 64


@dataclass(frozen=True)
class RoomSpec:
    dimensions: tuple[float, float, float]
    wall_materials: tuple[int, ...]
    source: tuple[float, float, float]
    receiver: tuple[float, float, float]

    def __post_init__(self):
        dims = tuple(float(v) for v in self.dimensions)
        src = tuple(float(v) for v in self.source)
        rcv = tuple(float(v) for v in self.receiver)
        walls = tuple(int(m) for m in self.wall_materials)
        object.__setattr__(self, "dimensions", dims)
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "receiver", rcv)
        object.__setattr__(self, "wall_materials", walls)
        if len(dims) != 3 or min(dims) <= 0:
            raise ValueError("room dimensions must be three positive lengths")
        if len(walls) != N_WALLS:
            raise ValueError("a shoebox room needs exactly 6 wall materials")
        for p in (src, rcv):
            if len(p) != 3 or not all(0.0 < c < L for c, L in zip(p, dims)):
                raise ValueError(f"position {p} is not strictly inside the room {dims}")
        if src == rcv:
            raise ValueError("source and receiver coincide")

    @property
    def volume(self) -> float:
        return self.dimensions[0] * self.dimensions[1] * self.dimensions[2]


@dataclass(frozen=True)
class SimConfig:
    sample_rate: int = 16000
    duration: float = 0.2
    speed_of_sound: float = 343.0
    max_reflection_order: int | None = None  # None: every image arriving inside the window
    frac_delay_halfwidth: int = 32
    filter_order: int = 2  # per band edge; a band-pass is twice this order
    seed: int = 0

    def __post_init__(self):
        if self.sample_rate <= 0 or self.duration <= 0 or self.speed_of_sound <= 0:
            raise ValueError("sample_rate, duration and speed_of_sound must be positive")
        if self.max_reflection_order is not None and self.max_reflection_order < 0:
            raise ValueError("max_reflection_order must be >= 0")
        if self.frac_delay_halfwidth < 1 or self.filter_order < 1:
            raise ValueError("frac_delay_halfwidth and filter_order must be positive")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))


def default_max_order(room: "RoomSpec", cfg: SimConfig) -> int:
    """Smallest reflection order whose images all arrive after ``cfg.duration``.

    The simulator culls images by distance, so this bound is implicit in
    ``max_reflection_order=None``; it is reported for run records.
    """
    _, counts = image_sources(room, cfg.duration * cfg.speed_of_sound)
    return int(counts.sum(axis=1).max()) + 1


def _axis_images(L: float, s: float, r: float, reach: float):
    """Image offsets along one axis with reflection counts off the low and high wall."""
    m_max = int(math.ceil(reach / (2.0 * L))) + 1
    m = np.arange(-m_max, m_max + 1)
    deltas, low, high = [], [], []
    for q in (0, 1):
        pos = (1 - 2 * q) * s + 2.0 * m * L
        deltas.append(pos - r)
        low.append(np.abs(m - q))
        high.append(np.abs(m))
    d = np.concatenate(deltas)
    keep = np.abs(d) <= reach
    return d[keep], np.concatenate(low)[keep], np.concatenate(high)[keep]


def image_sources(room: RoomSpec, reach: float, max_order: int | None = None):
    """All image sources within ``reach`` metres of the receiver.

    Returns distances ``(n,)`` and per-wall reflection counts ``(n, 6)``.
    """
    axes = [_axis_images(L, s, r, reach) for L, s, r in zip(room.dimensions, room.source, room.receiver)]
    (dx, lx, hx), (dy, ly, hy), (dz, lz, hz) = axes
    dist2 = dx[:, None, None] ** 2 + dy[None, :, None] ** 2 + dz[None, None, :] ** 2
    ix, iy, iz = np.nonzero(dist2 <= reach * reach)
    counts = np.stack([lx[ix], hx[ix], ly[iy], hy[iy], lz[iz], hz[iz]], axis=1)
    dist = np.sqrt(dist2[ix, iy, iz])
    if max_order is not None:
        keep = counts.sum(axis=1) <= max_order
        counts, dist = counts[keep], dist[keep]
    return dist, counts


def wall_reflection_magnitudes(room: RoomSpec, db: MaterialDatabase) -> np.ndarray:
    """6 x 8 matrix of per-wall, per-band reflection magnitudes."""
    rows = []
    for mid in room.wall_materials:
        if mid not in db:
            raise UnknownMaterial(mid)
        rows.append(db[mid].spectrum.coefficients)
    return reflection_magnitudes(np.array(rows))


def frac_delay_kernel(frac: np.ndarray, halfwidth: int) -> np.ndarray:
    """Hann-windowed sinc taps for delays ``k + frac`` with ``0 <= frac < 1``.

    Row ``i`` holds taps at integer offsets ``-halfwidth+1 .. halfwidth``
    relative to ``floor(delay)``.
    """
    offsets = np.arange(-halfwidth + 1, halfwidth + 1)
    t = offsets[None, :] - frac[:, None]
    window = 0.5 * (1.0 + np.cos(np.pi * t / halfwidth))
    return np.sinc(t) * window


def render_band_impulses(room: RoomSpec, db: MaterialDatabase, cfg: SimConfig, pad: int = 0) -> np.ndarray:
    """Unfiltered per-band image-source responses, shape ``(8, pad + n + pad)``.

    Sample ``pad`` corresponds to time zero.  The fractional-delay kernel is
    tabulated at ``1/_PHASES`` sample steps and linearly interpolated between
    neighbouring phases; the trains are then convolved with the table by FFT.
    """
    fs, c = cfg.sample_rate, cfg.speed_of_sound
    n_total = cfg.n_samples + 2 * pad
    hw = cfg.frac_delay_halfwidth
    reach = ((cfg.n_samples + pad + hw) / fs) * c
    dist, counts = image_sources(room, reach, cfg.max_reflection_order)
    log_r = np.log(wall_reflection_magnitudes(room, db))  # 6 x 8
    amps = np.exp(counts @ log_r) / (4.0 * np.pi * dist[:, None])  # n_img x 8

    pos = (dist / c * fs + pad) * _PHASES
    ip = np.floor(pos).astype(np.int64)
    w_hi = pos - ip
    base, phase = np.divmod(ip, _PHASES)
    keep = base < n_total
    base, phase, w_hi, amps = base[keep], phase[keep], w_hi[keep], amps[keep]
    lo_idx = phase * n_total + base
    hi_idx = lo_idx + n_total
    n_rows = (_PHASES + 1) * n_total

    table = _kernel_table(hw)
    nfft = next_fast_len(n_total + 2 * hw)
    k_spec = np.fft.rfft(table, nfft, axis=1)
    out = np.empty((amps.shape[1], n_total))
    for b in range(amps.shape[1]):
        trains = (np.bincount(lo_idx, weights=amps[:, b] * (1.0 - w_hi), minlength=n_rows)
                  + np.bincount(hi_idx, weights=amps[:, b] * w_hi, minlength=n_rows))
        spec = np.einsum("pf,pf->f", np.fft.rfft(trains.reshape(_PHASES + 1, n_total), nfft, axis=1), k_spec)
        y = np.fft.irfft(spec, nfft)
        out[b] = y[hw - 1 : hw - 1 + n_total]
    return out


@lru_cache(maxsize=8)
def _kernel_table(halfwidth: int) -> np.ndarray:
    return frac_delay_kernel(np.arange(_PHASES + 1) / _PHASES, halfwidth)


@lru_cache(maxsize=32)
def octave_filterbank(sample_rate: int, order: int = 2, centers: tuple[float, ...] = BAND_CENTERS):
    """Second-order sections per band; ``None`` for bands above Nyquist."""
    nyq = sample_rate / 2.0
    bank = []
    for fc in centers:
        lo, hi = fc / math.sqrt(2.0), fc * math.sqrt(2.0)
        if lo >= nyq:
            bank.append(None)
            continue
        try:
            if hi >= nyq:
                sos = signal.butter(order, lo, btype="highpass", fs=sample_rate, output="sos")
            else:
                sos = signal.butter(order, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")
        except ValueError as exc:
            raise UnstableFilter(f"band {fc:g} Hz: {exc}") from exc
        poles = np.concatenate([np.roots(s[3:]) for s in sos])
        if not np.all(np.isfinite(sos)) or np.any(np.abs(poles) >= 1.0):
            raise UnstableFilter(f"band {fc:g} Hz filter is unstable at {sample_rate} Hz")
        bank.append(sos)
    return tuple(bank)


def filterbank_power_response(freqs, sample_rate: int = 16000, order: int = 2) -> np.ndarray:
    """Summed zero-phase power response of the band filters at ``freqs`` Hz."""
    total = np.zeros(len(freqs))
    for sos in octave_filterbank(sample_rate, order):
        if sos is None:
            continue
        _, h = signal.sosfreqz(sos, worN=np.asarray(freqs, dtype=float), fs=sample_rate)
        total += np.abs(h) ** 2
    return total


def simulate_air(room: RoomSpec, db: MaterialDatabase, cfg: SimConfig = SimConfig(),
                 room_id: int = -1, source_id: int = -1, receiver_id: int = -1) -> Air:
    """Simulate the AIR between ``room.source`` and ``room.receiver``."""
    pad = int(round(_GUARD_S * cfg.sample_rate))
    bands = render_band_impulses(room, db, cfg, pad=pad)
    bank = octave_filterbank(cfg.sample_rate, cfg.filter_order)
    h = np.zeros(bands.shape[1])
    for b, sos in enumerate(bank):
        if sos is not None:
            h += signal.sosfiltfilt(sos, bands[b], padtype=None)
    return Air(h[pad : pad + cfg.n_samples], cfg.sample_rate, room_id, source_id, receiver_id)


def schroeder_t60(taps, sample_rate: int, fit_db: tuple[float, float] = (-5.0, -25.0)) -> float:
    """Reverberation time extrapolated from a line fit to the energy decay curve."""
    e = np.asarray(taps, dtype=float) ** 2
    edc = np.cumsum(e[::-1])[::-1]
    edc_db = 10.0 * np.log10(edc / edc[0] + 1e-300)
    hi, lo = fit_db
    idx = np.nonzero((edc_db <= hi) & (edc_db >= lo))[0]
    if len(idx) < 2:
        raise ValueError("energy decay curve does not span the fit range")
    t = idx / sample_rate
    slope, _ = np.polyfit(t, edc_db[idx], 1)
    return -60.0 / slope


# --- random rooms -------------------------------------------------------------


@dataclass(frozen=True)
class RoomLayout:
    dimensions: tuple[float, float, float]
    wall_materials: tuple[int, ...]
    sources: tuple[tuple[float, float, float], ...]
    receivers: tuple[tuple[float, float, float], ...]

    def spec(self, source_id: int, receiver_id: int) -> RoomSpec:
        return RoomSpec(self.dimensions, self.wall_materials, self.sources[source_id], self.receivers[receiver_id])


def _draw_walls(rng, ids, max_distinct):
    if max_distinct is None:
        return tuple(int(m) for m in rng.choice(ids, size=N_WALLS))
    k = int(rng.integers(1, max_distinct + 1))
    palette = rng.choice(ids, size=k, replace=False)
    # every palette entry covers at least one wall
    walls = np.concatenate([palette, rng.choice(palette, size=N_WALLS - k)])
    return tuple(int(m) for m in rng.permutation(walls))


def sample_layout(rng: np.random.Generator, db: MaterialDatabase, n_sources: int = 1, n_receivers: int = 1,
                  bounds=DEFAULT_BOUNDS, wall_margin: float = 0.3, min_src_rcv_dist: float = 0.5,
                  max_distinct_materials: int | None = None, max_tries: int = 1000) -> RoomLayout:
    """Draw a random room with several sources and receivers.

    Every source-receiver pair is at least ``min_src_rcv_dist`` apart.
    ``max_distinct_materials`` limits how many different materials a room
    uses; ``None`` draws each wall independently.
    """
    lo, hi = np.asarray(bounds[0], dtype=float), np.asarray(bounds[1], dtype=float)
    if lo.shape != (3,) or hi.shape != (3,) or np.any(hi < lo) or np.any(lo <= 0):
        raise ValueError(f"invalid room bounds {bounds}")
    inner = lo - 2.0 * wall_margin
    if np.any(inner <= 0) or np.linalg.norm(inner) < min_src_rcv_dist:
        raise InfeasibleGeometry(f"margin {wall_margin} m leaves no room for a "
                                 f"{min_src_rcv_dist} m source-receiver spacing in a {tuple(lo)} m room")
    if max_distinct_materials is not None and not 1 <= max_distinct_materials <= min(len(db), N_WALLS):
        raise ValueError("max_distinct_materials must be between 1 and min(6, len(db))")

    dims = rng.uniform(lo, hi)
    walls = _draw_walls(rng, np.array(db.ids), max_distinct_materials)

    def point():
        return rng.uniform(wall_margin, dims - wall_margin)

    sources = [point() for _ in range(n_sources)]
    receivers = []
    for _ in range(n_receivers):
        for _ in range(max_tries):
            p = point()
            if all(np.linalg.norm(p - s) >= min_src_rcv_dist for s in sources):
                receivers.append(p)
                break
        else:
            raise InfeasibleGeometry("could not place a receiver far enough from every source")
    as_t = lambda p: tuple(float(v) for v in p)  # noqa: E731
    return RoomLayout(as_t(dims), walls, tuple(map(as_t, sources)), tuple(map(as_t, receivers)))


def sample_room(rng: np.random.Generator, db: MaterialDatabase, bounds=DEFAULT_BOUNDS, wall_margin: float = 0.3,
                min_src_rcv_dist: float = 0.5, max_distinct_materials: int | None = None) -> RoomSpec:
    """Random shoebox room with one source and one receiver."""
    return sample_layout(rng, db, 1, 1, bounds, wall_margin, min_src_rcv_dist, max_distinct_materials).spec(0, 0)


# --- dataset generation -------------------------------------------------------


def _simulate_room(args):
    room_id, layout, db, cfg, out_dir = args
    rel_paths = []
    for s in range(len(layout.sources)):
        for r in range(len(layout.receivers)):
            air = simulate_air(layout.spec(s, r), db, cfg, room_id, s, r)
            rel = Path("airs") / f"room{room_id:04d}_src{s:02d}_rcv{r:02d}.wav"
            write_air(air, Path(out_dir) / rel)
            rel_paths.append((s, r, rel.as_posix()))
    return rel_paths


def generate_dataset(n_rooms: int, db: MaterialDatabase, table: CategoryTable, cfg: SimConfig, out_dir: str | Path,
                     sources_per_room: int = 10, receivers_per_room: int = 5, seed: int = 0,
                     ratios=(0.85, 0.075, 0.075), bounds=DEFAULT_BOUNDS, wall_margin: float = 0.3,
                     min_src_rcv_dist: float = 0.5, max_distinct_materials: int | None = None,
                     workers: int = 1) -> DatasetManifest:
    """Simulate every source-receiver AIR in ``n_rooms`` random rooms.

    A room's label vector marks every category that at least one of its
    walls belongs to.  Rooms are assigned to train/val/test splits with
    :func:`matdetect.evaluation.stratified_partition` when there are at
    least three of them.
    """
    from .evaluation import stratified_partition

    missing = [m.id for m in db if m.id not in table.material_to_category]
    if missing:
        raise UnknownMaterial(f"materials {missing} have no category in the table")
    out_dir = Path(out_dir)
    (out_dir / "airs").mkdir(parents=True, exist_ok=True)

    layouts = []
    for room_id in range(n_rooms):
        rng = np.random.default_rng(np.random.SeedSequence([seed, room_id]))
        layouts.append(sample_layout(rng, db, sources_per_room, receivers_per_room, bounds, wall_margin,
                                     min_src_rcv_dist, max_distinct_materials))
    jobs = [(i, lay, db, cfg, out_dir) for i, lay in enumerate(layouts)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_simulate_room, jobs))
    else:
        results = [_simulate_room(j) for j in jobs]

    records = []
    for room_id, (layout, paths) in enumerate(zip(layouts, results)):
        label = table.label_vector(layout.wall_materials)
        for s, r, rel in paths:
            records.append(AirRecord(rel, room_id, s, r, None, list(layout.dimensions),
                                     list(layout.wall_materials), [int(v) for v in label]))
        log.debug("room %d simulated (%d AIRs)", room_id, len(paths))
    manifest = DatasetManifest(records, out_dir)
    if n_rooms >= 3:
        assignment = stratified_partition(manifest, ratios, seed)
        for rec in records:
            rec.split = assignment.room_split[rec.room_id]
    manifest.save()
    return manifest
