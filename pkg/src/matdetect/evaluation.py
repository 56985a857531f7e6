"""Room-disjoint stratified splits and per-category detection metrics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import SPLITS, DatasetManifest
from .errors import LengthMismatch, TooFewRooms

DEFAULT_RATIOS = (0.85, 0.075, 0.075)


@dataclass(frozen=True)
class SplitAssignment:
    room_split: dict[int, str]
    room_counts: dict[str, int]
    realized_ratios: dict[str, float]
    positive_rates: dict[str, np.ndarray]


def split_sizes(n_rooms: int, ratios=DEFAULT_RATIOS) -> list[int]:
    """Room counts per split by largest remainder; ties favour later splits, every split gets a room."""
    ratios = np.asarray(ratios, dtype=float)
    if len(ratios) != len(SPLITS) or np.any(ratios < 0) or not np.isclose(ratios.sum(), 1.0):
        raise ValueError(f"ratios {tuple(ratios)} must be three non-negative values summing to 1")
    if n_rooms < len(SPLITS):
        raise TooFewRooms(f"need at least {len(SPLITS)} rooms, got {n_rooms}")
    raw = n_rooms * ratios
    counts = np.floor(raw + 1e-9).astype(int)
    frac = raw - counts
    order = sorted(range(len(raw)), key=lambda i: (-round(frac[i], 9), -i))
    for i in order[: n_rooms - counts.sum()]:
        counts[i] += 1
    for i in range(len(counts)):
        while counts[i] == 0:
            counts[int(np.argmax(counts))] -= 1
            counts[i] += 1
    return [int(c) for c in counts]


def stratified_partition(manifest: DatasetManifest, ratios=DEFAULT_RATIOS, seed: int = 0) -> SplitAssignment:
    """Assign whole rooms to train/val/test, keeping per-category positive rates close.

    Rooms are visited from the rarest label vector to the most common and
    placed in the split with spare capacity whose per-category positive
    counts fall furthest below their targets, measured relative to each
    target so that small splits compete on equal terms with large ones.
    """
    rooms = manifest.rooms()
    room_ids = sorted(rooms)
    sizes = split_sizes(len(room_ids), ratios)
    y = np.array([rooms[r][0].label_vector for r in room_ids], dtype=float)
    n = len(room_ids)
    total_pos = y.sum(axis=0)
    target = np.outer(np.array(sizes) / n, total_pos)  # splits x categories
    rarity = (y / np.where(total_pos > 0, total_pos, 1.0)).sum(axis=1)

    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    order = order[np.argsort(-rarity[order], kind="stable")]

    cur = np.zeros_like(target)
    filled = np.zeros(len(SPLITS), dtype=int)
    assign = np.full(n, -1)
    for i in order:
        best_key, best_s = None, None
        for s in range(len(SPLITS)):
            if filled[s] >= sizes[s]:
                continue
            need = (target[s] - cur[s]) / np.where(target[s] > 0, target[s], 1.0)
            deficit = float(np.sum(y[i] * need))
            spare = (sizes[s] - filled[s]) / sizes[s]
            key = (deficit, spare, -s)
            if best_key is None or key > best_key:
                best_key, best_s = key, s
        cur[best_s] += y[i]
        filled[best_s] += 1
        assign[i] = best_s
    _refine_by_swaps(y, assign, target, np.array(sizes, dtype=float))
    room_split = {room_ids[i]: SPLITS[assign[i]] for i in range(n)}

    counts = {s: sizes[k] for k, s in enumerate(SPLITS)}
    rates = {}
    for s in SPLITS:
        recs = [rec for r in room_ids if room_split[r] == s for rec in rooms[r]]
        rates[s] = manifest.labels(recs).mean(axis=0) if recs else np.zeros(y.shape[1])
    return SplitAssignment(room_split, counts, {s: counts[s] / n for s in SPLITS}, rates)


def _refine_by_swaps(y, assign, target, sizes, max_passes: int = 50) -> None:
    """Swap rooms between splits while that lowers the squared positive-rate error.

    Split sizes are unchanged; the room order is fixed so the result is deterministic.
    """
    cur = np.array([y[assign == s].sum(axis=0) for s in range(len(sizes))], dtype=float)

    def cost(c):
        return float(np.sum(((c - target) / sizes[:, None]) ** 2))

    best = cost(cur)
    for _ in range(max_passes):
        improved = False
        for i in range(len(y)):
            for j in range(i + 1, len(y)):
                a, b = assign[i], assign[j]
                if a == b or not np.any(y[i] != y[j]):
                    continue
                d = y[j] - y[i]
                cur[a] += d
                cur[b] -= d
                c = cost(cur)
                if c < best - 1e-12:
                    best = c
                    assign[i], assign[j] = b, a
                    improved = True
                else:
                    cur[a] -= d
                    cur[b] += d
        if not improved:
            break


@dataclass(frozen=True)
class MetricsTable:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    zero_division: tuple[tuple[int, str], ...]

    @property
    def positives(self) -> np.ndarray:
        return self.tp + self.fn

    @property
    def n_categories(self) -> int:
        return len(self.tp)

    @property
    def macro_precision(self) -> float:
        return float(np.mean(self.precision))

    @property
    def macro_recall(self) -> float:
        return float(np.mean(self.recall))

    @property
    def macro_f1(self) -> float:
        return float(np.mean(self.f1))


def f1_from(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)


def score(predictions, labels) -> MetricsTable:
    """Per-category precision, recall and F1 from binary ``(n, C)`` predictions and labels.

    A zero denominator gives 0 and is listed in ``zero_division``.
    """
    p = np.asarray(predictions).astype(bool)
    y = np.asarray(labels).astype(bool)
    if p.shape != y.shape:
        raise LengthMismatch(f"predictions {p.shape} and labels {y.shape} differ")
    if p.ndim != 2:
        raise ValueError("expected (n_samples, n_categories) arrays")
    tp = np.sum(p & y, axis=0)
    fp = np.sum(p & ~y, axis=0)
    fn = np.sum(~p & y, axis=0)
    flags = []
    prec, rec, f1 = (np.zeros(p.shape[1]) for _ in range(3))
    for c in range(p.shape[1]):
        if tp[c] + fp[c]:
            prec[c] = tp[c] / (tp[c] + fp[c])
        else:
            flags.append((c, "precision"))
        if tp[c] + fn[c]:
            rec[c] = tp[c] / (tp[c] + fn[c])
        else:
            flags.append((c, "recall"))
        f1[c] = f1_from(prec[c], rec[c])
        if prec[c] + rec[c] == 0:
            flags.append((c, "f1"))
    return MetricsTable(tp, fp, fn, prec, rec, f1, tuple(flags))


def metrics_csv(table: MetricsTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["theta", "positives", "precision", "recall", "f1"])
    for c in range(table.n_categories):
        w.writerow([c, int(table.positives[c]), f"{table.precision[c]:.6f}", f"{table.recall[c]:.6f}",
                    f"{table.f1[c]:.6f}"])
    return buf.getvalue()


def format_table(results: dict[str, MetricsTable]) -> str:
    """Aligned text with one precision/recall/F1 block per detector."""
    first = next(iter(results.values()))
    C = first.n_categories
    label_w = 34
    head = "Material category".ljust(label_w) + "".join(f"{c:>8d}" for c in range(C)) + f"{'macro':>8}"
    lines = [head, "Positive test samples".ljust(label_w) + "".join(f"{int(v):>8d}" for v in first.positives),
             "-" * len(head)]
    for name, t in results.items():
        for metric, vals, macro in (("Precision", t.precision, t.macro_precision),
                                    ("Recall", t.recall, t.macro_recall),
                                    ("F1 score", t.f1, t.macro_f1)):
            lines.append(f"{name} {metric}".ljust(label_w) + "".join(f"{v:>8.2f}" for v in vals) + f"{macro:>8.2f}")
        lines.append("-" * len(head))
    return "\n".join(lines) + "\n"


# --- prediction files ------------------------------------------------------------------


def write_predictions(path: str | Path, air_paths, present, posteriors=None) -> None:
    """One JSON record per AIR: ``air_path``, ``present`` (0/1 per category), optional ``posteriors``."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, ap in enumerate(air_paths):
            rec = {"air_path": ap, "present": [int(v) for v in present[i]]}
            if posteriors is not None:
                rec["posteriors"] = [round(float(v), 6) for v in posteriors[i]]
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_predictions(path: str | Path) -> dict[str, list[int]]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            out[rec["air_path"]] = rec["present"]
    return out


def evaluate_predictions(manifest: DatasetManifest, predictions: dict[str, list[int]], split: str | None = "test"):
    recs = manifest.records if split is None else manifest.split(split)
    missing = [r.air_path for r in recs if r.air_path not in predictions]
    if missing:
        raise LengthMismatch(f"{len(missing)} AIRs have no prediction (first: {missing[0]})")
    pred = np.array([predictions[r.air_path] for r in recs])
    return score(pred, manifest.labels(recs))
