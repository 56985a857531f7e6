"""IIR-coefficient features from Prony's method, classified by per-category linear SVMs."""

from __future__ import annotations

import json
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import toeplitz

from .dataset import Air, DatasetManifest
from .errors import DimensionMismatch, InputTooShort, SingleClassSplit, SingularSystem

log = logging.getLogger(__name__)

IIR_MAGIC = b"MIIR"
SVM_MAGIC = b"MSVM"
RIDGE = 1e-10


@dataclass(frozen=True)
class IirModel:
    """``H(z) = B(z) / A(z)`` with ``a[0] = 1``."""

    b: np.ndarray
    a: np.ndarray
    air_id: str = ""
    regularized: bool = False

    @property
    def orders(self) -> tuple[int, int]:
        return len(self.b) - 1, len(self.a) - 1

    def impulse_response(self, n: int) -> np.ndarray:
        from scipy.signal import lfilter

        x = np.zeros(n)
        x[0] = 1.0
        return lfilter(self.b, self.a, x)


def prony(air, n_num: int, n_den: int, air_id: str = "") -> IirModel:
    """Fit numerator order ``n_num`` and denominator order ``n_den`` to an impulse response.

    The denominator solves the linear-prediction equations
    ``h[n] + sum_k a_k h[n-k] = 0`` for ``n > n_num`` in the least-squares
    sense; the numerator is ``a * h`` over the first ``n_num + 1`` samples.
    A rank-deficient system is ridge-regularized and flagged.
    """
    h = np.asarray(air.taps if isinstance(air, Air) else air, dtype=np.float64)
    if n_num < 0 or n_den < 0:
        raise ValueError("model orders must be non-negative")
    if len(h) < n_num + n_den + 1:
        raise InputTooShort(f"need at least {n_num + n_den + 1} taps, got {len(h)}")
    regularized = False
    if n_den == 0:
        a = np.ones(1)
    else:
        # row n (n = n_num+1 .. N-1) holds h[n-1], ..., h[n-n_den] with zeros before h[0]
        first_col = h[n_num : len(h) - 1]
        first_row = h[n_num::-1][:n_den] if n_num + 1 >= n_den else np.r_[h[n_num::-1], np.zeros(n_den - n_num - 1)]
        H = toeplitz(first_col, first_row)
        rhs = -h[n_num + 1 :]
        coef, _, rank, _ = np.linalg.lstsq(H, rhs, rcond=None)
        if rank < n_den:
            gram = H.T @ H
            lam = RIDGE * max(np.trace(gram) / n_den, 1.0)
            coef = np.linalg.solve(gram + lam * np.eye(n_den), H.T @ rhs)
            regularized = True
            warnings.warn(f"Prony system rank {rank} < {n_den}; ridge-regularized", SingularSystem, stacklevel=2)
        a = np.r_[1.0, coef]
    b = np.convolve(a, h[: n_num + 1])[: n_num + 1]
    return IirModel(b, a, air_id, regularized)


def iir_feature_vector(model: IirModel, dim: int | None = None) -> np.ndarray:
    """Numerator coefficients, then the free denominator coefficients, zero-padded to ``dim``."""
    v = np.r_[model.b, model.a[1:]]
    if dim is None:
        dim = len(model.b) + len(model.a)
    if len(v) > dim:
        raise DimensionMismatch(f"{len(v)} coefficients do not fit a {dim}-dim feature")
    return np.r_[v, np.zeros(dim - len(v))]


def iir_features(air, n_coefs: tuple[int, int] = (200, 200), air_id: str = "") -> np.ndarray:
    """``n_b + n_a``-dim feature from a fit with ``n_b`` numerator and ``n_a`` denominator coefficients.

    ``a[0] = 1`` is dropped and the last slot is zero padding.
    """
    nb, na = n_coefs
    model = prony(air, nb - 1, na - 1, air_id)
    return iir_feature_vector(model, nb + na)


# --- linear SVM ------------------------------------------------------------------


@dataclass
class SvmModel:
    w: np.ndarray
    bias: float
    class_weights: tuple[float, float]  # (absent, present)
    mean: np.ndarray
    std: np.ndarray
    lam: float = 1e-2
    objective_history: list[float] = field(default_factory=list, repr=False)

    @property
    def dim(self) -> int:
        return len(self.w)

    def decision_function(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise DimensionMismatch(f"expected {self.dim} features, got {x.shape[1]}")
        return ((x - self.mean) / self.std) @ self.w + self.bias


def svm_objective(w, b, z, s, c, lam) -> float:
    """``lam/2 |w|^2 + mean_i c_i max(0, 1 - s_i (w.z_i + b))``."""
    margins = 1.0 - s * (z @ w + b)
    return 0.5 * lam * float(w @ w) + float(np.mean(c * np.maximum(margins, 0.0)))


def balanced_weights(y) -> tuple[float, float]:
    y = np.asarray(y).astype(bool)
    n, pos = len(y), int(y.sum())
    if pos == 0 or pos == n:
        raise SingleClassSplit("both classes must be present")
    return n / (2.0 * (n - pos)), n / (2.0 * pos)


def train_svm(x, y, class_weights: tuple[float, float] | None = None, lam: float = 1e-2,
              epochs: int = 400, step: float = 0.5) -> SvmModel:
    """Class-weighted hinge loss + L2, minimized by full-batch subgradient descent.

    Steps shrink as ``step / sqrt(t)``; the iterate with the lowest
    objective is returned and ``objective_history`` tracks that running
    best.  Features are standardized with statistics of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y).astype(bool)
    if x.ndim != 2 or len(x) != len(y):
        raise DimensionMismatch("x must be (n, d) with one label per row")
    if y.all() or not y.any():
        raise SingleClassSplit("both classes must be present in the training split")
    if class_weights is None:
        class_weights = balanced_weights(y)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    z = (x - mean) / std
    s = np.where(y, 1.0, -1.0)
    c = np.where(y, class_weights[1], class_weights[0])
    n = len(z)

    w = np.zeros(z.shape[1])
    b = 0.0
    best = (svm_objective(w, b, z, s, c, lam), w.copy(), b)
    history = [best[0]]
    for t in range(1, epochs + 1):
        active = (1.0 - s * (z @ w + b)) > 0.0
        cs = c * s * active
        gw = lam * w - (cs @ z) / n
        gb = -cs.sum() / n
        eta = step / np.sqrt(t)
        w = w - eta * gw
        b = b - eta * gb
        obj = svm_objective(w, b, z, s, c, lam)
        if obj < best[0]:
            best = (obj, w.copy(), b)
        history.append(best[0])
    _, w, b = best
    return SvmModel(w, float(b), tuple(float(v) for v in class_weights), mean, std, lam, history)


def predict_svm(model: SvmModel, x) -> np.ndarray:
    """Presence decision per row: ``w.x + b >= 0``."""
    return model.decision_function(x) >= 0.0


def constant_svm(dim: int, present: bool) -> SvmModel:
    """Fallback for a category with a single class in training."""
    return SvmModel(np.zeros(dim), 1.0 if present else -1.0, (0.0, 0.0), np.zeros(dim), np.ones(dim))


# --- dataset-level helpers ---------------------------------------------------------


def manifest_iir_features(manifest: DatasetManifest, records, n_coefs=(200, 200), cache_dir: Path | None = None):
    rows = []
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
    for rec in records:
        cache = None
        if cache_dir is not None:
            cache = Path(cache_dir) / (Path(rec.air_path).stem + f"_{n_coefs[0]}_{n_coefs[1]}.iir")
            if cache.exists():
                rows.append(iir_feature_vector(load_iir(cache), sum(n_coefs)))
                continue
        model = prony(manifest.load_air(rec), n_coefs[0] - 1, n_coefs[1] - 1, rec.air_path)
        if cache is not None:
            save_iir(model, cache)
        rows.append(iir_feature_vector(model, sum(n_coefs)))
    return np.array(rows)


def train_svm_per_category(features, labels, theta: int, class_weights=None, **kw) -> SvmModel:
    """Binary SVM for category ``theta`` from training features and label matrix."""
    y = np.asarray(labels)[:, theta]
    return train_svm(features, y, class_weights, **kw)


def train_baseline(manifest: DatasetManifest, theta_tot: int, n_coefs=(200, 200), cache_dir=None,
                   **svm_kw) -> list[SvmModel]:
    recs = manifest.split("train")
    x = manifest_iir_features(manifest, recs, n_coefs, cache_dir)
    y = manifest.labels(recs)
    models = []
    for theta in range(theta_tot):
        try:
            models.append(train_svm_per_category(x, y, theta, **svm_kw))
        except SingleClassSplit:
            present = bool(y[:, theta].all())
            log.warning("category %d has a single class in training; constant %s predictor", theta,
                        "present" if present else "absent")
            models.append(constant_svm(x.shape[1], present))
    return models


def predict_baseline(models: list[SvmModel], features) -> np.ndarray:
    return np.stack([predict_svm(m, features) for m in models], axis=1).astype(np.int8)


# --- binary files --------------------------------------------------------------------


def save_iir(model: IirModel, path: str | Path) -> None:
    """Header: magic, numerator count, denominator count, flags; then float64 LE b and a."""
    with open(path, "wb") as fh:
        fh.write(IIR_MAGIC + struct.pack("<III", len(model.b), len(model.a), int(model.regularized)))
        fh.write(np.asarray(model.b, dtype="<f8").tobytes())
        fh.write(np.asarray(model.a, dtype="<f8").tobytes())


def load_iir(path: str | Path) -> IirModel:
    raw = Path(path).read_bytes()
    if raw[:4] != IIR_MAGIC:
        raise ValueError(f"{path} is not an IIR cache file")
    nb, na, flags = struct.unpack("<III", raw[4:16])
    b = np.frombuffer(raw, dtype="<f8", count=nb, offset=16).copy()
    a = np.frombuffer(raw, dtype="<f8", count=na, offset=16 + 8 * nb).copy()
    return IirModel(b, a, Path(path).stem, bool(flags))


def save_svm(model: SvmModel, path: str | Path, theta: int | None = None) -> None:
    """Header: magic, JSON length, JSON; then float64 LE w, mean, std."""
    header = json.dumps({"theta": theta, "dim": model.dim, "bias": model.bias, "lam": model.lam,
                         "class_weights": list(model.class_weights)}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SVM_MAGIC + struct.pack("<I", len(header)) + header)
        for arr in (model.w, model.mean, model.std):
            fh.write(np.asarray(arr, dtype="<f8").tobytes())


def load_svm(path: str | Path) -> SvmModel:
    raw = Path(path).read_bytes()
    if raw[:4] != SVM_MAGIC:
        raise ValueError(f"{path} is not an SVM model file")
    (n,) = struct.unpack("<I", raw[4:8])
    hdr = json.loads(raw[8 : 8 + n])
    d = hdr["dim"]
    arrs = [np.frombuffer(raw, dtype="<f8", count=d, offset=8 + n + 8 * d * i).copy() for i in range(3)]
    return SvmModel(arrs[0], hdr["bias"], tuple(hdr["class_weights"]), arrs[1], arrs[2], hdr["lam"])
