"""CRNN material-category detector: model, training, thresholding."""

from __future__ import annotations

import json
import logging
import struct
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .clustering import CategoryTable
from .dataset import Air, DatasetManifest
from .errors import DegenerateLabels, EmptySplit, SampleRateMismatch, ShapeMismatch
from .features import FeatureConfig, Standardizer, extract_features

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MDCK"


@dataclass(frozen=True)
class CrnnConfig:
    output_dim: int = 10
    conv_filters: tuple[int, ...] = (16, 32)
    kernel: tuple[int, int] = (3, 3)
    pool: int = 2
    gru_hidden: int = 64
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience_train: int = 10
    patience_val: int = 15
    threshold: float | tuple[float, ...] = 0.5
    seed: int = 0
    sample_rate: int = 16000
    features: FeatureConfig = field(default_factory=FeatureConfig)

    def __post_init__(self):
        if self.patience_train <= 0 or self.patience_val <= 0:
            raise ValueError("patience values must be positive")
        for z in self.thresholds():
            if not 0.0 < z < 1.0:
                raise ValueError(f"threshold {z} not in (0, 1)")

    def thresholds(self) -> np.ndarray:
        if isinstance(self.threshold, (int, float)):
            return np.full(self.output_dim, float(self.threshold))
        z = np.asarray(self.threshold, dtype=float)
        if z.shape != (self.output_dim,):
            raise ValueError(f"need {self.output_dim} thresholds, got {z.shape}")
        return z

    def to_dict(self) -> dict:
        d = asdict(self)
        d["features"] = asdict(self.features)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CrnnConfig":
        d = dict(d)
        d["features"] = FeatureConfig(**d.get("features", {}))
        for key in ("conv_filters", "kernel"):
            if key in d:
                d[key] = tuple(d[key])
        if isinstance(d.get("threshold"), list):
            d["threshold"] = tuple(d["threshold"])
        return cls(**d)


class Crnn:
    """Conv blocks -> per-frame sequence -> GRU -> last state -> dense logits."""

    def __init__(self, cfg: CrnnConfig, n_bins: int, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        layers: list[nn.Layer] = []
        ch, f = 1, n_bins
        for filters in cfg.conv_filters:
            layers += [nn.Conv2D(ch, filters, cfg.kernel, rng, dtype), nn.ReLU(), nn.MaxPoolFreq(cfg.pool)]
            ch, f = filters, f // cfg.pool
        layers += [nn.ToSequence(), nn.GRU(ch * f, cfg.gru_hidden, rng, dtype), nn.LastStep(),
                   nn.Dense(cfg.gru_hidden, cfg.output_dim, rng, dtype)]
        layers[0].needs_input_grad = False
        self.layers = layers
        self.n_bins = n_bins
        self.dtype = np.dtype(dtype)
        self.standardizer: Standardizer | None = None

    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def named_grads(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def logits(self, feats: np.ndarray) -> np.ndarray:
        """``feats``: standardized ``(B, T, F)``."""
        if feats.ndim != 3 or feats.shape[2] != self.n_bins:
            raise ShapeMismatch(f"expected (B, T, {self.n_bins}) features, got {feats.shape}")
        x = feats.astype(self.dtype, copy=False)[:, None, :, :]
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: np.ndarray) -> None:
        for layer in reversed(self.layers):
            if grad is None:
                break
            grad = layer.backward(grad)

    def posteriors(self, feats: np.ndarray) -> np.ndarray:
        return nn.sigmoid(self.logits(feats))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_params().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            for k in layer.params:
                layer.params[k] = snap[f"{i}.{k}"].copy()


@dataclass
class TrainReport:
    train_loss: list[float]
    val_loss: list[float]
    selected_epoch: int
    stop_reason: str
    wall_time: float
    class_weights: list[list[float]]


@dataclass(frozen=True)
class DetectionResult:
    posteriors: np.ndarray
    present: tuple[int, ...]
    a_hat: np.ndarray


def class_weights_for(labels: np.ndarray) -> np.ndarray:
    """Balanced weights from training labels; a category lacking either class gets weight 0."""
    w = nn.balanced_class_weights(labels)
    degenerate = np.any(w == 0.0, axis=1)
    for theta in np.nonzero(degenerate)[0]:
        warnings.warn(f"category {theta} has only one label value in the training split; its loss is "
                      f"weighted by zero", DegenerateLabels, stacklevel=3)
    w[degenerate] = 0.0
    return w


def _batch_loss(model: Crnn, x, y, weights, train: bool) -> float:
    z = model.logits(x)
    loss, dz = nn.weighted_bce_with_logits(z, y, weights)
    if train:
        model.backward(dz.astype(model.dtype))
    return loss


def evaluate_loss(model: Crnn, x, y, weights, batch_size: int = 64) -> float:
    total = 0.0
    for s in range(0, len(x), batch_size):
        xb, yb = x[s : s + batch_size], y[s : s + batch_size]
        total += _batch_loss(model, xb, yb, weights, train=False) * len(xb)
    return total / len(x)


def fit(x_train, y_train, x_val, y_val, cfg: CrnnConfig, weights: np.ndarray | None = None) -> tuple[Crnn, TrainReport]:
    """Train on standardized feature arrays ``(N, T, F)`` with binary labels ``(N, C)``.

    Stops once the training loss has not improved for ``patience_train``
    epochs or the validation loss for ``patience_val`` epochs, then restores
    the parameters of the epoch with the lowest validation loss.
    """
    if len(x_train) == 0 or len(x_val) == 0:
        raise EmptySplit("training and validation sets must both be non-empty")
    y_train = np.asarray(y_train)
    if y_train.shape[1] != cfg.output_dim:
        raise ShapeMismatch(f"labels have {y_train.shape[1]} categories, config expects {cfg.output_dim}")
    t0 = time.perf_counter()
    if weights is None:
        weights = class_weights_for(y_train)
    model = Crnn(cfg, x_train.shape[2])
    opt = nn.AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    x_train = x_train.astype(model.dtype, copy=False)
    x_val = x_val.astype(model.dtype, copy=False)

    train_hist, val_hist = [], []
    best_train = best_val = np.inf
    since_train = since_val = 0
    best_snap, best_epoch = model.snapshot(), 0
    stop = "max_epochs"
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(x_train))
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            model.zero_grad()
            total += _batch_loss(model, x_train[idx], y_train[idx], weights, train=True) * len(idx)
            nn.adam_step(model.named_params(), model.named_grads(), opt)
        train_loss = total / len(order)
        val_loss = evaluate_loss(model, x_val, y_val, weights)
        train_hist.append(train_loss)
        val_hist.append(val_loss)
        log.info("epoch %d: train %.5f  val %.5f", epoch, train_loss, val_loss)

        if train_loss < best_train:
            best_train, since_train = train_loss, 0
        else:
            since_train += 1
        if val_loss < best_val:
            best_val, since_val = val_loss, 0
            best_snap, best_epoch = model.snapshot(), epoch
        else:
            since_val += 1
        if since_train >= cfg.patience_train:
            stop = "train_patience"
            break
        if since_val >= cfg.patience_val:
            stop = "val_patience"
            break

    model.restore(best_snap)
    report = TrainReport(train_hist, val_hist, best_epoch, stop, time.perf_counter() - t0, weights.tolist())
    return model, report


def manifest_features(manifest: DatasetManifest, records, fcfg: FeatureConfig) -> np.ndarray:
    return np.stack([extract_features(manifest.load_air(r), fcfg).values for r in records]).astype(np.float32)


def train(manifest: DatasetManifest, table: CategoryTable, cfg: CrnnConfig) -> tuple[Crnn, TrainReport]:
    """Train a detector on the manifest's train split, early-stopping on its val split."""
    if cfg.output_dim != table.theta_tot:
        cfg = replace(cfg, output_dim=table.theta_tot)
    tr, va = manifest.split("train"), manifest.split("val")
    if not tr or not va:
        raise EmptySplit("manifest needs non-empty train and val splits")
    x_tr = manifest_features(manifest, tr, cfg.features)
    x_va = manifest_features(manifest, va, cfg.features)
    std = Standardizer.fit(x_tr)
    model, report = fit(std(x_tr), manifest.labels(tr), std(x_va), manifest.labels(va), cfg)
    model.standardizer = std
    return model, report


def predict_posteriors(model: Crnn, air: Air) -> np.ndarray:
    """Per-category presence posteriors for one AIR."""
    return predict_batch(model, [air])[0]


def predict_batch(model: Crnn, airs: Sequence[Air], batch_size: int = 64) -> np.ndarray:
    for air in airs:
        if air.sample_rate != model.cfg.sample_rate:
            raise SampleRateMismatch(f"model expects {model.cfg.sample_rate} Hz, AIR is {air.sample_rate} Hz")
    feats = np.stack([extract_features(a, model.cfg.features).values for a in airs]).astype(np.float32)
    if model.standardizer is not None:
        feats = model.standardizer(feats)
    out = [model.posteriors(feats[s : s + batch_size]) for s in range(0, len(feats), batch_size)]
    return np.concatenate(out).astype(np.float64)


def select_rows(posteriors, table: CategoryTable, thresholds) -> DetectionResult:
    """Threshold posteriors (ties count as present) and pick the matching category rows."""
    p = np.asarray(posteriors, dtype=float)
    z = np.broadcast_to(np.asarray(thresholds, dtype=float), p.shape)
    if p.shape != (table.theta_tot,):
        raise ShapeMismatch(f"expected {table.theta_tot} posteriors, got {p.shape}")
    present = tuple(int(t) for t in np.nonzero(p >= z)[0])
    a_tot = table.matrix()
    return DetectionResult(p, present, a_tot[list(present)] if present else np.empty((0, a_tot.shape[1])))


def detect(model: Crnn, air: Air, table: CategoryTable, thresholds=None) -> DetectionResult:
    if thresholds is None:
        thresholds = model.cfg.thresholds()
    return select_rows(predict_posteriors(model, air), table, thresholds)


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(model: Crnn, path: str | Path, report: TrainReport | None = None) -> None:
    """Header (magic, length, JSON layer spec) then float32 LE tensors in declaration order."""
    params = model.named_params()
    tensors = list(params.items())
    if model.standardizer is not None:
        tensors += [("standardizer.mean", model.standardizer.mean), ("standardizer.std", model.standardizer.std)]
    header = {
        "config": model.cfg.to_dict(),
        "n_bins": model.n_bins,
        "layers": [type(layer).__name__ for layer in model.layers],
        "tensors": [[name, list(np.shape(t))] for name, t in tensors],
    }
    if report is not None:
        header["selected_epoch"] = report.selected_epoch
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(blob)) + blob)
        for _, t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> Crnn:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a detector checkpoint")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8 : 8 + n].decode("utf-8"))
    cfg = CrnnConfig.from_dict(header["config"])
    model = Crnn(cfg, header["n_bins"])
    offset = 8 + n
    values = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        values[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset += 4 * count
    model.restore({k: v for k, v in values.items() if not k.startswith("standardizer.")})
    if "standardizer.mean" in values:
        model.standardizer = Standardizer(values["standardizer.mean"].astype(np.float64),
                                          values["standardizer.std"].astype(np.float64))
    return model
