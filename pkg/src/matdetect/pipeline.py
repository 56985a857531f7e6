"""End-to-end pipeline driven by a flat ``key = value`` config file."""

from __future__ import annotations

import hashlib
import json
import logging
import subprocess
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import (
    load_svm,
    manifest_iir_features,
    predict_baseline,
    save_svm,
    train_baseline,
)
from .clustering import (
    best_of_restarts,
    build_category_table,
    load_category_table,
    save_category_table,
    sweep_criteria,
    write_sweep_csv,
)
from .dataset import load_manifest
from .detector import CrnnConfig, load_checkpoint, predict_batch, save_checkpoint, train
from .errors import ConfigError, StageFailure
from .evaluation import (
    evaluate_predictions,
    format_table,
    metrics_csv,
    read_predictions,
    write_predictions,
)
from .features import FeatureConfig
from .material_db import load_materials, sample_database_path
from .room_sim import SimConfig, generate_dataset

log = logging.getLogger(__name__)

# prefix for material files shipped inside the package, e.g. ``bundled:desk_materials.txt``
BUNDLED = "bundled:"
STAGES = ("cluster", "generate", "train-crnn", "train-baseline", "evaluate")


@dataclass
class PipelineConfig:
    """Every tunable of a run; the config file may override any of them by name."""

    stages: tuple[str, ...] = STAGES
    out_dir: str = "run"
    materials: str = ""
    seed: int = 0
    cluster_seed: int | None = None
    sim_seed: int | None = None
    split_seed: int | None = None
    crnn_seed: int | None = None
    # clustering
    theta_tot: int = 10
    k_min: int = 2
    k_max: int = 80
    restarts: int = 10
    # simulation
    rooms: int = 141
    sources: int = 10
    receivers: int = 5
    sample_rate: int = 16000
    duration: float = 0.2
    speed_of_sound: float = 343.0
    max_reflection_order: int | None = None
    frac_delay_halfwidth: int = 32
    room_min: tuple[float, ...] = (2.5, 2.5, 2.5)
    room_max: tuple[float, ...] = (7.0, 7.0, 2.6)
    wall_margin: float = 0.3
    min_src_rcv_dist: float = 0.5
    max_distinct_materials: int | None = None
    split_ratios: tuple[float, ...] = (0.85, 0.075, 0.075)
    workers: int = 1
    # features and CRNN
    frame_len: float = 0.003
    hop: float = 0.0015
    n_fft: int = 64
    conv_filters: tuple[int, ...] = (16, 32)
    kernel: tuple[int, ...] = (3, 3)
    pool: int = 2
    gru_hidden: int = 64
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience_train: int = 10
    patience_val: int = 15
    threshold: float = 0.5
    # baseline
    iir_orders: tuple[int, ...] = (200, 200)
    svm_lam: float = 1e-2
    svm_epochs: int = 400
    svm_step: float = 0.5

    def __post_init__(self):
        if not self.materials:
            self.materials = str(sample_database_path())
        elif self.materials.startswith(BUNDLED):
            self.materials = str(sample_database_path(self.materials[len(BUNDLED):]))
        for name in ("cluster_seed", "sim_seed", "split_seed", "crnn_seed"):
            if getattr(self, name) is None:
                setattr(self, name, self.seed)
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise ConfigError(f"unknown stage(s) {bad}; choose from {STAGES}")

    # derived paths
    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    @property
    def table_path(self) -> Path:
        return self.out / "category_table.txt"

    @property
    def sweep_path(self) -> Path:
        return self.out / "sweep.csv"

    @property
    def dataset_dir(self) -> Path:
        return self.out / "dataset"

    @property
    def ckpt_path(self) -> Path:
        return self.out / "crnn.ckpt"

    @property
    def baseline_dir(self) -> Path:
        return self.out / "baseline"

    def crnn_config(self) -> CrnnConfig:
        return CrnnConfig(output_dim=self.theta_tot, conv_filters=tuple(self.conv_filters), kernel=tuple(self.kernel),
                          pool=self.pool, gru_hidden=self.gru_hidden, lr=self.lr, batch_size=self.batch_size,
                          max_epochs=self.max_epochs, patience_train=self.patience_train,
                          patience_val=self.patience_val, threshold=self.threshold, seed=self.crnn_seed,
                          sample_rate=self.sample_rate,
                          features=FeatureConfig(self.frame_len, self.hop, self.duration, self.n_fft))

    def sim_config(self) -> SimConfig:
        return SimConfig(self.sample_rate, self.duration, self.speed_of_sound, self.max_reflection_order,
                         self.frac_delay_halfwidth, seed=self.sim_seed)

    def snapshot(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = list(v) if isinstance(v, tuple) else v
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.snapshot(), sort_keys=True).encode()).hexdigest()[:16]


def _convert(name: str, text: str, default):
    text = text.strip()
    if default is None or name in ("cluster_seed", "sim_seed", "split_seed", "crnn_seed"):
        if text.lower() in ("none", ""):
            return None
        return int(text)
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple):
        kind = type(default[0]) if default else str
        return tuple(kind(t.strip()) for t in text.split(",") if t.strip())
    return type(default)(text)


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {line_no}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in out:
            raise ConfigError(f"config line {line_no}: duplicate key {key!r}")
        out[key] = value
    return out


def config_from_kv(values: dict[str, str], allowed: set[str] | None = None, **overrides) -> PipelineConfig:
    """Build a :class:`PipelineConfig`; unknown keys are rejected."""
    known = {f.name: f for f in fields(PipelineConfig)}
    allowed = set(known) if allowed is None else allowed
    unknown = sorted(k for k in values if k not in known or k not in allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {}
    for key, text in values.items():
        try:
            kwargs[key] = _convert(key, text, known[key].default)
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: cannot parse {text!r} ({exc})") from None
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig(**kwargs)


def load_config(path: str | Path | None, allowed: set[str] | None = None, **overrides) -> PipelineConfig:
    values = parse_kv(Path(path).read_text(encoding="utf-8")) if path else {}
    return config_from_kv(values, allowed, **overrides)


def _version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# --- stages --------------------------------------------------------------------------


def stage_cluster(cfg: PipelineConfig, record: dict, table_path=None, sweep_path=None) -> None:
    db = load_materials(cfg.materials)
    x = db.matrix()
    k_max = min(cfg.k_max, len(db))
    if k_max < cfg.k_max:
        log.warning("k_max %d exceeds %d materials; sweeping up to %d", cfg.k_max, len(db), k_max)
    if k_max >= cfg.k_min:
        sweep = sweep_criteria(x, cfg.k_min, k_max, cfg.restarts, cfg.cluster_seed)
        write_sweep_csv(sweep, sweep_path or cfg.sweep_path)
    clustering = best_of_restarts(x, cfg.theta_tot, cfg.restarts, cfg.cluster_seed)
    table = build_category_table(db, clustering)
    save_category_table(table, table_path or cfg.table_path)
    record["cluster"] = {"theta_tot": table.theta_tot, "inertia": clustering.inertia,
                         "category_sizes": np.bincount(clustering.assignments, minlength=cfg.theta_tot).tolist()}


def stage_generate(cfg: PipelineConfig, record: dict) -> None:
    db = load_materials(cfg.materials)
    table = load_category_table(cfg.table_path)
    manifest = generate_dataset(
        cfg.rooms, db, table, cfg.sim_config(), cfg.dataset_dir, cfg.sources, cfg.receivers, cfg.sim_seed,
        cfg.split_ratios, (cfg.room_min, cfg.room_max), cfg.wall_margin, cfg.min_src_rcv_dist,
        cfg.max_distinct_materials, cfg.workers,
    )
    if cfg.split_seed != cfg.sim_seed:
        from .evaluation import stratified_partition

        assignment = stratified_partition(manifest, cfg.split_ratios, cfg.split_seed)
        for rec in manifest.records:
            rec.split = assignment.room_split[rec.room_id]
        manifest.save()
    record["generate"] = {"airs": len(manifest),
                          "splits": {s: len(manifest.split(s)) for s in ("train", "val", "test")}}


def stage_train_crnn(cfg: PipelineConfig, record: dict) -> None:
    manifest = load_manifest(cfg.dataset_dir)
    table = load_category_table(cfg.table_path)
    model, report = train(manifest, table, cfg.crnn_config())
    save_checkpoint(model, cfg.ckpt_path, report)
    record["train-crnn"] = {"epochs": len(report.train_loss), "selected_epoch": report.selected_epoch,
                            "stop_reason": report.stop_reason,
                            "best_val_loss": report.val_loss[report.selected_epoch]}


def stage_train_baseline(cfg: PipelineConfig, record: dict) -> None:
    manifest = load_manifest(cfg.dataset_dir)
    table = load_category_table(cfg.table_path)
    cfg.baseline_dir.mkdir(parents=True, exist_ok=True)
    models = train_baseline(manifest, table.theta_tot, tuple(cfg.iir_orders), cfg.baseline_dir / "iir",
                            lam=cfg.svm_lam, epochs=cfg.svm_epochs, step=cfg.svm_step)
    for theta, m in enumerate(models):
        save_svm(m, cfg.baseline_dir / f"svm_theta{theta}.bin", theta)
    record["train-baseline"] = {"categories": len(models)}


def load_baseline(directory: str | Path) -> list:
    paths = sorted(Path(directory).glob("svm_theta*.bin"), key=lambda p: int(p.stem.removeprefix("svm_theta")))
    return [load_svm(p) for p in paths]


def predict_split(manifest, split: str, ckpt=None, baseline_dir=None, iir_orders=(200, 200), cache_dir=None):
    """``(air_paths, present, posteriors)`` for the records of one split."""
    recs = manifest.split(split) if split else manifest.records
    paths = [r.air_path for r in recs]
    if ckpt is not None:
        model = load_checkpoint(ckpt)
        post = predict_batch(model, [manifest.load_air(r) for r in recs])
        return paths, (post >= model.cfg.thresholds()).astype(np.int8), post
    models = load_baseline(baseline_dir)
    x = manifest_iir_features(manifest, recs, tuple(iir_orders), cache_dir)
    return paths, predict_baseline(models, x), None


def stage_evaluate(cfg: PipelineConfig, record: dict) -> None:
    manifest = load_manifest(cfg.dataset_dir)
    tables = {}
    sources = []
    if cfg.ckpt_path.exists():
        sources.append(("CRNN", "crnn", dict(ckpt=cfg.ckpt_path)))
    if cfg.baseline_dir.exists():
        sources.append(("SVM-IIR", "baseline", dict(baseline_dir=cfg.baseline_dir, iir_orders=cfg.iir_orders,
                                                    cache_dir=cfg.baseline_dir / "iir")))
    if not sources:
        raise FileNotFoundError("no trained detector found to evaluate")
    for title, tag, kw in sources:
        paths, present, post = predict_split(manifest, "test", **kw)
        pred_path = cfg.out / f"predictions_{tag}.jsonl"
        write_predictions(pred_path, paths, present, post)
        metrics = evaluate_predictions(manifest, read_predictions(pred_path), "test")
        (cfg.out / f"metrics_{tag}.csv").write_text(metrics_csv(metrics), encoding="utf-8")
        tables[title] = metrics
        record.setdefault("metrics", {})[tag] = {"macro_f1": metrics.macro_f1,
                                                 "f1": [float(v) for v in metrics.f1],
                                                 "zero_division": [list(f) for f in metrics.zero_division]}
    text = format_table(tables)
    (cfg.out / "table2.txt").write_text(text, encoding="utf-8")
    log.info("\n%s", text)


STAGE_FUNCS = {
    "cluster": stage_cluster,
    "generate": stage_generate,
    "train-crnn": stage_train_crnn,
    "train-baseline": stage_train_baseline,
    "evaluate": stage_evaluate,
}


@dataclass
class RunRecord:
    config: dict
    version: str
    paths: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    reused: list = field(default_factory=list)


def run_pipeline(cfg: PipelineConfig) -> RunRecord:
    """Run the configured stages in order and write ``run_record.json``.

    A stage whose stamp matches the current config digest is skipped, so
    repeating a run with the same config reuses earlier outputs.
    """
    cfg.out.mkdir(parents=True, exist_ok=True)
    stamps = cfg.out / ".stamps"
    stamps.mkdir(exist_ok=True)
    digest = cfg.digest()
    paths = {"materials": cfg.materials, "table": cfg.table_path, "sweep": cfg.sweep_path,
             "dataset": cfg.dataset_dir, "crnn_checkpoint": cfg.ckpt_path, "baseline": cfg.baseline_dir}
    run = RunRecord(cfg.snapshot(), _version(), {k: str(v) for k, v in paths.items()})
    prev_path = cfg.out / "run_record.json"
    previous = json.loads(prev_path.read_text()) if prev_path.exists() else {}
    invalidated = False
    for stage in STAGES:
        if stage not in cfg.stages:
            continue
        stamp = stamps / f"{stage}.stamp"
        if not invalidated and stamp.exists() and stamp.read_text() == digest and stage in previous.get("stages", {}):
            run.stages[stage] = previous["stages"][stage]
            run.reused.append(stage)
            log.info("stage %s: reusing cached outputs", stage)
            continue
        invalidated = True
        log.info("stage %s: running", stage)
        t0 = time.perf_counter()
        record: dict = {}
        try:
            STAGE_FUNCS[stage](cfg, record)
        except Exception as exc:
            raise StageFailure(stage, exc) from exc
        run.timings[stage] = round(time.perf_counter() - t0, 3)
        run.stages[stage] = record.get(stage, record)
        if "metrics" in record:
            run.stages[stage] = {"metrics": record["metrics"]}
        stamp.write_text(digest)
    prev_path.write_text(json.dumps(run.__dict__, indent=2, sort_keys=True, default=str), encoding="utf-8")
    return run
