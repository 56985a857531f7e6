import json

import pytest

from matdetect.cli import main
from matdetect.errors import ConfigError
from matdetect.pipeline import PipelineConfig, STAGES, load_config, parse_kv, sample_database_path

TINY = """\
materials = bundled:desk_materials.txt
theta_tot = 3
k_max = 5
restarts = 2
rooms = 6
sources = 1
receivers = 2
max_distinct_materials = 2
max_epochs = 2
conv_filters = 4,6
gru_hidden = 8
iir_orders = 20,20
svm_epochs = 20
"""


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def test_parse_kv_rules():
    assert parse_kv("a = 1  # note\n\n# c\nb=x,y\n") == {"a": "1", "b": "x,y"}
    with pytest.raises(ConfigError):
        parse_kv("a = 1\na = 2\n")
    with pytest.raises(ConfigError):
        parse_kv("just words\n")


def test_config_types_and_defaults(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("rooms = 12\nsplit_ratios = 0.8,0.1,0.1\nmax_reflection_order = 3\nseed = 5\nsim_seed = 9\n")
    cfg = load_config(p)
    assert cfg.rooms == 12 and cfg.split_ratios == (0.8, 0.1, 0.1) and cfg.max_reflection_order == 3
    assert (cfg.seed, cfg.cluster_seed, cfg.sim_seed, cfg.split_seed, cfg.crnn_seed) == (5, 5, 9, 5, 5)
    assert cfg.materials == str(sample_database_path())
    snap = cfg.snapshot()
    assert set(snap) == {f for f in PipelineConfig.__dataclass_fields__}


def test_unknown_key_fails_before_any_stage(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text(f"out_dir = {tmp_path / 'never'}\nrooms = 3\nroom_count = 5\n")
    assert main(["run", "--config", str(cfg)]) == 2
    assert "room_count" in capsys.readouterr().err
    assert not (tmp_path / "never").exists()


def test_bad_value_and_stage(tmp_path):
    with pytest.raises(ConfigError):
        PipelineConfig(stages=("cluster", "bake"))
    cfg = tmp_path / "c.cfg"
    cfg.write_text("rooms = many\n")
    assert main(["run", "--config", str(cfg)]) == 2


def test_cluster_stage_only(tmp_path, tiny):
    out = tmp_path / "run"
    tiny.write_text(TINY + "stages = cluster\n")
    assert main(["run", "--config", str(tiny), "--out", str(out)]) == 0
    produced = {p.name for p in out.iterdir()}
    assert produced == {"category_table.txt", "sweep.csv", "run_record.json", ".stamps"}
    assert (out / "sweep.csv").read_text().splitlines()[0] == "k,davies_bouldin,vrc,inertia"


def test_stage_failure_is_tagged(tmp_path, tiny, capsys):
    tiny.write_text(TINY.replace("bundled:desk_materials.txt", str(tmp_path / "missing.txt")))
    assert main(["run", "--config", str(tiny), "--out", str(tmp_path / "r")]) == 3
    assert "stage cluster failed" in capsys.readouterr().err


def test_full_tiny_run_and_cache(tmp_path, tiny, caplog):
    out = tmp_path / "run"
    caplog.set_level("INFO")
    assert main(["run", "--config", str(tiny), "--out", str(out), "--seed", "3"]) == 0
    for stage in STAGES:
        assert f"stage {stage}: running" in caplog.text
    for name in ("metrics_crnn.csv", "metrics_baseline.csv", "table2.txt", "crnn.ckpt"):
        assert (out / name).exists()
    rec = json.loads((out / "run_record.json").read_text())
    assert rec["config"]["seed"] == 3 and rec["config"]["crnn_seed"] == 3
    assert rec["config"]["frac_delay_halfwidth"] == 32 and rec["version"]
    assert set(rec["stages"]["evaluate"]["metrics"]) == {"crnn", "baseline"}
    first = (out / "metrics_crnn.csv").read_bytes()

    caplog.clear()
    assert main(["run", "--config", str(tiny), "--out", str(out), "--seed", "3"]) == 0
    assert "running" not in caplog.text
    rec = json.loads((out / "run_record.json").read_text())
    assert rec["reused"] == list(STAGES)
    assert (out / "metrics_crnn.csv").read_bytes() == first


def test_subcommands(tmp_path, tiny, capsys):
    d = tmp_path
    mats = str(sample_database_path("desk_materials.txt"))
    assert main(["cluster", "--materials", mats, "--theta-tot", "3", "--k-max", "80", "--restarts", "2",
                 "--out", str(d / "c"), "--out-table", str(d / "t.txt"), "--out-sweep", str(d / "s.csv")]) == 0
    assert len((d / "s.csv").read_text().splitlines()) == 1 + 8  # k = 2..9, capped at 9 materials
    assert main(["generate", "--materials", mats, "--table", str(d / "t.txt"), "--rooms", "5", "--sources", "1",
                 "--receivers", "2", "--seed", "1", "--out", str(d / "ds")]) == 0
    manifest = d / "ds" / "manifest.jsonl"
    assert len(manifest.read_text().splitlines()) == 10
    assert main(["train-crnn", "--manifest", str(manifest), "--table", str(d / "t.txt"), "--config", str(tiny),
                 "--out", str(d / "m.ckpt")]) == 2  # rooms etc. are not CRNN keys
    crnn_cfg = d / "crnn.cfg"
    crnn_cfg.write_text("max_epochs = 1\nconv_filters = 4,6\ngru_hidden = 8\n")
    assert main(["train-crnn", "--manifest", str(manifest), "--table", str(d / "t.txt"), "--config",
                 str(crnn_cfg), "--out", str(d / "m.ckpt")]) == 0
    assert main(["train-baseline", "--manifest", str(manifest), "--table", str(d / "t.txt"), "--orders", "10,10",
                 "--out", str(d / "b")]) == 0
    capsys.readouterr()

    wav = sorted((d / "ds" / "airs").glob("*.wav"))[0]
    assert main(["predict", "--ckpt", str(d / "m.ckpt"), "--air", str(wav), "--table", str(d / "t.txt")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "theta,posterior,present" and len(lines) >= 4
    present = [int(line.split(",")[2]) for line in lines[1:4]]
    assert sum(line.startswith("a_hat[") for line in lines) == sum(present)

    for flag, path in (("--ckpt", d / "m.ckpt"), ("--baseline", d / "b")):
        preds = d / f"p{flag}.jsonl"
        extra = ["--orders", "10,10"] if flag == "--baseline" else []
        assert main(["predict", flag, str(path), "--manifest", str(manifest), "--split", "test",
                     "--out", str(preds), *extra]) == 0
        assert main(["evaluate", "--manifest", str(manifest), "--predictions", str(preds),
                     "--out", str(d / "m.csv")]) == 0
        rows = (d / "m.csv").read_text().splitlines()
        assert rows[0] == "theta,positives,precision,recall,f1" and len(rows) == 4


def test_missing_input_nonzero(tmp_path, capsys):
    assert main(["evaluate", "--manifest", str(tmp_path / "no.jsonl"), "--predictions", str(tmp_path / "p")]) == 1
    assert "evaluate" in capsys.readouterr().err
