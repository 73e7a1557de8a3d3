import json

import pytest

from salientforget.cli import compare_rows, main, render_markdown
from salientforget.config import ExperimentConfig, parse_config
from salientforget.errors import ConfigError
from salientforget.metrics import MetricsReport

TINY_CFG = """\
dataset = toy-subset(100)
data_dir = {data}
architecture = small-cnn
method = wss-cl
output_dir = {out}
run_seed = 0
split.mode = random
split.fraction = 0.1
train.epochs = 1
train.batch_size = 50
train.augment = false
unlearn.phase1_epochs = 1
unlearn.phase2_epochs = 1
unlearn.batch_size_forget = 5
unlearn.batch_size_retain = 30
unlearn.ft_epochs = 1
unlearn.ga_epochs = 1
unlearn.rl_epochs = 1
"""


@pytest.fixture
def cfg_file(tmp_path, synthetic_dir):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CFG.format(data=synthetic_dir, out=tmp_path / "run"))
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_parse_config_sections():
    cfg = parse_config("dataset = toy-subset(500)\nsplit.mode = class\nsplit.class = cat\n"
                       "unlearn.tau = 2.0\ntrain.augment = false\nrun_seed = 4\n")
    assert cfg.toy_size == 500 and cfg.split_class == 3 and cfg.unlearn.tau == 2.0
    assert cfg.train.augment is False
    assert cfg.train.seed == cfg.unlearn.seed == cfg.split_seed == 4
    cfg.set_run_seed(9)
    assert cfg.train.seed == 9


def test_parse_config_explicit_seed_survives_override():
    cfg = parse_config("split.seed = 2\n")
    cfg.set_run_seed(7)
    assert cfg.split_seed == 2 and cfg.unlearn.seed == 7


@pytest.mark.parametrize("text", ["bogus = 1\n", "unlearn.nope = 1\n", "train.epochs = many\n", "novalue\n",
                                  "split.class = unicorn\n"])
def test_parse_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


@pytest.mark.parametrize("change", [{"dataset": "mnist"}, {"method": "sparse"}, {"architecture": "vit"},
                                    {"split_fraction": 1.5}, {"split_mode": "class"}])
def test_validate_before_compute(change):
    cfg = ExperimentConfig(**change)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_dump_round_trips():
    cfg = parse_config("dataset = toy-subset(50)\nunlearn.mask_mode = hard\nsplit.fraction = 0.5\n")
    again = parse_config(cfg.dump())
    assert again.lock_text() == cfg.lock_text() and again.unlearn == cfg.unlearn


def test_missing_dataset_dir_exit_2(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY_CFG.format(data=tmp_path / "nowhere", out=tmp_path / "run"))
    code, _, err = run(capsys, "train-original", "--config", cfg)
    assert code == 2 and "does not exist" in err


def test_empty_dataset_dir_exit_2(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY_CFG.format(data=tmp_path / "empty", out=tmp_path / "run"))
    code, _, err = run(capsys, "prepare-data", "--config", cfg)
    assert code == 2 and "data_batch_1.bin" in err


def test_bad_config_exit_3(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("unlearn.tau = -1\n")
    assert run(capsys, "unlearn", "--config", cfg)[0] == 3
    cfg.write_text("what = 1\n")
    assert run(capsys, "unlearn", "--config", cfg)[0] == 3


def test_missing_config_exit_3(tmp_path, capsys):
    assert run(capsys, "unlearn", "--config", tmp_path / "absent.cfg")[0] == 3


def test_prepare_synthetic(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY_CFG.format(data=tmp_path / "gen", out=tmp_path / "run"))
    code, out, _ = run(capsys, "prepare-data", "--config", cfg, "--synthetic")
    assert code == 0 and "|D_f|=10 |D_r|=90" in out
    assert (tmp_path / "run" / "split.manifest").exists()


def test_train_original_reproducible(cfg_file, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "train-original", "--config", cfg_file, "--output", a)[0] == 0
    assert run(capsys, "train-original", "--config", cfg_file, "--output", b)[0] == 0
    ca, cb = a / "checkpoints" / "original.pt", b / "checkpoints" / "original.pt"
    assert ca.read_bytes() == cb.read_bytes()
    assert (a / "config.lock").read_text() == (b / "config.lock").read_text()


def test_lock_mismatch_is_config_error(cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert run(capsys, "prepare-data", "--config", cfg_file)[0] == 0
    code, _, err = run(capsys, "prepare-data", "--config", cfg_file, "--seed", "5")
    assert code == 3 and "config.lock" in err
    assert run(capsys, "prepare-data", "--config", cfg_file, "--seed", "5", "--output", out / "s5")[0] == 0


def _report(path):
    d = json.loads(path.read_text())
    d.pop("rte_seconds")
    return d


def test_unlearn_pipeline(cfg_file, tmp_path, capsys):
    run_dir = tmp_path / "run"
    code, out, _ = run(capsys, "unlearn", "--config", cfg_file, "--method", "retrain")
    assert code == 0 and json.loads(out)["method"] == "retrain"
    code, _, _ = run(capsys, "unlearn", "--config", cfg_file)
    assert code == 0
    first = _report(run_dir / "reports" / "wss-cl.json")
    assert set(first["gaps"]) == {"ua", "ra", "ta", "mia"} and first["avg_gap"] >= 0
    assert first["split"] == {"mode": "random", "seed": 0, "fraction": 0.1}
    assert (run_dir / "checkpoints" / "mask-wss-cl.pt").exists()
    manifest = (run_dir / "split.manifest").read_text()
    assert run(capsys, "unlearn", "--config", cfg_file)[0] == 0
    assert _report(run_dir / "reports" / "wss-cl.json") == first
    assert (run_dir / "split.manifest").read_text() == manifest

    assert run(capsys, "unlearn", "--config", cfg_file, "--method", "cl")[0] == 0
    assert not (run_dir / "checkpoints" / "mask-cl.pt").exists()

    code, out, _ = run(capsys, "evaluate", "--config", cfg_file, "--checkpoint",
                       run_dir / "checkpoints" / "retrain.pt")
    assert code == 0 and json.loads(out)["method"] == "retrain"

    reports = run_dir / "reports"
    code, out, _ = run(capsys, "compare", "--config", cfg_file, "--reference", reports / "retrain.json",
                       reports / "wss-cl.json", reports / "cl.json")
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("| Method | UA | RA | TA | MIA | Avg. Gap | RTE |")
    assert lines[2].startswith("| retrain | ") and "(0.00)" in lines[2]
    assert (run_dir / "tables" / "compare.csv").read_text().count("\n") == 4


@pytest.mark.parametrize("method", ["ft", "ga", "rl", "ws-cl"])
def test_unlearn_baselines(cfg_file, tmp_path, capsys, method):
    code, out, _ = run(capsys, "unlearn", "--config", cfg_file, "--method", method)
    assert code == 0
    d = json.loads(out)
    assert d["method"] == method and "gaps" not in d
    assert all(0 <= d[k] <= 100 for k in ("ua", "ra", "ta", "mia"))


def test_compare_requires_reference(cfg_file, tmp_path, capsys):
    p = MetricsReport(1.0, 2.0, 3.0, 4.0, method="ft").save(tmp_path / "ft.json")
    code, _, err = run(capsys, "compare", "--config", cfg_file, p)
    assert code == 3 and "--reference" in err


def test_compare_missing_report_file(cfg_file, tmp_path, capsys):
    ref = MetricsReport(1.0, 2.0, 3.0, 4.0, method="retrain").save(tmp_path / "r.json")
    code, _, _ = run(capsys, "compare", "--config", cfg_file, "--reference", ref, tmp_path / "nope.json")
    assert code == 2


def test_compare_rows_published_ft():
    retrain = MetricsReport(5.40, 100.00, 94.42, 12.88, 175.0, "retrain")
    ft = MetricsReport(0.63, 99.88, 94.40, 2.70, 9.0, "ft")
    rows = compare_rows([ft], retrain)
    assert rows[0]["avg_gap"] == 0.0 and rows[0]["rte"] == "2:55"
    assert rows[1]["avg_gap"] == pytest.approx(3.7725)
    md = render_markdown(rows)
    assert "| ft | 0.63 (4.77) | 99.88 (0.12) | 94.40 (0.02) | 2.70 (10.18) |" in md
    assert md.splitlines()[3].endswith("| 0:09 |")


def test_per_class_sweep(cfg_file, tmp_path, capsys):
    code, out, _ = run(capsys, "per-class", "--config", cfg_file, "--method", "retrain")
    assert code == 0
    rows = out.strip().splitlines()[2:]
    assert len(rows) == 10
    # a model retrained without the class never predicts it on the training images of that class
    for row in rows:
        cells = [c.strip() for c in row.strip("|").split("|")]
        assert cells[4] == "100.00"
