import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from popcorn import io as pio
from popcorn.cli import main
from popcorn.config import RunConfig, apply_overrides, config_from_yaml, dump_config, load_config
from popcorn.errors import ConfigError
from popcorn.model import load_checkpoint

MINI = {
    "seed": 3,
    "synth": {"n_labeled": 3, "n_unlabeled": 3, "n_test": 2, "image_size": [32, 32], "lesion_radius": [2.0, 5.0]},
    "model": {"base_filters": 4, "depth": 2, "patch_size": [16, 16]},
    "trainer": {"K": 2, "N": 1, "p": 2, "initial_epochs": 2, "patience": 2, "batch_size": 2},
}


@pytest.fixture
def mini(tmp_path):
    path = tmp_path / "mini.yaml"
    path.write_text(yaml.safe_dump(MINI))
    return path


@pytest.fixture
def data_dir(tmp_path, mini):
    out = tmp_path / "data"
    assert main(["synth-data", "--config", str(mini), "--out", str(out)]) == 0
    return out


# -- config ---------------------------------------------------------------------


def test_defaults_and_round_trip(tmp_path):
    cfg = load_config(None, seed=1, env={})
    assert cfg.trainer.K == 200 and cfg.trainer.N == 2 and cfg.trainer.p == 5 and cfg.trainer.alpha == 0.2
    assert cfg.optimizer.lr == 1e-4 and cfg.optimizer.beta1 == 0.9
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml", env={}) == cfg


def test_precedence(mini):
    assert load_config(mini, env={}).seed == 3
    assert load_config(mini, env={"POPCORN_SEED": "9"}).seed == 9
    cfg = load_config(mini, ["trainer.K=7"], seed=11, env={"POPCORN_SEED": "9"})
    assert cfg.seed == 11 and cfg.trainer.seed == 11 and cfg.trainer.K == 7


@pytest.mark.parametrize("raw, match", [
    ({}, "seed"),
    ({"seed": 0, "bogus": 1}, "bogus"),
    ({"seed": 0, "trainer": {"KK": 1}}, "KK"),
    ({"seed": 0, "trainer": {"seed": 4}}, "seed"),
    ({"seed": 0, "trainer": {"K": "many"}}, "K"),
    ({"seed": 0, "synth": {"n_labeled": -1}}, "n_labeled"),
    ({"seed": 0, "model": {"patch_size": [20, 20], "depth": 3}}, "patch_size"),
    ({"seed": "x"}, "seed"),
])
def test_config_errors(raw, match):
    with pytest.raises(ConfigError, match=match):
        RunConfig.from_dict(raw)


def test_3d_default_patch():
    cfg = RunConfig.from_dict({"seed": 0, "model": {"dims": 3}})
    assert cfg.model.patch_size == (64, 64, 64)


def test_overrides_parse_scalars():
    raw = apply_overrides({"seed": 1}, ["trainer.alpha=0", "model.patch_size=[8, 8]", "pairs.patch_positioning=grid"])
    assert raw["trainer"]["alpha"] == 0 and raw["model"]["patch_size"] == [8, 8]
    with pytest.raises(ConfigError):
        apply_overrides({}, ["novalue"])


def test_yaml_example_config_parses():
    cfg = config_from_yaml((Path(__file__).parents[1] / "configs" / "desk_study.yaml").read_text())
    assert cfg.synth.n_labeled == 5 and cfg.synth.n_unlabeled == 100 and cfg.synth.image_size == (64, 64)


# -- CLI --------------------------------------------------------------------------------


def test_synth_data_layout_and_determinism(tmp_path, mini, data_dir):
    manifest = (data_dir / "manifest.json").read_bytes()
    assert len(list((data_dir / "labeled").glob("*.img.rt"))) == 3
    assert len(list((data_dir / "hidden").glob("*.mask.rt"))) == 3
    assert len(list((data_dir / "unlabeled").glob("*.mask.rt"))) == 0
    again = tmp_path / "again"
    assert main(["synth-data", "--config", str(mini), "--out", str(again)]) == 0
    assert (again / "manifest.json").read_bytes() == manifest


def test_synth_data_minimal(tmp_path):
    assert main(["synth-data", "--seed", "0", "--out", str(tmp_path / "d"), "--set", "synth.n_labeled=1",
                 "--set", "synth.n_unlabeled=1", "--set", "synth.n_test=1"]) == 0
    files = sorted(p.relative_to(tmp_path / "d").as_posix() for p in (tmp_path / "d").rglob("*") if p.is_file())
    assert files == ["hidden/unl0000.mask.rt", "labeled/lab0000.img.rt", "labeled/lab0000.mask.rt",
                     "manifest.json", "test/test0000.img.rt", "test/test0000.mask.rt", "unlabeled/unl0000.img.rt"]


def test_exit_codes(tmp_path, mini, capsys):
    assert main(["synth-data", "--seed", "0", "--set", "synth.n_labeled=-1", "--out", str(tmp_path / "x")]) == 1
    assert "n_labeled" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["train", "--strategy", "nope"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1
    assert main(["train", "--config", str(mini), "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "r")]) == 2
    assert main(["synth-data", "--config", str(tmp_path / "nope.yaml")]) == 1


def test_train_baseline_zero_cycles(tmp_path, mini, data_dir):
    run = tmp_path / "run"
    assert main(["train", "--config", str(mini), "--data", str(data_dir), "--out", str(run),
                 "--strategy", "baseline"]) == 0
    recs = [json.loads(line) for line in (run / "log.jsonl").read_text().splitlines()]
    assert not [r for r in recs if r["type"] == "cycle"]
    assert recs[-1]["type"] == "final" and recs[-1]["cycles"] == 0
    assert load_config(run / "config.yaml", env={}) == load_config(mini, env={}).__class__.from_dict(
        yaml.safe_load((run / "config.yaml").read_text()))


def test_effective_config_written(tmp_path, mini, data_dir):
    run = tmp_path / "run"
    assert main(["train", "--config", str(mini), "--data", str(data_dir), "--out", str(run), "--max-cycles", "1",
                 "--strategy", "no-cr", "--seed", "5"]) == 0
    cfg = load_config(run / "config.yaml", env={})
    assert cfg.trainer.strategy == "no-cr" and cfg.trainer.max_cycles == 1 and cfg.seed == 5


def test_alpha_zero_equals_no_cr(tmp_path, mini, data_dir):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(mini), "--data", str(data_dir), "--out", str(a), "--reproducible",
                 "--strategy", "popcorn", "--set", "trainer.alpha=0"]) == 0
    assert main(["train", "--config", str(mini), "--data", str(data_dir), "--out", str(b), "--reproducible",
                 "--strategy", "no-cr"]) == 0
    ma, *_ = load_checkpoint(a / "checkpoints" / "final.ckpt")
    mb, *_ = load_checkpoint(b / "checkpoints" / "final.ckpt")
    assert ma.state_hash() == mb.state_hash()


def test_resume_config_mismatch(tmp_path, mini, data_dir):
    run = tmp_path / "run"
    args = ["train", "--config", str(mini), "--data", str(data_dir), "--out", str(run)]
    assert main(args + ["--stop-after-cycle", "1"]) == 0
    assert main(args + ["--resume", "--set", "trainer.alpha=0.5"]) == 1


def test_evaluate_and_report(tmp_path, mini, data_dir, capsys):
    runs = []
    for strat in ("popcorn", "baseline"):
        run = tmp_path / strat
        assert main(["train", "--config", str(mini), "--data", str(data_dir), "--out", str(run),
                     "--strategy", strat]) == 0
        assert main(["evaluate", str(run), "--data", str(data_dir)]) == 0
        runs.append(run / "results.json")
    a, b = (json.loads(p.read_text()) for p in runs)
    assert a["test_ids"] == b["test_ids"] == ["test0000", "test0001"]
    assert a["arm"] == "popcorn" and len(a["curve"]) == 2
    out = tmp_path / "rep"
    assert main(["report", *map(str, runs), "--out", str(out)]) == 0
    assert (out / "metrics_table.txt").exists() and (out / "significance.csv").exists()
    assert "Our method" in capsys.readouterr().out


def test_evaluate_missing_checkpoint(tmp_path, data_dir, capsys):
    assert main(["evaluate", str(tmp_path / "norun"), "--data", str(data_dir)]) == 2
    assert "norun" in capsys.readouterr().err


def test_evaluate_perfect_stub(data_dir):
    from popcorn.study import evaluate

    _, test = pio.load_dataset(data_dir)
    res = evaluate(lambda v: next(s.mask for s in test if s.volume is v), test[:1])
    assert res.images[0].dice == 1.0


def test_report_mismatched_ids(tmp_path):
    from popcorn.report import ArmResult, save_result
    from popcorn.stats import ImageMetrics

    save_result(ArmResult("popcorn", "popcorn", [ImageMetrics("a", 1, 1, 1, 1, 0, 0)]), tmp_path / "a.json")
    save_result(ArmResult("baseline", "baseline", [ImageMetrics("b", 1, 1, 1, 1, 0, 0)]), tmp_path / "b.json")
    assert main(["report", str(tmp_path / "a.json"), str(tmp_path / "b.json"), "--out", str(tmp_path / "r")]) == 2


def test_select_command(tmp_path, capsys):
    pio.write_raw(tmp_path / "u.rt", np.array([[0.2, 0.0], [5.0, 5.0], [0.9, 0.0]]))
    pio.write_raw(tmp_path / "t.rt", np.array([[0.0, 0.0], [1.0, 0.0]]))
    (tmp_path / "u.txt").write_text("u1\nu2\nu3\n")
    (tmp_path / "t.txt").write_text("t1\nt2\n")
    args = ["select", "--u-feats", str(tmp_path / "u.rt"), "--u-ids", str(tmp_path / "u.txt"),
            "--t-feats", str(tmp_path / "t.rt"), "--t-ids", str(tmp_path / "t.txt"), "-K", "2", "-p", "2"]
    assert main(args) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "rank\tid\tscore"
    rows = [line.split("\t") for line in lines[1:]]
    assert [r[1] for r in rows] == ["u1", "u3"]
    assert float(rows[0][2]) == pytest.approx(0.68, abs=1e-12) and float(rows[1][2]) == pytest.approx(0.82, abs=1e-12)
    (tmp_path / "u.txt").write_text("u1\nu2\n")
    assert main(args) == 2
