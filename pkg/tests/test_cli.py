import csv
import json
from pathlib import Path

import pytest

from stswincl import cli, experiments
from stswincl.config import load_config

TINY = str(Path(__file__).resolve().parents[1] / "configs" / "tiny.json")


def _bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("full")
    assert cli.main(["train", "--config", TINY, "--out", str(out)]) == 0
    return out


def test_train_writes_everything(full_run):
    for name in ("config.json", "train_log.jsonl", "report_test.json", "report_test.csv"):
        assert (full_run / name).is_file()
    for s in (1, 2, 3):
        assert (full_run / f"stage{s}" / "manifest.json").is_file()
    assert json.loads((full_run / "config.json").read_text()) == json.loads(load_config(TINY).to_json())
    stages = {json.loads(l)["stage"] for l in (full_run / "train_log.jsonl").read_text().splitlines()}
    assert stages == {1, 2, 3}


def test_split_stages_bitwise_equal_to_one_run(full_run, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    data = str(full_run / "data")
    assert cli.main(["train", "--config", TINY, "--data", data, "--out", str(a), "--stages", "1"]) == 0
    assert cli.main(["train", "--config", TINY, "--data", data, "--out", str(b), "--stages", "2,3",
                     "--init", str(a / "stage1")]) == 0
    for s in ("stage1",):
        assert _bytes(a / s) == _bytes(full_run / s)
    for s in ("stage2", "stage3"):
        assert _bytes(b / s) == _bytes(full_run / s)
    assert (b / "report_test.json").read_bytes() == (full_run / "report_test.json").read_bytes()


def test_stage2_epoch_sweep(full_run, tmp_path, capsys):
    out = tmp_path / "sweep"
    rc = cli.main(["train", "--config", TINY, "--data", str(full_run / "data"), "--out", str(out),
                   "--stages", "2,3", "--init", str(full_run / "stage1"), "--stage2-epochs", "1,2"])
    assert rc == 0
    with open(out / "stage2_sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["stage2_epochs"]) for r in rows] == [1, 2]
    scores = [float(r["val_mIoU"]) for r in rows]
    chosen = 1 if scores[0] >= scores[1] else 2
    m = json.loads((out / "stage2" / "manifest.json").read_text())
    assert m["extra"]["epochs_done"] == chosen
    # the full-length snapshot is the ordinary stage-2 run
    if chosen == 2:
        assert _bytes(out / "stage2") == _bytes(full_run / "stage2")
    assert "stage-2 epochs 1" in capsys.readouterr().out


def test_eval_and_against(full_run, tmp_path, capsys):
    rc = cli.main(["eval", "--ckpt", str(full_run / "stage3"), "--data", str(full_run / "data"),
                   "--out", str(tmp_path), "--against", str(full_run / "stage1")])
    assert rc == 0
    rep = json.loads((tmp_path / "report_test.json").read_text())
    assert rep == {**json.loads((full_run / "report_test.json").read_text()), "p_values": rep["p_values"]}
    assert 0.0 <= rep["p_values"]["against"] <= 1.0
    assert "Wilcoxon p" in capsys.readouterr().out


def test_eval_rejects_stage2(full_run, tmp_path):
    assert cli.main(["eval", "--ckpt", str(full_run / "stage2"), "--data", str(full_run / "data"),
                     "--out", str(tmp_path)]) == 2


def test_report_renders(full_run, tmp_path):
    assert cli.main(["report", "--run", str(full_run), "--out", str(tmp_path)]) == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {"loss_curves.svg", "per_class_iou_test.svg", "summary.csv"} <= names
    assert (tmp_path / "loss_curves.svg").read_text().startswith("<svg")


@pytest.mark.parametrize("argv", [
    ["train", "--stages", "4", "--out", "x"],
    ["train", "--stages", "1,3", "--out", "x"],
    ["train", "--stages", "a", "--out", "x"],
    ["ablate", "--axis", "depth", "--out", "x"],
    ["frobnicate"],
])
def test_usage_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == 2


def test_config_and_init_errors(tmp_path, full_run):
    bad = tmp_path / "bad.json"
    bad.write_text('{"bogus": 1}')
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["train", "--config", TINY, "--stages", "2,3", "--out", str(tmp_path / "o")]) == 2
    # stage 2 must start from a stage-1 checkpoint
    assert cli.main(["train", "--config", TINY, "--data", str(full_run / "data"), "--stages", "2",
                     "--init", str(full_run / "stage2"), "--out", str(tmp_path / "o")]) == 1
    assert cli.main(["eval", "--ckpt", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 1


def test_seed_flag_changes_the_run(full_run, tmp_path):
    out = tmp_path / "s7"
    assert cli.main(["train", "--config", TINY, "--data", str(full_run / "data"), "--out", str(out),
                     "--stages", "1", "--seed", "7"]) == 0
    assert json.loads((out / "config.json").read_text())["seed"] == 7
    assert _bytes(out / "stage1") != _bytes(full_run / "stage1")


def test_verify_exit_code_tracks_failures(capsys):
    assert cli.main(["verify", "--only", "metrics"]) == 0
    assert cli.main(["verify", "--only", "reachability"]) == 1
    assert "oracle checks passed" in capsys.readouterr().out


def test_ablate_clip_length_rows(full_run, tmp_path):
    out = tmp_path / "abl"
    assert cli.main(["ablate", "--axis", "clip-length", "--config", TINY, "--data", str(full_run / "data"),
                     "--out", str(out)]) == 0
    with open(out / "ablation_clip-length.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["setting"]) for r in rows] == [1, 2, 3, 4, 5]
    ref = [r for r in rows if r["setting"] == "4"][0]
    assert float(ref["p_value"]) == 1.0
    assert all(0.0 <= float(r["p_value"]) <= 1.0 for r in rows)


def test_ablate_pairs_too_few_videos_is_reported(full_run, tmp_path, capsys):
    rc = cli.main(["ablate", "--axis", "pairs", "--config", TINY, "--data", str(full_run / "data"),
                   "--out", str(tmp_path)])
    assert rc == 1
    assert "cross-video" in capsys.readouterr().err


def test_pairs_ablation_shares_stage1(full_run):
    from stswincl import data
    cfg = load_config(TINY)
    ds = data.load_dataset(full_run / "data")
    rows = experiments.ablate(cfg, ds, "pairs", values=[(0, 0), (1, 2)])
    assert [r["setting"] for r in rows] == ["(0,0)", "(1,2)"]
    assert rows[1]["p_value"] == 1.0
    # (1,2) is the tiny config's own key setting, so it reproduces the plain run
    rep = json.loads((full_run / "report_test.json").read_text())
    assert rows[1]["mIoU"] == pytest.approx(rep["overall"]["mIoU"], abs=1e-12)
