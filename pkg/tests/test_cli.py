import filecmp

import numpy as np
import pytest

from echoscale.cli import bar_chart_svg, main, run
from echoscale.core import avst

TINY_INI = """
[data]
height = 32
width = 64
interval = 1
[avsnet]
widths = 4,4,8,8,8
n_bins = 8
n_heads = 2
steps = 3
batch = 2
[selfsup]
widths = 4,4,8,8,8
steps = 3
batch = 2
"""


def trees_equal(a, b):
    cmp = filecmp.dircmp(a, b)
    if cmp.left_only or cmp.right_only or cmp.diff_files or cmp.funny_files:
        return False
    files = [p.relative_to(a) for p in a.rglob("*") if p.is_file()]
    return all((a / f).read_bytes() == (b / f).read_bytes() for f in files)


@pytest.fixture
def ini(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY_INI)
    return str(p)


@pytest.fixture
def dataset(tmp_path, ini):
    out = tmp_path / "data"
    assert run(["synth-data", "--config", ini, "--scenes", "5", "--frames", "3", "--seed", "1", "--out", str(out)]).exit_code == 0
    return out


def test_eval_identical_maps(tmp_path, capsys):
    d = np.random.default_rng(0).uniform(1, 8, (8, 8)).astype(np.float32)
    avst.save(tmp_path / "p.avst", d)
    avst.save(tmp_path / "g.avst", d)
    res = run(["eval", "--pred", str(tmp_path / "p.avst"), "--gt", str(tmp_path / "g.avst"), "--max-depth", "12", "--out", str(tmp_path / "e.tsv")])
    assert res.exit_code == 0
    mean = [l for l in capsys.readouterr().out.splitlines() if l.startswith("mean")][0]
    assert [float(v) for v in mean.split("\t")[1:]] == [0, 0, 0, 0, 1, 1, 1]


def test_usage_errors_exit_one(tmp_path):
    assert run(["bogus"]).exit_code == 1
    assert run([]).exit_code == 1
    assert run(["eval", "--pred", "x", "--out", str(tmp_path / "o"), "--gt", "y", "--nope"]).exit_code == 1
    assert main(["scale", "--out", "x"]) == 1


def test_runtime_failure_exits_two(tmp_path):
    res = run(["eval", "--pred", str(tmp_path / "none"), "--gt", str(tmp_path), "--out", str(tmp_path / "e.tsv")])
    assert res.exit_code == 2 and "FileNotFoundError" in res.message


def test_help_exits_zero(capsys):
    assert run(["--help"]).exit_code == 0


def test_synth_data_is_bytewise_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run(["synth-data", "--scenes", "2", "--frames", "50", "--seed", "7", "--out", str(out)]).exit_code == 0
    assert trees_equal(a, b)
    assert len(list(a.rglob("*.wav"))) == 100


def test_stft_on_file_and_dataset(tmp_path, dataset):
    wav = next(dataset.rglob("*.wav"))
    res = run(["stft", "--data", str(wav), "--out", str(tmp_path / "s.avst")])
    assert res.exit_code == 0 and avst.load(tmp_path / "s.avst").shape == (2, 257, 24)
    res = run(["stft", "--data", str(dataset), "--out", str(tmp_path / "specs")])
    assert res.exit_code == 0 and len(res.artifacts) == 15


def test_full_pipeline(tmp_path, dataset, ini, capsys):
    t = str(tmp_path)
    common = ["--config", ini, "--seed", "0"]
    assert run(["train-avsnet", "--data", str(dataset), *common, "--out", t + "/avs"]).exit_code == 0
    assert run(["train-avsnet", "--data", str(dataset), "--no-audio", *common, "--out", t + "/rgb"]).exit_code == 0
    assert run(["train-relative", "--data", str(dataset), "--scales", "3", *common, "--out", t + "/rel"]).exit_code == 0
    for name in ("avs", "rgb", "rel"):
        assert run(["infer", "--data", str(dataset), "--model", f"{t}/{name}", "--split", "test", *common, "--out", f"{t}/pred_{name}"]).exit_code == 0
    assert len(list((tmp_path / "pred_avs").rglob("*.avst"))) == 3
    for method in ("median", "meanstd"):
        res = run(["scale", "--pred", t + "/pred_rel", "--pseudo", t + "/pred_avs", "--method", method, "--max-depth", "12", "--out", f"{t}/scaled_{method}"])
        assert res.exit_code == 0
        assert (tmp_path / f"scaled_{method}" / "factors.tsv").read_text().count(f"method = {method}") == 3
    for name in ("pred_avs", "pred_rgb", "scaled_median"):
        assert run(["eval", "--pred", f"{t}/{name}", "--gt", str(dataset), "--out", f"{t}/evals/{name}.tsv"]).exit_code == 0
    res = run(["report", "--data", t + "/evals", "--out", t + "/report"])
    assert res.exit_code == 0
    header = (tmp_path / "report" / "table.tsv").read_text().splitlines()[0].split("\t")
    assert header == ["method", "Abs Rel", "Sq Rel", "RMSE", "RMSE log", "d1", "d2", "d3"]
    assert (tmp_path / "report" / "abs_rel.svg").read_text().startswith("<svg")
    res = run(["saliency", "--data", str(dataset), "--model", t + "/avs", "--split", "test", *common, "--out", t + "/sal"])
    assert res.exit_code == 0
    assert run(["saliency", "--data", str(dataset), "--model", t + "/rgb", "--out", t + "/sal2"]).exit_code == 2


def test_training_commands_are_reproducible(tmp_path, dataset, ini):
    for out in ("a", "b"):
        assert run(["train-avsnet", "--data", str(dataset), "--config", ini, "--seed", "3", "--out", str(tmp_path / out)]).exit_code == 0
    assert trees_equal(tmp_path / "a", tmp_path / "b")


def test_svg_is_deterministic():
    assert bar_chart_svg(["a", "b"], [0.1, 0.2], "t") == bar_chart_svg(["a", "b"], [0.1, 0.2], "t")
