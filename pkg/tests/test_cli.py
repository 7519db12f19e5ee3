import json
from pathlib import Path

import pytest
import yaml

from starmt import cli

TINY = {
    "seed": 5,
    "data": {"n_sequences": 6, "split_ratios": [0.5, 0.0, 0.5],
             "gen": {"T": 4, "H": 32, "W": 32, "n_objects": [1, 2], "size_range": [8.0, 14.0]}},
    "degradation": {"kind": "noise"},
    "source": {"backbone_iters": 6, "tam_iters": 4, "k": 5,
               "detector": {"widths": [4, 6, 8, 8], "tam_hidden": 8}},
    "adapt": {"n_seeds": 2, "config": {"total_iters": 4, "tau": 1, "k": 5, "entropy_window": 2,
                                       "frames_per_sequence": 4, "pl_threshold": 0.0, "tam_iters": 4}},
    "eval": {"k": 5},
}


def _write(tmp_path, doc, name="exp.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(doc))
    return str(p)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write(root, {**TINY, "out": str(root / "out")})
    assert cli.main(["all", "--config", cfg]) == 0
    return root, cfg


def test_unknown_key_exits_2_and_names_it(tmp_path, capsys):
    doc = {**TINY, "adapt": {**TINY["adapt"], "config": {"alpah": 0.9}}}
    assert cli.main(["gen-data", "--config", _write(tmp_path, doc)]) == cli.EXIT_CONFIG
    assert "unknown key 'adapt.config.alpah'" in capsys.readouterr().err
    assert cli.main(["gen-data", "--config", _write(tmp_path, {"colour": 1})]) == 2


def test_unknown_key_message(tmp_path):
    with pytest.raises(cli.ConfigError, match="unknown key 'source.detector.depth'"):
        cli.parse_config({"source": {"detector": {"depth": 3}}})


@pytest.mark.parametrize("doc", [
    {"degradation": {"kind": "rain"}},
    {"adapt": {"methods": ["star_mt", "dann"]}},
    {"adapt": {"config": {"tau": 0}}},
    {"data": {"gen": {"H": 30}}},
    {"adapt": {"n_seeds": 0}},
])
def test_invalid_values_exit_2(tmp_path, doc):
    assert cli.main(["gen-data", "--config", _write(tmp_path, doc)]) == 2


def test_missing_inputs_exit_3(tmp_path):
    cfg = _write(tmp_path, {**TINY, "out": str(tmp_path / "o")})
    assert cli.main(["adapt", "--config", cfg]) == cli.EXIT_MISSING
    assert cli.main(["train-source", "--config", cfg]) == 3
    assert cli.main(["report", "--config", cfg]) == 3
    assert cli.main(["all", "--config", str(tmp_path / "nope.yaml")]) == 3
    assert cli.main(["gen-data", "--config", _write(tmp_path, {"data": {"root": str(tmp_path / "x")}})]) == 3


def test_device_and_threads_are_checked(tmp_path, monkeypatch):
    cfg = _write(tmp_path, TINY)
    assert cli.main(["gen-data", "--config", cfg, "--device", "0"]) == 2
    monkeypatch.setenv("STARMT_THREADS", "zero")
    assert cli.main(["gen-data", "--config", cfg]) == 2


def test_dispatch(monkeypatch):
    called = []
    for name in ("adapt", "baseline_basic_mt", "baseline_pseudo_label", "oracle_finetune"):
        monkeypatch.setattr(cli, name, lambda *a, _n=name, **k: called.append((_n, a[1])))

    class FakeManifest:
        pass
    target = FakeManifest()
    monkeypatch.setattr(cli, "VideoDataset", lambda m, split, with_labels: ("labelled", split, with_labels))
    for m in cli.METHODS:
        cli.run_method(m, None, target, None, None)
    assert [c[0] for c in called] == ["adapt", "baseline_basic_mt", "baseline_pseudo_label", "oracle_finetune"]
    assert called[-1][1] == ("labelled", "train", True)
    assert all(c[1] is target for c in called[:3])


def test_pipeline_layout_and_provenance(pipeline):
    root, _ = pipeline
    out = root / "out"
    for sub in ("data/clean", "data/noise", "source", "eval", "report"):
        run = json.loads((out / sub / "run.json").read_text())
        assert run["config_hash"] and "outputs_sha256" in run
        for item in run["inputs"].values():
            assert item["sha256"] == cli.tree_hash(item["path"])
    for p in (out / "adapt").glob("*/seed_*"):
        target = json.loads((p / "run.json").read_text())["inputs"]["target"]
        assert target["labels_hashed"] == (p.parent.name == "oracle")
    runs = sorted((out / "adapt").glob("*/seed_*"))
    assert len(runs) == 4 * 2
    assert {p.parent.name for p in runs} == set(cli.METHODS)
    for p in runs:
        assert (p / "model.ckpt").exists()
    star = next(p for p in runs if p.parent.name == "star_mt")
    assert sorted(x.name for x in (star / "snapshots").iterdir()) == ["iter_000000.ckpt", "iter_000002.ckpt"]
    summary = json.loads((out / "report" / "summary.json").read_text())
    assert set(summary["median_ap50"]) == {"source_only/clean", "source_only/noise"} | {
        f"{m}/noise" for m in cli.METHODS}
    table = (out / "report" / "ap50_table.txt").read_text().splitlines()
    assert [line.split()[0] for line in table[2:]] == ["Source-only", "PL", "Basic", "STAR-MT", "Oracle"]
    assert (out / "report" / "entropy_curve.png").exists()


def test_rerun_is_a_no_op_and_changes_need_force(pipeline, tmp_path):
    root, cfg = pipeline
    out = root / "out"
    before = {p: p.stat().st_mtime_ns for p in out.rglob("*") if p.is_file()}
    assert cli.main(["all", "--config", cfg]) == 0
    assert {p: p.stat().st_mtime_ns for p in out.rglob("*") if p.is_file()} == before

    changed = _write(tmp_path, {**TINY, "out": str(out), "source": {**TINY["source"], "backbone_iters": 7}})
    assert cli.main(["train-source", "--config", changed]) == cli.EXIT_RUNTIME
    assert (out / "source" / "source.ckpt").stat().st_mtime_ns == before[out / "source" / "source.ckpt"]


def test_replay_from_run_json_is_bit_identical(pipeline, tmp_path):
    root, _ = pipeline
    out2 = tmp_path / "replay"
    assert cli.main(["all", "--config", str(root / "out" / "report" / "run.json"), "--out", str(out2)]) == 0
    a = (root / "out" / "report" / "summary.json").read_bytes()
    assert a == (out2 / "report" / "summary.json").read_bytes()
    for rec in (root / "out" / "eval" / "records").iterdir():
        assert rec.read_bytes() == (out2 / "eval" / "records" / rec.name).read_bytes()


def test_force_recomputes_identically(pipeline):
    root, cfg = pipeline
    ckpt = root / "out" / "source" / "source.ckpt"
    data = ckpt.read_bytes()
    assert cli.main(["train-source", "--config", cfg, "--force"]) == 0
    assert ckpt.read_bytes() == data


def test_single_method_adapt(tmp_path, pipeline):
    root, cfg = pipeline
    assert cli.main(["adapt", "--config", cfg, "--method", "oracle"]) == 0


def test_target_labels_only_read_by_oracle(pipeline, monkeypatch, tmp_path):
    import builtins
    root, _ = pipeline
    doc = {**TINY, "out": str(root / "out"), "adapt": {**TINY["adapt"], "n_seeds": 1}}
    cfg = cli.parse_config(doc)
    cfg.out = str(tmp_path / "o")
    import shutil
    for sub in ("data", "source"):
        shutil.copytree(root / "out" / sub, tmp_path / "o" / sub)
    target = str(tmp_path / "o" / "data" / "noise")
    opened = []
    real = builtins.open

    def spy(f, *a, **k):
        if str(f).startswith(target) and Path(str(f)).name == "labels.json":
            opened.append(str(f))
        return real(f, *a, **k)
    monkeypatch.setattr(builtins, "open", spy)
    monkeypatch.setattr(Path, "read_text", lambda self, *a, **k: spy(self, *a, **k).read())
    for m in ("star_mt", "basic_mt", "pseudo_label"):
        cli.cmd_adapt(cfg, m)
    assert opened == []
    cli.cmd_adapt(cfg, "oracle")
    assert opened
