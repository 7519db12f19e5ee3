"""Command-line pipeline: synthesise, degrade, train the source model, adapt, evaluate, report.

Every subcommand reads one declarative experiment document (YAML or JSON)
and writes its outputs, plus a ``run.json`` provenance record, below
``--out``::

    <out>/data/clean/             gen-data
    <out>/data/<kind>/            degrade
    <out>/source/                 train-source
    <out>/adapt/<method>/seed_<s>/  adapt
    <out>/eval/                   eval
    <out>/report/                 report

Exit status: 0 success, 1 runtime failure, 2 invalid configuration,
3 missing upstream artifact.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import statistics
import sys
import time
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch
import yaml

from . import __version__
from .datagen import DatasetManifest, GenConfig, VideoDataset, build_dataset
from .degrade import KINDS, degrade_dataset
from .detector import DetectorConfig, TrainConfig, load_checkpoint, save_checkpoint, train_source
from .eval import MetricsRecord, evaluate_model, report
from .sfda import (AdaptationConfig, AugmentConfig, EntropyTrace, adapt, baseline_basic_mt,
                   baseline_pseudo_label, oracle_finetune)

log = logging.getLogger("starmt")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3
METHODS = ("star_mt", "basic_mt", "pseudo_label", "oracle")
RUN_FILE = "run.json"


class ConfigError(Exception):
    """The experiment document does not match the schema."""


class MissingArtifact(Exception):
    """An upstream stage has not been run (or its output is incomplete)."""


class StaleOutput(Exception):
    """Output exists from a different configuration and ``--force`` was not given."""


# ----------------------------------------------------------------------------
# configuration


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


@dataclasses.dataclass
class DataBlock:
    n_sequences: int = 80
    split_ratios: tuple[float, float, float] = (0.75, 0.0, 0.25)
    gen: dict = dataclasses.field(default_factory=dict)
    root: str | None = None  # externally prepared clean dataset; skips generation


@dataclasses.dataclass
class DegradationBlock:
    kind: str = "noise"


@dataclasses.dataclass
class AdaptBlock:
    methods: tuple[str, ...] = METHODS
    n_seeds: int = 3
    config: dict = dataclasses.field(default_factory=dict)


@dataclasses.dataclass
class EvalBlock:
    k: int = 30
    nms_iou: float = 0.5
    conf_thresh: float = 0.05
    snapshots: bool = True


@dataclasses.dataclass
class ExperimentConfig:
    """The whole experiment: one block per stage, an output directory and a master seed."""
    out: str = "runs/experiment"
    seed: int = 0
    data: DataBlock = dataclasses.field(default_factory=DataBlock)
    degradation: DegradationBlock = dataclasses.field(default_factory=DegradationBlock)
    source: dict = dataclasses.field(default_factory=dict)
    adapt: AdaptBlock = dataclasses.field(default_factory=AdaptBlock)
    eval: EvalBlock = dataclasses.field(default_factory=EvalBlock)

    # typed views of the free-form blocks -----------------------------------
    def gen_config(self) -> GenConfig:
        return GenConfig.from_dict(self.data.gen)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.source)

    def adaptation_config(self, seed: int) -> AdaptationConfig:
        cfg = AdaptationConfig.from_dict(self.adapt.config)
        cfg.seed = seed
        return cfg

    def adapt_seeds(self) -> list[int]:
        return [derive_seed(self.seed, f"adapt/{i}") for i in range(self.adapt.n_seeds)]

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self, *sections: str) -> str:
        d = self.to_dict()
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _check_keys(d: Any, allowed: set[str], where: str) -> dict:
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(d).__name__}")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown key '{where + '.' if where else ''}{unknown[0]}'"
                          + (f" (and {len(unknown) - 1} more)" if len(unknown) > 1 else ""))
    return d


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a raw experiment document, rejecting any key the schema does not know."""
    raw = _check_keys(raw, _fields(ExperimentConfig), "")
    try:
        data = _check_keys(raw.get("data"), _fields(DataBlock), "data")
        _check_keys(data.get("gen"), _fields(GenConfig), "data.gen")
        deg = _check_keys(raw.get("degradation"), _fields(DegradationBlock), "degradation")
        src = _check_keys(raw.get("source"), _fields(TrainConfig), "source")
        _check_keys(src.get("detector"), _fields(DetectorConfig), "source.detector")
        ad = _check_keys(raw.get("adapt"), _fields(AdaptBlock), "adapt")
        acfg = _check_keys(ad.get("config"), _fields(AdaptationConfig), "adapt.config")
        _check_keys(acfg.get("augment"), _fields(AugmentConfig), "adapt.config.augment")
        ev = _check_keys(raw.get("eval"), _fields(EvalBlock), "eval")

        cfg = ExperimentConfig(
            out=str(raw.get("out", ExperimentConfig.out)),
            seed=int(raw.get("seed", 0)),
            data=DataBlock(**{**data, **({"split_ratios": tuple(data["split_ratios"])}
                                         if "split_ratios" in data else {})}),
            degradation=DegradationBlock(**deg),
            source=dict(src),
            adapt=AdaptBlock(**{**ad, **({"methods": tuple(ad["methods"])} if "methods" in ad else {})}),
            eval=EvalBlock(**ev),
        )
        # build every typed block once so bad values surface now
        cfg.gen_config().validate()
        cfg.train_config()
        DetectorConfig.from_dict(cfg.source.get("detector", {}))
        cfg.adaptation_config(0).validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    if cfg.degradation.kind not in KINDS:
        raise ConfigError(f"degradation.kind must be one of {KINDS}, got {cfg.degradation.kind!r}")
    bad = [m for m in cfg.adapt.methods if m not in METHODS]
    if bad:
        raise ConfigError(f"adapt.methods: unknown method {bad[0]!r}")
    if len(cfg.data.split_ratios) != 3:
        raise ConfigError("data.split_ratios needs three entries (train, val, test)")
    if cfg.adapt.n_seeds < 1:
        raise ConfigError("adapt.n_seeds must be >= 1")
    if cfg.data.root is not None and not (Path(cfg.data.root) / "manifest.json").exists():
        raise MissingArtifact(f"data.root {cfg.data.root} holds no dataset manifest")
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    """Read an experiment document, or the ``config`` block of a previous ``run.json``."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from e
    if isinstance(raw, dict) and "command" in raw and "config" in raw:
        raw = raw["config"]
    return parse_config(raw or {})


def derive_seed(master: int, name: str) -> int:
    """A 32-bit seed for the named stream, fixed by ``(master, name)``."""
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "little")
    return int(np.random.SeedSequence([master, tag]).generate_state(1)[0])


# ----------------------------------------------------------------------------
# provenance


def file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


LABEL_FILE = "labels.json"


def tree_hash(path: str | Path, skip: tuple[str, ...] = ()) -> str:
    """Content hash of a file or directory: sha256 over sorted ``(relative path, file hash)`` pairs.

    ``run.json`` files are left out so that provenance records do not feed
    back into the hashes of the artifacts they describe; files named in
    ``skip`` are neither opened nor hashed.
    """
    path = Path(path)
    if path.is_file():
        return file_hash(path)
    h = hashlib.sha256()
    for p in sorted(path.rglob("*")):
        if p.is_file() and p.name != RUN_FILE and p.name not in skip:
            h.update(p.relative_to(path).as_posix().encode() + b"\0" + file_hash(p).encode() + b"\n")
    return h.hexdigest()


@dataclasses.dataclass
class Layout:
    out: Path
    kind: str

    @property
    def clean(self) -> Path:
        return self.out / "data" / "clean"

    @property
    def degraded(self) -> Path:
        return self.out / "data" / self.kind

    @property
    def source(self) -> Path:
        return self.out / "source"

    def adapt(self, method: str, seed: int) -> Path:
        return self.out / "adapt" / method / f"seed_{seed}"

    @property
    def eval(self) -> Path:
        return self.out / "eval"

    @property
    def report(self) -> Path:
        return self.out / "report"


def _input_hashes(inputs: dict[str, Path], blind: frozenset[str] = frozenset()) -> dict[str, str]:
    """Hash every input; inputs named in ``blind`` are hashed without their label files."""
    return {k: tree_hash(p, (LABEL_FILE,) if k in blind else ()) for k, p in sorted(inputs.items())}


def _write_run(out_dir: Path, command: str, cfg: ExperimentConfig, section_hash: str,
               seeds: dict, inputs: dict[str, Path], extra: dict | None = None,
               blind: frozenset[str] = frozenset()) -> None:
    rec = {
        "command": command,
        "version": __version__,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "stage_hash": section_hash,
        "seeds": seeds,
        "inputs": {name: {"path": str(inputs[name]), "sha256": digest, "labels_hashed": name not in blind}
                   for name, digest in _input_hashes(inputs, blind).items()},
        "outputs_sha256": tree_hash(out_dir),
        "threads": torch.get_num_threads(),
        **(extra or {}),
    }
    (out_dir / RUN_FILE).write_text(json.dumps(rec, indent=1, sort_keys=True))


def _prepare(out_dir: Path, stage_hash: str, force: bool) -> bool:
    """Decide whether a stage must run; returns False when its output is already current."""
    run = out_dir / RUN_FILE
    if run.exists():
        prev = json.loads(run.read_text()).get("stage_hash")
        if not force:
            if prev == stage_hash:
                log.info("%s is up to date", out_dir)
                return False
            raise StaleOutput(f"{out_dir} was produced by a different configuration; rerun with --force")
    elif out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise StaleOutput(f"{out_dir} exists without a {RUN_FILE}; rerun with --force")
    if out_dir.exists():
        shutil.rmtree(out_dir)
    out_dir.mkdir(parents=True)
    return True


def _stage_hash(cfg: ExperimentConfig, sections: tuple[str, ...], inputs: dict[str, Path],
                blind: frozenset[str] = frozenset(), **extra) -> str:
    payload = {"config": cfg.hash(*sections), "seed": cfg.seed, "inputs": _input_hashes(inputs, blind), **extra}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _require(path: Path, what: str, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{what} not found at {path}; run `starmt {stage}` first")
    return path


# ----------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: ExperimentConfig, force: bool = False) -> Path:
    lay = Layout(Path(cfg.out), cfg.degradation.kind)
    if cfg.data.root is not None:
        log.info("using the external dataset at %s; nothing to generate", cfg.data.root)
        return Path(cfg.data.root)
    seed = derive_seed(cfg.seed, "data")
    h = _stage_hash(cfg, ("data",), {})
    if _prepare(lay.clean, h, force):
        build_dataset(cfg.gen_config(), cfg.data.n_sequences, cfg.data.split_ratios, seed, lay.clean,
                      force=True)
        _write_run(lay.clean, "gen-data", cfg, h, {"data": seed}, {})
    return lay.clean


def _clean_root(cfg: ExperimentConfig) -> Path:
    if cfg.data.root is not None:
        return Path(cfg.data.root)
    return _require(Layout(Path(cfg.out), cfg.degradation.kind).clean / "manifest.json",
                    "clean dataset", "gen-data").parent


def cmd_degrade(cfg: ExperimentConfig, force: bool = False) -> Path:
    lay = Layout(Path(cfg.out), cfg.degradation.kind)
    clean = _clean_root(cfg)
    seed = derive_seed(cfg.seed, f"degrade/{cfg.degradation.kind}")
    h = _stage_hash(cfg, ("degradation",), {"clean": clean})
    if _prepare(lay.degraded, h, force):
        degrade_dataset(DatasetManifest.load(clean), cfg.degradation.kind, seed, lay.degraded, force=True)
        _write_run(lay.degraded, "degrade", cfg, h, {"degrade": seed}, {"clean": clean})
    return lay.degraded


def cmd_train_source(cfg: ExperimentConfig, force: bool = False) -> Path:
    lay = Layout(Path(cfg.out), cfg.degradation.kind)
    clean = _clean_root(cfg)
    seed = derive_seed(cfg.seed, "source")
    h = _stage_hash(cfg, ("source",), {"clean": clean})
    if _prepare(lay.source, h, force):
        manifest = DatasetManifest.load(clean)
        val = VideoDataset(manifest, "val") if manifest.splits.get("val") else None
        train_source(VideoDataset(manifest, "train"), cfg.train_config(), seed, lay.source, tam_dataset=val)
        _write_run(lay.source, "train-source", cfg, h, {"source": seed}, {"clean": clean})
    return lay.source / "source.ckpt"


def _adapt_inputs(cfg: ExperimentConfig) -> dict[str, Path]:
    lay = Layout(Path(cfg.out), cfg.degradation.kind)
    return {
        "source": _require(lay.source / "source.ckpt", "source checkpoint", "train-source"),
        "target": _require(lay.degraded / "manifest.json", "degraded dataset", "degrade").parent,
    }


def run_method(method: str, source, target: DatasetManifest, config: AdaptationConfig, out_dir: Path | None):
    """Dispatch one adaptation method; ``oracle`` is the only one given labelled data."""
    if method == "star_mt":
        return adapt(source, target, config, out_dir=out_dir)
    if method == "basic_mt":
        return baseline_basic_mt(source, target, config, out_dir=out_dir)
    if method == "pseudo_label":
        return baseline_pseudo_label(source, target, config)
    if method == "oracle":
        return oracle_finetune(source, VideoDataset(target, "train", with_labels=True), config)
    raise ConfigError(f"unknown method {method!r}")


def cmd_adapt(cfg: ExperimentConfig, method: str | None = None, force: bool = False) -> list[Path]:
    lay = Layout(Path(cfg.out), cfg.degradation.kind)
    methods = [method] if method else list(cfg.adapt.methods)
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    inputs = _adapt_inputs(cfg)
    outs = []
    for m in methods:
        # only the oracle may depend on target labels, even through a provenance hash
        blind = frozenset() if m == "oracle" else frozenset({"target"})
        for seed in cfg.adapt_seeds():
            out_dir = lay.adapt(m, seed)
            h = _stage_hash(cfg, ("adapt",), inputs, blind, method=m, adapt_seed=seed)
            outs.append(out_dir)
            if not _prepare(out_dir, h, force):
                continue
            log.info("adapting with %s, seed %d", m, seed)
            start = time.perf_counter()
            res = run_method(m, load_checkpoint(inputs["source"]), DatasetManifest.load(inputs["target"]),
                             cfg.adaptation_config(seed), out_dir)
            save_checkpoint(res.model, out_dir / "model.ckpt")
            if res.final_teacher is not None and res.final_teacher is not res.model:
                save_checkpoint(res.final_teacher, out_dir / "final.ckpt")
            for it in sorted(res.snapshots):
                save_checkpoint(res.teacher_at(it), out_dir / "snapshots" / f"iter_{it:06d}.ckpt")
            (out_dir / "trace.json").write_text(json.dumps(
                {**res.trace.to_json(), "selected_iter": res.selected_iter}, indent=1))
            _write_run(out_dir, "adapt", cfg, h, {"adapt": seed}, inputs,
                       {"method": m, "selected_iter": res.selected_iter,
                        "adapt_seconds": time.perf_counter() - start}, blind)
    return outs


def _eval_one(model, data: VideoDataset, cfg: ExperimentConfig, model_id: str, **extra) -> MetricsRecord:
    rec = evaluate_model(model, data, cfg.eval.k, cfg.eval.nms_iou, cfg.eval.conf_thresh, model_id)
    rec.extra.update(extra)
    rec.wall_clock = 0.0  # timing varies between runs; keep records reproducible
    return rec


def cmd_eval(cfg: ExperimentConfig, force: bool = False) -> Path:
    """AP50 of the source model on clean and degraded test data and of every adapted model on degraded test.

    With ``eval.snapshots`` the stored teacher snapshots of each adaptation
    run are scored as well (diagnostics for the selection rule; test labels
    are read here, never during adaptation).
    """
    lay = Layout(Path(cfg.out), cfg.degradation.kind)
    inputs = {"clean": _clean_root(cfg), **_adapt_inputs(cfg)}
    runs = sorted(p for p in (lay.out / "adapt").glob("*/seed_*") if (p / RUN_FILE).exists()) \
        if (lay.out / "adapt").exists() else []
    for p in runs:
        inputs[f"adapt/{p.parent.name}/{p.name}"] = p
    h = _stage_hash(cfg, ("eval",), inputs)
    if not _prepare(lay.eval, h, force):
        return lay.eval
    clean_test = VideoDataset(DatasetManifest.load(inputs["clean"]), "test")
    target_test = VideoDataset(DatasetManifest.load(inputs["target"]), "test")
    source = load_checkpoint(inputs["source"])
    records = [_eval_one(source, clean_test, cfg, "source_only"),
               _eval_one(source, target_test, cfg, "source_only")]
    snapshots: dict[str, dict] = {}
    for p in runs:
        run = json.loads((p / RUN_FILE).read_text())
        method, seed = run["method"], run["seeds"]["adapt"]
        records.append(_eval_one(load_checkpoint(p / "model.ckpt"), target_test, cfg, method, seed=seed,
                                 selected_iter=run["selected_iter"]))
        snaps = sorted((p / "snapshots").glob("iter_*.ckpt")) if cfg.eval.snapshots else []
        if snaps:
            aps = {int(s.stem.split("_")[1]): evaluate_model(load_checkpoint(s), target_test, cfg.eval.k,
                                                             cfg.eval.nms_iou, cfg.eval.conf_thresh).map50
                   for s in snaps}
            snapshots[f"{method}/seed_{seed}"] = {"selected_iter": run["selected_iter"], "ap50": aps}
    rec_dir = lay.eval / "records"
    rec_dir.mkdir()
    for i, r in enumerate(records):
        tag = f"_seed{r.extra['seed']}" if "seed" in r.extra else ""
        r.save(rec_dir / f"{i:03d}_{r.model_id}_{r.dataset_id}{tag}.json")
    (lay.eval / "snapshot_ap50.json").write_text(json.dumps(snapshots, indent=1, sort_keys=True))
    _write_run(lay.eval, "eval", cfg, h, {}, inputs)
    return lay.eval


def summarize(records: list[MetricsRecord]) -> list[MetricsRecord]:
    """Collapse per-seed records to one per (model, dataset) holding the median AP50 over seeds."""
    groups: dict[tuple[str, str], list[MetricsRecord]] = {}
    for r in records:
        groups.setdefault((r.model_id, r.dataset_id), []).append(r)
    out = []
    for (model_id, dataset_id), rs in groups.items():
        med = copy.deepcopy(rs[0])
        med.map50 = float(statistics.median(r.map50 for r in rs))
        med.extra = {"seeds": [r.extra.get("seed") for r in rs], "ap50": [r.map50 for r in rs]}
        out.append(med)
    return out


def cmd_report(cfg: ExperimentConfig, force: bool = False) -> Path:
    lay = Layout(Path(cfg.out), cfg.degradation.kind)
    ev = _require(lay.eval / RUN_FILE, "evaluation results", "eval").parent
    h = _stage_hash(cfg, (), {"eval": ev})
    if not _prepare(lay.report, h, force):
        return lay.report
    records = [MetricsRecord.load(p) for p in sorted((ev / "records").glob("*.json"))]
    med = summarize(records)
    snaps = json.loads((ev / "snapshot_ap50.json").read_text())
    trace, snap_ap, selected = None, None, None
    curve_runs = sorted(k for k in snaps if k.startswith("star_mt/"))
    if curve_runs:
        key = curve_runs[0]
        t = json.loads((lay.out / "adapt" / key / "trace.json").read_text())
        trace = EntropyTrace(t["window"], t["iterations"], t["values"])
        snap_ap = {int(k): v for k, v in snaps[key]["ap50"].items()}
        selected = snaps[key]["selected_iter"]
    report(med, lay.report, trace, snap_ap, selected)
    summary = {
        "median_ap50": {f"{r.model_id}/{r.dataset_id}": r.map50 for r in med},
        "per_seed_ap50": {f"{r.model_id}/{r.dataset_id}": r.extra["ap50"] for r in med},
        "selection": {k: {"selected_iter": v["selected_iter"],
                          "selected_ap50": v["ap50"].get(str(v["selected_iter"])),
                          "best_ap50": max(v["ap50"].values())} for k, v in snaps.items()},
    }
    (lay.report / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    _write_run(lay.report, "report", cfg, h, {}, {"eval": ev})
    return lay.report


def cmd_all(cfg: ExperimentConfig, force: bool = False) -> Path:
    cmd_gen_data(cfg, force)
    cmd_degrade(cfg, force)
    cmd_train_source(cfg, force)
    cmd_adapt(cfg, None, force)
    cmd_eval(cfg, force)
    return cmd_report(cfg, force)


COMMANDS: dict[str, Callable] = {
    "gen-data": cmd_gen_data,
    "degrade": cmd_degrade,
    "train-source": cmd_train_source,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "report": cmd_report,
    "all": cmd_all,
}


# ----------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="starmt", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="experiment YAML/JSON, or a run.json to replay")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--out", help="override the output directory")
        sp.add_argument("--force", action="store_true", help="recompute and overwrite existing outputs")
        sp.add_argument("--device", default="cpu", help="cpu (GPU execution is not implemented)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "adapt":
            sp.add_argument("--method", choices=METHODS, help="run one method instead of adapt.methods")
    return p


def _threads() -> int:
    raw = os.environ.get("STARMT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"STARMT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"STARMT_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.device != "cpu":
            raise ConfigError(f"device {args.device!r} is not supported; only 'cpu' is implemented")
        torch.set_num_threads(_threads())
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out = args.out
        fn = COMMANDS[args.command]
        result = fn(cfg, args.method, args.force) if args.command == "adapt" else fn(cfg, args.force)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime error
        log.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    if isinstance(result, list):
        for r in result:
            print(r)
    else:
        print(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
