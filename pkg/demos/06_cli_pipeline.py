"""Drive the whole experiment from the command line.

``starmt all`` chains the stages gen-data, degrade, train-source, adapt,
eval and report.  Every stage writes a ``run.json`` with the resolved
configuration, seeds and input hashes; rerunning with an unchanged
configuration is a no-op, and any ``run.json`` can be fed back as
``--config`` to replay that run exactly.

This demo uses a deliberately tiny configuration so it finishes in about a
minute; configs/desk.yaml is the full-size experiment.

    python demos/06_cli_pipeline.py [out_dir]
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

import yaml

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp()) / "run"
cfg = {
    "data": {"n_sequences": 8, "split_ratios": [0.5, 0.0, 0.5],
             "gen": {"T": 4, "H": 48, "W": 48, "size_range": [10.0, 18.0]}},
    "degradation": {"kind": "haze"},
    "source": {"backbone_iters": 200, "tam_iters": 20},
    "adapt": {"n_seeds": 1, "config": {"total_iters": 40, "tau": 10, "entropy_window": 10,
                                        "frames_per_sequence": 4, "tam_iters": 20,
                                        "pl_threshold": 0.05}},
}
cfg_path = out.parent / "tiny.yaml"
cfg_path.parent.mkdir(parents=True, exist_ok=True)
cfg_path.write_text(yaml.safe_dump(cfg))


def starmt(*args):
    cmd = [sys.executable, "-m", "starmt.cli", *args]
    print("$ starmt", " ".join(args))
    return subprocess.run(cmd, capture_output=True, text=True)


proc = starmt("all", "--config", str(cfg_path), "--out", str(out))
if proc.returncode:
    sys.exit(proc.stderr)
print((out / "report" / "ap50_table.txt").read_text())
print("stages:", sorted(p.name for p in out.iterdir()))

run = json.loads((out / "report" / "run.json").read_text())
print("report run.json keys:", sorted(run))

proc = starmt("all", "--config", str(cfg_path), "--out", str(out))
print("rerun exit code:", proc.returncode, "(nothing recomputed)")

bad = cfg_path.with_name("typo.yaml")
bad.write_text(yaml.safe_dump({**cfg, "adapt": {"config": {"alpah": 0.9}}}))
proc = starmt("all", "--config", str(bad), "--out", str(out))
print("typo exit code:", proc.returncode, "->", proc.stderr.strip().splitlines()[-1])

replay = out.parent / "replay"
starmt("all", "--config", str(out / "report" / "run.json"), "--out", str(replay))
same = (out / "report" / "summary.json").read_bytes() == (replay / "report" / "summary.json").read_bytes()
print("replayed summary identical:", same)
