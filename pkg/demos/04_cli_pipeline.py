"""
The command-line pipeline end to end
====================================

gen -> maps -> train (every arm) -> eval -> report on a reduced cohort,
driven through the same entry point as the ``octhybrid`` command. The
equivalent shell session is::

    octhybrid gen --config small.json --seed 11 --out work/bundle
    octhybrid maps work/bundle --config small.json --seed 11
    octhybrid train work/bundle hybrid-2ch --config small.json --seed 11 --out work/run
    octhybrid eval work/bundle --config small.json --seed 11 --out work/run
    octhybrid report work/run
"""

import json
import sys
import tempfile
from pathlib import Path

from octhybrid.cli import main

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="octhybrid-"))
config = work / "small.json"
work.mkdir(parents=True, exist_ok=True)
config.write_text(json.dumps({
    "cohort": {"n_normal_subjects": 20, "n_pg_subjects": 25},
    "train": {"epochs": 40},
}))
common = ["--config", str(config), "--seed", "11"]
bundle, run = work / "bundle", work / "run"


def step(*argv):
    code = main([*argv, *common])
    if code != 0:
        raise SystemExit(f"step {argv[0]} failed with exit code {code}")


step("gen", "--out", str(bundle), "--force")
step("maps", str(bundle))
for arm in ("logit-a", "logit-b", "hybrid-1ch", "hybrid-2ch"):
    step("train", str(bundle), arm, "--out", str(run), "--force")
step("eval", str(bundle), "--out", str(run))
step("report", str(run))

# a second gen into the same directory without --force is refused (exit 2)
assert main(["gen", "--out", str(bundle), *common]) == 2

print((run / "report.md").read_text().split("## Configuration")[0])
print(f"outputs in {work}")
