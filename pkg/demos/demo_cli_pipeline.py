"""
The command-line pipeline end to end
====================================

Generates a dataset, trains with checkpoints and runs every analysis
subcommand on the last checkpoint. The same steps from a shell::

    lowrank-ggn gen-data --out work/data --seed 0
    lowrank-ggn train --data work/data --out work/run --seed 0
    lowrank-ggn spectrum --data work/data --out work/out work/run/checkpoint_000040.json
    ...
"""

# %%
import sys
import tempfile
from pathlib import Path

from lowrank_ggn.cli import main

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp())
data, run, out = work / "data", work / "run", work / "out"
assert main(["gen-data", "--out", str(data), "--seed", "0"]) == 0
assert main(["train", "--data", str(data), "--out", str(run), "--seed", "0"]) == 0
last = str(sorted(run.glob("checkpoint_*.json"))[-1])
print("last checkpoint:", last)

# %%
shared = ["--data", str(data), "--out", str(out), "--seed", "0"]
for cmd in (["spectrum", last],
            ["overlap", "--reference", "fd_hessian", "--samples", "sub", "--sub-size", "4", last],
            ["derivs", "--curvature", "mc", last],
            ["newton", "--newton-mode", "inversion_lemma", "--block", "layerwise", last],
            ["bench", "--bench-repeats", "3", last]):
    assert main([cmd[0], *shared, *cmd[1:]]) == 0

# %%
for path in sorted(out.iterdir()):
    lines = path.read_text().splitlines()
    print(f"--- {path.name} ({len(lines)} lines)")
    print("\n".join(lines[:4]))
