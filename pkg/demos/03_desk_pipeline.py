"""
The desk-scale pipeline through the experiment runner
=====================================================

Runs every stage of ``configs/desk.cfg`` into ``runs/desk`` (or the
directory given as the first argument), the same way the ``lst`` command
does. Meta-training dominates: roughly ten minutes on one core. Pass
``--quick`` to shrink meta-training and evaluation for a smoke run.
"""

import sys
from pathlib import Path

from lst.config import load
from lst.harness import run

args = [a for a in sys.argv[1:] if not a.startswith("--")]
out = Path(args[0]) if args else Path("runs/desk")
cfg = load(Path(__file__).resolve().parents[1] / "configs" / "desk.cfg")
episodes = None
if "--quick" in sys.argv:
    cfg = cfg.replace(meta_iterations=20, eval_interval=10, val_episodes=5)
    episodes = 20

for sub in ("pretrain", "meta-train", "ablate", "sweep-retrain", "sweep-distractors", "report"):
    print(f"\n### lst {sub}")
    run(cfg, sub, out, None if sub == "pretrain" else episodes)

print(f"\nartifacts under {out}/; the summary is in {out}/report/report.txt")
