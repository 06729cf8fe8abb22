"""Four-point learning-rate sweep on the multi-domain preset.

Runs every algorithm at each rate in SWEEP_LRS (one seed by default), prints
the final mean accuracy table and the best rate per algorithm (ties broken by
the lower final training loss). Results are
appended to a CSV so an interrupted sweep can resume.

    python scripts/lr_sweep.py --out sweep.csv [--algorithms FedAvg,FedWon] [--seeds 0]
"""

import argparse
import csv
import sys
import time
from pathlib import Path

from normfree_fl.errors import NonFiniteError
from normfree_fl.experiment import run_experiment
from normfree_fl.presets import ALL_ALGORITHMS, SWEEP_LRS, multi_domain


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="lr_sweep.csv")
    ap.add_argument("--algorithms", default=",".join(ALL_ALGORITHMS))
    ap.add_argument("--lrs", default=",".join(map(str, SWEEP_LRS)))
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--rounds", type=int, default=None)
    ap.add_argument("--workdir", default="runs/lr_sweep")
    args = ap.parse_args(argv)

    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    done = set()
    if out.exists():
        with open(out) as fh:
            done = {(r["algorithm"], float(r["lr"])) for r in csv.DictReader(fh)}
    else:
        out.write_text("algorithm,lr,seeds,mean_acc,final_loss,seconds\n")

    for algo in args.algorithms.split(","):
        for lr in (float(v) for v in args.lrs.split(",")):
            if (algo, lr) in done:
                continue
            extra = [f"federation.rounds={args.rounds}"] if args.rounds is not None else []
            cfg = multi_domain(algo, seeds, lr, extra)
            t = time.time()
            try:
                s = run_experiment(cfg, Path(args.workdir) / f"{algo}_lr{lr}")
                acc, loss = s.overall_mean, s.final_loss[0]
            except NonFiniteError as exc:
                # a diverged run counts as the worst possible score at this rate
                print(f"{algo} lr={lr} diverged: {exc}", file=sys.stderr)
                acc, loss = 0.0, float("nan")
            row = [algo, lr, " ".join(map(str, seeds)), acc, loss, round(time.time() - t)]
            with open(out, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(row)
            print(*row, flush=True)

    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    def score(r):
        # accuracy first; ties go to the lower final training loss (diverged runs have nan loss)
        loss = float(r["final_loss"])
        return float(r["mean_acc"]), -loss if loss == loss else float("-inf")

    best = {}
    for r in rows:
        if r["algorithm"] not in best or score(r) > score(best[r["algorithm"]]):
            best[r["algorithm"]] = r
    print("\nbest learning rate per algorithm")
    for algo, r in best.items():
        print(f"  {algo:9s} lr={r['lr']:<5} mean_acc={float(r['mean_acc']):.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
