"""Run one of the scaled-down trend experiments and print its comparison table.

    python scripts/reproduce.py multi-domain   # all eight algorithms, B=32
    python scripts/reproduce.py small-batch    # FedWon at B=1 next to B=32
    python scripts/reproduce.py cross-device   # 50 clients, C=0.2, B=4
    python scripts/reproduce.py ablation       # WSConv vs plain conv, AGC at B=2

Runs land in ``--out`` (default runs/reproduce/<experiment>); summaries of
finished runs are reused, so the script can be restarted.
"""

import argparse
import sys
from pathlib import Path

from normfree_fl.experiment import RunSummary, compare_report, run_experiment
from normfree_fl.presets import ALL_ALGORITHMS, SMALL_BATCH_LR, cross_device, multi_domain


def plan(name, seeds):
    if name == "multi-domain":
        return [(a, multi_domain(a, seeds)) for a in ALL_ALGORITHMS]
    if name == "small-batch":
        return [("FedWon_B32", multi_domain("FedWon", seeds)),
                ("FedWon_B1", multi_domain("FedWon", seeds, SMALL_BATCH_LR[1], ["federation.batch_size=1"]))]
    if name == "cross-device":
        return [(a, cross_device(a, seeds)) for a in ("FedAvg", "FedWon")]
    if name == "ablation":
        b2 = ["federation.batch_size=2"]
        return [("plain_B32", multi_domain("FedWon", seeds, extra=["model.weight_standardization=false"])),
                ("wsconv_B32", multi_domain("FedWon", seeds)),
                ("agc_off_B2", multi_domain("FedWon", seeds, SMALL_BATCH_LR[2], b2 + ["optim.agc=off"])),
                ("agc_on_B2", multi_domain("FedWon", seeds, SMALL_BATCH_LR[2], b2 + ["optim.agc=on"]))]
    raise SystemExit(f"unknown experiment {name!r}")


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("experiment", choices=["multi-domain", "small-batch", "cross-device", "ablation"])
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out")
    args = ap.parse_args(argv)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    root = Path(args.out or f"runs/reproduce/{args.experiment}")
    summaries = []
    for label, cfg in plan(args.experiment, seeds):
        out = root / label
        done = out / "summary.json"
        if done.exists() and (out / "config.yaml").read_text() == cfg.to_yaml():
            s = RunSummary.from_json(done.read_text())
        else:
            print(f"running {label} ...", file=sys.stderr, flush=True)
            s = run_experiment(cfg, out)
        s.label = label
        summaries.append(s)
    rep = compare_report(summaries)
    print(rep.text, end="")
    (root / "report.csv").write_text(rep.csv)
    return 0


if __name__ == "__main__":
    sys.exit(main())
