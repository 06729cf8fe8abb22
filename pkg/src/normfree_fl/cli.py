"""Command line front end: ``run``, ``report``, ``dump-data`` and ``bn-stats``.

Failures print one JSON line ``{"error": category, "type": ..., "message": ...}``
to stderr and exit with status 2 (usage) or 1 (everything else).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .datagen import default_domain_specs, dump_dataset, gen_domains
from .errors import SimError, VariantMismatch
from .experiment import RunSummary, compare_report, load_config, output_root, run_experiment
from .federation import bn_mean_gap, bn_stats_report
from .model import from_checkpoint
from .tensor_core import RngStream


def _cmd_run(args) -> int:
    cfg = load_config(args.config, args.set or [])
    out = Path(args.out) if args.out else None

    def progress(seed, rec):
        if not args.quiet:
            print(f"seed {seed} round {rec.round + 1}: mean_acc={rec.mean_acc:.4f} "
                  f"loss={rec.mean_loss:.4f}", file=sys.stderr)

    summary = run_experiment(cfg, out, progress)
    print(compare_report([summary]).text, end="")
    print(f"results in {summary.output_dir}")
    return 0


def _cmd_report(args) -> int:
    summaries = [RunSummary.from_json(Path(p).read_text()) for p in args.summaries]
    rep = compare_report(summaries)
    print(rep.text, end="")
    if args.csv:
        Path(args.csv).write_text(rep.csv)
    return 0


def _cmd_dump(args) -> int:
    cfg = load_config(args.config, args.set or [])
    ds = cfg.dataset
    seed = cfg.seeds[0] if args.seed is None else args.seed
    specs = default_domain_specs(ds.domains, ds.gap, ds.noise, ds.jitter)
    domains = gen_domains(ds.domains, ds.classes, ds.train_per_domain, ds.test_per_domain,
                          tuple(ds.image_shape), RngStream(seed).split("data"), domain_specs=specs)
    out = Path(args.out) if args.out else output_root() / cfg.output_dir / "data"
    print(dump_dataset(out, domains, specs))
    return 0


def _cmd_bn_stats(args) -> int:
    """Per-channel running statistics from the client overlays stored in a checkpoint."""
    ckpt = json.loads(Path(args.checkpoint).read_text())
    model = from_checkpoint(Path(args.checkpoint).read_text())
    overlays = ckpt.get("extra", {}).get("client_overlays")
    if overlays:
        import numpy as np

        models = {int(cid): model.replace({k: np.asarray(v) for k, v in ov.items()}) for cid, ov in overlays.items()}
    elif model.variant == "bn":
        models = {0: model}
    else:
        raise VariantMismatch("checkpoint holds no batch-norm statistics")
    rows = bn_stats_report(models, args.layer)
    w = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    ids = sorted(models)
    if len(ids) >= 2:
        print(f"# mean |channel-mean gap| client {ids[0]} vs {ids[1]}: {bn_mean_gap(rows, ids[0], ids[1]):.6g}",
              file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="normfree-fl", description="Multi-domain federated learning simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. federation.rounds=5")
    r.add_argument("--out", help="run directory (default: $NFFL_OUTPUT_ROOT/<output_dir>)")
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(func=_cmd_run)

    rep = sub.add_parser("report", help="compare run summaries")
    rep.add_argument("summaries", nargs="+")
    rep.add_argument("--csv", help="also write the table as CSV")
    rep.set_defaults(func=_cmd_report)

    d = sub.add_parser("dump-data", help="write the synthetic dataset of a config to disk")
    d.add_argument("config")
    d.add_argument("--set", action="append", metavar="KEY=VALUE")
    d.add_argument("--seed", type=int)
    d.add_argument("--out")
    d.set_defaults(func=_cmd_dump)

    b = sub.add_parser("bn-stats", help="channel-wise BN running statistics per client")
    b.add_argument("checkpoint")
    b.add_argument("--layer", type=int, default=1)
    b.set_defaults(func=_cmd_bn_stats)
    return p


def _fail(category: str, exc: BaseException) -> None:
    print(json.dumps({"error": category, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except SimError as exc:
        _fail(exc.category, exc)
        return 1
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        _fail("io", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
