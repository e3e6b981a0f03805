"""Command line: ``litm gen | train | eval | report``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from collections import defaultdict

import numpy as np

from . import data as data_io
from ._io import atomic_write_text
from .errors import ConfigError, LitmError
from .evaluation import evaluate_model, format_table
from .model import describe, load_checkpoint
from .numeric import RandomSource
from .trainer import load_config, model_config_from, train

EXIT_IO = 12


def _cmd_gen(args):
    if args.from_csv:
        ds = data_io.import_csv(args.from_csv, R=args.R)
    else:
        if not args.config:
            raise ConfigError("gen needs --config or --from-csv")
        synth, _, _ = load_config(args.config)
        if synth is None:
            raise ConfigError(f"{args.config} has no 'synth' section")
        if args.seed is not None:
            synth = {**synth, "seed": args.seed}
        ds = data_io.generate(data_io.SynthConfig.from_dict(synth))
    data_io.save(args.out, ds)
    print(f"wrote {len(ds)} samples ({ds.n_ids} identities, R={ds.R}, d_in={ds.d_in}) to {args.out}")


def _cmd_train(args):
    _, model, tcfg = load_config(args.config)
    if args.seed is not None:
        tcfg = type(tcfg).from_dict({**tcfg.to_dict(), "seed": args.seed})
    if args.epochs is not None:
        d = tcfg.to_dict()
        d["epochs"] = args.epochs
        d["lr_breakpoint"] = min(d["lr_breakpoint"], args.epochs)
        tcfg = type(tcfg).from_dict(d)
    ds = data_io.load(args.data)
    mcfg = model_config_from(model, ds.d_in)
    echo = {"model": mcfg.to_dict(), "train": tcfg.to_dict()}
    print(json.dumps(echo, indent=2))
    for line in describe(mcfg):
        print("#", line)

    hard_fh = open(args.hard_sets, "w") if args.hard_sets else None
    try:
        result = train(ds, mcfg, tcfg, checkpoint_path=args.out,
                       metrics_path=None if args.dry_run else args.metrics,
                       dry_run=args.dry_run,
                       hard_set_log=hard_fh.write if hard_fh else None)
    finally:
        if hard_fh:
            hard_fh.close()
    if result.metrics:
        first, last = result.metrics[0]["total"], result.metrics[-1]["total"]
        print(f"{len(result.metrics)} iterations, loss {first:.4f} -> {last:.4f}")
    print(f"checkpoint: {args.out}")


def _cmd_eval(args):
    params, mcfg = load_checkpoint(args.checkpoint)
    ds = data_io.load(args.data)
    q_idx, g_idx = data_io.split_queries(ds, args.split, RandomSource(args.seed))
    if args.stage == "final":
        stages = [mcfg.M]
    elif args.stage == "all":
        stages = list(range(mcfg.M + 1))
    else:
        j = int(args.stage)
        if not 0 <= j <= mcfg.M:
            raise ConfigError(f"stage {j} outside 0..{mcfg.M}")
        stages = [j]
    reports = evaluate_model(params, mcfg, ds, q_idx, g_idx, stages=stages, k_max=args.k_max)
    doc = {"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split,
           "seed": args.seed, "reports": [r.to_dict() for r in reports]}
    if args.out:
        atomic_write_text(args.out, json.dumps(doc, indent=2) + "\n")
    if args.cmc_csv:
        atomic_write_text(args.cmc_csv, _cmc_csv(reports))
    print(format_table(reports), end="")


def _cmc_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k"] + [r.stage for r in reports])
    for k in range(len(reports[0].cmc)):
        w.writerow([k + 1] + [f"{r.cmc[k]:.6f}" for r in reports])
    return buf.getvalue()


def read_metrics(path):
    rows = []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise ConfigError(f"{path}:{n}: {exc}") from exc
    if not rows:
        raise ConfigError(f"{path}: empty metrics log")
    return rows


def summarize_metrics(rows, last_epochs=None):
    """Per-stage means of loss, d_ap, d_an and gap over the selected epochs."""
    epochs = sorted({r["epoch"] for r in rows})
    keep = set(epochs[-last_epochs:]) if last_epochs else set(epochs)
    sel = [r for r in rows if r["epoch"] in keep]
    n_stages = len(sel[0]["losses"])
    out = []
    for j in range(n_stages):
        out.append({
            "stage": f"f{j}",
            "loss": float(np.mean([r["losses"][j] for r in sel])),
            "d_ap": float(np.mean([r["d_ap"][j] for r in sel])),
            "d_an": float(np.mean([r["d_an"][j] for r in sel])),
            "gap": float(np.mean([r["gap"][j] for r in sel])),
        })
    return out, len(sel)


def _cmd_report(args):
    rows = read_metrics(args.metrics)
    summary, n = summarize_metrics(rows, args.last_epochs)
    modes = defaultdict(int)
    for r in rows:
        modes[r["sampler"]] += 1
    span = f"last {args.last_epochs} epochs" if args.last_epochs else "all epochs"
    print(f"{len(rows)} iterations; sampler use: " + ", ".join(f"{k}={v}" for k, v in sorted(modes.items())))
    print(f"per-stage means over {span} ({n} iterations)")
    head = ["stage", "loss", "d_ap", "d_an", "gap"]
    cells = [[s["stage"]] + [f"{s[k]:.4f}" for k in head[1:]] for s in summary]
    widths = [max(len(x) for x in col) for col in zip(head, *cells)]
    for row in [head] + cells:
        print("  ".join(c.rjust(w) for c, w in zip(row, widths)))
    if args.csv:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n_stages = len(rows[0]["losses"])
        w.writerow(["iter", "epoch", "sampler", "lr", "total"]
                   + [f"{k}_{j}" for k in ("loss", "d_ap", "d_an", "gap") for j in range(n_stages)])
        for r in rows:
            w.writerow([r["iter"], r["epoch"], r["sampler"], r["lr"], r["total"]]
                       + r["losses"] + r["d_ap"] + r["d_an"] + r["gap"])
        atomic_write_text(args.csv, buf.getvalue())


def build_parser():
    p = argparse.ArgumentParser(prog="litm", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="synthesize (or import) a dataset")
    g.add_argument("--config", help="JSON config with a 'synth' section")
    g.add_argument("--from-csv", help="import identity,values... rows instead of synthesizing")
    g.add_argument("--R", type=int, default=1, help="descriptors per CSV row (default 1)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=_cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--metrics", help="JSON-lines metrics log")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int, help="override train.epochs")
    t.add_argument("--hard-sets", help="dump GHIS hard-identity sets here")
    t.add_argument("--dry-run", action="store_true", help="echo config, write the initial checkpoint")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="retrieval evaluation on a query/gallery split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", type=float, default=0.25, help="query fraction per identity")
    e.add_argument("--stage", default="final", help="stage index, 'final' or 'all'")
    e.add_argument("--out", help="JSON report path")
    e.add_argument("--cmc-csv", help="CMC curve CSV path")
    e.add_argument("--k-max", type=int, default=10)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=_cmd_eval)

    r = sub.add_parser("report", help="summarize a metrics log")
    r.add_argument("--metrics", required=True)
    r.add_argument("--last-epochs", type=int)
    r.add_argument("--csv", help="per-iteration curve CSV path")
    r.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except LitmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
