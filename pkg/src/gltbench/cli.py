"""Command line interface: gen | split | train | eval | report | repro.

Exit codes: 0 success, 2 configuration error, 3 protocol guard, 4 acceptance
failure (reproduction trends). Matrix parallelism is capped by GLT_THREADS.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .datagen import GenConfig
from .errors import AcceptanceError, ConfigError, ProtocolError
from .evaluate import Report
from .ifl import EnvConfig
from .nn import TrainConfig
from .pipeline import (DEFAULT_SEEDS, ExperimentManifest, REPRO_METHODS,
                       SplitParams, default_gen_config, default_split_params,
                       default_train_config, run_eval, run_gen, run_repro,
                       run_split, run_train, stage_seed)


def _parse_alpha(text: str):
    """"0:0,0.5:0.001,0.75:0.005" -> [(0.0, 0.0), (0.5, 0.001), (0.75, 0.005)].

    Breakpoints strictly between 0 and 1 are fractions of the epoch budget.
    """
    out = []
    for part in text.split(","):
        if not part.strip():
            continue
        try:
            e, a = part.split(":")
            out.append((float(e), float(a)))
        except ValueError as exc:
            raise ConfigError(f"bad --alpha entry {part!r}; want epoch:alpha") from exc
    if not out:
        raise ConfigError("--alpha must contain at least one epoch:alpha pair")
    return out


def _parse_ints(text: str):
    return [int(x) for x in text.split(",") if x.strip()]


def cmd_gen(args) -> int:
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if args.seed is not None:
            doc["seed"] = args.seed
        cfg = GenConfig.from_dict(doc)
    else:
        cfg = default_gen_config(args.seed if args.seed is not None else 0)
    info = run_gen(cfg, args.out)
    print(f"wrote {info['path']}: {info['n_samples']} samples, "
          f"K={info['n_classes']} (head {info['counts_head']} / tail "
          f"{info['counts_tail']}), A={info['n_attributes']}, {info['regime']} regime")
    print(f"class-0 attribute profile: {info['attr_profile_row0']}")
    return 0


def cmd_split(args) -> int:
    params = SplitParams(test_cbl_per_class=args.test_per_class,
                         train_cbl_per_class=args.train_cbl_per_class,
                         gbl_per_cell=args.per_cell,
                         gbl_per_class=args.gbl_per_class,
                         n_clusters=args.clusters)
    written = run_split(args.data, args.protocol.upper(), args.out,
                        args.seed, params)
    for name, path in written.items():
        print(f"{name}: {path}")
    return 0


def cmd_train(args) -> int:
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            train_cfg = TrainConfig.from_dict(json.load(fh))
    else:
        train_cfg = default_train_config(args.method, args.seed)
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.lr0 is not None:
        overrides["lr0"] = args.lr0
    if args.alpha is not None:
        overrides["alpha_schedule"] = _parse_alpha(args.alpha)
    if args.variant is not None:
        overrides["ifl_variant"] = args.variant
    if overrides:
        train_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), **overrides})
    env_cfg = EnvConfig(n_envs=args.envs, warmup_epochs=args.warmup,
                        refresh_period_epochs=args.refresh)
    out = Path(args.out)
    log = Path(args.log) if args.log else out.with_suffix(".log.csv")
    info = run_train(args.data, args.split, args.method, out, log, args.seed,
                     train_cfg, env_cfg, dump_envs_path=args.dump_envs)
    print(f"checkpoint: {info['checkpoint']}")
    print(f"log: {info['log']} (final cls loss {info['final_loss']:.4f})")
    return 0


def cmd_eval(args) -> int:
    report = run_eval(args.data, args.model, args.split, args.strata,
                      args.report, train_split_path=args.train_split)
    if args.csv:
        report.save_csv(args.csv)
    o = report.overall
    print(f"{report.protocol} {report.split_name}: accuracy {o['accuracy']:.4f}, "
          f"precision {o['precision']:.4f} (n={o['n']})")
    for key, val in sorted(report.diagnostics.items()):
        print(f"  {key}: {val:.4f}")
    return 0


def cmd_report(args) -> int:
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["protocol", "split", "stratum", "accuracy", "precision", "n"])
        for path in args.inputs:
            rep = Report.load(path)
            for stratum in list(rep.cells) + ["Overall"]:
                cell = rep.overall if stratum == "Overall" else rep.cells[stratum]
                w.writerow([rep.protocol, rep.split_name, stratum,
                            f"{cell['accuracy']:.6f}", f"{cell['precision']:.6f}",
                            cell["n"]])
    print(f"wrote {args.out}")
    return 0


def cmd_repro(args) -> int:
    if args.manifest:
        manifest = ExperimentManifest.load(args.manifest)
    else:
        manifest = ExperimentManifest.default(
            master_seed=args.master_seed,
            seeds=_parse_ints(args.seeds),
            methods=args.methods.split(",") if args.methods else REPRO_METHODS)
        if args.epochs is not None:
            manifest.train_config["epochs"] = args.epochs

    def progress(res):
        seed, protocol, method, _path, err = res
        status = "FAIL " + err if err else "ok"
        print(f"  seed {seed} {protocol:<3} {method:<9} {status}", flush=True)

    print(f"matrix: {len(manifest.methods)} methods x "
          f"{len(manifest.protocols)} protocols x {len(manifest.seeds)} seeds")
    out = run_repro(manifest, args.out, jobs=args.jobs,
                    check=not args.no_check, progress=progress)
    print(f"merged: {out['merged_csv']}")
    print(f"summary: {out['summary_csv']}")
    for c in out["checks"]:
        print(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.detail}")
    if out["failures"]:
        for seed, protocol, method, err in out["failures"]:
            print(f"cell failed: seed {seed} {protocol} {method}: {err}",
                  file=sys.stderr)
    if any(not c.passed for c in out["checks"]):
        return 4
    if out["failures"]:
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glt", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset (GLTD file)")
    g.add_argument("--config", help="GenConfig JSON; defaults to the desk-scale config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("split", help="carve one protocol's train/test pair")
    s.add_argument("--data", required=True)
    s.add_argument("--protocol", required=True, choices=["clt", "alt", "glt"])
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--clusters", type=int, default=6)
    s.add_argument("--per-cell", type=int, default=5, dest="per_cell")
    s.add_argument("--gbl-per-class", type=int, default=None, dest="gbl_per_class")
    s.add_argument("--test-per-class", type=int, default=30, dest="test_per_class")
    s.add_argument("--train-cbl-per-class", type=int, default=60,
                   dest="train_cbl_per_class")
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train one method on a train split")
    t.add_argument("--data", required=True)
    t.add_argument("--split", required=True)
    t.add_argument("--method", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", default=None, help="training log CSV")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--config", help="TrainConfig JSON")
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    t.add_argument("--lr0", type=float, default=None)
    t.add_argument("--alpha", default=None,
                   help="step schedule, e.g. 0:0,0.5:0.001,0.75:0.005")
    t.add_argument("--envs", type=int, default=2)
    t.add_argument("--refresh", type=int, default=None)
    t.add_argument("--warmup", type=int, default=None)
    t.add_argument("--variant", choices=["squared", "l2"], default=None)
    t.add_argument("--dump-envs", default=None, dest="dump_envs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--split", required=True)
    e.add_argument("--strata", default=None)
    e.add_argument("--report", required=True)
    e.add_argument("--train-split", default=None, dest="train_split",
                   help="enables the invariance diagnostics")
    e.add_argument("--csv", default=None)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="merge report JSONs into one CSV")
    r.add_argument("--inputs", nargs="+", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)

    x = sub.add_parser("repro", help="run the full method x protocol x seed matrix")
    x.add_argument("--out", required=True)
    x.add_argument("--manifest", default=None, help="rerun an existing manifest")
    x.add_argument("--seeds", default=",".join(str(s) for s in DEFAULT_SEEDS))
    x.add_argument("--methods", default=None)
    x.add_argument("--master-seed", type=int, default=0, dest="master_seed")
    x.add_argument("--epochs", type=int, default=None)
    x.add_argument("--jobs", type=int, default=None,
                   help="worker processes (default: GLT_THREADS or 4)")
    x.add_argument("--no-check", action="store_true", dest="no_check")
    x.set_defaults(func=cmd_repro)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ProtocolError as exc:
        print(f"protocol guard: {exc}", file=sys.stderr)
        return 3
    except AcceptanceError as exc:
        print(f"acceptance failure: {exc}", file=sys.stderr)
        return 4
    except FileNotFoundError as exc:
        print(f"config error: missing file {exc.filename}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
