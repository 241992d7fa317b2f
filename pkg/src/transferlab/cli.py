"""Command line entrypoint: train, transplant, split, grid, analyze.

Configuration comes from a plan file plus repeatable ``--set key=value``
overrides (a dotted prefix like ``plan.noise=0.5`` is accepted and
stripped). Before any compute starts, the fully resolved configuration is
written next to the outputs, so a crashed run still documents what it was
doing. The output root is the ``-o`` flag, else the ``TRANSFERLAB_OUT``
environment variable, else the working directory.

Failures map to stable exit codes: 2 for usage problems, 3 for missing
dependencies or bad data, 4 for numeric blow-ups. Every failure prints a
single ``error: <category>: <message>`` line on stderr.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import analysis as an
from . import datasplit as ds
from . import experiment as ex
from . import hierarchy as hi
from . import surgery as su
from .errors import AssignmentError, InputError, TransferLabError, UsageError


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so errors share one path."""

    def error(self, message):
        raise UsageError(message)


def _out_dir(args) -> Path:
    root = args.out or os.environ.get("TRANSFERLAB_OUT") or "."
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_plan(args) -> ex.GridPlan:
    chunks = []
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise InputError(f"no such config file: {path}")
        chunks.append(path.read_text(encoding="utf-8"))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set wants key=value, got {item!r}")
        key, _, value = item.partition("=")
        chunks.append(f"{key.strip().split('.')[-1]} = {value.strip()}")
    return ex.parse_plan("\n".join(chunks))


def _write_resolved(out: Path, name: str, pairs: dict) -> None:
    lines = [f"# resolved {name} configuration"]
    lines += [f"{k} = {v}" for k, v in pairs.items()]
    (out / f"{name}.resolved").write_text("\n".join(lines) + "\n",
                                          encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    plan = _load_plan(args)
    out = _out_dir(args)
    _write_resolved(out, "train", {"side": args.side, "rep": args.rep,
                                   "plan": "see plan.resolved"})
    ex.write_plan(out / "plan.resolved", plan)
    ctx = ex.build_context(plan, plan.split_seeds[0])
    treatment = ex.Treatment("base", args.side, rep=args.rep)
    result, ckpt = ex.run_treatment(treatment, ctx)
    ckpt_path = out / f"base_{args.side}_rep{args.rep}.tflb"
    su.save(ckpt, ckpt_path)
    ex.append_result(out / "results.csv", result)
    print(f"trained base side {args.side} rep {args.rep}: "
          f"accuracy {result.top1_accuracy:.4f}, checkpoint {ckpt_path}")
    return 0


def cmd_transplant(args) -> int:
    base_path = Path(args.base)
    if not base_path.exists():
        raise InputError(f"no such checkpoint: {base_path}")
    base = su.load(base_path)
    model = su.transplant(base, base.spec, args.n, args.mode, args.seed,
                          std=args.std, bias_value=args.bias)
    out_ckpt = su.Checkpoint.from_model(model, su.Provenance(
        dataset_id=f"transplant:{base_path.name}", seed=args.seed, iterations=0))
    if args.out:
        out = Path(args.out)
    else:
        root = Path(os.environ.get("TRANSFERLAB_OUT") or ".")
        root.mkdir(parents=True, exist_ok=True)
        out = root / f"{base_path.stem}.n{args.n}.tflb"
    su.save(out_ckpt, out)
    frozen = sum(1 for layer in out_ckpt.layers if layer.frozen)
    print(f"spliced first {args.n} layers ({args.mode}, {frozen} frozen) "
          f"into {out}")
    return 0


def cmd_split(args) -> int:
    out = _out_dir(args)
    target = out / args.name

    if args.mode == "random":
        classes = _class_list(args)
        split = ds.split_random(classes, seed=args.seed)
        _write_resolved(out, "split", {"mode": "random", "seed": args.seed,
                                       "classes": len(classes)})
        ds.write_split(target, split)
        a = sum(1 for s in split.assignment.values() if s == "A")
        print(f"wrote {target}: {a} classes on A, "
              f"{len(split.assignment) - a} on B")
        return 0

    if args.mode == "semantic":
        if not args.dag or not args.roots or len(args.roots.split(",")) != 2:
            raise UsageError("semantic mode needs --dag FILE and --roots a,b")
        root_a, root_b = (r.strip() for r in args.roots.split(","))
        dag = hi.load_dag(args.dag)
        set_a, set_b, leftovers = hi.semantic_split(dag, root_a, root_b)
        manual = {}
        if args.manual:
            manual = ds.read_split(args.manual).assignment
        elif leftovers:
            raise AssignmentError(
                f"{len(leftovers)} classes fall under neither root; provide "
                f"--manual with their assignments", missing=sorted(leftovers))
        split = hi.assign_leftovers(set_a, set_b, leftovers, manual)
        _write_resolved(out, "split", {"mode": "semantic", "dag": args.dag,
                                       "roots": args.roots,
                                       "manual": args.manual or "-"})
        ds.write_split(target, split)
        a = sum(1 for s in split.assignment.values() if s == "A")
        print(f"wrote {target}: {a} classes on A, "
              f"{len(split.assignment) - a} on B "
              f"({len(leftovers)} assigned by hand)")
        return 0

    # reduce: record exactly which toy-dataset examples survive a per-class
    # cap, so a reduced run's inputs are inspectable
    plan = _load_plan(args)
    train, _ = ds.toy_dataset(
        num_classes=plan.num_classes, per_class=plan.per_class,
        image_size=plan.image_size, seed=plan.dataset_seed,
        val_per_class=plan.val_per_class, noise=plan.noise, jitter=plan.jitter)
    reduced = ds.reduce_per_class(train, args.cap, seed=args.seed)
    _write_resolved(out, "split", {"mode": "reduce", "cap": args.cap,
                                   "seed": args.seed,
                                   "dataset": train.dataset_id})
    lines = [f"# method=reduce cap={args.cap} seed={args.seed} "
             f"dataset={reduced.dataset_id}", "example_id,class_id"]
    lines += [f"{int(eid)},{reduced.classes[int(lab)]}"
              for eid, lab in zip(reduced.example_ids, reduced.labels)]
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {target}: {len(reduced)} of {len(train)} examples kept")
    return 0


def _class_list(args):
    if args.classes:
        return tuple(c.strip() for c in args.classes.split(",") if c.strip())
    if args.num_classes:
        return tuple(f"c{k:02d}" for k in range(args.num_classes))
    raise UsageError("random mode needs --classes or --num-classes")


def cmd_grid(args) -> int:
    plan = _load_plan(args)
    out = _out_dir(args)
    results_file = out / "results.csv"
    if results_file.exists() and results_file.stat().st_size > 0 and not args.resume:
        raise UsageError(
            f"{results_file} already holds rows; pass --resume to continue "
            "that grid or point -o at a fresh directory")
    verbose = print if args.verbose else None
    summary = ex.run_grid(plan, out, workers=args.workers, progress=verbose)
    an.emit_report(summary.results, out)
    print(f"{summary.executed} cells executed, {summary.skipped} skipped, "
          f"{len(summary.failures)} failed; {len(summary.results)} rows total")
    for cell, category, message in summary.failures:
        print(f"failed cell [{category}] {cell}: {message}", file=sys.stderr)
    return 0


def cmd_analyze(args) -> int:
    results_path = Path(args.results)
    if not results_path.exists():
        raise InputError(f"no such results file: {results_path}")
    rows = ex.read_results(results_path)
    out = _out_dir(args)
    _write_resolved(out, "analyze", {"results": results_path,
                                     "rows": len(rows)})
    paths = an.emit_report(rows, out)
    print(f"analyzed {len(rows)} rows into "
          + ", ".join(p.name for p in paths))
    return 0


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="transferlab",
                     description="layer transfer experiments on small CNNs")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("-o", "--out", default=None,
                       help="output directory (default: $TRANSFERLAB_OUT or .)")
        p.add_argument("--config", default=None, help="plan file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one plan key; repeatable")

    p = sub.add_parser("train", help="train one base network from scratch")
    common(p)
    p.add_argument("--side", choices=ds.SIDES, default="B")
    p.add_argument("--rep", type=int, default=0, help="repetition index")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transplant", help="splice the first n layers of a "
                                          "checkpoint into a fresh network")
    p.add_argument("--base", required=True, help="donor checkpoint (.tflb)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--mode", choices=("frozen", "finetune"), default="frozen")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--std", type=float, default=0.1)
    p.add_argument("--bias", type=float, default=0.1)
    p.add_argument("-o", "--out", default=None, help="output checkpoint path")
    p.set_defaults(func=cmd_transplant)

    p = sub.add_parser("split", help="build a class split manifest")
    common(p)
    p.add_argument("--mode", choices=("random", "semantic", "reduce"),
                   required=True)
    p.add_argument("--name", default="split.csv", help="manifest file name")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", default=None, help="comma-separated class ids")
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--dag", default=None, help="hierarchy file (semantic)")
    p.add_argument("--roots", default=None, help="two root nodes, comma-separated")
    p.add_argument("--manual", default=None,
                   help="manifest assigning leftover classes (semantic)")
    p.add_argument("--cap", type=int, default=10,
                   help="examples kept per class (reduce)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("grid", help="run the full treatment grid")
    common(p)
    p.add_argument("--plan", default=None, help="alias for --config")
    p.add_argument("--resume", action="store_true",
                   help="continue a grid that already has rows")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--verbose", action="store_true", help="log every cell")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("analyze", help="emit report CSVs from a results table")
    common(p)
    p.add_argument("--results", required=True)
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "plan", None) and not args.config:
            args.config = args.plan
        return args.func(args)
    except TransferLabError as err:
        print(f"error: {err.category}: {err}", file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
