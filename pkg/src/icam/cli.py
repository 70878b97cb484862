"""``icam`` command line: gen / train / solve / eval / bench.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every run writes a
manifest next to its outputs before starting and finalises it at the end.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

from . import __version__
from .errors import ICAMError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int = None
    code_version: str = __version__
    started: str = ""
    finished: str = None
    status: str = "running"
    outputs: list = field(default_factory=list)
    config_digest: str = ""

    def __post_init__(self):
        blob = json.dumps(self.config, sort_keys=True, default=str).encode()
        self.config_digest = hashlib.sha256(blob).hexdigest()
        self.started = self.started or _now()

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, default=str)


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _threads(args):
    if getattr(args, "threads", None):
        return args.threads
    return int(os.environ.get("ICAM_THREADS", "1"))


def _capacity(text):
    if text is None:
        return None
    if "," in text:
        lo, hi = (int(v) for v in text.split(","))
        return (lo, hi)
    return int(text)


# ---------------------------------------------------------------- subcommands

def cmd_gen(args, manifest):
    from .instances import generate_set, write_jsonl

    instances = generate_set(args.problem, args.n, args.count, args.seed, _capacity(args.capacity))
    write_jsonl(instances, args.out)
    manifest.outputs.append(args.out)
    print(f"wrote {len(instances)} {args.problem} instances to {args.out}")


def _train_config(args):
    from .training import PRESETS, TrainingConfig, load_config

    cfg = PRESETS[args.preset](args.problem) if args.preset else TrainingConfig(problem=args.problem)
    if args.config:
        cfg = load_config(args.config)
    if args.batches_per_epoch:
        cfg.batches_per_epoch = args.batches_per_epoch
    if args.checkpoint_every is not None:
        cfg.checkpoint_every = args.checkpoint_every
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_train(args, manifest):
    from .plotting import plot_training
    from .training import dump_config, train

    cfg = _train_config(args)
    with open(os.path.join(args.out, "config.toml"), "w") as fh:
        fh.write(dump_config(cfg))
    result = train(cfg, seed=cfg.seed, out_dir=args.out, log=print)
    fig = plot_training(result.metrics, os.path.join(args.out, "training.png"))
    manifest.outputs += [os.path.join(args.out, "config.toml"), os.path.join(args.out, "metrics.csv"), fig]
    manifest.outputs += result.checkpoints


def cmd_solve(args, manifest):
    from .instances import load_instances
    from .model import ICAM
    from .rollout import MODE_LABELS, rollout_many, solve_augmented

    model = ICAM.load(args.ckpt)
    instances = load_instances(args.instances)
    with open(args.out, "w") as fh:
        if args.mode == "aug8":
            results = []
            for inst in instances:
                t0 = time.perf_counter()
                best, _, _ = solve_augmented(model, inst)
                results.append((inst, best, time.perf_counter() - t0))
        else:
            results = [(inst, rb.best(), rb.seconds)
                       for inst, rb in zip(instances, rollout_many(model, instances, args.mode, args.seed))]
        for inst, best, secs in results:
            rec = {"id": inst.id, "order": [int(v) for v in best.order], "length": best.length * inst.scale,
                   "mode": MODE_LABELS[args.mode], "seconds": secs}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    manifest.outputs.append(args.out)
    print(f"solved {len(instances)} instances ({MODE_LABELS[args.mode]}) -> {args.out}")


def cmd_eval(args, manifest):
    from .evaluation import evaluate, load_reference_file, markdown_table
    from .instances import load_instances
    from .model import ICAM
    from .plotting import plot_gaps

    instances = load_instances(args.instances)
    model = ICAM.load(args.ckpt) if args.ckpt else None
    ref, table = args.ref, None
    if ref.startswith("file:"):
        table = load_reference_file(ref[5:])
        ref = "file"
    report = evaluate(instances, args.method, model, args.mode, ref, table, _threads(args))
    csv_path = os.path.join(args.out, "report.csv")
    md_path = os.path.join(args.out, "report.md")
    report.write_csv(csv_path)
    label = report.rows[0]["method"] if report.rows else args.method
    scale = f"N={instances[0].n}" if instances else "-"
    with open(md_path, "w") as fh:
        fh.write(markdown_table({scale: {label: report}}))
    fig = plot_gaps(report, os.path.join(args.out, "gaps.png"))
    manifest.outputs += [csv_path, md_path, fig]
    s = report.summary()
    print(f"{label}: {s['count']} instances, mean obj {s['mean_objective']:.4f}, "
          f"mean gap {s['mean_gap']:.3f}%, total {s['total_time']:.1f}s")


def cmd_bench(args, manifest):
    from .bench import bench_attention, fit_slopes
    from .plotting import plot_bench

    mechs = ("aafm", "mha") if args.mechanism == "both" else (args.mechanism,)
    records = bench_attention(args.dims, args.d, args.repeats, mechs)
    slopes = fit_slopes(records) if len(args.dims) > 1 else {}
    csv_path = os.path.join(args.out, "bench.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mechanism", "n", "d", "seconds", "peak_bytes", "traced_bytes"])
        for r in records:
            w.writerow([r.mechanism, r.n, r.d, f"{r.seconds:.6g}", r.peak_bytes, r.traced_bytes])
    fig = plot_bench(records, os.path.join(args.out, "bench.png"), slopes)
    manifest.outputs += [csv_path, fig]
    for mech, s in slopes.items():
        print(f"{mech}: space slope {s['space']:.3f}, time slope {s['time']:.3f}")


# ---------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="icam", description="Instance-conditioned adaptation model for TSP / CVRP.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate uniform instances (JSON lines)")
    g.add_argument("--problem", choices=["tsp", "cvrp"], required=True)
    g.add_argument("--n", type=int, required=True, help="cities (TSP) or customers (CVRP)")
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--capacity", help="CVRP capacity: an integer or 'lo,hi'")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="run the staged training schedule")
    t.add_argument("--config", help="TOML training config")
    t.add_argument("--preset", choices=["desk", "full"], help="start from a named preset")
    t.add_argument("--problem", choices=["tsp", "cvrp"], default="tsp")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--batches-per-epoch", type=int)
    t.add_argument("--checkpoint-every", type=int)

    s = sub.add_parser("solve", help="solve instances with a trained checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--instances", required=True, help="JSON lines, or a .vrp/.tsp file")
    s.add_argument("--mode", choices=["single", "multi", "sample", "aug8"], default="multi")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="solution JSON lines")

    e = sub.add_parser("eval", help="gap report against a reference")
    e.add_argument("--instances", required=True)
    e.add_argument("--method", choices=["icam", "nn2opt", "exact"], required=True)
    e.add_argument("--ckpt")
    e.add_argument("--mode", choices=["single", "multi", "aug8"], default="multi")
    e.add_argument("--ref", default="auto", help="auto | exact | nn2opt | file:PATH")
    e.add_argument("--out", default="eval-out", help="output directory")
    e.add_argument("--threads", type=int)

    b = sub.add_parser("bench", help="AAFM vs attention time / memory scaling")
    b.add_argument("--mechanism", choices=["aafm", "mha", "both"], default="both")
    b.add_argument("--dims", type=int, nargs="+", default=[128, 256, 512, 1024, 2048], help="node counts N")
    b.add_argument("--d", type=int, default=128, help="feature dimension")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--out", default="bench-out", help="output directory")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "solve": cmd_solve, "eval": cmd_eval, "bench": cmd_bench}
DIR_OUTPUT = {"train", "eval", "bench"}


def dispatch(argv):
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            sp = parser._subparsers._group_actions[0].choices.get(args.command) if args.command else parser
            valid = sorted(o for a in sp._actions for o in a.option_strings)
            raise UsageError(f"{sp.format_usage()}unrecognized arguments: {' '.join(extra)}\n"
                             f"valid flags: {', '.join(valid)}")
        if args.command is None:
            raise UsageError(parser.format_help())
        if args.command == "train" and not (args.config or args.preset):
            args.preset = "desk"
        if args.command == "eval" and args.method == "icam" and not args.ckpt:
            raise UsageError("eval --method icam needs --ckpt")
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1

    config = {k: v for k, v in vars(args).items()}
    if args.command in DIR_OUTPUT:
        os.makedirs(args.out, exist_ok=True)
        manifest_path = os.path.join(args.out, "manifest.json")
    else:
        manifest_path = args.out + ".manifest.json"
    if args.command == "train":
        cfg = _train_config(args)
        config["resolved"] = cfg.to_dict()
    manifest = RunManifest(args.command, config, seed=getattr(args, "seed", None))
    manifest.write(manifest_path)
    try:
        COMMANDS[args.command](args, manifest)
    except (ICAMError, OSError, ValueError, KeyError) as exc:
        manifest.status = "failed"
        manifest.finished = _now()
        manifest.write(manifest_path)
        print(f"icam {args.command}: error: {exc}", file=sys.stderr)
        return 2
    manifest.status = "ok"
    manifest.finished = _now()
    manifest.write(manifest_path)
    return 0


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
