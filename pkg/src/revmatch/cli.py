"""Command-line front end: ``gen``, ``train``, ``solve`` and ``bench``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .agent import LOG_FIELDS, TrainConfig, Trainer, solve
from .core import ContractError, Sense, f1_metrics, objective_ratio, optimal_gap
from .env import EnvConfig
from .instances import Instance, SyntheticSpec, load_instance, synthetic_instance, write_affinity
from .neural import CheckpointError, load_params
from .oracle import SearchSpaceError, brute_force, spectral_match
from .regularizer import RegKind

log = logging.getLogger("revmatch")

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL = 0, 2, 3
INSTANCE_SUFFIXES = (".aff", ".dat")


class UsageError(Exception):
    pass


def fmt6(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    if isinstance(v, (float, np.floating)):
        return f"{v:.6g}"
    return str(v)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, RegKind) or isinstance(o, Sense):
        return o.value
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def dump_json(obj) -> str:
    # json writes floats with repr, so values round-trip
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def worker_count(tasks: int) -> int:
    raw = os.environ.get("RGM_THREADS", "")
    try:
        cap = int(raw) if raw else 1
    except ValueError:
        raise UsageError(f"RGM_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, tasks))


# --- config ------------------------------------------------------------------


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in data.items()}


def _add_env_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("environment")
    g.add_argument("--revocable", dest="revocable", action="store_true", default=True,
                   help="allow actions that displace conflicting pairs (default)")
    g.add_argument("--basic", dest="revocable", action="store_false", help="mask conflicting actions")
    g.add_argument("--inlier-count", type=int, default=None,
                   help="stop once this many pairs are matched; 'full' QAP instances default to n")
    g.add_argument("--regularize", action="store_true", default=False)
    g.add_argument("--reg-fn", choices=[k.value for k in RegKind], default="f1")
    g.add_argument("--reg-range", dest="reg_half_width", type=int, default=2)
    g.add_argument("--max-steps", type=int, default=None)
    g.add_argument("--sense", choices=["max", "min"], default=None,
                   help="override the sense stored with each instance")


def _add_train_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("training")
    d = TrainConfig()
    g.add_argument("--episodes", type=int, default=d.episodes)
    g.add_argument("--gamma", type=float, default=d.gamma)
    g.add_argument("--lr", type=float, default=d.lr)
    g.add_argument("--batch-size", type=int, default=d.batch_size)
    g.add_argument("--target-sync", type=int, default=d.target_sync_every)
    g.add_argument("--update-every", type=int, default=d.update_every)
    g.add_argument("--eps-start", type=float, default=d.eps_start)
    g.add_argument("--eps-end", type=float, default=d.eps_end)
    g.add_argument("--eps-decay", type=int, default=d.eps_decay_episodes)
    g.add_argument("--alpha", type=float, default=d.alpha)
    g.add_argument("--is-beta", type=float, default=d.is_beta)
    g.add_argument("--capacity", type=int, default=d.capacity)
    g.add_argument("--hidden", type=int, default=d.hidden)
    g.add_argument("--head-hidden", type=int, default=d.head_hidden)
    g.add_argument("--layers", type=int, default=d.layers)
    g.add_argument("--h2-variant", dest="h2_mode", choices=["adjacency", "affinity"], default=d.h2_mode)
    g.add_argument("--h4-variant", dest="h4_mode", choices=["edge", "rowsum"], default=d.h4_mode)
    g.add_argument("--optimizer", choices=["sgd", "adam"], default=d.optimizer)
    g.add_argument("--no-dueling", dest="dueling", action="store_false", default=True)
    g.add_argument("--no-double", dest="double", action="store_false", default=True)
    g.add_argument("--no-prioritized", dest="prioritized", action="store_false", default=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="revmatch", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic AFF1 instances")
    p.add_argument("--config")
    p.add_argument("--n", type=int, required=True, help="inliers per graph")
    p.add_argument("--outliers", type=int, default=0, help="outliers in each graph")
    p.add_argument("--outliers2", type=int, default=None, help="outliers in the second graph (default --outliers)")
    p.add_argument("--delta-s", type=float, default=0.0)
    p.add_argument("--sigma1", type=float, default=0.05)
    p.add_argument("--scale-mode", choices=["point", "global"], default="point")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a policy")
    p.add_argument("--config")
    p.add_argument("data", nargs="+", help="instance files or directories")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", default=None, help="per-episode CSV (default <out>.csv)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--seed", type=int, default=0)
    _add_env_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("solve", help="match instances with a trained policy")
    p.add_argument("--config")
    p.add_argument("instances", nargs="+")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seeds", default="", help='pre-matched pairs, e.g. "0:0,2:1"')
    p.add_argument("--baseline", action="append", choices=["spectral"], default=[])
    p.add_argument("--format", choices=["table", "json", "csv"], default="table")
    p.add_argument("--out", default=None, help="write JSON/CSV here (format from the suffix)")
    p.add_argument("--seed", type=int, default=0)
    _add_env_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("bench", help="aggregate results over a manifest")
    p.add_argument("--config")
    p.add_argument("manifest")
    p.add_argument("--ckpt", default=None, help="policy to evaluate (omit for baselines only)")
    p.add_argument("--baseline", action="append", choices=["spectral"], default=[])
    p.add_argument("--group-by", default="group", help="manifest field used for grouping")
    p.add_argument("--oracle", action="store_true", help="fill missing optima by brute force")
    p.add_argument("--out", default=None, help="aggregate CSV (default stdout)")
    p.add_argument("--seed", type=int, default=0)
    _add_env_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    """Parse twice so that values from ``--config`` sit between defaults and flags."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        values = load_config_file(args.config)
        sub = _subparser(parser, args.command)
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def effective_config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}


# --- shared helpers ------------------------------------------------------------


def collect_files(paths) -> list[Path]:
    out = []
    for raw in paths:
        p = Path(raw)
        if p.is_dir():
            out.extend(sorted(q for q in p.iterdir() if q.suffix in INSTANCE_SUFFIXES))
        else:
            out.append(p)
    return out


def load_all(paths) -> list[Instance]:
    files = collect_files(paths)
    if not files:
        raise UsageError("no instance files found")
    try:
        return [load_instance(f) for f in files]
    except OSError as exc:
        raise UsageError(f"cannot read instance: {exc}") from None


def env_config(args, inst: Instance | None = None, seeds=()) -> EnvConfig:
    inlier = args.inlier_count
    if inlier is None and inst is not None and inst.K.sense is Sense.MINIMIZE and inst.gt is None:
        # QAP instances want a complete assignment
        inlier = min(inst.K.n1, inst.K.n2)
    return EnvConfig(
        revocable=args.revocable,
        inlier_count=inlier,
        use_regularization=args.regularize,
        reg_fn=RegKind(args.reg_fn),
        reg_half_width=args.reg_half_width,
        max_steps=args.max_steps,
        seeds=tuple(seeds),
        sense=Sense.parse(args.sense) if args.sense else None,
    )


def train_config(args) -> TrainConfig:
    return TrainConfig(
        gamma=args.gamma, lr=args.lr, batch_size=args.batch_size, target_sync_every=args.target_sync,
        update_every=args.update_every, eps_start=args.eps_start, eps_end=args.eps_end,
        eps_decay_episodes=args.eps_decay, alpha=args.alpha, capacity=args.capacity,
        episodes=args.episodes, rng_seed=args.seed, hidden=args.hidden, head_hidden=args.head_hidden,
        layers=args.layers, h2_mode=args.h2_mode, h4_mode=args.h4_mode, dueling=args.dueling,
        double=args.double, prioritized=args.prioritized, optimizer=args.optimizer, is_beta=args.is_beta,
    )


def parse_seeds(text: str) -> list[tuple[int, int]]:
    pairs = []
    for item in filter(None, (t.strip() for t in text.split(","))):
        try:
            i, a = item.split(":")
            pairs.append((int(i), int(a)))
        except ValueError:
            raise UsageError(f"bad seed pair {item!r}; expected i:a") from None
    return pairs


def write_csv(rows: list[dict], fields, fh):
    writer = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: ("" if row.get(k) is None else repr(row[k]) if isinstance(row.get(k), float)
                             else row.get(k)) for k in fields})


def _writable_dir(path: Path):
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {path}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise UsageError(f"directory {path} is not writable")


# --- commands ----------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    out = Path(args.out)
    outliers2 = args.outliers if args.outliers2 is None else args.outliers2
    try:
        SyntheticSpec(args.n, args.outliers, outliers2, args.delta_s, args.sigma1, 0, args.scale_mode)
    except ContractError as exc:
        raise UsageError(str(exc)) from None
    _writable_dir(out)
    seeds = np.random.default_rng(args.seed).integers(0, 2**31 - 1, size=args.count)
    entries = []
    width = max(4, len(str(args.count)))
    for j, s in enumerate(seeds):
        spec = SyntheticSpec(args.n, args.outliers, outliers2, args.delta_s, args.sigma1, int(s),
                             args.scale_mode)
        name = f"inst_{j:0{width}d}"
        inst = synthetic_instance(spec, name)
        meta = {"name": name, "seed": int(s), "delta_s": args.delta_s}
        write_affinity(out / f"{name}.aff", inst.K, inst.gt, meta)
        entries.append({"file": f"{name}.aff", "seed": int(s), "group": f"delta_s={args.delta_s:g}"})
    manifest = {"command": "gen", "config": effective_config(args), "instances": entries}
    (out / "manifest.json").write_text(dump_json(manifest), encoding="utf-8")
    print(f"wrote {args.count} instances to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = load_all(args.data)
    cfg = train_config(args)
    sizes = {(i.K.n1, i.K.n2) for i in dataset}
    # QAP (minimise, no ground truth) instances default to full assignments
    envs = {env_config(args, i) for i in dataset}
    if len(envs) != 1:
        raise UsageError("instances need different inlier counts; pass --inlier-count explicitly")
    ecfg = envs.pop()
    ckpt = Path(args.out)
    if ckpt.parent and not ckpt.parent.exists():
        _writable_dir(ckpt.parent)
    trainer = Trainer(dataset, cfg, ecfg)
    if args.resume:
        try:
            trainer.restore(args.resume)
        except (OSError, CheckpointError) as exc:
            raise UsageError(f"cannot resume from {args.resume}: {exc}") from None
    trainer.train()
    trainer.save(ckpt)
    rows = trainer.state.log
    log_path = Path(args.log) if args.log else ckpt.with_name(ckpt.name + ".csv")
    with open(log_path, "w", encoding="utf-8", newline="") as fh:
        write_csv(rows, LOG_FIELDS, fh)
    manifest = {"command": "train", "config": effective_config(args), "sizes": sorted(sizes),
                "instances": [i.name for i in dataset], "train_config": asdict(cfg)}
    ckpt.with_name(ckpt.name + ".json").write_text(dump_json(manifest), encoding="utf-8")
    tail = rows[-100:]
    mean = float(np.mean([r["raw_score"] for r in tail])) if tail else math.nan
    print(f"trained {trainer.state.episode} episodes on {len(dataset)} instances; "
          f"mean raw score (last {len(tail)}) {fmt6(mean)}; checkpoint {ckpt}")
    return EXIT_OK


def evaluate(inst: Instance, method: str, params, ecfg: EnvConfig, oracle: bool = False) -> dict:
    """Solve one instance with one method and compute every applicable metric."""
    if method == "rgm":
        res = solve(inst, params, ecfg)
    else:
        res = spectral_match(inst.K, max_pairs=ecfg.inlier_count)
    row = {"instance": inst.name, "method": method, "pairs": len(res.solution),
           "raw_score": res.raw_score, "reg_score": res.reg_score, "wall_time": res.wall_time,
           "f1": None, "precision": None, "recall": None, "obj_ratio": None, "gap": None,
           "solution": " ".join(f"{i}:{a}" for i, a in sorted(res.solution.pairs()))}
    if inst.gt is not None:
        rec, prec, f1 = f1_metrics(res.solution, inst.gt)
        row.update(f1=f1, precision=prec, recall=rec)
        try:
            row["obj_ratio"] = objective_ratio(res.solution, inst.gt, inst.K)
        except ZeroDivisionError:
            pass
    optimum = inst.optimal
    if optimum is None and oracle:
        try:
            optimum = brute_force(inst.K, ecfg.inlier_count)[1]
        except SearchSpaceError as exc:
            log.warning("%s: %s", inst.name, exc)
    if optimum is not None and optimum > 0:
        row["gap"] = optimal_gap(res.raw_score, optimum)
    return row


SOLVE_FIELDS = ("instance", "method", "pairs", "raw_score", "reg_score", "f1", "precision", "recall",
                "obj_ratio", "gap", "wall_time", "solution")


def _load_ckpt(path):
    try:
        return load_params(path)
    except (OSError, CheckpointError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_solve(args) -> int:
    params = _load_ckpt(args.ckpt)
    instances = load_all(args.instances)
    seeds = parse_seeds(args.seeds)
    rows = []
    for inst in instances:
        try:
            ecfg = env_config(args, inst, seeds)
            for method in ["rgm", *args.baseline]:
                rows.append(evaluate(inst, method, params, ecfg))
        except (ContractError, ValueError) as exc:
            raise UsageError(f"{inst.name}: {exc}") from None
    fmt = args.format
    if args.out:
        fmt = "csv" if args.out.endswith(".csv") else "json"
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            _emit(rows, fmt, fh, args)
        _emit(rows, "table", sys.stdout, args)
    else:
        _emit(rows, fmt, sys.stdout, args)
    return EXIT_OK


def _emit(rows, fmt, fh, args):
    if fmt == "json":
        fh.write(dump_json({"command": args.command, "config": effective_config(args), "results": rows}))
    elif fmt == "csv":
        write_csv(rows, SOLVE_FIELDS, fh)
    else:
        cols = [c for c in SOLVE_FIELDS if c != "solution"]
        fh.write("\t".join(cols) + "\n")
        for r in rows:
            fh.write("\t".join(fmt6(r.get(c)) for c in cols) + "\n")


AGG_FIELDS = ("group", "method", "count", "f1_mean", "f1_min", "f1_max", "precision_mean", "obj_ratio_mean",
              "gap_mean", "gap_min", "gap_max")


def aggregate_rows(rows: list[dict], group_order: list[str]) -> list[dict]:
    """Mean/min/max per ``(group, method)``; metrics absent from a group stay empty."""
    out = []
    methods = list(dict.fromkeys(r["method"] for r in rows))
    for group in group_order:
        for method in methods:
            sel = [r for r in rows if r["group"] == group and r["method"] == method]
            if not sel:
                continue
            agg = {"group": group, "method": method, "count": len(sel)}
            for key in ("f1", "precision", "obj_ratio", "gap"):
                vals = [r[key] for r in sel if r.get(key) is not None]
                if vals:
                    agg[f"{key}_mean"] = float(np.mean(vals))
                    agg[f"{key}_min"] = float(np.min(vals))
                    agg[f"{key}_max"] = float(np.max(vals))
            out.append(agg)
    return out


def read_manifest(path) -> tuple[Path, list[dict], list[str]]:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read manifest {path}: {exc}") from None
    entries = data.get("instances") if isinstance(data, dict) else data
    if not isinstance(entries, list):
        raise UsageError("manifest must list instances")
    groups = list(data.get("groups", [])) if isinstance(data, dict) else []
    return path.parent, entries, groups


def cmd_bench(args) -> int:
    base, entries, declared = read_manifest(args.manifest)
    params = _load_ckpt(args.ckpt) if args.ckpt else None
    methods = (["rgm"] if params is not None else []) + list(args.baseline)
    if not methods:
        raise UsageError("nothing to evaluate: pass --ckpt and/or --baseline")
    missing, jobs = [], []
    for e in entries:
        f = base / e["file"]
        if not f.exists():
            missing.append(str(f))
            continue
        jobs.append((e, f))

    def run(job):
        e, f = job
        inst = load_instance(f)
        if e.get("optimal") is not None:
            inst.optimal = float(e["optimal"])
        ecfg = env_config(args, inst)
        # each worker rolls out with its own copy of the parameters
        local = params.copy() if params is not None else None
        group = str(e.get(args.group_by, "all"))
        return [dict(evaluate(inst, m, local, ecfg, args.oracle), group=group) for m in methods]

    with ThreadPoolExecutor(max_workers=worker_count(len(jobs))) as pool:
        results = list(pool.map(run, jobs))
    rows = [r for chunk in results for r in chunk]
    order = list(dict.fromkeys(declared + [str(e.get(args.group_by, "all")) for e, _ in jobs]))
    agg = aggregate_rows(rows, order)
    present = {a["group"] for a in agg}
    for g in order:
        if g not in present:
            log.warning("group %s has no results; omitted", g)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            write_csv(agg, AGG_FIELDS, fh)
        manifest = {"command": "bench", "config": effective_config(args), "missing": missing}
        Path(args.out + ".json").write_text(dump_json(manifest), encoding="utf-8")
        for a in agg:
            print("\t".join(fmt6(a.get(c)) for c in AGG_FIELDS))
    else:
        buf = io.StringIO()
        write_csv(agg, AGG_FIELDS, buf)
        sys.stdout.write(buf.getvalue())
    if missing:
        for f in missing:
            print(f"missing: {f}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
