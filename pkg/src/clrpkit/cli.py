"""Command-line front end: ``clrp generate|train|solve|evaluate|bench``.

Exit codes (stable):

====  =====================================================================
0     success
1     ``evaluate`` only: the solution was read but is infeasible
2     usage error (bad flags, missing checkpoint for a neural method)
3     input error (unreadable or malformed instance, solution, checkpoint
      or config file; instance beyond the oracle size guard)
4     runtime failure (search budget exhausted, numerical failure)
====  =====================================================================

Every command first writes ``manifest.json`` into its output directory, then
rewrites it on exit with the end time, status and output paths. The manifest
holds the fully resolved configuration, so a run can be repeated from it.

Configuration precedence is flag > ``--config`` JSON file > built-in default.
The JSON file may be flat or keyed by command name. The environment variables
``CLRP_OUTPUT_DIR`` (base directory for outputs) and ``CLRP_THREADS`` (torch
thread count) sit between the config file and the defaults.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .evaluate import (
    ResultRecord, check_feasible, format_gap, load_reference_table, objective, parse_solution, write_records,
    write_solution,
)
from .heuristics import HeuristicConfig
from .heuristics import search as heuristic_search
from .infer import AugmentConfig, BeamConfig, solve_augmented, solve_greedy, solve_sbs
from .instance import InstanceError, Variant, derive_seed, generate, load_instance, save_instance, write_benchmark
from .oracle import BudgetExceededError, solve_exact
from .policy import PolicyConfig
from .train import SMOKE_CONFIG, SMOKE_POLICY, CheckpointError, TrainConfig, load_checkpoint, train

EXIT_OK = 0
EXIT_INFEASIBLE = 1
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_RUNTIME = 4

NEURAL_METHODS = ("greedy", "aug", "sbs")
METHODS = NEURAL_METHODS + ("ils", "sah", "oracle")
INSTANCE_SUFFIXES = {".json", ".dat", ".txt", ""}
NON_INSTANCE_FILES = {"manifest.json", "evaluation.json"}
ORACLE_MAX_CUSTOMERS = 8


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULTS = {
    "generate": dict(customers=10, depots=5, count=1, seed=0, variant="closed", format="json"),
    "train": dict(
        preset="default", epochs=None, instances_per_epoch=None, batch_size=None, max_trajectories=None,
        lr_initial=None, lr_late=None, lr_switch_epoch=None, optimizer=None, seed=None, customers=None,
        depots=None, variant=None, checkpoint_every=None, embed_dim=None, layers=None, heads=None,
        ff_dim=None, norm=None, resume=None,
    ),
    "solve": dict(
        method="greedy", checkpoint=None, variant=None, reference=None, preset="fast", seed=0,
        time_limit=None, aug_g=4, aug_flips=True, aug_trajectories=1, beam=4, expand=4, parallel=1,
        oracle_max_customers=ORACLE_MAX_CUSTOMERS,
    ),
    "evaluate": dict(variant=None),
    "bench": dict(
        method="ils", checkpoint=None, variant="closed", bks=None, preset="fast", seed=0, time_limit=None,
        aug_g=4, aug_flips=True, aug_trajectories=1, beam=4, expand=4, parallel=1,
        oracle_max_customers=ORACLE_MAX_CUSTOMERS,
    ),
}


def _load_config_file(path: str | None, command: str) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise InputError(f"config {path} must hold a JSON object")
    if command in data and isinstance(data[command], dict):
        data = data[command]
    unknown = set(data) - set(DEFAULTS[command]) - {"out_dir", "threads"}
    if unknown:
        raise InputError(f"config {path}: unknown keys {sorted(unknown)}")
    return data


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, environment, config file and explicit flags."""
    command = args.command
    cfg = dict(DEFAULTS[command])
    cfg["out_dir"] = str(Path(os.environ.get("CLRP_OUTPUT_DIR", "runs")) / command)
    cfg["threads"] = int(os.environ["CLRP_THREADS"]) if os.environ.get("CLRP_THREADS") else None
    cfg.update(_load_config_file(args.config, command))
    for key in list(cfg):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if cfg.get("method") not in (None, *METHODS):
        raise UsageError(f"unknown method {cfg['method']!r}; choose from {', '.join(METHODS)}")
    return cfg


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="milliseconds")


def _write_json_atomic(path: Path, data: dict) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=1, sort_keys=True, default=str) + "\n")
    os.replace(tmp, path)


class Manifest:
    def __init__(self, command: str, config: dict, argv: list[str]):
        self.path = Path(config["out_dir"]) / "manifest.json"
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.data = {
            "command": command,
            "argv": argv,
            "config": config,
            "seed": config.get("seed"),
            "version": __version__,
            "torch_version": torch.__version__,
            "numpy_version": np.__version__,
            "started": _now(),
            "finished": None,
            "status": "running",
            "outputs": [],
        }
        _write_json_atomic(self.path, self.data)

    def add_output(self, path) -> None:
        self.data["outputs"].append(str(path))

    def finish(self, status: str, exit_code: int, error: str | None = None) -> None:
        self.data.update(finished=_now(), status=status, exit_code=exit_code)
        if error:
            self.data["error"] = error
        _write_json_atomic(self.path, self.data)


# ---------------------------------------------------------------------------
# solving
# ---------------------------------------------------------------------------


def collect_instance_paths(paths) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if p.is_dir():
            out += sorted(
                q for q in p.iterdir() if q.is_file() and q.suffix.lower() in INSTANCE_SUFFIXES and q.name not in NON_INSTANCE_FILES
            )
        elif p.exists():
            out.append(p)
        else:
            raise InputError(f"no such instance file or directory: {p}")
    return out


def _read_instance(path: Path, variant):
    try:
        return load_instance(path, variant)
    except (InstanceError, ValueError, KeyError) as exc:
        raise InputError(f"{path}: {exc}") from None


def _load_model(cfg: dict):
    if cfg["method"] not in NEURAL_METHODS:
        return None
    if not cfg.get("checkpoint"):
        raise UsageError(f"method {cfg['method']!r} needs --checkpoint")
    try:
        model = load_checkpoint(cfg["checkpoint"]).model
    except (OSError, CheckpointError) as exc:
        raise InputError(f"cannot load checkpoint {cfg['checkpoint']}: {exc}") from None
    model.eval()
    return model


def solve_one(inst, cfg: dict, model=None):
    """Solve ``inst`` with ``cfg['method']``; returns ``(solution, wall_seconds)``."""
    method = cfg["method"]
    start = time.perf_counter()
    if method == "greedy":
        sol = solve_greedy(inst, model).solution
    elif method == "aug":
        aug = AugmentConfig(g=cfg["aug_g"], include_flips=cfg["aug_flips"], trajectories=cfg["aug_trajectories"])
        sol = solve_augmented(inst, model, aug).solution
    elif method == "sbs":
        sol = solve_sbs(inst, model, BeamConfig(cfg["beam"], cfg["expand"])).solution
    elif method in ("ils", "sah"):
        hcfg = HeuristicConfig.preset(method, cfg["preset"], seed=cfg["seed"], time_limit=cfg["time_limit"])
        sol = heuristic_search(inst, hcfg).solution
    elif method == "oracle":
        if inst.n_customers > cfg["oracle_max_customers"]:
            raise InputError(
                f"{inst.id}: oracle is limited to {cfg['oracle_max_customers']} customers, got {inst.n_customers}"
            )
        sol = solve_exact(inst).best_solution
    else:
        raise UsageError(f"unknown method {method!r}")
    return sol, time.perf_counter() - start


_WORKER: dict = {}


def _worker_init(cfg: dict, threads: int | None) -> None:
    torch.set_num_threads(threads or 1)
    _WORKER["cfg"] = cfg
    _WORKER["model"] = _load_model(cfg)


def _worker_solve(item):
    path, variant = item
    inst = load_instance(path, variant)
    sol, wall = solve_one(inst, _WORKER["cfg"], _WORKER["model"])
    return inst, sol, wall


def solve_paths(paths: list[Path], cfg: dict, variant=None):
    """Yield ``(instance, solution, wall)`` in input order.

    Sequential unless ``cfg['parallel'] > 1``; parallel workers each load
    their own copy of the checkpoint.
    """
    instances = [_read_instance(p, variant) for p in paths]
    if cfg["method"] == "oracle":
        for inst in instances:
            if inst.n_customers > cfg["oracle_max_customers"]:
                raise InputError(
                    f"{inst.id}: oracle is limited to {cfg['oracle_max_customers']} customers, got {inst.n_customers}"
                )
    if cfg["parallel"] > 1 and len(paths) > 1:
        _load_model(cfg)  # fail fast on a bad checkpoint before forking
        with ProcessPoolExecutor(cfg["parallel"], initializer=_worker_init, initargs=(cfg, cfg.get("threads"))) as ex:
            yield from ex.map(_worker_solve, [(str(p), variant) for p in paths])
        return
    model = _load_model(cfg)
    for inst in instances:
        sol, wall = solve_one(inst, cfg, model)
        yield inst, sol, wall


def _load_reference(path) -> dict[str, float]:
    if path is None:
        return {}
    try:
        return load_reference_table(path)
    except (OSError, ValueError, IndexError) as exc:
        raise InputError(f"cannot read reference table {path}: {exc}") from None


def _print_table(header: list[str], rows: list[list[str]]) -> None:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    fmt = "  ".join(f"{{:>{w}}}" for w in widths)
    print(fmt.format(*header))
    for r in rows:
        print(fmt.format(*r))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: dict, manifest: Manifest) -> int:
    if cfg["customers"] < 1 or cfg["depots"] < 1 or cfg["count"] < 0:
        raise UsageError("customers and depots must be positive and count nonnegative")
    out = Path(cfg["out_dir"])
    for k in range(cfg["count"]):
        inst = generate(cfg["customers"], cfg["depots"], derive_seed(cfg["seed"], k), cfg["variant"])
        inst = replace(inst, id=f"gen-{cfg['customers']}-{cfg['depots']}-s{cfg['seed']}-{k:05d}")
        if cfg["format"] == "benchmark":
            path = out / f"{inst.id}.dat"
            write_benchmark(inst, path)
        else:
            path = out / f"{inst.id}.json"
            save_instance(inst, path)
        manifest.add_output(path)
    print(f"wrote {cfg['count']} instance(s) to {out}")
    return EXIT_OK


_TRAIN_KEYS = {
    "epochs": "epochs", "instances_per_epoch": "instances_per_epoch", "batch_size": "batch_size",
    "max_trajectories": "max_trajectories", "lr_initial": "lr_initial", "lr_late": "lr_late",
    "lr_switch_epoch": "lr_switch_epoch", "optimizer": "optimizer", "seed": "seed",
    "customers": "n_customers", "depots": "n_depots", "variant": "variant", "checkpoint_every": "checkpoint_every",
}
_POLICY_KEYS = {"embed_dim": "embed_dim", "layers": "n_layers", "heads": "n_heads", "ff_dim": "ff_dim", "norm": "norm"}


def train_configs(cfg: dict) -> tuple[TrainConfig, PolicyConfig]:
    if cfg["preset"] == "smoke":
        tcfg, pcfg = SMOKE_CONFIG, SMOKE_POLICY
    elif cfg["preset"] == "default":
        tcfg, pcfg = TrainConfig(), PolicyConfig()
    else:
        raise UsageError(f"unknown training preset {cfg['preset']!r}")
    try:
        tcfg = replace(tcfg, **{_TRAIN_KEYS[k]: cfg[k] for k in _TRAIN_KEYS if cfg.get(k) is not None})
        pcfg = replace(pcfg, **{_POLICY_KEYS[k]: cfg[k] for k in _POLICY_KEYS if cfg.get(k) is not None})
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return tcfg, pcfg


def cmd_train(cfg: dict, manifest: Manifest) -> int:
    tcfg, pcfg = train_configs(cfg)
    manifest.data["train_config"] = tcfg.to_dict()
    manifest.data["policy_config"] = pcfg.to_dict()
    _write_json_atomic(manifest.path, manifest.data)
    if cfg.get("resume"):
        try:
            load_checkpoint(cfg["resume"])
        except (OSError, CheckpointError) as exc:
            raise InputError(f"cannot resume from {cfg['resume']}: {exc}") from None

    def report(stats):
        print(f"epoch {stats.epoch:5d}  cost {stats.mean_cost:.4f}  lr {stats.lr:.1e}  "
              f"|grad| {stats.grad_norm:.3e}  {stats.wall_time:.1f}s", flush=True)

    out = Path(cfg["out_dir"])
    train(tcfg, pcfg, out, resume=cfg.get("resume"), on_epoch=report)
    for name in sorted(p.name for p in out.iterdir() if p.suffix in (".ckpt", ".csv", ".jsonl")):
        manifest.add_output(out / name)
    print(f"final checkpoint: {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_solve(cfg: dict, manifest: Manifest) -> int:
    paths = collect_instance_paths(cfg["instances"])
    reference = _load_reference(cfg["reference"])
    out = Path(cfg["out_dir"])
    (out / "solutions").mkdir(parents=True, exist_ok=True)
    records, rows = [], []
    for inst, sol, wall in solve_paths(paths, cfg, cfg["variant"]):
        verdict = check_feasible(inst, sol)
        if not verdict.ok:
            raise RuntimeError(f"{inst.id}: {cfg['method']} produced an infeasible solution: {verdict}")
        rec = ResultRecord.from_cost(inst.id, cfg["method"], objective(inst, sol), wall, reference.get(inst.id))
        records.append(rec)
        sol_path = out / "solutions" / f"{inst.id}.sol"
        write_solution(sol_path, sol, inst.id)
        manifest.add_output(sol_path)
        gap_text = "" if rec.gap_vs_reference is None else format_gap(rec.gap_vs_reference)
        rows.append([inst.id, f"{rec.total:.4f}", gap_text, f"{wall:.3f}"])
    write_records(records, out / "results.csv", out / "results.jsonl")
    manifest.add_output(out / "results.csv")
    manifest.add_output(out / "results.jsonl")
    _print_table(["instance", "cost", "gap", "time_s"], rows)
    return EXIT_OK


def cmd_evaluate(cfg: dict, manifest: Manifest) -> int:
    try:
        sol, sol_id = parse_solution(Path(cfg["solution"]).read_text())
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read solution {cfg['solution']}: {exc}") from None
    inst = _read_instance(Path(cfg["instance"]), cfg["variant"] or sol.variant)
    sol = _with_variant(sol, inst.variant)
    verdict = check_feasible(inst, sol)
    try:
        cost = objective(inst, sol)
    except IndexError as exc:
        raise InputError(f"{cfg['solution']}: {exc}") from None
    report = {
        "instance_id": inst.id,
        "solution_instance_id": sol_id,
        "feasible": verdict.ok,
        "violations": [v.message for v in verdict.violations],
        "opening": cost.opening_cost,
        "routing": cost.routing_cost,
        "vehicle": cost.vehicle_cost,
        "total": cost.total,
    }
    path = Path(cfg["out_dir"]) / "evaluation.json"
    _write_json_atomic(path, report)
    manifest.add_output(path)
    print(f"instance {inst.id}: {'feasible' if verdict.ok else 'INFEASIBLE'}")
    for message in report["violations"]:
        print(f"  violation: {message}")
    print(f"opening {cost.opening_cost:.4f}  routing {cost.routing_cost:.4f}  "
          f"vehicle {cost.vehicle_cost:.4f}  total {cost.total:.4f}")
    return EXIT_OK if verdict.ok else EXIT_INFEASIBLE


def _with_variant(sol, variant):
    return sol if sol.variant is variant else replace(sol, variant=variant)


def packaged_bks(variant) -> Path:
    name = "bks_oclrp.csv" if Variant.parse(variant) is Variant.OPEN else "bks_clrp.csv"
    return Path(str(resources.files("clrpkit") / "data" / name))


BENCH_FIELDS = ["instance_id", "customers", "depots", "cost", "bks", "gap_percent", "time_s"]


def cmd_bench(cfg: dict, manifest: Manifest) -> int:
    directory = Path(cfg["directory"])
    if not directory.is_dir():
        raise InputError(f"not a directory: {directory}")
    paths = collect_instance_paths([directory])
    bks = _load_reference(cfg["bks"] or packaged_bks(cfg["variant"]))
    out = Path(cfg["out_dir"])
    rows, records = [], []
    for inst, sol, wall in solve_paths(paths, cfg, cfg["variant"]):
        verdict = check_feasible(inst, sol)
        if not verdict.ok:
            raise RuntimeError(f"{inst.id}: {cfg['method']} produced an infeasible solution: {verdict}")
        cost = objective(inst, sol)
        ref = bks.get(inst.id)
        if ref is None:
            print(f"warning: no BKS entry for {inst.id}", file=sys.stderr)
        rec = ResultRecord.from_cost(inst.id, cfg["method"], cost, wall, ref)
        records.append(rec)
        rows.append({
            "instance_id": inst.id, "customers": inst.n_customers, "depots": inst.n_depots,
            "cost": cost.total, "bks": ref, "gap_percent": rec.gap_vs_reference, "time_s": wall,
        })
    summary = bench_summary(rows)
    write_records(records, out / "bench_records.csv", out / "bench_records.jsonl")
    with open(out / "bench.csv", "w") as fh:
        fh.write(",".join(BENCH_FIELDS) + "\n")
        for r in rows + ([summary] if rows else []):
            fh.write(",".join("" if r[k] is None else str(r[k]) for k in BENCH_FIELDS) + "\n")
    for name in ("bench.csv", "bench_records.csv", "bench_records.jsonl"):
        manifest.add_output(out / name)
    table = [
        [r["instance_id"], f"{r['cost']:.0f}" if r["cost"] is not None else "",
         "" if r["bks"] is None else f"{r['bks']:.0f}",
         "" if r["gap_percent"] is None else format_gap(r["gap_percent"]), f"{r['time_s']:.2f}"]
        for r in rows + ([summary] if rows else [])
    ]
    _print_table(["instance", "cost", "BKS", "gap", "time_s"], table)
    return EXIT_OK


def bench_summary(rows: list[dict]) -> dict:
    """Average row: means of cost, BKS and time; the gap is the mean of per-instance gaps."""
    def mean(key):
        values = [r[key] for r in rows if r[key] is not None]
        return float(np.mean(values)) if values else None

    return {
        "instance_id": "Average", "customers": None, "depots": None, "cost": mean("cost"),
        "bks": mean("bks"), "gap_percent": mean("gap_percent"), "time_s": mean("time_s"),
    }


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "solve": cmd_solve, "evaluate": cmd_evaluate, "bench": cmd_bench}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out-dir", help="output directory (default: $CLRP_OUTPUT_DIR/<command> or runs/<command>)")
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--threads", type=int, help="torch threads (default: $CLRP_THREADS)")


def _add_solver_flags(p: argparse.ArgumentParser, method_default: str) -> None:
    p.add_argument("--method", "--strategy", dest="method", help=f"one of {', '.join(METHODS)} (default {method_default})")
    p.add_argument("--checkpoint", help="policy checkpoint for greedy, aug and sbs")
    p.add_argument("--preset", choices=("fast", "slow"), help="heuristic budget (default fast)")
    p.add_argument("--seed", type=int, help="heuristic seed (default 0)")
    p.add_argument("--time-limit", type=float, help="heuristic wall-clock cap per instance, seconds")
    p.add_argument("--aug-g", type=int, help="rotation count for aug (default 4)")
    p.add_argument("--aug-flips", action=argparse.BooleanOptionalAction, default=None,
                   help="also solve mirrored copies (default on, giving 8 copies with g=4)")
    p.add_argument("--aug-trajectories", type=int, help="diversified rollouts per copy (default 1)")
    p.add_argument("--beam", type=int, help="SBS beam width (default 4)")
    p.add_argument("--expand", type=int, help="SBS expansion factor (default 4)")
    p.add_argument("--parallel", type=int, help="worker processes (default 1, i.e. one instance at a time)")
    p.add_argument("--oracle-max-customers", type=int, help=f"oracle size guard (default {ORACLE_MAX_CUSTOMERS})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clrp", description="Location-routing toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample synthetic unit-square instances")
    p.add_argument("--customers", type=int, help="customers per instance (default 10)")
    p.add_argument("--depots", type=int, help="candidate depots per instance (default 5)")
    p.add_argument("--count", type=int, help="number of instances (default 1)")
    p.add_argument("--seed", type=int, help="root seed (default 0)")
    p.add_argument("--variant", choices=("closed", "open"))
    p.add_argument("--format", choices=("json", "benchmark"), help="file layout (default json)")
    _add_common(p)

    p = sub.add_parser("train", help="train the policy with REINFORCE")
    p.add_argument("--preset", choices=("smoke", "default"), help="base configuration (default: default)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--instances-per-epoch", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-trajectories", type=int)
    p.add_argument("--lr-initial", type=float)
    p.add_argument("--lr-late", type=float)
    p.add_argument("--lr-switch-epoch", type=int)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    p.add_argument("--seed", type=int)
    p.add_argument("--customers", type=int)
    p.add_argument("--depots", type=int)
    p.add_argument("--variant", choices=("closed", "open"))
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--ff-dim", type=int)
    p.add_argument("--norm", choices=("layer", "batch"))
    p.add_argument("--resume", help="checkpoint to continue from; the epoch counter carries on")
    _add_common(p)

    p = sub.add_parser("solve", help="solve instance files and write result records")
    p.add_argument("instances", nargs="+", help="instance files or directories")
    _add_solver_flags(p, "greedy")
    p.add_argument("--variant", choices=("closed", "open"), help="override the variant of every instance")
    p.add_argument("--reference", help="CSV of reference costs (instance_id,bks) for the gap column")
    _add_common(p)

    p = sub.add_parser("evaluate", help="check a solution file and print its cost breakdown")
    p.add_argument("instance")
    p.add_argument("solution")
    p.add_argument("--variant", choices=("closed", "open"))
    _add_common(p)

    p = sub.add_parser("bench", help="solve a directory of benchmark files and tabulate gaps")
    p.add_argument("directory")
    _add_solver_flags(p, "ils")
    p.add_argument("--variant", choices=("closed", "open"), help="closed (default) or open")
    p.add_argument("--bks", help="BKS table (default: the packaged table for the variant)")
    _add_common(p)
    return parser


_POSITIONAL = {"solve": ("instances",), "evaluate": ("instance", "solution"), "bench": ("directory",)}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    manifest = None
    try:
        cfg = resolve(args)
        for key in _POSITIONAL.get(args.command, ()):
            cfg[key] = getattr(args, key)
        if cfg.get("threads"):
            torch.set_num_threads(int(cfg["threads"]))
        manifest = Manifest(args.command, cfg, argv)
        code = COMMANDS[args.command](cfg, manifest)
        manifest.finish("ok" if code == EXIT_OK else "infeasible", code)
        return code
    except UsageError as exc:
        code, message = EXIT_USAGE, f"usage error: {exc}"
    except (InputError, InstanceError, FileNotFoundError) as exc:
        code, message = EXIT_INPUT, f"input error: {exc}"
    except (BudgetExceededError, RuntimeError, FloatingPointError, OSError) as exc:
        code, message = EXIT_RUNTIME, f"runtime error: {exc}"
    except Exception as exc:  # an unexpected failure is still a runtime failure, not a crash
        traceback.print_exc()
        code, message = EXIT_RUNTIME, f"runtime error: {type(exc).__name__}: {exc}"
    print(message, file=sys.stderr)
    if manifest is not None:
        manifest.finish("failed", code, message)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
