# mwsched.py
# Command-line harness for the Max-Weight scheduling simulator
# Subcommands: analyze (static stability report), simulate (R replications), sweep (ρ or one flow's rate)
# Replications run in a process pool through asyncio; output rows are ordered by (replication, flow)
# License: MIT

import argparse
import asyncio
import csv
import json
import logging
import math
import sys
from concurrent.futures import Executor, ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.netsched import arrivals as arr
from core.netsched import codec
from core.netsched.analysis import (
    bernoulli_bound,
    classify_flows,
    covering_number,
    loglog_slope,
    moment_bound,
    s_max,
    traffic_intensity,
)
from core.netsched.config import (
    ExperimentConfig,
    from_mapping,
    load_config_file,
    parse_number_list,
    set_log_level,
    with_arrivals,
    worker_count,
)
from core.netsched.engine import run_packed
from core.netsched.errors import (
    ConfigError,
    InfiniteMoment,
    NetschedError,
    RhoNotAdmissible,
    TooFewCheckpoints,
)
from core.netsched.model import network_to_dict
from core.netsched.scheduling import Priority, behaves_as_max_weight, policy_kind, policy_to_dict
from core.netsched.stats import SimStats, divergence_diagnostic, merge_all, summary_row

logger = logging.getLogger("mwsched")
if not logger.hasHandlers():
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter('[%(levelname)s] %(name)s: %(message)s'))
    logger.addHandler(handler)
logger.setLevel(logging.INFO)

# Configuration
EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
FLOAT_FORMAT = ".10g"
REPORT_FILE = "report.json"
STATS_CSV = "stats.csv"
CHECKPOINTS_FILE = "checkpoints.json"
FRAMES_FILE = "stats.frames"
SWEEP_CSV = "sweep.csv"
SWEEP_JSON = "sweep.json"
SWEEP_COLUMNS = ("point", "value", "rho", "flow", "rate", "mean_q", "stderr_q", "mean_q_alpha",
                 "mean_delay", "trend")


# ---------------------------------------------------------------- formatting

def fmt(value) -> str:
    """CSV 用の決定的な数値表記。"""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return format(v, FLOAT_FORMAT)
    return str(value)


def _json_num(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False, allow_nan=False)
        fh.write("\n")


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in rows:
            writer.writerow([fmt(v) for v in r])


# ---------------------------------------------------------------- orchestration

async def run_replications(config: ExperimentConfig, workers: Optional[int] = None,
                           executor: Optional[Executor] = None) -> List[bytes]:
    """
    config.seeds の各シードで run() を並列実行し、フレーム化された統計をレプリケーション順で返します。

    Args:
        config: 実験設定
        workers: プールサイズ（省略時 MWSCHED_THREADS または CPU 数）
        executor: 外部 Executor を指定（テスト用、シャットダウンは呼び出し側）
    """
    loop = asyncio.get_running_loop()
    own = executor is None
    if own:
        n = min(workers or worker_count(), config.replications)
        executor = ProcessPoolExecutor(max_workers=n, initializer=set_log_level,
                                       initargs=(logging.getLogger("core.netsched.engine").level,))
        logger.debug("Started process pool with %d workers", n)
    try:
        futures = [loop.run_in_executor(executor, run_packed, config.run_kwargs(seed)) for seed in config.seeds]
        frames = await asyncio.gather(*futures)
    finally:
        if own:
            executor.shutdown()
    logger.info("Completed %d replications of %s", len(frames), config.network.name)
    return list(frames)


def simulate_all(config: ExperimentConfig, workers: Optional[int] = None,
                 executor: Optional[Executor] = None) -> List[SimStats]:
    frames = asyncio.run(run_replications(config, workers, executor))
    return [codec.unpack_stats(f) for f in frames]


# ---------------------------------------------------------------- tables

def bound_columns(config: ExperimentConfig) -> List[Dict[str, float]]:
    """フローごとの H_f と Σ_f H_f（上界が定義できない場合は NaN）。"""
    F = config.network.num_flows
    nan = [{"H": float("nan"), "moment_total": float("nan")} for _ in range(F)]
    if isinstance(config.policy, Priority):
        return nan
    try:
        rho = traffic_intensity(config.rates, config.network)
        report = moment_bound(config.network, config.arrivals, config.policy.alphas_for(F), rho)
    except (InfiniteMoment, RhoNotAdmissible) as e:
        logger.info("Moment bound columns left empty: %s", e)
        return nan
    return [{"H": h, "moment_total": report.total} for h in report.H]


def stats_rows(config: ExperimentConfig, per_rep: Sequence[SimStats]) -> Tuple[List[str], List[List]]:
    """
    stats.csv のヘッダと行。

    行順: レプリケーションごと（replication, flow 順）、続いて mean / stderr / pooled の集約行。
    """
    F = config.network.num_flows
    alphas = config.policy.alphas_for(F)
    rows: List[List] = []
    bounds = bound_columns(config)
    by_flow: Dict[int, List[Dict]] = {f: [] for f in range(F)}
    keys: Optional[List[str]] = None
    for i, (seed, st) in enumerate(zip(config.seeds, per_rep)):
        for f in range(F):
            row = summary_row(st, f, alphas[f])
            row.update(bounds[f])
            keys = keys or list(row)
            by_flow[f].append(row)
            rows.append([i, seed, f] + [row[k] for k in keys])

    R = len(per_rep)
    for f in range(F):
        table = np.array([[float(r[k]) for k in keys] for r in by_flow[f]], dtype=float)
        mean = table.mean(axis=0)
        if R > 1:
            stderr = table.std(axis=0, ddof=1) / math.sqrt(R)
        else:
            stderr = np.full(len(keys), np.nan)
        rows.append(["mean", None, f] + mean.tolist())
        rows.append(["stderr", None, f] + stderr.tolist())
    pooled = merge_all(list(per_rep))
    for f in range(F):
        row = summary_row(pooled, f, alphas[f])
        row.update(bounds[f])
        rows.append(["pooled", None, f] + [row.get(k, float("nan")) for k in keys])
    return ["replication", "seed", "flow"] + keys, rows


def _diagnostic_dict(stats: SimStats, f: int) -> Dict:
    try:
        d = divergence_diagnostic(stats, f)
    except TooFewCheckpoints:
        return {"trend": None, "ratios": [], "slots": []}
    return {"trend": d.trend.value, "ratios": [_json_num(r) for r in d.ratios], "slots": list(d.slots)}


def checkpoint_report(config: ExperimentConfig, per_rep: Sequence[SimStats]) -> Dict:
    pooled = merge_all(list(per_rep))
    flows = []
    for f in range(config.network.num_flows):
        entry = {"flow": f, "label": config.network.label(f)}
        entry.update(_diagnostic_dict(pooled, f))
        entry["per_replication"] = [
            dict({"replication": i, "seed": seed}, **_diagnostic_dict(st, f))
            for i, (seed, st) in enumerate(zip(config.seeds, per_rep))
        ]
        flows.append(entry)
    return {
        "network": config.network.name,
        "policy": policy_to_dict(config.policy),
        "horizon": config.horizon,
        "checkpoints": list(config.checkpoints),
        "basis": "block",
        "flows": flows,
    }


def _print_table(header: Sequence[str], rows: Sequence[Sequence]) -> None:
    cells = [[fmt(v) if not isinstance(v, str) else v for v in r] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h) for i, h in enumerate(header)]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    for r in cells:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)))


# ---------------------------------------------------------------- commands

def cmd_analyze(config: ExperimentConfig) -> int:
    report = classify_flows(config.network, config.arrivals, config.policy)
    out = report.to_dict()
    out["arrivals"] = [arr.arrival_to_dict(a) for a in config.arrivals]
    out["policy_spec"] = policy_to_dict(config.policy)
    out["topology"] = network_to_dict(config.network)
    config.output_dir.mkdir(parents=True, exist_ok=True)
    _write_json(config.output_dir / REPORT_FILE, out)

    print(f"network={report.network} policy={report.policy} rho={report.rho:.6f} "
          f"k*={report.k_star} S_max={report.s_max}")
    if not report.admissible:
        print(f"rates are NOT admissible (rho={report.rho:.6f} >= 1)")
    _print_table(
        ["flow", "label", "rate", "heavy", "class", "mu", "threshold", "H"],
        [[r.id, r.label, r.rate, r.heavy, r.cls.value, r.mu, r.threshold, r.H] for r in report.flows],
    )
    for name, value in report.bounds.items():
        print(f"bound {name}: {fmt(value) if value is not None else 'infinite'}")
    logger.info("Wrote %s", config.output_dir / REPORT_FILE)
    return EXIT_OK


def cmd_simulate(config: ExperimentConfig, executor: Optional[Executor] = None) -> int:
    per_rep = simulate_all(config, executor=executor)
    config.output_dir.mkdir(parents=True, exist_ok=True)
    header, rows = stats_rows(config, per_rep)
    _write_csv(config.output_dir / STATS_CSV, header, rows)
    ckpt = checkpoint_report(config, per_rep)
    _write_json(config.output_dir / CHECKPOINTS_FILE, ckpt)
    codec.write_frames(config.output_dir / FRAMES_FILE, per_rep)

    means = [r for r in rows if r[0] == "mean"]
    _print_table(
        ["flow", "label", "mean_q", "mean_delay", "trend"],
        [[f, config.network.label(f), means[f][header.index("mean_q")],
          means[f][header.index("mean_delay")], ckpt["flows"][f]["trend"] or "n/a"]
         for f in range(config.network.num_flows)],
    )
    logger.info("Wrote %s, %s and %s under %s", STATS_CSV, CHECKPOINTS_FILE, FRAMES_FILE, config.output_dir)
    return EXIT_OK


def sweep_points(config: ExperimentConfig, sweep_rho: Optional[Sequence[float]],
                 sweep_flow: Optional[int], values: Optional[Sequence[float]]
                 ) -> List[Tuple[float, ExperimentConfig]]:
    """(掃引値, その点の設定) のリスト。"""
    if sweep_rho:
        rates = config.rates
        base = traffic_intensity(rates, config.network)
        if base <= 0:
            raise ConfigError("cannot sweep rho from an all-zero rate vector")
        return [(rho, with_arrivals(config, [arr.with_rate(a, lam * rho / base)
                                             for a, lam in zip(config.arrivals, rates)]))
                for rho in sweep_rho]
    if sweep_flow is None or not values:
        raise ConfigError("sweep needs --sweep-rho or --sweep-flow with --sweep-values")
    if not 0 <= sweep_flow < config.network.num_flows:
        raise ConfigError(f"--sweep-flow {sweep_flow} out of range [0, {config.network.num_flows})")
    points = []
    for v in values:
        arrivals = list(config.arrivals)
        arrivals[sweep_flow] = arr.with_rate(arrivals[sweep_flow], v)
        points.append((v, with_arrivals(config, arrivals)))
    return points


def cmd_sweep(config: ExperimentConfig, sweep_rho: Optional[Sequence[float]] = None,
              sweep_flow: Optional[int] = None, values: Optional[Sequence[float]] = None,
              executor: Optional[Executor] = None) -> int:
    points = sweep_points(config, sweep_rho, sweep_flow, values)
    k_star = covering_number(config.network)
    smax = s_max(config.network)
    F = config.network.num_flows
    alphas = config.policy.alphas_for(F)
    rows: List[List] = []
    summary: List[Dict] = []
    for idx, (value, point_cfg) in enumerate(points):
        rho = traffic_intensity(point_cfg.rates, point_cfg.network)
        per_rep = simulate_all(point_cfg, executor=executor)
        pooled = merge_all(per_rep)
        rep_means = np.array([st.mean_q() for st in per_rep])
        stderr = rep_means.std(axis=0, ddof=1) / math.sqrt(len(per_rep)) if len(per_rep) > 1 \
            else np.full(F, np.nan)
        flows = []
        for f in range(F):
            trend = _diagnostic_dict(pooled, f)["trend"]
            row = [idx, value, rho, f, point_cfg.rates[f], float(pooled.mean_q()[f]), float(stderr[f]),
                   float(pooled.mean_q_pow(alphas[f])[f]), float(pooled.mean_delay()[f]), trend or "n/a"]
            rows.append(row)
            flows.append({k: _json_num(v) for k, v in zip(SWEEP_COLUMNS[3:], row[3:])})
        bound = None
        light = all(a.size == arr.Constant(1) for a in point_cfg.arrivals)
        if light and rho < 1.0 and behaves_as_max_weight(config.policy):
            bound = bernoulli_bound(rho, k_star, smax)
        summary.append({"point": idx, "value": value, "rho": rho,
                        "sum_mean_q": float(pooled.mean_q().sum()),
                        "bernoulli_bound": bound, "flows": flows})
        logger.info("Sweep point %d/%d (value=%s, rho=%.4f) done", idx + 1, len(points), value, rho)

    slope = None
    if sweep_rho and len(summary) >= 2 and all(p["rho"] < 1.0 and p["sum_mean_q"] > 0 for p in summary):
        slope = loglog_slope([1.0 / (1.0 - p["rho"]) for p in summary], [p["sum_mean_q"] for p in summary])

    config.output_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(config.output_dir / SWEEP_CSV, SWEEP_COLUMNS, rows)
    _write_json(config.output_dir / SWEEP_JSON, {
        "network": config.network.name,
        "policy": policy_to_dict(config.policy),
        "parameter": "rho" if sweep_rho else f"rate[{sweep_flow}]",
        "k_star": k_star,
        "s_max": smax,
        "slope_vs_inverse_gap": slope,
        "points": summary,
    })
    _print_table(["point", "value", "rho", "sum_mean_q", "bernoulli_bound"],
                 [[p["point"], p["value"], p["rho"], p["sum_mean_q"], p["bernoulli_bound"]] for p in summary])
    if slope is not None:
        print(f"log-log slope of sum mean_q against 1/(1-rho): {slope:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing

def _int_like(text: str) -> int:
    """'1e7' のような表記も受け付ける整数。"""
    try:
        v = float(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from e
    if not v.is_integer():
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    return int(v)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mwsched", description="Max-Weight scheduling simulator and analysis")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", help="named topology, e.g. fig1, fig3, parallel4, switch(3), ring6")
    common.add_argument("--config", type=Path, help="experiment JSON file (flags override it)")
    common.add_argument("--rates", help="comma-separated arrival rates, one per flow")
    common.add_argument("--rho", type=float, help="rescale rates to this traffic intensity")
    common.add_argument("--policy", choices=("mw", "mwalpha", "priority"))
    common.add_argument("--alphas", help="comma-separated Max-Weight-alpha exponents")
    common.add_argument("--order", help="comma-separated priority order (highest first)")
    common.add_argument("--heavy", help="comma-separated flows given Zeta-sized files")
    common.add_argument("--beta", type=float, help="tail index for --heavy flows (default 1.5)")
    common.add_argument("--horizon", type=_int_like)
    common.add_argument("--warmup", type=_int_like)
    common.add_argument("--replications", type=_int_like)
    common.add_argument("--seed", type=_int_like)
    common.add_argument("--checkpoints", help="comma-separated checkpoint slots")
    common.add_argument("--collect", choices=("warmup", "cycle"))
    common.add_argument("--out", type=Path, help="output directory")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true")
    verbosity.add_argument("--quiet", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("analyze", parents=[common], help="static stability classification")
    sub.add_parser("simulate", parents=[common], help="run replications and write statistics")
    sweep = sub.add_parser("sweep", parents=[common], help="simulate across rho or one flow's rate")
    sweep.add_argument("--sweep-rho", help="comma-separated traffic intensities")
    sweep.add_argument("--sweep-flow", type=int)
    sweep.add_argument("--sweep-values", help="comma-separated rates for --sweep-flow")
    return parser


_POLICY_KINDS = {"mw": "max_weight", "mwalpha": "max_weight_alpha", "priority": "priority"}


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    data = load_config_file(args.config) if args.config else {}
    overrides = {
        "preset": args.preset,
        "rates": parse_number_list(args.rates) if args.rates else None,
        "rho": args.rho,
        "alphas": parse_number_list(args.alphas) if args.alphas else None,
        "order": parse_number_list(args.order, int) if args.order else None,
        "heavy": parse_number_list(args.heavy, int) if args.heavy else None,
        "beta": args.beta,
        "horizon": args.horizon,
        "warmup": args.warmup,
        "replications": args.replications,
        "seed": args.seed,
        "checkpoints": parse_number_list(args.checkpoints, int) if args.checkpoints else None,
        "collect": args.collect,
        "output_dir": str(args.out) if args.out else None,
    }
    if args.policy:
        kind = _POLICY_KINDS[args.policy]
        policy = {"kind": kind}
        # ファイル側のパラメータは同じ種類のポリシーのときだけ引き継ぐ
        file_policy = data.get("policy")
        if isinstance(file_policy, dict) and policy_kind(file_policy) == kind:
            policy.update(file_policy)
        overrides["policy"] = policy
    elif args.alphas and "policy" not in data:
        overrides["policy"] = {"kind": "max_weight_alpha"}
    return from_mapping(data, overrides)


def main(argv: Optional[Sequence[str]] = None, executor: Optional[Executor] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    if args.verbose:
        set_log_level(logging.DEBUG)
        logger.setLevel(logging.DEBUG)
    elif args.quiet:
        set_log_level(logging.WARNING)
        logger.setLevel(logging.WARNING)

    try:
        config = config_from_args(args)
        if args.command == "analyze":
            return cmd_analyze(config)
        if args.command == "simulate":
            return cmd_simulate(config, executor)
        return cmd_sweep(
            config,
            parse_number_list(args.sweep_rho) if args.sweep_rho else None,
            args.sweep_flow,
            parse_number_list(args.sweep_values) if args.sweep_values else None,
            executor,
        )
    except ConfigError as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG
    except (NetschedError, OSError, RuntimeError) as e:
        logger.error("Run failed: %s", e)
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
