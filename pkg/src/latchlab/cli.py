"""latchlab command line: simulate, analyze, predict, bench.

Exit codes: 0 success, 2 usage or configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional, Sequence

from scipy import optimize

from . import model, stats
from .dists import DistributionError, HoldingDist, parse_dist
from .sim import ConfigInvalid, SimConfig, SimResult, run_des, run_live

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3

HOLDING_NORMAL_US = 100.0


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def fmt(x, unit: str = "") -> str:
    if x is None:
        return "absent"
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    s = f"{x:.4g}"
    return f"{s} {unit}" if unit else s


def us(seconds: Optional[float]) -> Optional[float]:
    return None if seconds is None else seconds * 1e6


def _table(rows: Sequence[Sequence[str]], header: Sequence[str]) -> str:
    cols = [header, *rows]
    widths = [max(len(str(r[i])) for r in cols) for i in range(len(header))]
    line = lambda r: "  ".join(str(c).rjust(w) for c, w in zip(r, widths))
    return "\n".join([line(header), line(["-" * w for w in widths]), *map(line, rows)])


# -- recommendations ------------------------------------------------------


def recommend(d: stats.DiffStats, est: stats.Estimates, dist: Optional[HoldingDist] = None) -> str:
    """Spin-count guidance for one interval."""
    if not d.misses:
        return "no contention: no misses in the interval"
    S_us = est.service_time * 1e6
    if S_us > HOLDING_NORMAL_US:
        return (
            f"spin tuning useless: holding time {S_us:.4g} us is far above the microsecond range; "
            "suspect preemption/CPU starvation"
        )
    if dist is not None and d.kappa and d.kappa <= model.REGIME_THRESHOLD:
        try:
            model.high_efficiency_tail(dist, budget_for_kappa(dist, d.kappa))
        except model.ModelError:
            return (
                "spin tuning useless: holding-time distribution has no exponential tail; "
                "suspect preemption/CPU starvation"
            )
    if d.kappa is not None and d.kappa <= model.REGIME_THRESHOLD:
        return (
            f"increase spin budget: expected kappa -> kappa^2 per doubling "
            f"({d.kappa:.4g} -> {d.kappa**2:.4g}), extra spin CPU of order kappa"
        )
    if d.sigma is not None and d.sigma <= model.REGIME_THRESHOLD:
        return "low spin efficiency: doubling the spin budget doubles both spin efficiency and spin CPU"
    return "intermediate efficiency: evaluate candidate budgets with 'predict' and a holding-time distribution"


def budget_for_kappa(dist: HoldingDist, kappa: float) -> float:
    """Spin budget at which the model sleep ratio equals ``kappa``."""
    f = lambda x: model.sleep_ratio(dist, x) - kappa
    hi = dist.mean
    while f(hi) > 0 and hi < 1e6 * dist.mean:
        hi *= 2
    if f(hi) > 0:
        return hi
    return optimize.brentq(f, 0.0, hi, xtol=1e-12 * dist.mean)


# -- simulate / bench -----------------------------------------------------


def load_config(path: str, seed: Optional[int] = None) -> SimConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise CliError("config must be a JSON object")
    if seed is not None:
        raw["seed"] = seed
    try:
        return SimConfig.from_mapping(raw)
    except ConfigInvalid as exc:
        raise CliError(f"invalid config: {exc}") from exc


def _result_doc(r: SimResult, n_cpu: int) -> dict:
    cfg = r.config
    n_proc = cfg.n_processes
    doc: dict = {
        "live": r.live,
        "config": {
            "holding": cfg.holding.label(),
            "arrival": asdict(cfg.arrival),
            "spin_budget_us": cfg.spin_budget_us,
            "n_processes": n_proc,
            "wait_policy": type(cfg.wait_policy).__name__,
            "seed": cfg.seed,
        },
        "warnings": list(r.warnings),
        "stats": asdict(r.stats),
        "diff": r.diff.as_dict(),
        "sampled": asdict(r.sampled),
        "elapsed_s": r.elapsed_s,
    }
    est_doc: dict = {}
    if min(n_cpu, n_proc) >= 2 and r.diff.lam > 0:
        est = stats.estimate(r.diff, n_cpu, n_proc, r.sampled)
        est_doc = {
            "eta": est.eta,
            "utilization": est.utilization,
            "service_time_us": us(est.service_time),
            "queue_length": est.queue_length,
            "recurrent_sleep_ratio": est.recurrent.ratio if est.recurrent else None,
            "acquisition_time_us": us(est.acquisition.total) if est.acquisition else None,
            "spin_time_us": us(est.acquisition.spin) if est.acquisition else None,
            "sleep_time_us": us(est.acquisition.sleep) if est.acquisition else None,
        }
    doc["estimates"] = est_doc
    doc["measured"] = {
        "mean_hold_us": us(r.hold_time_s / r.stats.gets) if r.stats.gets else None,
        "mean_spin_us": us(r.mean_spin_s),
        "mean_acquisition_us": us(r.mean_acquisition_s),
        "spin_per_miss_us": us(r.spin_time_s / r.stats.misses) if r.stats.misses else None,
    }
    pred = model.predict(cfg.holding, cfg.spin_budget_us)
    doc["model"] = asdict(pred) | {"regime": pred.regime}
    return doc


def _print_result(doc: dict, out) -> None:
    d, s, e, m, p = doc["diff"], doc["sampled"], doc["estimates"], doc["measured"], doc["model"]
    c = doc["config"]
    print(
        f"{'live run' if doc['live'] else 'simulation'}: holding={c['holding']} "
        f"n_processes={c['n_processes']} spin_budget={fmt(c['spin_budget_us'], 'us')} seed={c['seed']}",
        file=out,
    )
    for w in doc["warnings"]:
        print(f"WARNING {w}", file=out)
    st = doc["stats"]
    print(
        f"counters: gets={st['gets']} misses={st['misses']} sleeps={st['sleeps']} "
        f"spin_gets={st['spin_gets']} wait_time={fmt(st['wait_time'], 'us')} elapsed={fmt(doc['elapsed_s'], 's')}",
        file=out,
    )
    print("differential statistics:", file=out)
    print(f"  lambda = {fmt(d['lambda'], 'Hz')}", file=out)
    for k in ("rho", "kappa", "sigma", "w"):
        print(f"  {k:<6} = {fmt(d[k])}", file=out)
    print(f"sampled: U = {fmt(s['u'])}  L = {fmt(s['l'])}  Ns = {fmt(s['n_s'])}  ({s['samples']} samples)", file=out)
    if e:
        print("estimates:", file=out)
        print(f"  eta*rho            = {fmt(e['utilization'])}", file=out)
        print(f"  holding time S     = {fmt(e['service_time_us'], 'us')}", file=out)
        print(f"  queue length L=W   = {fmt(e['queue_length'])}", file=out)
        print(f"  recurrent sleeps   = {fmt(e['recurrent_sleep_ratio'])}", file=out)
        print(f"  acquisition time   = {fmt(e['acquisition_time_us'], 'us')}", file=out)
        print(f"  sleeping time      = {fmt(e['sleep_time_us'], 'us')}", file=out)
    print(
        f"measured: hold={fmt(m['mean_hold_us'], 'us')} spin/get={fmt(m['mean_spin_us'], 'us')} "
        f"acquisition={fmt(m['mean_acquisition_us'], 'us')}",
        file=out,
    )
    rows = [
        ["sigma", fmt(d["sigma"]), fmt(p["sigma"])],
        ["kappa", fmt(d["kappa"]), fmt(p["kappa"])],
        ["spin/miss incl. re-spins (us)", fmt(m["spin_per_miss_us"]), fmt(p["gamma_sg"])],
    ]
    print("model comparison (" + p["regime"] + "):", file=out)
    print(_table(rows, ["quantity", "measured", "model"]), file=out)


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, args.seed)
    result = run_live(cfg) if args.live else _run_des_quiet(cfg)
    if args.snapshot_out:
        result.snapshot_csv(args.snapshot_out)
    if args.acquisitions_out:
        if result.records is None:
            raise CliError("set record_acquisitions=true in the config to export per-acquisition data")
        result.acquisitions_csv(args.acquisitions_out)
    n_cpu = args.ncpu if args.ncpu else cfg.n_processes
    doc = _result_doc(result, n_cpu)
    if args.json:
        json.dump(doc, sys.stdout, indent=2, default=str)
        print()
    else:
        _print_result(doc, sys.stdout)
    return EXIT_OK


def _run_des_quiet(cfg: SimConfig) -> SimResult:
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return run_des(cfg)


def _percentiles(values: list[float], qs=(50, 90, 99)) -> dict[str, float]:
    if not values:
        return {}
    v = sorted(values)
    return {f"p{q}": v[min(len(v) - 1, int(math.ceil(q / 100 * len(v))) - 1)] for q in qs}


def cmd_bench(args) -> int:
    from dataclasses import replace

    cfg = replace(load_config(args.config, args.seed), record_acquisitions=True)
    live = run_live(cfg)
    des = _run_des_quiet(cfg)
    n_cpu = args.ncpu if args.ncpu else cfg.n_processes
    docs = {}
    for name, r in (("live", live), ("des", des)):
        doc = _result_doc(r, n_cpu)
        acq = [(x.spin_ns + x.wait_ns) / 1000.0 for x in (r.records or [])]
        doc["throughput_hz"] = r.stats.gets / r.elapsed_s if r.elapsed_s else 0.0
        doc["acquisition_latency_us"] = _percentiles(acq)
        docs[name] = doc
    if args.json:
        json.dump(docs, sys.stdout, indent=2, default=str)
        print()
        return EXIT_OK
    for name, doc in docs.items():
        print(f"== {name} ==")
        _print_result(doc, sys.stdout)
        lat = doc["acquisition_latency_us"]
        print(f"throughput = {fmt(doc['throughput_hz'], 'Hz')}")
        if lat:
            print("acquisition latency: " + "  ".join(f"{k}={fmt(v, 'us')}" for k, v in lat.items()))
        print()
    return EXIT_OK


# -- analyze --------------------------------------------------------------


def analyze_snapshots(
    snapshots: list[stats.Snapshot], n_cpu: int, n_proc: int, dist: Optional[HoldingDist] = None
) -> dict:
    """Per-latch, per-interval analysis document; shared by text and JSON output."""
    report: dict = {"latches": {}, "errors": []}
    for latch_id, snaps in stats.group_by_latch(snapshots).items():
        entry: dict = {"intervals": [], "warnings": []}
        report["latches"][latch_id] = entry
        if len(snaps) < 2:
            entry["warnings"].append("fewer than two snapshots; nothing to diff")
            continue
        diffs = []
        for begin, end in stats.intervals(snaps):
            try:
                d = stats.diff(begin.stats, end.stats)
            except stats.StatsError as exc:
                report["errors"].append(f"{latch_id} @ {end.stats.timestamp}: {exc}")
                entry["intervals"].append({"start_s": begin.stats.timestamp, "error": str(exc)})
                continue
            diffs.append(d)
            entry["intervals"].append(_interval_doc(begin, end, d, n_cpu, n_proc, dist))
        entry["warnings"].extend(stats.stationarity_warnings(diffs))
    return report


def _interval_doc(begin, end, d: stats.DiffStats, n_cpu, n_proc, dist) -> dict:
    sampled = end.sampled
    est = stats.estimate(d, n_cpu, n_proc, sampled)
    findings = stats.contention_report(d, sampled, est)
    doc = {
        "start_s": begin.stats.timestamp,
        "end_s": end.stats.timestamp,
        "diff": d.as_dict(),
        "eta": est.eta,
        "utilization": est.utilization,
        "service_time_us": us(est.service_time),
        "queue_length": est.queue_length,
        "sleep_time_us": us(d.w / d.lam) if d.lam > 0 else None,
        "recurrent_sleep_ratio": est.recurrent.ratio if est.recurrent else None,
        "recurrent_sleep_raw": est.recurrent.raw if est.recurrent else None,
        "acquisition_time_us": us(est.acquisition.total) if est.acquisition else None,
        "spin_time_us": us(est.acquisition.spin) if est.acquisition else None,
        "sampled": asdict(sampled) if sampled else None,
        "findings": [asdict(f) for f in findings],
        "recommendation": recommend(d, est, dist),
    }
    if not d.misses:
        doc["findings"] = []
        doc["status"] = "no contention"
    else:
        doc["status"] = "contention" if findings else "ok"
    return doc


def _print_analysis(report: dict, out) -> None:
    for latch_id, entry in report["latches"].items():
        print(f"latch {latch_id}", file=out)
        for w in entry["warnings"]:
            print(f"  WARNING {w}", file=out)
        for iv in entry["intervals"]:
            if "error" in iv:
                print(f"  interval from {fmt(iv['start_s'], 's')}: ERROR {iv['error']}", file=out)
                continue
            d = iv["diff"]
            print(f"  interval {fmt(iv['start_s'], 's')} .. {fmt(iv['end_s'], 's')}: {iv['status']}", file=out)
            print(f"    Requests rate:    lambda = {fmt(d['lambda'], 'Hz')}", file=out)
            print(f"    Miss/get:            rho = {fmt(d['rho'])}", file=out)
            print(f"    Est. utilization: eta*rho = {fmt(iv['utilization'])} ({iv['utilization']:.1%})", file=out)
            print(f"    Slps/miss:         kappa = {fmt(d['kappa'])}", file=out)
            print(f"    Wait_time/sec:         W = {fmt(d['w'])}", file=out)
            print(f"    Spin_gets/miss:    sigma = {fmt(d['sigma'])}", file=out)
            if iv["sampled"]:
                s = iv["sampled"]
                print(f"    Sampled: U = {fmt(s['u'])}  L = {fmt(s['l'])}  Ns = {fmt(s['n_s'])}", file=out)
            print(f"    Recurrent sleeps ratio = {fmt(iv['recurrent_sleep_ratio'])}", file=out)
            print(f"    Avg holding time     = {fmt(iv['service_time_us'], 'us')}", file=out)
            print(f"    Sleeping time        = {fmt(iv['sleep_time_us'], 'us')}", file=out)
            print(f"    Acquisition time     = {fmt(iv['acquisition_time_us'], 'us')}", file=out)
            for f in iv["findings"]:
                vals = ", ".join(f"{k}={fmt(v)}" for k, v in f["values"].items())
                print(f"    FINDING {f['message']} ({vals})", file=out)
            print(f"    Recommendation: {iv['recommendation']}", file=out)
    for e in report["errors"]:
        print(f"ERROR {e}", file=out)


def cmd_analyze(args) -> int:
    try:
        snaps = stats.read_snapshots(args.snapshots)
    except OSError as exc:
        raise CliError(f"cannot read snapshots: {exc}") from exc
    except stats.ParseError as exc:
        raise CliError(f"{args.snapshots}: {exc}") from exc
    dist = _parse_dist_arg(args.dist) if args.dist else None
    try:
        report = analyze_snapshots(snaps, args.ncpu, args.nproc, dist)
    except stats.SingleCpuInapplicable as exc:
        raise CliError(str(exc)) from exc
    if args.json:
        json.dump(report, sys.stdout, indent=2)
        print()
    else:
        _print_analysis(report, sys.stdout)
    return EXIT_DATA if report["errors"] else EXIT_OK


# -- predict --------------------------------------------------------------


def _parse_dist_arg(text: str) -> HoldingDist:
    try:
        return parse_dist(text)
    except DistributionError as exc:
        raise CliError(f"bad distribution: {exc}") from exc


def _parse_candidates(text: str) -> list[float]:
    try:
        vals = [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise CliError(f"bad candidate list {text!r}") from None
    if not vals or any(not v >= 0 for v in vals):
        raise CliError("candidates must be a non-empty list of non-negative budgets")
    return vals


def predict_table(dist: HoldingDist, delta: float, candidates: Sequence[float]) -> dict:
    base = model.predict(dist, delta)
    try:
        tail = model.high_efficiency_tail(dist, delta) if 0 < delta < math.inf else None
        tail_note = (
            f"exponential tail (C={tail.C:.4g}, tau={tail.tau:.4g} us): doubling the budget squares kappa"
            if tail
            else None
        )
    except model.NoExponentialTail:
        tail = None
        tail_note = "no exponential tail; squaring law inapplicable"
    except model.PrecondViolated:
        tail, tail_note = None, None

    def ratio(a, b):
        return a / b if b else None

    rows = []
    for c in candidates:
        p = model.predict(dist, c)
        rows.append(
            asdict(p)
            | {
                "regime": p.regime,
                "sigma_ratio": ratio(p.sigma, base.sigma),
                "kappa_ratio": ratio(p.kappa, base.kappa),
                "gamma_ratio": ratio(p.gamma_sg, base.gamma_sg),
                "kappa_squared_baseline": base.kappa**2,
            }
        )
    return {
        "distribution": dist.label(),
        "mean_us": dist.mean,
        "residual_mean_us": dist.residual_mean,
        "baseline": asdict(base) | {"regime": base.regime},
        "tail": None
        if tail is None
        else {"C": tail.C, "tau": tail.tau, "r_squared": tail.r_squared, "squaring_ratio": tail.squaring_ratio},
        "notes": [n for n in [tail_note] if n],
        "candidates": rows,
    }


def _print_predict(doc: dict, out) -> None:
    b = doc["baseline"]
    print(
        f"holding {doc['distribution']}: <t> = {fmt(doc['mean_us'], 'us')}, "
        f"residual <t_l> = {fmt(doc['residual_mean_us'], 'us')}",
        file=out,
    )
    print(
        f"baseline delta = {fmt(b['delta'], 'us')}: sigma = {fmt(b['sigma'])}, kappa = {fmt(b['kappa'])}, "
        f"gamma_sg = {fmt(b['gamma_sg'], 'us')} ({b['regime']})",
        file=out,
    )
    rows = [
        [
            fmt(r["delta"]),
            fmt(r["sigma"]),
            fmt(r["kappa"]),
            fmt(r["gamma_sg"]),
            fmt(r["sigma_ratio"]),
            fmt(r["kappa_ratio"]),
            fmt(r["gamma_ratio"]),
            r["regime"],
        ]
        for r in doc["candidates"]
    ]
    header = ["delta_us", "sigma", "kappa", "gamma_us", "sigma/base", "kappa/base", "gamma/base", "regime"]
    print(_table(rows, header), file=out)
    for n in doc["notes"]:
        print(f"note: {n}", file=out)


def cmd_predict(args) -> int:
    if args.dist is None or args.delta is None:
        raise CliError("predict needs --dist and --delta")
    dist = _parse_dist_arg(args.dist)
    if not args.delta >= 0:
        raise CliError("--delta must be non-negative")
    cands = _parse_candidates(args.candidates) if args.candidates else [2 * args.delta]
    doc = predict_table(dist, args.delta, cands)
    if args.json:
        json.dump(doc, sys.stdout, indent=2)
        print()
    else:
        _print_predict(doc, sys.stdout)
    return EXIT_OK


# -- entry point ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latchlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")

    s = sub.add_parser("simulate", parents=[common], help="run the simulator on a JSON workload config")
    s.add_argument("--config", required=True)
    s.add_argument("--live", action="store_true", help="drive a real latch from threads instead")
    s.add_argument("--seed", type=int)
    s.add_argument("--ncpu", type=int, help="CPU count for the eta correction (default: n_processes)")
    s.add_argument("--snapshot-out", help="write begin/end snapshot CSV here")
    s.add_argument("--acquisitions-out", help="write per-acquisition CSV here")
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("analyze", parents=[common], help="analyze a snapshot CSV")
    a.add_argument("snapshots")
    a.add_argument("--ncpu", type=int, required=True)
    a.add_argument("--nproc", type=int, required=True)
    a.add_argument("--dist", help="holding-time distribution, enables the tail check")
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("predict", parents=[common], help="model spin-budget candidates")
    r.add_argument("--dist", required=True)
    r.add_argument("--delta", type=float, required=True, help="current spin budget in us")
    r.add_argument("--candidates", help="comma-separated candidate budgets in us (default: 2*delta)")
    r.set_defaults(func=cmd_predict)

    b = sub.add_parser("bench", parents=[common], help="live threads vs simulation on one config")
    b.add_argument("--config", required=True)
    b.add_argument("--seed", type=int)
    b.add_argument("--ncpu", type=int)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"latchlab: {exc}", file=sys.stderr)
        return exc.code
    except (stats.StatsError, model.ConsistencyError) as exc:
        print(f"latchlab: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())
