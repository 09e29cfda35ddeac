"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data error (unreadable or
inconsistent inputs), 4 insufficient statistics for a requested fit.
Every command that writes an output directory also writes
``effective_config.json`` there, which reproduces the outputs exactly.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import pipeline, records, stats
from .chip import default_layout, load_layout
from .detector import cluster_jumps, detect_run
from .simulator import simulate_run
from .tls import simulate_tls_run

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INSUFFICIENT = 0, 2, 3, 4
log = logging.getLogger("radjump")


class DataError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _effective(args, **extra) -> cfgmod.EffectiveConfig:
    overrides = {"seed": getattr(args, "seed", None), "threshold": getattr(args, "threshold", None),
                 "workers": getattr(args, "workers", None)}
    overrides.update(extra)
    try:
        return cfgmod.load(args.config, overrides)
    except (OSError, cfgmod.ConfigError) as exc:
        raise DataError(f"config: {exc}") from exc


def _layout(eff: cfgmod.EffectiveConfig):
    path = eff.run.get("layout")
    try:
        return load_layout(path) if path else default_layout()
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"layout: {exc}") from exc


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_effective(out: Path, eff: cfgmod.EffectiveConfig, command: str, **inputs) -> None:
    doc = {"command": command, **eff.to_dict()}
    if inputs:
        doc["inputs"] = inputs
    records.write_json(out / "effective_config.json", doc)


def _public(report: dict) -> dict:
    return {k: v for k, v in report.items() if not k.startswith("_")}


def _read_runs(paths):
    """Read run manifests, collecting per-file errors instead of stopping at the first."""
    runs, errors = [], []
    for p in paths:
        try:
            runs.append(records.read_run(p))
        except (records.RecordError, OSError, ValueError, KeyError) as exc:
            errors.append(f"{p}: {exc}")
    return runs, errors


def _report_errors(errors) -> None:
    for e in errors:
        print(f"error: {e}", file=sys.stderr)


# ----------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    eff = _effective(args)
    layout = _layout(eff)
    out = _outdir(args)
    _write_effective(out, eff, "simulate", n_runs=args.n_runs, encoding=args.encoding)
    for i in range(args.n_runs):
        cfg = eff.sim.replace(seed=eff.sim.seed + i)
        rec = simulate_run(cfg, layout)
        path = records.write_run(rec, out / f"run_{i:04d}.json", encoding=args.encoding)
        print(f"run {i}: seed {cfg.seed}, {len(rec.impacts)} impacts -> {path.name}")
    return EXIT_OK


def cmd_simulate_tls(args) -> int:
    eff = _effective(args)
    layout = _layout(eff)
    out = _outdir(args)
    _write_effective(out, eff, "simulate-tls", n_runs=args.n_runs)
    qubits = [int(q) for q in args.qubits.split(",")] if args.qubits else None
    for i in range(args.n_runs):
        sim = eff.sim.replace(seed=eff.sim.seed + i)
        series = simulate_tls_run(eff.tls, sim, layout, qubit_ids=qubits)
        for q, s in series.items():
            records.write_spectrum(s, out / f"tls_{i:04d}_q{q:02d}.json")
        n_scr = sum(len(s.scramble_iterations or ()) for s in series.values())
        print(f"run {i}: seed {sim.seed}, {len(next(iter(series.values())).impacts)} impacts, "
              f"{n_scr} scrambling events")
    return EXIT_OK


def _summaries_from_runs(runs, params, thresholds):
    out = []
    for i, rec in enumerate(runs):
        out.append(pipeline.summarize_run(rec, params, i, min(thresholds)))
    return out


def cmd_detect(args) -> int:
    eff = _effective(args)
    runs, errors = _read_runs(args.runs)
    if errors:
        _report_errors(errors)
        return EXIT_DATA
    out = _outdir(args)
    _write_effective(out, eff, "detect", runs=[str(p) for p in args.runs])
    params = eff.detector
    thresholds = sorted(set(_thresholds(args.thresholds) + [params.threshold]))
    summaries = _summaries_from_runs(runs, params, thresholds)
    dets = [d for s in summaries for d in s.at_threshold(params.threshold)]
    records.write_detections(out / "detections.csv", dets, params)
    multi, singles = cluster_jumps(dets, params)
    summary = {
        "threshold": params.threshold,
        "n_runs": len(runs),
        "n_detections": len(dets),
        "n_multi_qubit_jumps": len(multi),
        "n_single_qubit_jumps": len(singles),
        "runs": [str(p) for p in args.runs],
        "per_qubit": {str(q): sum(1 for d in dets if d.qubit_id == q)
                      for q in sorted({q for r in runs for q in r.qubit_ids})},
        "threshold_counts": {str(t): sum(len(s.at_threshold(t)) for s in summaries) for t in thresholds},
    }
    if any(r.impacts is not None for r in runs):
        timing = pipeline.timing_accuracy(summaries, params.threshold, params)
        offsets = timing.pop("offsets")
        summary["timing_accuracy"] = timing
        vals, counts = np.unique(offsets, return_counts=True)
        records.write_table(out / "timing_offsets.csv", ["offset_steps", "count"], zip(vals, counts))
    records.write_json(out / "summary.json", summary)
    print(f"{len(dets)} detections, {len(multi)} multi-qubit jumps at threshold {params.threshold}")
    return EXIT_OK


def _thresholds(text) -> list[float]:
    if not text:
        return []
    try:
        return [float(t) for t in text.split(",")]
    except ValueError as exc:
        raise DataError(f"bad threshold list {text!r}") from exc


def _load_detections(args, params):
    if not args.detections:
        raise DataError("--detections is required for this analysis")
    try:
        dets = records.read_detections(args.detections)
    except (records.RecordError, OSError) as exc:
        raise DataError(str(exc)) from exc
    return [d for d in dets if d.peak_value >= params.threshold]


def cmd_analyze(args) -> int:
    eff = _effective(args, area_mm2=args.area_mm2)
    params = eff.detector
    out = _outdir(args)
    _write_effective(out, eff, f"analyze {args.analysis}",
                     runs=[str(p) for p in args.runs], detections=args.detections, spectra=args.spectra)
    name = args.analysis

    if name == "rate":
        if args.tau is None:
            raise DataError("analyze rate needs --tau (seconds)")
        area = args.area_mm2 if args.area_mm2 is not None else eff.run.get("area_mm2")
        if area is None:
            area = _layout(eff).area_mm2()
        try:
            rate = stats.normalized_rate(args.tau, area)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        records.write_json(out / "rate.json", {"tau_jump_s": args.tau, "area_mm2": area,
                                               "normalized_rate_per_s_mm2": rate})
        print(f"normalized rate: {rate:.1e} /(s mm^2)")
        return EXIT_OK

    if name == "scramble":
        window = int(eff.run.get("window", 200))
        r_thr = float(eff.run.get("r_threshold", 0.4))
        series = {}
        try:
            for p in args.spectra:
                s = records.read_spectrum(p)
                series[s.qubit_id] = s
        except (records.RecordError, OSError, ValueError) as exc:
            raise DataError(str(exc)) from exc
        if not series:
            raise DataError("analyze scramble needs --spectra files")
        res = pipeline.analyze_tls_run(series, params, window, r_thr)
        rows, report = [], {"window": window, "r_threshold": r_thr, "n_multi_qubit_jumps": len(res.multi),
                            "jump_iterations": [mj.start for mj in res.multi], "qubits": {}}
        for q, rep in sorted(res.reports.items()):
            report["qubits"][str(q)] = {"fraction_below": rep.fraction_below, "events": rep.events,
                                        "dips": rep.dips,
                                        "fraction_jumps_with_dip": rep.fraction_jumps_with_dip}
            rows.extend((q, i, v) for i, v in enumerate(rep.r))
        records.write_table(out / "pearson_r.csv", ["qubit_id", "iteration", "r"], rows)
        records.write_json(out / "scramble.json", report)
        n_ev = sum(len(r.events) for r in res.reports.values())
        print(f"{n_ev} scrambling events, {len(res.multi)} multi-qubit jumps")
        return EXIT_OK

    runs, errors = _read_runs(args.runs)
    if errors:
        _report_errors(errors)
        return EXIT_DATA
    if not runs:
        raise DataError(f"analyze {name} needs run files")
    dets = _load_detections(args, params)
    by_run = dict(enumerate(runs))
    if any(d.run_id not in by_run for d in dets):
        raise DataError("detections refer to runs that were not given")
    if len({r.config.n_reps for r in runs}) > 1 or len({r.layout_path for r in runs}) > 1:
        raise DataError("runs have inconsistent lengths or layouts")

    if name == "dip":
        multi, _ = cluster_jumps(dets, params)
        members = [d for mj in multi for d in mj.members] if not args.all_detections else dets
        window = int(eff.run.get("window", round(params.min_separation_samples)))
        prof = stats.dip_aggregate(by_run, members, window)
        records.write_table(out / "dip_profile.csv", ["offset", "mean", "smoothed", "count", "z"],
                            zip(prof.offsets, prof.mean, prof.smoothed, prof.counts, prof.z))
        at, zmin = prof.min_z_near(3)
        records.write_json(out / "dip.json", {"n_events": prof.n_events, "z_post": prof.z_post,
                                              "min_z_within_3": zmin, "min_z_offset": at,
                                              "background_mean": prof.background_mean,
                                              "background_std": prof.background_std})
        print(f"dip over {prof.n_events} events: z at trigger {prof.z_post:.2f}")
        return EXIT_OK

    if name == "delays":
        T = runs[0].config.duration
        bin_width = float(eff.run.get("bin_width", 2.0))
        times = [np.array(sorted(d.t_trigger * params.sample_period for d in dets if d.run_id == i))
                 for i in range(len(runs))]
        hist = stats.delay_histogram(times, bin_width, T)
        fit = stats.fit_modified_poisson(hist, T)
        records.write_table(out / "delay_histogram.csv", ["bin_start_s", "bin_end_s", "count", "expected"],
                            zip(hist.edges[:-1], hist.edges[1:], hist.counts, fit.expected))
        report = {"tau_jump_s": fit.tau_jump, "p_coinc": fit.p_coinc, "chi2": fit.chi2, "dof": fit.dof,
                  "n_delays": fit.n_delays, "run_duration_s": T, "bin_width_s": bin_width}
        if all(r.impacts is not None for r in runs):
            summaries = [pipeline.RunSummary(i, r.config.seed, T, tuple(r.impacts),
                                             [d for d in dets if d.run_id == i], {}, r.config)
                         for i, r in by_run.items()]
            report["ground_truth"] = pipeline.delay_truth(summaries, params.threshold, params)
        records.write_json(out / "delays.json", report)
        print(f"tau_jump = {fit.tau_jump:.2f} s, P_coinc = {fit.p_coinc:.3f}")
        return EXIT_OK

    if name == "distance":
        layout = _layout(eff)
        multi, _ = cluster_jumps(dets, params)
        hours = sum(r.config.duration for r in runs) / 3600.0
        ids = [q for q in runs[0].qubit_ids if q not in params.excluded_qubits]
        dfit = stats.coincidence_vs_distance(multi, layout, hours, qubit_ids=ids)
        records.write_table(out / "pair_rates.csv", ["qubit_a", "qubit_b", "distance_mm", "coincidences",
                                                     "rate_per_hour"], dfit.pairs)
        records.write_table(out / "distance_bins.csv", ["distance_mm", "mean_rate_per_hour"],
                            zip(dfit.bin_centers, dfit.bin_rates))
        records.write_json(out / "distance.json", {"amplitude_per_hour": dfit.amplitude,
                                                   "sigma_mm": dfit.sigma, "flags": list(dfit.flags),
                                                   "detector_hours": hours})
        print(f"sigma = {dfit.sigma:.2f} mm, amplitude = {dfit.amplitude:.2f} /h {list(dfit.flags) or ''}")
        return EXIT_OK
    raise DataError(f"unknown analysis {name!r}")


def cmd_replicate(args) -> int:
    eff = _effective(args, n_runs=args.n_runs)
    n_runs = int(eff.run.get("n_runs", 250))
    workers = int(eff.run.get("workers", 1))
    out = _outdir(args)
    _write_effective(out, eff, "replicate-appendix")
    res = pipeline.replicate(n_runs, eff.sim.seed, workers, eff.sim, eff.detector, _layout(eff))
    try:
        report = pipeline.appendix_report(res, eff.detector.threshold,
                                          int(eff.run.get("n_null_seeds", 100)))
    except pipeline.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INSUFFICIENT if isinstance(exc.original, stats.InsufficientDataError) else EXIT_DATA
    _write_report_tables(out, res, report)
    records.write_json(out / "summary.json", _public(report))
    for name, ok in report["checks"].items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return EXIT_OK


def _write_report_tables(out: Path, res, report: dict) -> None:
    timing = pipeline.timing_accuracy(res.summaries, report["threshold"], res.params)
    vals, counts = np.unique(timing["offsets"], return_counts=True)
    records.write_table(out / "timing_offsets.csv", ["offset_steps", "count"], zip(vals, counts))
    prof = report["_dip_profile"]
    records.write_table(out / "dip_profile.csv", ["offset", "mean", "smoothed", "count", "z"],
                        zip(prof.offsets, prof.mean, prof.smoothed, prof.counts, prof.z))
    hist, fit = report["_delay_hist"], report["_delay_fit"]
    records.write_table(out / "delay_histogram.csv", ["bin_start_s", "bin_end_s", "count", "expected"],
                        zip(hist.edges[:-1], hist.edges[1:], hist.counts, fit.expected))
    dfit = report["_distance_fit"]
    records.write_table(out / "pair_rates.csv", ["qubit_a", "qubit_b", "distance_mm", "coincidences",
                                                 "rate_per_hour"], dfit.pairs)


def cmd_sweep(args) -> int:
    eff = _effective(args, n_runs=args.n_runs)
    thresholds = _thresholds(args.thresholds) or list(pipeline.SWEEP_THRESHOLDS)
    out = _outdir(args)
    _write_effective(out, eff, "sweep-threshold", thresholds=thresholds, runs=[str(p) for p in args.runs])
    if args.runs:
        runs, errors = _read_runs(args.runs)
        if errors:
            _report_errors(errors)
            return EXIT_DATA
        summaries = _summaries_from_runs(runs, eff.detector, thresholds)
    else:
        n_runs = int(eff.run.get("n_runs", 25))
        summaries = pipeline.run_batch(eff.sim, _layout(eff), n_runs, eff.detector, eff.sim.seed,
                                       min(thresholds), workers=int(eff.run.get("workers", 1)))
    rows = pipeline.threshold_sweep(summaries, thresholds, float(eff.run.get("bin_width", 2.0)))
    records.write_table(out / "threshold_sweep.csv", ["threshold", "detections", "tau_jump", "p_coinc"],
                        [(r["threshold"], r["detections"], r["tau_jump"], r["p_coinc"]) for r in rows])
    counts = [r["detections"] for r in rows]
    taus = [r["tau_jump"] for r in rows if math.isfinite(r["tau_jump"])]
    summary = {"rows": rows, "counts_non_increasing": all(a >= b for a, b in zip(counts, counts[1:])),
               "tau_ratio_max_min": max(taus) / min(taus) if taus else math.nan}
    records.write_json(out / "sweep.json", summary)
    for r in rows:
        print(f"threshold {r['threshold']:g}: {r['detections']} detections, tau {r['tau_jump']:.2f} s")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key-value settings file (TOML syntax)")
    common.add_argument("--seed", type=int, help="base seed (run i uses seed + i)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--workers", type=int, help="worker processes for multi-run commands")
    common.add_argument("--threshold", type=float, help="detection threshold")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="radjump", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate jump-detector runs")
    s.add_argument("--n-runs", type=int, default=1)
    s.add_argument("--encoding", choices=["qrl1", "csv"], default="qrl1")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("simulate-tls", parents=[common], help="simulate interleaved TLS spectroscopy")
    s.add_argument("--n-runs", type=int, default=1)
    s.add_argument("--qubits", help="comma-separated qubit ids (default: active qubits)")
    s.set_defaults(func=cmd_simulate_tls)

    s = sub.add_parser("detect", parents=[common], help="detect charge jumps in run files")
    s.add_argument("runs", nargs="+", type=Path, help="run manifests (.json)")
    s.add_argument("--thresholds", help="extra comma-separated thresholds to count")
    s.set_defaults(func=cmd_detect)

    s = sub.add_parser("analyze", parents=[common], help="run one analysis")
    s.add_argument("analysis", choices=["dip", "delays", "distance", "rate", "scramble"])
    s.add_argument("runs", nargs="*", type=Path, help="run manifests, in the order given to detect")
    s.add_argument("--detections", type=Path, help="detections.csv written by detect")
    s.add_argument("--spectra", nargs="*", type=Path, default=[], help="spectrum manifests (scramble)")
    s.add_argument("--tau", type=float, help="mean time between impacts in seconds (rate)")
    s.add_argument("--area-mm2", type=float, help="chip area in mm^2 (rate)")
    s.add_argument("--all-detections", action="store_true", help="dip over all detections, not only multi-qubit")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("replicate-appendix", parents=[common], help="simulation study of timing accuracy")
    s.add_argument("--n-runs", type=int)
    s.set_defaults(func=cmd_replicate)

    s = sub.add_parser("sweep-threshold", parents=[common], help="detection counts and tau vs threshold")
    s.add_argument("runs", nargs="*", type=Path, help="run manifests (default: simulate fresh runs)")
    s.add_argument("--n-runs", type=int)
    s.add_argument("--thresholds", help="comma-separated thresholds (default 8,12,14,16)")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except stats.InsufficientDataError as exc:
        print(f"insufficient data: {exc}", file=sys.stderr)
        return EXIT_INSUFFICIENT
    except (DataError, records.RecordError, cfgmod.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
