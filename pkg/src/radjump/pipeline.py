"""End-to-end runs: simulate, detect, and reduce many runs to the statistics.

Each run is reduced in a worker to a small :class:`RunSummary` (detections
at the lowest threshold of interest, the M0 windows around them and the
ground truth) so hundreds of 10^6-repetition runs never coexist in memory.
Results are merged in run order, so the worker count cannot change them.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import stats
from .chip import ChipLayout, default_layout
from .detector import DetectorParams, JumpDetection, averaged_detect, cluster_jumps, detect_run
from .simulator import RunRecord, SimConfig, impact_rep_index, simulate_run, t1_prob, with_readout_error
from .tls import TlsConfig, simulate_tls_run

log = logging.getLogger(__name__)

SWEEP_THRESHOLDS = (8.0, 12.0, 14.0, 16.0)


@dataclass
class RunSummary:
    run_id: int
    seed: int
    duration: float
    impacts: tuple
    detections: list[JumpDetection]
    windows: dict = field(repr=False)  # (qubit_id, t_trigger) -> int8 window, -1 off the ends
    config: SimConfig | None = field(default=None, repr=False)

    def at_threshold(self, threshold: float) -> list[JumpDetection]:
        return [d for d in self.detections if d.peak_value >= threshold]


def summarize_run(record: RunRecord, params: DetectorParams, run_id: int = 0,
                  min_threshold: float | None = None, window: int = 1136) -> RunSummary:
    """Detect at ``min_threshold`` and keep M0 windows around every detection.

    Detections at any higher threshold are exactly the subset whose peak
    value clears it: the greedy refractory thinning visits peaks from the
    highest down, so lower peaks never remove higher ones.
    """
    thr = params.threshold if min_threshold is None else min_threshold
    dets = detect_run(record, params.replace(threshold=thr), run_id)
    windows = {}
    for d in dets:
        w = stats.extract_windows(record.m0[record.row(d.qubit_id)], [d.t_trigger], window)[0]
        windows[(d.qubit_id, d.t_trigger)] = np.where(np.isfinite(w), w, -1).astype(np.int8)
    impacts = tuple(record.impacts) if record.impacts is not None else ()
    return RunSummary(run_id, record.config.seed, record.config.duration, impacts, dets, windows,
                      record.config)


def _simulate_summary(job):
    config, layout, run_id, params, min_threshold, window = job
    record = simulate_run(config, layout)
    return summarize_run(record, params, run_id, min_threshold, window)


def run_batch(config: SimConfig, layout: ChipLayout, n_runs: int, params: DetectorParams,
              base_seed: int | None = None, min_threshold: float | None = None,
              window: int = 1136, workers: int = 1) -> list[RunSummary]:
    """Simulate and summarize ``n_runs`` runs with seeds ``base_seed + i``."""
    base = config.seed if base_seed is None else base_seed
    jobs = [(config.replace(seed=base + i), layout, i, params, min_threshold, window) for i in range(n_runs)]
    if workers > 1 and n_runs > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_simulate_summary, jobs))
    out = []
    for job in jobs:
        out.append(_simulate_summary(job))
        if (job[2] + 1) % 25 == 0:
            log.info("simulated %d/%d runs", job[2] + 1, n_runs)
    return out


# ----------------------------------------------------------------- reductions


def multi_members(summaries, threshold: float, params: DetectorParams):
    """Multi-qubit jumps and their member detections at ``threshold``."""
    multi, members = [], []
    for s in summaries:
        m, _ = cluster_jumps(s.at_threshold(threshold), params)
        multi.extend(m)
        for mj in m:
            members.extend(mj.members)
    return multi, members


def match_truth(summary: RunSummary, detections, max_offset: float):
    """Nearest ground-truth impact repetition per detection, ``None`` if farther than ``max_offset``."""
    truth = np.array([impact_rep_index(summary.config, e.time) for e in summary.impacts], dtype=np.int64)
    out = []
    for d in detections:
        if truth.size == 0:
            out.append((d, None, None))
            continue
        k = int(np.argmin(np.abs(truth - d.t_trigger)))
        off = d.t_trigger - truth[k]
        out.append((d, int(truth[k]), k) if abs(off) <= max_offset else (d, None, None))
    return out


def timing_accuracy(summaries, threshold: float, params: DetectorParams, multi_only: bool = True) -> dict:
    """Trigger-minus-truth offsets (repetitions) and their robust spread."""
    by_run = {s.run_id: s for s in summaries}
    if multi_only:
        _, dets = multi_members(summaries, threshold, params)
    else:
        dets = [d for s in summaries for d in s.at_threshold(threshold)]
    offsets, unmatched = [], 0
    for run_id in sorted({d.run_id for d in dets}):
        run_dets = [d for d in dets if d.run_id == run_id]
        for d, t_true, _ in match_truth(by_run[run_id], run_dets, params.min_separation_samples):
            if t_true is None:
                unmatched += 1
            else:
                offsets.append(d.t_trigger - t_true)
    off = np.array(offsets, dtype=np.int64)
    if off.size == 0:
        return {"offsets": off, "n_matched": 0, "n_unmatched": unmatched, "mad": math.nan,
                "median_abs": math.nan, "std": math.nan, "median": math.nan}
    med = float(np.median(off))
    return {
        "offsets": off,
        "n_matched": int(off.size),
        "n_unmatched": unmatched,
        "median": med,
        "mad": float(np.median(np.abs(off - med))),
        "median_abs": float(np.median(np.abs(off))),
        "std": float(np.std(off)),
    }


def dip_from_summaries(summaries, threshold: float, params: DetectorParams, multi_only: bool = True,
                       smoothing_sigma: float = 10.0) -> stats.DipProfile:
    by_run = {s.run_id: s for s in summaries}
    if multi_only:
        _, dets = multi_members(summaries, threshold, params)
    else:
        dets = [d for s in summaries for d in s.at_threshold(threshold)]
    if not dets:
        raise stats.InsufficientDataError(f"no detections at threshold {threshold}")
    rows = np.array([by_run[d.run_id].windows[(d.qubit_id, d.t_trigger)] for d in dets], dtype=float)
    rows[rows < 0] = np.nan
    return stats.dip_profile(rows, smoothing_sigma=smoothing_sigma)


def null_dip_zscores(summaries, threshold: float, params: DetectorParams, n_seeds: int = 100,
                     base_seed: int = 10_000, window: int = 1136) -> np.ndarray:
    """Post-trigger z-scores with the T1 dip switched off.

    Without the dip, M0 is i.i.d. Bernoulli with the baseline survival and
    independent of M1, so each null seed redraws M0 over the span covering a
    qubit's windows and keeps the detections in place.
    """
    _, dets = multi_members(summaries, threshold, params)
    if not dets:
        raise stats.InsufficientDataError("no detections for the null test")
    by_run = {s.run_id: s for s in summaries}
    groups: dict = {}
    for d in dets:
        groups.setdefault((d.run_id, d.qubit_id), []).append(d.t_trigger)
    plans = []
    for (run_id, q), ts in sorted(groups.items()):
        cfg = by_run[run_id].config
        p = float(with_readout_error(t1_prob(cfg.baseline_t1, cfg), cfg.meas_error))
        ts = sorted(ts)
        # merged window spans, clipped to the run
        spans: list[list[int]] = []
        for t in ts:
            lo, hi = max(t - window, 0), min(t + window + 1, cfg.n_reps)
            if spans and lo <= spans[-1][1]:
                spans[-1][1] = max(spans[-1][1], hi)
            else:
                spans.append([lo, hi])
        plans.append((run_id, q, p, ts, spans, cfg.n_reps))
    zs = []
    for k in range(n_seeds):
        rows = []
        for run_id, q, p, ts, spans, n_reps in plans:
            rng = np.random.default_rng(np.random.SeedSequence(entropy=base_seed + k, spawn_key=(run_id, q)))
            draws = {}
            for lo, hi in spans:
                draws[lo] = (hi, rng.random(hi - lo) < p)
            for t in ts:
                lo = max(l for l in draws if l <= max(t - window, 0))
                hi, bits = draws[lo]
                row = np.full(2 * window + 1, np.nan)
                a, b = max(t - window, 0), min(t + window + 1, n_reps)
                row[a - (t - window):b - (t - window)] = bits[a - lo:b - lo]
                rows.append(row)
        zs.append(stats.dip_profile(np.array(rows), smoothing_sigma=0).z_post)
    return np.array(zs)


def trigger_times(summaries, threshold: float) -> list[np.ndarray]:
    out = []
    for s in summaries:
        dt = s.config.rep_period
        out.append(np.array(sorted(d.t_trigger * dt for d in s.at_threshold(threshold))))
    return out


def delay_truth(summaries, threshold: float, params: DetectorParams) -> dict:
    """Ground-truth event timescale and coincidence fraction of the delay list.

    Events are detected impacts plus unmatched (false) detections; a delay is
    coincident when both neighbours belong to the same impact.
    """
    n_events, n_delays, n_coinc, total_time = 0, 0, 0, 0.0
    for s in summaries:
        dets = sorted(s.at_threshold(threshold), key=lambda d: (d.t_trigger, d.qubit_id))
        matched = match_truth(s, dets, params.min_separation_samples)
        labels = [k if k is not None else ("fp", i) for i, (_, _, k) in enumerate(matched)]
        n_events += len(set(labels))
        n_delays += max(len(labels) - 1, 0)
        n_coinc += sum(1 for a, b in zip(labels, labels[1:]) if a == b and not isinstance(a, tuple))
        total_time += s.duration
    return {
        "tau_true": total_time / n_events if n_events else math.inf,
        "p_coinc_true": n_coinc / n_delays if n_delays else math.nan,
        "n_events": n_events,
        "n_delays": n_delays,
    }


def delay_analysis(summaries, threshold: float, bin_width: float = 2.0):
    T = summaries[0].duration
    hist = stats.delay_histogram(trigger_times(summaries, threshold), bin_width, T)
    return hist, stats.fit_modified_poisson(hist, T)


def first_bin_excess(hist: stats.DelayHistogram, fit: stats.DelayFit) -> float:
    """Observed minus pure-Poisson expected count in the first bin."""
    pure = hist.counts.sum() * stats.modified_poisson_bin_probs(hist.edges, fit.tau_jump, 0.0, fit.run_duration)
    return float(hist.counts[0] - pure[0])


def distance_analysis(summaries, layout: ChipLayout, threshold: float, params: DetectorParams):
    multi, _ = multi_members(summaries, threshold, params)
    hours = sum(s.duration for s in summaries) / 3600.0
    excluded = set(params.excluded_qubits)
    ids = [q for q in layout.active_ids if q not in excluded]
    return stats.coincidence_vs_distance(multi, layout, hours, qubit_ids=ids)


def threshold_sweep(summaries, thresholds=SWEEP_THRESHOLDS, bin_width: float = 2.0) -> list[dict]:
    rows = []
    for thr in thresholds:
        n = sum(len(s.at_threshold(thr)) for s in summaries)
        try:
            _, fit = delay_analysis(summaries, thr, bin_width)
            tau, p = fit.tau_jump, fit.p_coinc
        except stats.InsufficientDataError:
            tau = p = math.nan
        rows.append({"threshold": thr, "detections": n, "tau_jump": tau, "p_coinc": p})
    return rows


# ------------------------------------------------------------- TLS pipeline


@dataclass
class TlsAnalysis:
    series: dict
    detections: list
    multi: list
    reports: dict  # qubit -> ScrambleReport


def analyze_tls_run(series: dict, params: DetectorParams, window: int = 200,
                    r_threshold: float = 0.4, run_id: int = 0) -> TlsAnalysis:
    """Averaged jump detection across qubits and per-qubit scrambling classification."""
    p = params.replace(averaged_mode=True)
    dets = []
    for q, s in series.items():
        if q in p.excluded_qubits:
            continue
        dets.extend(averaged_detect(s.detector_probs, p, q, run_id))
    multi, _ = cluster_jumps(dets, p)
    reports = {}
    for q, s in series.items():
        r = stats.pearson_window_r(s.frames, window)
        reports[q] = stats.classify_scrambling(r, multi, r_threshold, window, n_iterations=s.frames.shape[0])
    return TlsAnalysis(series, dets, multi, reports)


def scramble_recall(analysis: TlsAnalysis, window: int, tolerance: int | None = None) -> dict:
    """Hits and misses of classified events against ground-truth scrambles.

    A classified event matches a scramble within ``tolerance`` iterations
    (default ``window``, the classifier's own association range).  Scrambles
    closer than ``window`` to either end have no r value and are left out of
    the denominator.
    """
    tol = window if tolerance is None else tolerance
    hits = total = false = 0
    for q, s in analysis.series.items():
        n = s.frames.shape[0]
        truth = [k for k in (s.scramble_iterations or ()) if window <= k <= n - window]
        found = [e[0] for e in analysis.reports[q].events]
        total += len(truth)
        hits += sum(any(abs(f - k) <= tol for f in found) for k in truth)
        all_truth = s.scramble_iterations or ()
        false += sum(not any(abs(f - k) <= tol for k in all_truth) for f in found)
    return {"truth": total, "hits": hits, "false": false,
            "recall": hits / total if total else math.nan}


def tls_batch(tls_config: TlsConfig, sim_config: SimConfig, layout: ChipLayout, seeds,
              params: DetectorParams, window: int = 200, r_threshold: float = 0.4):
    for seed in seeds:
        series = simulate_tls_run(tls_config, sim_config.replace(seed=seed), layout)
        yield seed, analyze_tls_run(series, params, window, r_threshold, run_id=seed)


# --------------------------------------------------------- appendix replication


@dataclass
class ReplicationResult:
    config: SimConfig
    params: DetectorParams
    summaries: list[RunSummary]
    layout: ChipLayout

    @property
    def detector_hours(self) -> float:
        return sum(s.duration for s in self.summaries) / 3600.0


def replicate(n_runs: int = 250, seed: int = 0, workers: int = 1, config: SimConfig | None = None,
              params: DetectorParams | None = None, layout: ChipLayout | None = None,
              thresholds=SWEEP_THRESHOLDS, window: int = 1136) -> ReplicationResult:
    config = SimConfig(seed=seed) if config is None else config.replace(seed=seed)
    params = DetectorParams.for_sample_period(config.rep_period) if params is None else params
    layout = default_layout() if layout is None else layout
    summaries = run_batch(config, layout, n_runs, params, seed, min(thresholds), window, workers)
    return ReplicationResult(config, params, summaries, layout)


ACCEPTANCE = {
    "timing_mad_max_steps": 5.0,
    "dip_min_sigma": 5.0,
    "dip_half_span": 3,
    "null_abs_z_max": 3.0,
    "null_min_fraction": 0.99,
    "first_bin_excess_sigma": 3.0,
    "tau_rel_tol": 0.15,
    "p_coinc_abs_tol": 0.05,
}


def appendix_report(result: ReplicationResult, threshold: float = 14.0, n_null_seeds: int = 100,
                    null_base_seed: int = 10_000, bin_width: float = 2.0) -> dict:
    """Reduce a replication to the summary statistics and their pass/fail checks."""
    s, params, acc = result.summaries, result.params, ACCEPTANCE
    report: dict = {"n_runs": len(s), "threshold": threshold, "detector_hours": result.detector_hours,
                    "config": result.config.to_dict(), "detector": params.to_dict(), "checks": {}}
    checks = report["checks"]

    stage = "timing"
    try:
        timing = timing_accuracy(s, threshold, params)
        report["timing"] = {k: v for k, v in timing.items() if k != "offsets"}
        report["timing"]["mad_us"] = timing["mad"] * result.config.rep_period * 1e6
        checks["timing_mad"] = bool(timing["mad"] <= acc["timing_mad_max_steps"])

        stage = "dip"
        dip = dip_from_summaries(s, threshold, params)
        at, zmin = dip.min_z_near(acc["dip_half_span"])
        report["dip"] = {"n_events": dip.n_events, "z_post": dip.z_post, "min_z_offset": at, "min_z": zmin,
                         "background_mean": dip.background_mean, "background_std": dip.background_std}
        checks["dip_significance"] = bool(zmin <= -acc["dip_min_sigma"])
        report["_dip_profile"] = dip

        stage = "null_dip"
        if n_null_seeds:
            z = null_dip_zscores(s, threshold, params, n_null_seeds, null_base_seed)
            frac = float(np.mean(np.abs(z) < acc["null_abs_z_max"]))
            report["null_dip"] = {"n_seeds": int(z.size), "fraction_abs_z_below_3": frac,
                                  "max_abs_z": float(np.max(np.abs(z)))}
            checks["null_dip"] = bool(frac >= acc["null_min_fraction"])

        stage = "delays"
        hist, fit = delay_analysis(s, threshold, bin_width)
        truth = delay_truth(s, threshold, params)
        pure = hist.counts.sum() * stats.modified_poisson_bin_probs(hist.edges, fit.tau_jump, 0.0,
                                                                    fit.run_duration)
        excess = float(hist.counts[0] - pure[0])
        report["delays"] = {"tau_jump": fit.tau_jump, "p_coinc": fit.p_coinc, "chi2": fit.chi2,
                            "dof": fit.dof, "n_delays": fit.n_delays, "first_bin_count": int(hist.counts[0]),
                            "first_bin_pure_poisson": float(pure[0]), "first_bin_excess": excess, **truth}
        checks["first_bin_excess"] = bool(excess > acc["first_bin_excess_sigma"] * math.sqrt(max(pure[0], 1.0)))
        checks["delay_fit_vs_truth"] = bool(
            abs(fit.tau_jump / truth["tau_true"] - 1) <= acc["tau_rel_tol"]
            and abs(fit.p_coinc - truth["p_coinc_true"]) <= acc["p_coinc_abs_tol"])
        report["_delay_hist"], report["_delay_fit"] = hist, fit

        stage = "distance"
        dfit = distance_analysis(s, result.layout, threshold, params)
        report["distance"] = {"amplitude_per_hour": dfit.amplitude, "sigma_mm": dfit.sigma,
                              "flags": list(dfit.flags)}
        checks["distance_fit"] = bool(dfit.ok and dfit.amplitude > 0 and dfit.sigma > 0)
        report["_distance_fit"] = dfit
    except Exception as exc:  # name the stage that broke, keep the original error
        raise StageError(stage, exc) from exc
    report["all_pass"] = all(checks.values())
    return report


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage
        self.original = exc
