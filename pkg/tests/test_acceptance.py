"""Acceptance criteria, one PASS/FAIL line each.

The heavy fixtures (a 250-run replication at the default physics and a
250-run rerun at ten times the impact rate) are shared across criteria.
Expect roughly 20 minutes on one core; set RADJUMP_WORKERS to parallelise.
"""

import math
import os

import numpy as np
import pytest
from scipy import integrate

from radjump import records
from radjump.chip import ImpactEvent
from radjump.cli import main
from radjump.detector import DetectorParams, JumpDetection
from radjump.pipeline import (ACCEPTANCE, SWEEP_THRESHOLDS, ReplicationResult, appendix_report, delay_analysis,
                              delay_truth, distance_analysis, replicate, run_batch, scramble_recall,
                              threshold_sweep, tls_batch)
from radjump.simulator import SimConfig, simulate_run
from radjump.stats import (delay_histogram, fit_modified_poisson, modified_poisson_pdf, normalized_rate,
                           pearson_window_r)
from radjump.tls import TlsConfig, simulate_tls_run

WORKERS = int(os.environ.get("RADJUMP_WORKERS", os.cpu_count() or 1))
N_RUNS = 250
THRESHOLD = 14.0


@pytest.fixture
def report_line(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}")
        return ok
    return emit


@pytest.fixture(scope="session")
def replication():
    return replicate(n_runs=N_RUNS, seed=0, workers=WORKERS)


@pytest.fixture(scope="session")
def appendix(replication):
    return appendix_report(replication, threshold=THRESHOLD, n_null_seeds=100)


# ---------------------------------------------------------------- criterion 1


def test_criterion_1_timing_accuracy(appendix, report_line):
    t = appendix["timing"]
    ok = t["mad"] <= ACCEPTANCE["timing_mad_max_steps"]
    report_line(1, ok, f"MAD {t['mad']:.1f} steps ({t['mad_us']:.0f} us) over {t['n_matched']} multi-qubit "
                       f"triggers, limit 5 steps")
    assert ok


# ---------------------------------------------------------------- criterion 2


def test_criterion_2_dip(appendix, report_line):
    d, n = appendix["dip"], appendix["null_dip"]
    dip_ok = d["min_z"] <= -ACCEPTANCE["dip_min_sigma"]
    null_ok = n["fraction_abs_z_below_3"] >= ACCEPTANCE["null_min_fraction"]
    report_line("2", dip_ok and null_ok,
                f"dip z {d['min_z']:.2f} at offset {d['min_z_offset']} over {d['n_events']} events "
                f"(need <= -5 within +-3); dip disabled: |z|<3 in {n['fraction_abs_z_below_3']:.0%} "
                f"of {n['n_seeds']} seeds (need >= 99%)")
    assert dip_ok and null_ok


# ---------------------------------------------------------------- criterion 3


def poisson_trigger_times(rng, n_runs, tau, T, p_pair):
    """Impacts as a Poisson process on [0, T]; each emits a coincident second trigger with prob p_pair."""
    runs, n_zero, n_delays = [], 0, 0
    for _ in range(n_runs):
        ev = np.sort(rng.uniform(0, T, rng.poisson(T / tau)))
        pair = rng.random(ev.size) < p_pair
        times = np.sort(np.concatenate([ev, ev[pair]]))
        runs.append(times)
        if times.size > 1:
            n_zero += int(pair.sum())
            n_delays += times.size - 1
    return runs, n_zero / n_delays


def test_criterion_3_delay_fit_recovers_ground_truth(report_line):
    rng = np.random.default_rng(2024)
    T, lines, all_ok = 44.0, [], True
    for tau, p_pair in [(16.4, 0.0), (16.4, 0.8), (6.5, 0.3), (32.0, 0.5)]:
        runs, p_true = poisson_trigger_times(rng, 20_000, tau, T, p_pair)
        fit = fit_modified_poisson(delay_histogram(runs, 2.0, T), T)
        ok = abs(fit.tau_jump / tau - 1) <= ACCEPTANCE["tau_rel_tol"] and \
            abs(fit.p_coinc - p_true) <= ACCEPTANCE["p_coinc_abs_tol"]
        all_ok &= ok
        lines.append(f"tau {tau}->{fit.tau_jump:.2f}, P {p_true:.3f}->{fit.p_coinc:.3f}")
    report_line("3a", all_ok, "synthetic Poisson runs: " + "; ".join(lines))
    assert all_ok


def test_criterion_3_pdf_normalisation(report_line):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        tau, p, T = 10 ** rng.uniform(-1, 3), rng.random(), rng.uniform(1, 200)
        cont, _ = integrate.quad(lambda d: float(modified_poisson_pdf(d, tau, p, T)), 0, T,
                                 epsabs=1e-13, epsrel=1e-11, limit=200)
        worst = max(worst, abs(cont + p - 1))
    ok = worst <= 1e-6
    report_line("3b", ok, f"max |integral + P_coinc - 1| over 1000 draws = {worst:.1e} (need <= 1e-6)")
    assert ok


def test_criterion_3_detector_delays_vs_ground_truth(appendix, report_line):
    d = appendix["delays"]
    ok = abs(d["tau_jump"] / d["tau_true"] - 1) <= ACCEPTANCE["tau_rel_tol"] and \
        abs(d["p_coinc"] - d["p_coinc_true"]) <= ACCEPTANCE["p_coinc_abs_tol"]
    report_line("3c", ok, f"replication delays: tau {d['tau_jump']:.2f} s vs truth {d['tau_true']:.2f} s, "
                          f"P_coinc {d['p_coinc']:.3f} vs truth {d['p_coinc_true']:.3f}")
    assert ok


# ---------------------------------------------------------------- criterion 4


def test_criterion_4_distance_fit_self_consistent(replication, report_line):
    base = distance_analysis(replication.summaries, replication.layout, THRESHOLD, replication.params)
    rate = replication.config.impact_rate
    big_cfg = replication.config.replace(impact_rate=10 * rate)
    big = run_batch(big_cfg, replication.layout, N_RUNS, replication.params, base_seed=100_000,
                    min_threshold=THRESHOLD, workers=WORKERS)
    ref = distance_analysis(big, replication.layout, THRESHOLD, replication.params)
    finite = all(math.isfinite(v) and v > 0 for v in (base.sigma, base.amplitude))
    sig_rel = abs(base.sigma / ref.sigma - 1)
    amp_rel = abs((base.amplitude / rate) / (ref.amplitude / (10 * rate)) - 1)
    ok = finite and base.ok and sig_rel <= 0.25 and amp_rel <= 0.25
    report_line(4, ok, f"sigma {base.sigma:.2f} mm vs {ref.sigma:.2f} mm at 10x statistics ({sig_rel:.0%}); "
                       f"amplitude per unit impact rate off by {amp_rel:.0%} (limit 25%)")
    assert ok


# ---------------------------------------------------------------- criterion 5


def test_criterion_5_rate_table(report_line):
    rows = [(16, 150, 0.4), (50, 39, 0.5), (10, 100, 1), (10, 120, 0.8), (20, 120, 0.4)]
    got = [float(f"{normalized_rate(t, a) * 1e3:.1g}") for t, a, _ in rows]
    ok = got == [r for _, _, r in rows]
    report_line(5, ok, f"rates x1e-3 /(s mm^2): {got}")
    assert ok


# ---------------------------------------------------------------- criterion 6


def test_criterion_6_threshold_sweep(replication, report_line):
    rows = threshold_sweep(replication.summaries, SWEEP_THRESHOLDS, 2.0)
    counts = [r["detections"] for r in rows]
    taus = [r["tau_jump"] for r in rows]
    monotone = all(a >= b for a, b in zip(counts, counts[1:]))
    ratio = max(taus) / min(taus)
    ok = monotone and ratio <= 2.0
    report_line(6, ok, f"counts {counts} at thresholds {list(SWEEP_THRESHOLDS)}; "
                       f"tau {[round(t, 1) for t in taus]} s, max/min {ratio:.2f} (limit 2)")
    assert ok


# ---------------------------------------------------------------- criterion 7

TLS_SIM = SimConfig(diffusion_var_per_hour=0.02, impact_rate=1 / 30)
TLS_SEEDS = range(50)


def test_criterion_7_scrambling_classifier(layout, report_line):
    params = DetectorParams()
    tls = TlsConfig()
    hits = truth = false = 0
    r_ok = True
    for _, analysis in tls_batch(tls, TLS_SIM, layout, TLS_SEEDS, params, window=200, r_threshold=0.4):
        rec = scramble_recall(analysis, 200)
        hits, truth, false = hits + rec["hits"], truth + rec["truth"], false + rec["false"]
        r_ok &= all(np.all(np.abs(rep.r[np.isfinite(rep.r)]) <= 1.0) for rep in analysis.reports.values())

    diff_events = 0
    diffusing = tls.replace(diffusing_tls=0.2e6)
    for _, analysis in tls_batch(diffusing, TLS_SIM.replace(impact_rate=0.0), layout, TLS_SEEDS, params,
                                 window=200, r_threshold=0.4):
        diff_events += sum(len(rep.events) for rep in analysis.reports.values())
        r_ok &= all(np.all(np.abs(rep.r[np.isfinite(rep.r)]) <= 1.0) for rep in analysis.reports.values())

    below = total = 0
    for seed in range(10):
        series = simulate_tls_run(tls, TLS_SIM.replace(impact_rate=0.0, seed=seed), layout)
        for s in series.values():
            r = pearson_window_r(s.frames, 200)
            fin = r[np.isfinite(r)]
            below, total = below + int(np.sum(fin < 0.4)), total + fin.size
    stable_frac = below / total

    recall = hits / truth
    ok = recall >= 0.9 and diff_events == 0 and r_ok and stable_frac < 0.005
    report_line(7, ok, f"recall {recall:.3f} ({hits}/{truth}, {false} unmatched events) over 50 seeds; "
                       f"{diff_events} events on 50 diffusion-only seeds; r within [-1, 1]: {r_ok}; "
                       f"stable-spectrum time with r < 0.4: {stable_frac:.3%} (limit 0.5%)")
    assert ok


# ---------------------------------------------------------------- criterion 8


def test_criterion_8_determinism_and_roundtrips(tmp_path, layout, report_line):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[sim]\nn_reps = 100000\nimpact_rate = 1.0\n")
    outputs = {}
    for w in (1, 2):
        out = tmp_path / f"w{w}"
        assert main(["sweep-threshold", "--config", str(cfg), "--n-runs", "4", "--seed", "11",
                     "--workers", str(w), "--out", str(out)]) == 0
        outputs[w] = {p: (out / p).read_bytes() for p in ("threshold_sweep.csv", "sweep.json")}
    same_workers = outputs[1] == outputs[2]
    a = run_batch(SimConfig(n_reps=100_000, impact_rate=1.0), layout, 3, DetectorParams(), 5, workers=1)
    b = run_batch(SimConfig(n_reps=100_000, impact_rate=1.0), layout, 3, DetectorParams(), 5, workers=2)
    same_workers &= all(x.detections == y.detections and x.impacts == y.impacts for x, y in zip(a, b))

    rec = simulate_run(SimConfig(n_reps=30_000, seed=4, impact_rate=5.0), layout)
    trips = {}
    for enc in ("csv", "qrl1"):
        trips[enc] = records.read_run(records.write_run(rec, tmp_path / f"run_{enc}.json", enc)) == rec
    series = simulate_tls_run(TlsConfig(n_iterations=300, n_steps=41), SimConfig(seed=2), layout,
                              qubit_ids=[0], impacts=[ImpactEvent(2.0, 0.0, 0.0)])[0]
    trips["spectrum"] = records.read_spectrum(records.write_spectrum(series, tmp_path / "tls.json")) == series
    dets = [JumpDetection(0, 1000, 0, 15.5), JumpDetection(0, 1100, 2, 16.0), JumpDetection(1, 7, 4, 99.0)]
    records.write_detections(tmp_path / "d.csv", dets, DetectorParams())
    trips["detections"] = records.read_detections(tmp_path / "d.csv") == sorted(dets)
    ok = same_workers and all(trips.values())
    report_line(8, ok, f"identical across worker counts: {same_workers}; round-trips: {trips}")
    assert ok


def test_report_uses_the_replication(replication, appendix):
    assert isinstance(replication, ReplicationResult)
    assert appendix["n_runs"] == N_RUNS
    assert delay_analysis(replication.summaries, THRESHOLD)[1].tau_jump == appendix["delays"]["tau_jump"]
    assert delay_truth(replication.summaries, THRESHOLD, replication.params)["n_events"] > 0
