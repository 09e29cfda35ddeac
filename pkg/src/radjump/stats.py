"""Statistics over detections.

Trigger-aligned T1 averaging, inter-jump delay histograms with a
finite-duration Poisson model, coincidence rate versus qubit distance,
area-normalized impact rates, and windowed Pearson r of TLS spectra.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.optimize import curve_fit, least_squares
from scipy.special import gammainc

from .chip import ChipLayout, distance


class InsufficientDataError(ValueError):
    """Too few events for the requested statistic or fit."""


# ---------------------------------------------------------------- dip profile


@dataclass
class DipProfile:
    offsets: np.ndarray
    mean: np.ndarray
    smoothed: np.ndarray
    counts: np.ndarray
    background_mean: float
    background_std: float
    post_offset: int
    z: np.ndarray
    n_events: int

    @property
    def z_post(self) -> float:
        return float(self.z[self.offsets == self.post_offset][0])

    def min_z_near(self, half_span: int) -> tuple[int, float]:
        """Most negative z within ``±half_span`` of the post-trigger point."""
        sel = np.abs(self.offsets - self.post_offset) <= half_span
        z = np.where(sel & np.isfinite(self.z), self.z, np.inf)
        i = int(np.argmin(z))
        return int(self.offsets[i]), float(z[i])


def extract_windows(stream, triggers, window: int) -> np.ndarray:
    """Rows of ``stream[t - window : t + window + 1]`` for each trigger, NaN off the ends."""
    x = np.asarray(stream, dtype=float)
    triggers = np.asarray(triggers, dtype=np.int64).reshape(-1)
    out = np.full((triggers.size, 2 * window + 1), np.nan)
    for row, t in enumerate(triggers):
        lo, hi = t - window, t + window + 1
        a, b = max(lo, 0), min(hi, x.size)
        if b > a:
            out[row, a - lo:b - lo] = x[a:b]
    return out


def dip_profile(windows, post_offset: int = 0, smoothing_sigma: float = 10.0) -> DipProfile:
    """Average aligned windows and score the post-trigger point.

    Background mean and spread come from every offset except
    ``post_offset``; the Gaussian-smoothed trace is for display only.
    """
    w = np.asarray(windows, dtype=float)
    if w.ndim != 2 or w.shape[0] == 0:
        raise InsufficientDataError("no events to aggregate")
    half = (w.shape[1] - 1) // 2
    offsets = np.arange(-half, half + 1)
    counts = np.sum(np.isfinite(w), axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.nansum(w, axis=0) / counts
    bg = np.isfinite(mean) & (offsets != post_offset)
    if bg.sum() < 2:
        raise InsufficientDataError("window too small for background statistics")
    bg_mean = float(np.mean(mean[bg]))
    bg_std = float(np.std(mean[bg], ddof=1))
    z = (mean - bg_mean) / bg_std if bg_std > 0 else np.full_like(mean, np.nan)
    filled = np.where(np.isfinite(mean), mean, bg_mean)
    smoothed = gaussian_filter1d(filled, smoothing_sigma, mode="nearest") if smoothing_sigma > 0 else filled
    return DipProfile(offsets, mean, smoothed, counts, bg_mean, bg_std, post_offset, z, w.shape[0])


def dip_aggregate(run_records, detections, window: int, smoothing_sigma: float = 10.0,
                  post_offset: int = 0) -> DipProfile:
    """Trigger-aligned mean of M0 over all ``detections``.

    ``run_records`` maps ``run_id`` to a RunRecord (a single record is taken
    as run 0).
    """
    detections = list(detections)
    if not detections:
        raise InsufficientDataError("no detections to aggregate")
    if not isinstance(run_records, dict):
        run_records = {0: run_records} if hasattr(run_records, "m0") else dict(enumerate(run_records))
    rows = []
    for det in detections:
        rec = run_records[det.run_id]
        rows.append(extract_windows(rec.m0[rec.row(det.qubit_id)], [det.t_trigger], window)[0])
    return dip_profile(np.array(rows), post_offset, smoothing_sigma)


# ------------------------------------------------------------ delay statistics


@dataclass
class DelayHistogram:
    counts: np.ndarray
    edges: np.ndarray
    delays: np.ndarray

    @property
    def bin_width(self) -> float:
        return float(self.edges[1] - self.edges[0])


def consecutive_delays(trigger_times_per_run) -> np.ndarray:
    """Pooled differences between consecutive sorted trigger times within each run."""
    out = [np.diff(np.sort(np.asarray(t, dtype=float))) for t in trigger_times_per_run if len(t) >= 2]
    return np.concatenate(out) if out else np.empty(0)


def delay_histogram(trigger_times_per_run, bin_width: float, run_duration: float) -> DelayHistogram:
    """Histogram of consecutive-trigger delays on left-closed bins over [0, T].

    The last bin is cut short at ``T`` when ``bin_width`` does not divide it.
    """
    if bin_width <= 0 or run_duration <= 0:
        raise ValueError("bin_width and run_duration must be positive")
    delays = consecutive_delays(trigger_times_per_run)
    n_bins = int(math.ceil(run_duration / bin_width - 1e-9))
    edges = np.minimum(np.arange(n_bins + 1) * bin_width, run_duration)
    idx = np.floor(delays / bin_width).astype(np.int64)
    idx = idx[(idx >= 0) & (idx < n_bins)]
    counts = np.bincount(idx, minlength=n_bins)
    return DelayHistogram(counts, edges, delays)


def _segment_integral(a, b, tau, T):
    """∫_a^b exp(-u/tau) (1 - u/T) du, evaluated without cancellation."""
    a = np.asarray(a, dtype=float)
    y = (np.asarray(b, dtype=float) - a) / tau
    return np.exp(-a / tau) * ((1.0 - a / T) * tau * gammainc(1.0, y) - tau * tau * gammainc(2.0, y) / T)


def modified_poisson_norm(tau: float, T: float) -> float:
    """Normalizing constant of exp(-d/tau)(1 - d/T) on [0, T]."""
    return 1.0 / float(_segment_integral(0.0, T, tau, T))


def modified_poisson_pdf(delta, tau: float, p_coinc: float, T: float):
    """Continuous part of the delay density; the point mass ``p_coinc`` sits at 0."""
    d = np.asarray(delta, dtype=float)
    body = modified_poisson_norm(tau, T) * np.exp(-d / tau) * (1.0 - d / T) * (1.0 - p_coinc)
    return np.where((d >= 0) & (d <= T), body, 0.0)


def modified_poisson_bin_probs(edges, tau: float, p_coinc: float, T: float) -> np.ndarray:
    """Probability mass per bin; the point mass lands in the first bin."""
    e = np.clip(np.asarray(edges, dtype=float), 0.0, T)
    probs = (1.0 - p_coinc) * modified_poisson_norm(tau, T) * _segment_integral(e[:-1], e[1:], tau, T)
    probs[0] += p_coinc
    return probs


@dataclass
class DelayFit:
    tau_jump: float
    p_coinc: float
    run_duration: float
    bin_width: float
    chi2: float
    dof: int
    n_delays: int
    expected: np.ndarray = field(repr=False)

    @property
    def reduced_chi2(self) -> float:
        return self.chi2 / self.dof if self.dof > 0 else math.nan


def fit_modified_poisson(hist: DelayHistogram, run_duration: float) -> DelayFit:
    """Poisson-weighted least squares of bin counts over (tau_jump, p_coinc)."""
    counts = np.asarray(hist.counts, dtype=float)
    edges = np.asarray(hist.edges, dtype=float)
    T = float(run_duration)
    if counts.size < 2 or np.count_nonzero(counts) < 2:
        raise InsufficientDataError("delay histogram needs at least two populated bins")
    if edges[-1] > T + 1e-9 * T:
        raise ValueError("histogram extends beyond the run duration")
    n = counts.sum()

    def expected(params):
        log_tau, p = params
        return n * modified_poisson_bin_probs(edges, math.exp(log_tau), p, T)

    def residuals(params):
        mu = expected(params)
        return (counts - mu) / np.sqrt(np.maximum(mu, 1.0))

    tail = hist.delays[hist.delays >= edges[1]] if hist.delays.size else np.empty(0)
    tau0 = float(np.mean(tail)) if tail.size else T / 4
    tau0 = min(max(tau0, 1e-2 * T), 10 * T)
    p0 = 0.5 * max(counts[0] - counts[1], 0.0) / n
    lo = (math.log(1e-3 * T), 0.0)
    hi = (math.log(1e3 * T), 1.0)
    res = least_squares(residuals, x0=(math.log(tau0), min(max(p0, 1e-3), 0.99)), bounds=(lo, hi),
                        x_scale=(1.0, 0.1))
    chi2 = float(np.sum(res.fun ** 2))
    return DelayFit(math.exp(res.x[0]), float(res.x[1]), T, hist.bin_width, chi2,
                    int(counts.size - 2), int(n), expected(res.x))


# ------------------------------------------------------ spatial coincidences


@dataclass
class DistanceFit:
    pairs: list  # (qubit_a, qubit_b, distance_mm, coincidences, rate_per_hour)
    bin_centers: np.ndarray
    bin_rates: np.ndarray
    amplitude: float
    sigma: float
    flags: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.flags


def _gauss(d, amplitude, sigma):
    return amplitude * np.exp(-d * d / (2.0 * sigma * sigma))


def coincidence_vs_distance(multi_jumps, layout: ChipLayout, detector_time_hours: float,
                            qubit_ids=None, bin_width: float = 0.5) -> DistanceFit:
    """Per-pair simultaneous-jump rate and a zero-centered Gaussian fit in distance."""
    multi_jumps = list(multi_jumps)
    if not multi_jumps:
        raise InsufficientDataError("no multi-qubit jumps")
    if detector_time_hours <= 0:
        raise ValueError("detector time must be positive")
    ids = sorted(layout.active_ids if qubit_ids is None else qubit_ids)
    members = [mj.qubits for mj in multi_jumps]
    pairs = []
    for a, b in itertools.combinations(ids, 2):
        k = sum(1 for qs in members if a in qs and b in qs)
        pairs.append((a, b, distance(layout, a, b), k, k / detector_time_hours))
    d = np.array([p[2] for p in pairs])
    rate = np.array([p[4] for p in pairs])

    n_bins = max(1, int(math.ceil(d.max() / bin_width)))
    idx = np.minimum((d / bin_width).astype(int), n_bins - 1)
    sums = np.bincount(idx, weights=rate, minlength=n_bins)
    num = np.bincount(idx, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        bin_rates = np.where(num > 0, sums / num, np.nan)
    centers = (np.arange(n_bins) + 0.5) * bin_width

    flags = []
    if len(set(np.round(d[rate > 0], 9))) < 2:
        flags.append("underdetermined")
        return DistanceFit(pairs, centers, bin_rates, math.nan, math.nan, tuple(flags))
    near = d <= np.median(d[rate > 0])
    a0 = float(rate[near].mean()) if near.any() else float(rate.max())
    s0 = float(np.sqrt(np.sum(rate * d * d) / max(np.sum(rate), 1e-300) / 2.0)) or 1.0
    try:
        (amp, sig), _ = curve_fit(_gauss, d, rate, p0=(a0, s0), maxfev=20000)
    except RuntimeError:
        return DistanceFit(pairs, centers, bin_rates, math.nan, math.nan, ("fit_failed",))
    sig = abs(sig)
    if not (np.isfinite(sig) and np.isfinite(amp)) or sig > 10 * d.max():
        flags.append("diverging")
    return DistanceFit(pairs, centers, bin_rates, float(amp), float(sig), tuple(flags))


def normalized_rate(tau_jump: float, chip_area: float) -> float:
    """Impacts per second per mm² for mean spacing ``tau_jump`` on ``chip_area``."""
    if not (tau_jump > 0 and chip_area > 0):
        raise ValueError("tau_jump and chip_area must be positive")
    return 1.0 / (tau_jump * chip_area)


# ------------------------------------------------------------- TLS scrambling


def pearson_window_r(spectra, window: int) -> np.ndarray:
    """Correlation between mean spectra of the ``window`` iterations before and after ``t``.

    Entry ``t`` uses rows ``[t - window, t)`` and ``[t, t + window)``.  Edges and
    flat windows are NaN.
    """
    s = np.asarray(spectra, dtype=float)
    n = s.shape[0]
    r = np.full(n, np.nan)
    if window < 1 or n < 2 * window:
        return r
    c = np.zeros((n + 1, s.shape[1]))
    np.cumsum(s, axis=0, out=c[1:])
    t = np.arange(window, n - window + 1)
    x = (c[t] - c[t - window]) / window
    y = (c[t + window] - c[t]) / window
    x -= x.mean(axis=1, keepdims=True)
    y -= y.mean(axis=1, keepdims=True)
    sx = np.sqrt(np.mean(x * x, axis=1))
    sy = np.sqrt(np.mean(y * y, axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        rt = np.mean(x * y, axis=1) / (sx * sy)
    scale = np.maximum(np.abs(s).max(), 1.0)
    rt[(sx <= 1e-12 * scale) | (sy <= 1e-12 * scale)] = np.nan
    r[t] = np.clip(rt, -1.0, 1.0)
    return r


@dataclass
class ScrambleReport:
    r: np.ndarray
    flagged: np.ndarray
    dips: list  # (start, end, argmin, min_r)
    events: list  # (iteration, jump_time)
    fraction_below: float
    fraction_jumps_with_dip: float
    n_jumps: int


def _dip_segments(flagged: np.ndarray, r: np.ndarray):
    segs = []
    idx = np.flatnonzero(flagged)
    if idx.size == 0:
        return segs
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.r_[idx[0], idx[breaks + 1]]
    ends = np.r_[idx[breaks], idx[-1]]
    for a, b in zip(starts, ends):
        k = a + int(np.nanargmin(r[a:b + 1]))
        segs.append((int(a), int(b), int(k), float(r[k])))
    return segs


def classify_scrambling(r_trace, jumps, r_threshold: float = 0.4, window: int = 200,
                        n_iterations: int | None = None) -> ScrambleReport:
    """Flag r dips below ``r_threshold`` that coincide with a multi-qubit jump.

    ``jumps`` holds MultiQubitJump objects or plain iteration indices.  Each
    contiguous run of flagged iterations is one dip located at its r minimum;
    a dip is a scrambling event when a jump lies within ``window`` iterations
    of that minimum.  A jump accounts for at most one event: when r crosses
    the threshold several times around it, the dip nearest the jump is kept.
    """
    r = np.asarray(r_trace, dtype=float)
    if n_iterations is not None and r.size != n_iterations:
        raise ValueError(f"r trace has {r.size} entries, expected {n_iterations}")
    times = sorted(int(j.start) if hasattr(j, "start") else int(j) for j in jumps)
    if times and (times[0] < 0 or times[-1] >= r.size):
        raise ValueError("jump times fall outside the r trace")
    valid = np.isfinite(r)
    flagged = valid & (r < r_threshold)
    dips = _dip_segments(flagged, r)
    best: dict[int, tuple] = {}
    for a, b, k, rmin in dips:
        near = [t for t in times if abs(t - k) <= window]
        if not near:
            continue
        jt = min(near, key=lambda t: (abs(t - k), t))
        key = (abs(jt - k), rmin, k)
        if jt not in best or key < best[jt][0]:
            best[jt] = (key, k)
    events = sorted((k, jt) for jt, (_, k) in best.items())
    matched = {t for t in times if any(abs(t - k) <= window for _, _, k, _ in dips)}
    frac = float(flagged.sum() / valid.sum()) if valid.any() else math.nan
    frac_j = len(matched) / len(times) if times else math.nan
    return ScrambleReport(r, flagged, dips, events, frac, frac_j, len(times))
