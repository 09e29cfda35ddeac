"""Step detection in shot streams with a matched step filter.

Pipeline per qubit: jump signal (absolute correlation with a -1/+1 step
template) -> division by the run median -> thresholded peaks with a
refractory distance.  Single-qubit detections are then chained in time
into multi-qubit jumps.
"""

from __future__ import annotations

import bisect
import dataclasses
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.signal import find_peaks


@dataclass(frozen=True)
class DetectorParams:
    """Detection settings.

    Widths and distances in samples unless noted.  ``min_separation`` and
    ``cluster_gap`` are seconds and are converted with ``sample_period``.
    The ``averaged_*`` fields apply when ``averaged_mode`` is set, where one
    sample is one spectroscopy iteration lasting ``iteration_period``.
    """

    template_half_width: int = 568  # 25 ms at 44 us per repetition
    threshold: float = 14.0
    min_separation: float = 50e-3
    cluster_gap: float = 10e-3
    sample_period: float = 44e-6
    averaged_mode: bool = False
    averaged_template_len: int = 200
    averaged_threshold: float = 8.0
    averaged_min_separation: int = 100
    averaged_cluster_gap: int = 2
    iteration_period: float = 24e-3
    excluded_qubits: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "excluded_qubits", tuple(int(q) for q in self.excluded_qubits))
        for name in ("template_half_width", "threshold", "min_separation", "cluster_gap",
                     "sample_period", "averaged_template_len", "averaged_threshold",
                     "averaged_min_separation", "averaged_cluster_gap", "iteration_period"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.averaged_template_len < 2 or self.averaged_template_len % 2:
            raise ValueError("averaged_template_len must be an even number >= 2")

    @classmethod
    def for_sample_period(cls, sample_period: float, **kw) -> "DetectorParams":
        """Params whose 25 ms template half-width matches ``sample_period``."""
        half = max(1, int(round(25e-3 / sample_period)))
        return cls(template_half_width=half, sample_period=sample_period, **kw)

    def replace(self, **changes) -> "DetectorParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["excluded_qubits"] = list(self.excluded_qubits)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "DetectorParams":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown DetectorParams keys: {sorted(unknown)}")
        return cls(**data)

    # effective values for the current mode
    @property
    def half_width(self) -> int:
        return self.averaged_template_len // 2 if self.averaged_mode else self.template_half_width

    @property
    def active_threshold(self) -> float:
        return self.averaged_threshold if self.averaged_mode else self.threshold

    @property
    def dt(self) -> float:
        return self.iteration_period if self.averaged_mode else self.sample_period

    @property
    def min_separation_samples(self) -> float:
        if self.averaged_mode:
            return float(self.averaged_min_separation)
        return self.min_separation / self.sample_period

    @property
    def cluster_gap_samples(self) -> float:
        if self.averaged_mode:
            return float(self.averaged_cluster_gap)
        return self.cluster_gap / self.sample_period


@dataclass(frozen=True, order=True)
class JumpDetection:
    run_id: int
    t_trigger: int
    qubit_id: int
    peak_value: float = dataclasses.field(compare=False)


@dataclass(frozen=True)
class MultiQubitJump:
    members: tuple[JumpDetection, ...]

    @property
    def run_id(self) -> int:
        return self.members[0].run_id

    @property
    def start(self) -> int:
        return min(m.t_trigger for m in self.members)

    @property
    def end(self) -> int:
        return max(m.t_trigger for m in self.members)

    @property
    def qubits(self) -> frozenset[int]:
        return frozenset(m.qubit_id for m in self.members)

    def __len__(self):
        return len(self.members)


class NormalizedSignal(NamedTuple):
    values: np.ndarray
    median: float
    degenerate: bool


def _half_width(params) -> int:
    w = params.half_width if isinstance(params, DetectorParams) else int(params)
    if w < 1:
        raise ValueError("template half-width must be >= 1")
    return w


def step_template(half_width: int) -> np.ndarray:
    """-1 for the ``half_width`` samples before the step, +1 from the step on."""
    return np.concatenate([-np.ones(half_width), np.ones(half_width)])


def _valid_jump_signal(trace, w: int) -> np.ndarray:
    """Jump signal on output indices ``w .. n - w`` inclusive."""
    x = np.asarray(trace)
    n = x.size
    if n < 2 * w + 1:
        raise ValueError(f"trace of length {n} is too short for a template of {2 * w} samples")
    acc = np.int64 if x.dtype.kind in "biu" else np.float64
    c = np.empty(n + 1, dtype=acc)
    c[0] = 0
    np.cumsum(x, dtype=acc, out=c[1:])
    # after - before = c[i+w] - 2 c[i] + c[i-w]
    out = c[2 * w:] - 2 * c[w:n - w + 1] + c[:n - 2 * w + 1]
    return np.abs(out).astype(float)


def jump_signal(trace, params) -> np.ndarray:
    """Absolute correlation of ``trace`` with the step template.

    Output index ``i`` compares ``trace[i:i+w]`` against ``trace[i-w:i]``, so
    an ideal step peaks at the first post-step sample.  Indices where the
    template overhangs the trace are NaN.
    """
    w = _half_width(params)
    x = np.asarray(trace)
    out = np.full(x.size, np.nan)
    valid = _valid_jump_signal(x, w)
    out[w:w + valid.size] = valid
    return out


def normalize_by_median(signal) -> NormalizedSignal:
    """Divide by the median of the finite entries.

    A zero median (e.g. a flat trace) yields all zeros with
    ``degenerate=True`` instead of dividing.
    """
    s = np.asarray(signal, dtype=float)
    finite = np.isfinite(s)
    med = float(np.median(s[finite])) if finite.any() else 0.0
    if not med > 0:
        return NormalizedSignal(np.where(finite, 0.0, s), med, True)
    return NormalizedSignal(s / med, med, False)


def _select_peaks(values: np.ndarray, threshold: float, min_distance: float):
    """Indices of local maxima >= threshold, greedily thinned by height.

    Among peaks closer than ``min_distance`` the highest survives; equal
    heights keep the earlier index.
    """
    filled = np.where(np.isfinite(values), values, -np.inf)
    idx, _ = find_peaks(filled, height=threshold)
    if idx.size == 0:
        return idx
    heights = filled[idx]
    order = np.lexsort((idx, -heights))
    kept: list[int] = []
    for j in order:
        p = int(idx[j])
        k = bisect.bisect_left(kept, p)
        if k < len(kept) and kept[k] - p < min_distance:
            continue
        if k > 0 and p - kept[k - 1] < min_distance:
            continue
        kept.insert(k, p)
    return np.asarray(kept, dtype=np.int64)


def find_triggers(normalized_signal, params: DetectorParams, qubit_id: int = 0,
                  run_id: int = 0, threshold: float | None = None) -> list[JumpDetection]:
    values = np.asarray(normalized_signal, dtype=float)
    thr = params.active_threshold if threshold is None else threshold
    peaks = _select_peaks(values, thr, params.min_separation_samples)
    return [JumpDetection(run_id, int(p), qubit_id, float(values[p])) for p in peaks]


def detect_trace(trace, params: DetectorParams, qubit_id: int = 0, run_id: int = 0,
                 thresholds=None):
    """Run the single-qubit pipeline on one trace.

    With ``thresholds`` given, returns ``{threshold: [detections]}`` sharing one
    jump-signal evaluation; otherwise a list at the params' threshold.
    """
    w = _half_width(params)
    valid = _valid_jump_signal(trace, w)
    med = float(np.median(valid))
    norm = np.full(np.asarray(trace).size, np.nan)
    norm[w:w + valid.size] = valid / med if med > 0 else 0.0
    if thresholds is None:
        return find_triggers(norm, params, qubit_id, run_id)
    return {thr: find_triggers(norm, params, qubit_id, run_id, threshold=thr) for thr in thresholds}


def cluster_jumps(detections, params: DetectorParams):
    """Chain detections whose consecutive triggers are closer than the cluster gap.

    Returns ``(multi_qubit_jumps, singles)``; every detection lands in exactly
    one of them.  Detections from different runs never share a cluster.
    """
    gap = params.cluster_gap_samples
    ordered = sorted(detections)
    multi, singles = [], []
    current: list[JumpDetection] = []

    def flush():
        if len(current) >= 2:
            multi.append(MultiQubitJump(tuple(current)))
        elif current:
            singles.append(current[0])

    for det in ordered:
        if current and det.run_id == current[-1].run_id and det.t_trigger - current[-1].t_trigger < gap:
            current.append(det)
        else:
            flush()
            current = [det]
    flush()
    return multi, singles


def cluster_ids(detections, params: DetectorParams) -> dict[JumpDetection, int]:
    """Cluster index per detection, numbered in time order (singletons included)."""
    gap = params.cluster_gap_samples
    ids, cid, prev = {}, -1, None
    for det in sorted(detections):
        if prev is None or det.run_id != prev.run_id or det.t_trigger - prev.t_trigger >= gap:
            cid += 1
        ids[det] = cid
        prev = det
    return ids


def averaged_detect(detector_probs, params: DetectorParams, qubit_id: int = 0,
                    run_id: int = 0, threshold: float | None = None) -> list[JumpDetection]:
    """Detection on per-iteration averaged Ramsey probabilities."""
    if not params.averaged_mode:
        params = params.replace(averaged_mode=True)
    sig = jump_signal(detector_probs, params)
    norm = normalize_by_median(sig)
    return find_triggers(norm.values, params, qubit_id, run_id, threshold=threshold)


def detect_run(record, params: DetectorParams, run_id: int = 0, thresholds=None):
    """Detections on the ``m1`` streams of every non-excluded qubit of a run."""
    multi_thr = thresholds is not None
    out = {thr: [] for thr in thresholds} if multi_thr else []
    for row, q in enumerate(record.qubit_ids):
        if q in params.excluded_qubits:
            continue
        res = detect_trace(record.m1[row], params, q, run_id, thresholds)
        if multi_thr:
            for thr in thresholds:
                out[thr].extend(res[thr])
        else:
            out.extend(res)
    return out
