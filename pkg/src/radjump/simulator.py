"""Monte-Carlo model of the interleaved Ramsey / fixed-delay T1 experiment.

Every repetition of one run yields two shots per qubit:

* ``m0`` -- survival in |e> after a fixed delay (fixed-delay T1),
* ``m1`` -- the ef-Ramsey outcome, which encodes cos(2*pi*n_g0).

Radiation impacts arrive as a Poisson process, shift each qubit's offset
charge by a Gaussian-falloff amount with a random sign, and shorten T1 for
the single repetition that contains the impact.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .chip import ChipLayout, ImpactEvent, gaussian_falloff, wrap_charge
from .rng import stream

SECONDS_PER_HOUR = 3600.0


@dataclass(frozen=True)
class SimConfig:
    n_reps: int = 1_000_000
    rep_period: float = 44e-6
    run_duration: float | None = None  # defaults to n_reps * rep_period
    t_ramsey: float = 2e-6
    t1_delay: float = 40e-6
    eps_ef_over_2pi: float = 800e3
    t2_ef: float = 50e-6
    meas_error: float = 0.015
    impact_rate: float = 0.1
    sigma_spatial: float = 1.5
    peak_dng: float = 0.1
    diffusion_var_per_hour: float = 0.1
    baseline_t1: float = 100e-6
    dip_t1: float = 1e-6
    inject_dip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_reps < 1:
            raise ValueError("n_reps must be >= 1")
        positive = ("rep_period", "t_ramsey", "t1_delay", "eps_ef_over_2pi", "t2_ef",
                    "sigma_spatial", "baseline_t1", "dip_t1")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("impact_rate", "peak_dng", "diffusion_var_per_hour"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be finite and non-negative")
        if not 0 <= self.meas_error <= 0.5:
            raise ValueError("meas_error must lie in [0, 0.5]")
        if self.run_duration is not None:
            span = self.n_reps * self.rep_period
            if abs(self.run_duration - span) > self.rep_period:
                raise ValueError(
                    f"run_duration {self.run_duration} s disagrees with "
                    f"n_reps * rep_period = {span} s")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def duration(self) -> float:
        if self.run_duration is not None:
            return float(self.run_duration)
        return self.n_reps * self.rep_period

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown SimConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(eq=False)
class RunRecord:
    """Shot streams of one detector run.

    ``m0`` and ``m1`` are ``uint8`` arrays of shape ``(n_qubits, n_reps)``;
    row ``i`` belongs to ``qubit_ids[i]``.  ``impacts`` is the ground truth,
    ``None`` for externally produced data.
    """

    config: SimConfig
    qubit_ids: tuple[int, ...]
    m0: np.ndarray
    m1: np.ndarray
    impacts: tuple[ImpactEvent, ...] | None = None
    layout_path: str | None = None
    mode: str = "jump_detector"
    created_at: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.qubit_ids = tuple(int(q) for q in self.qubit_ids)
        self.m0 = np.ascontiguousarray(self.m0, dtype=np.uint8)
        self.m1 = np.ascontiguousarray(self.m1, dtype=np.uint8)
        shape = (len(self.qubit_ids), self.config.n_reps)
        if self.m0.shape != shape or self.m1.shape != shape:
            raise ValueError(f"shot arrays must have shape {shape}, "
                             f"got {self.m0.shape} and {self.m1.shape}")
        if self.m0.size and (self.m0.max() > 1 or self.m1.max() > 1):
            raise ValueError("shots must be 0 or 1")

    @property
    def n_reps(self) -> int:
        return self.config.n_reps

    def row(self, qubit_id: int) -> int:
        return self.qubit_ids.index(qubit_id)

    def __eq__(self, other):
        if not isinstance(other, RunRecord):
            return NotImplemented
        return (self.config == other.config
                and self.qubit_ids == other.qubit_ids
                and self.impacts == other.impacts
                and self.layout_path == other.layout_path
                and self.mode == other.mode
                and self.created_at == other.created_at
                and self.extra == other.extra
                and np.array_equal(self.m0, other.m0)
                and np.array_equal(self.m1, other.m1))


def generate_impacts(config: SimConfig, layout: ChipLayout, rng=None) -> list[ImpactEvent]:
    """Poisson impact times over the run, uniform positions over the layout box."""
    rng = stream(config.seed, "impacts") if rng is None else rng
    n = int(rng.poisson(config.impact_rate * config.duration))
    if n == 0:
        return []
    times = np.sort(rng.uniform(0.0, config.duration, size=n))
    x0, x1, y0, y1 = layout.bounding_box()
    xs = rng.uniform(x0, x1, size=n)
    ys = rng.uniform(y0, y1, size=n)
    return [ImpactEvent(float(t), float(x), float(y), config.peak_dng, config.dip_t1)
            for t, x, y in zip(times, xs, ys)]


def impact_rep_index(config: SimConfig, t: float) -> int:
    """Repetition containing time ``t``; the impact acts from this repetition on."""
    return min(int(t / config.rep_period), config.n_reps - 1)


def _check_sorted(impacts):
    times = [ev.time for ev in impacts]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("impacts must be sorted by time")


def _unwrapped_charge(config: SimConfig, qubit_id: int, pos, impacts, initial=None, signs=None):
    _check_sorted(impacts)
    n = config.n_reps
    if initial is None:
        initial = stream(config.seed, "charge_init", qubit_id).random()
    step_var = config.diffusion_var_per_hour / SECONDS_PER_HOUR * config.rep_period
    if step_var > 0:
        inc = stream(config.seed, "charge_walk", qubit_id).standard_normal(n)
        inc *= math.sqrt(step_var)
        inc[0] = 0.0
    else:
        inc = np.zeros(n)
    if impacts:
        if signs is None:
            signs = stream(config.seed, "jump_sign", qubit_id).choice([-1.0, 1.0], size=len(impacts))
        for ev, sign in zip(impacts, signs):
            d = math.hypot(pos[0] - ev.x, pos[1] - ev.y)
            inc[impact_rep_index(config, ev.time)] += sign * ev.peak_charge * float(
                gaussian_falloff(d, config.sigma_spatial))
    np.cumsum(inc, out=inc)
    inc += initial
    return inc


def charge_trace(config: SimConfig, qubit_id: int, pos, impacts, *,
                 initial=None, signs=None) -> np.ndarray:
    """Offset charge of one qubit for every repetition, wrapped into [0, 1).

    ``initial`` and ``signs`` override the random start value and jump
    signs (used to pin down hand-checked cases).
    """
    return wrap_charge(_unwrapped_charge(config, qubit_id, pos, impacts, initial, signs))


def simulate_charge_traces(config: SimConfig, layout: ChipLayout, impacts, qubit_ids=None):
    """``(n_qubits, n_reps)`` offset-charge traces for ``qubit_ids`` (default: active)."""
    ids = layout.active_ids if qubit_ids is None else tuple(qubit_ids)
    return np.stack([charge_trace(config, q, layout.position(q), impacts) for q in ids])


def ramsey_prob(n_g0, config: SimConfig):
    """P(M1=1) before readout error, with T2* contrast damping."""
    eps = 2.0 * math.pi * config.eps_ef_over_2pi
    contrast = math.exp(-config.t_ramsey / config.t2_ef)
    n = np.asarray(n_g0, dtype=float)
    if n.ndim == 0:
        return 0.5 * (1.0 + contrast * math.cos(eps * math.cos(2.0 * math.pi * float(n)) * config.t_ramsey / 2.0))
    p = np.cos(2.0 * math.pi * n)
    p *= eps * config.t_ramsey / 2.0
    np.cos(p, out=p)
    p *= 0.5 * contrast
    p += 0.5
    return p


def t1_prob(t1_current, config: SimConfig):
    """Survival in |e> after the fixed delay, before readout error."""
    t1 = np.asarray(t1_current, dtype=float)
    if np.any(t1 <= 0):
        raise ValueError("T1 must be positive")
    p = np.exp(-config.t1_delay / t1)
    return float(p) if p.ndim == 0 else p


def with_readout_error(p, error: float):
    """Probability of reading 1 under a symmetric bit-flip ``error``."""
    return (1.0 - error) * np.asarray(p) + error * (1.0 - np.asarray(p))


def dip_t1_at(config: SimConfig, d_mm) -> np.ndarray:
    """T1 during the impact repetition for a qubit ``d_mm`` from the epicenter.

    The Gaussian falloff scales the excess loss rate on top of the baseline.
    """
    excess = (1.0 / config.dip_t1 - 1.0 / config.baseline_t1) * gaussian_falloff(d_mm, config.sigma_spatial)
    return 1.0 / (1.0 / config.baseline_t1 + excess)


def _impact_t1(config: SimConfig, pos, impacts) -> dict[int, float]:
    """T1 for each repetition hit by an impact (excess loss rates add up)."""
    base_rate = 1.0 / config.baseline_t1
    rates: dict[int, float] = {}
    if config.inject_dip:
        for ev in impacts:
            d = math.hypot(pos[0] - ev.x, pos[1] - ev.y)
            k = impact_rep_index(config, ev.time)
            rates[k] = rates.get(k, base_rate) + (
                (1.0 / ev.t1_epicenter - base_rate) * float(gaussian_falloff(d, config.sigma_spatial)))
    return {k: 1.0 / r for k, r in rates.items()}


def m0_probabilities(config: SimConfig, pos, impacts) -> np.ndarray:
    """Per-repetition P(M0=1) for one qubit, readout error included."""
    p = np.full(config.n_reps, t1_prob(config.baseline_t1, config))
    for k, t1 in _impact_t1(config, pos, impacts).items():
        p[k] = t1_prob(t1, config)
    return with_readout_error(p, config.meas_error)


def simulate_qubit(config: SimConfig, qubit_id: int, pos, impacts):
    """``(m0, m1)`` uint8 shot streams for a single qubit."""
    n, err = config.n_reps, config.meas_error
    p1 = ramsey_prob(_unwrapped_charge(config, qubit_id, pos, impacts), config)
    p1 *= 1.0 - 2.0 * err
    p1 += err
    m1 = stream(config.seed, "m1", qubit_id).random(n, dtype=np.float32) < p1

    u0 = stream(config.seed, "m0", qubit_id).random(n, dtype=np.float32)
    m0 = u0 < float(with_readout_error(t1_prob(config.baseline_t1, config), err))
    for k, t1 in _impact_t1(config, pos, impacts).items():
        m0[k] = u0[k] < float(with_readout_error(t1_prob(t1, config), err))
    return m0.view(np.uint8), m1.view(np.uint8)


def simulate_run(config: SimConfig, layout: ChipLayout, qubit_ids=None, impacts=None) -> RunRecord:
    """Simulate one run on ``qubit_ids`` (default: the layout's active qubits)."""
    ids = tuple(layout.active_ids if qubit_ids is None else qubit_ids)
    if impacts is None:
        impacts = generate_impacts(config, layout)
    impacts = tuple(impacts)
    m0 = np.empty((len(ids), config.n_reps), dtype=np.uint8)
    m1 = np.empty_like(m0)
    for row, q in enumerate(ids):
        m0[row], m1[row] = simulate_qubit(config, q, layout.position(q), impacts)
    return RunRecord(config, ids, m0, m1, impacts, layout_path=layout.source)
