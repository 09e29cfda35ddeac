"""Stark-swept TLS spectroscopy interleaved with an averaged Ramsey detector.

Each iteration sweeps the Stark-shifted qubit frequency over ``n_steps``
points and records one survival shot per point (``MS``), then averages
``n_detector_shots`` Ramsey shots into P(MR=1).  Impacts close enough to a
qubit scramble its TLS frequencies; every impact also shifts the qubit's
offset charge exactly as in the single-shot simulator.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .chip import ChipLayout, charge_response
from .rng import stream
from .simulator import (SECONDS_PER_HOUR, SimConfig, generate_impacts, impact_rep_index,
                        ramsey_prob, with_readout_error)

DEFAULT_TLS = (
    (-14e6, 0.6e6, 0.6),
    (-6e6, 0.5e6, 0.5),
    (3e6, 0.5e6, 0.6),
    (9e6, 0.6e6, 0.5),
    (16e6, 0.6e6, 0.6),
)


@dataclass(frozen=True)
class TlsConfig:
    """Spectroscopy settings.  Frequencies in Hz.

    ``tls_list`` holds ``(offset, linewidth, depth)`` per TLS: center relative
    to the unshifted qubit, full width at half maximum of its Lorentzian
    loss rate, and the fractional drop in survival it causes on resonance.
    """

    n_steps: int = 251
    shift_range: float = 20e6
    stark_detuning: float = 50e6
    alpha: float = -300e6
    tls_list: tuple = DEFAULT_TLS
    n_iterations: int = 10_000
    iteration_period: float = 24e-3
    n_detector_shots: int = 251
    scramble_fraction: float = 1.0
    scramble_min_dng: float = 0.05
    diffusing_tls: float | None = None
    probe_duration: float = 50e-6

    def __post_init__(self):
        tls = tuple(tuple(float(v) for v in t) for t in self.tls_list)
        object.__setattr__(self, "tls_list", tls)
        if self.n_steps < 2:
            raise ValueError("n_steps must be >= 2")
        for name in ("shift_range", "stark_detuning", "n_iterations", "iteration_period",
                     "n_detector_shots", "probe_duration"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for off, width, depth in tls:
            if not width > 0:
                raise ValueError("TLS linewidths must be positive")
            if not 0 <= depth <= 1:
                raise ValueError("TLS depths must lie in [0, 1]")
        if not 0 <= self.scramble_fraction <= 1:
            raise ValueError("scramble_fraction must lie in [0, 1]")
        if self.diffusing_tls is not None and self.diffusing_tls < 0:
            raise ValueError("diffusing_tls step must be non-negative")

    @property
    def duration(self) -> float:
        return self.n_iterations * self.iteration_period

    def replace(self, **changes) -> "TlsConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["tls_list"] = [list(t) for t in self.tls_list]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TlsConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown TlsConfig keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(eq=False)
class SpectrumSeries:
    """One qubit's interleaved spectroscopy record.

    ``frames`` is ``(n_iterations, n_steps)`` MS bits, ``detector_probs`` the
    per-iteration averaged P(MR=1), ``shifts`` the Stark shift of each step.
    """

    frames: np.ndarray
    detector_probs: np.ndarray
    shifts: np.ndarray
    qubit_id: int = 0
    scramble_iterations: tuple[int, ...] | None = None
    tls_config: TlsConfig | None = None
    sim_config: SimConfig | None = None
    impacts: tuple | None = None

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.uint8)
        self.detector_probs = np.asarray(self.detector_probs, dtype=float)
        self.shifts = np.asarray(self.shifts, dtype=float)
        if self.frames.ndim != 2:
            raise ValueError("frames must be 2-D")
        n_iter, n_steps = self.frames.shape
        if self.detector_probs.shape != (n_iter,) or self.shifts.shape != (n_steps,):
            raise ValueError("frames, detector_probs and shifts disagree in size")
        if self.tls_config is not None and (n_iter, n_steps) != (
                self.tls_config.n_iterations, self.tls_config.n_steps):
            raise ValueError("frames do not match the TLS configuration")

    def __eq__(self, other):
        if not isinstance(other, SpectrumSeries):
            return NotImplemented
        return (self.qubit_id == other.qubit_id
                and self.scramble_iterations == other.scramble_iterations
                and self.tls_config == other.tls_config
                and self.sim_config == other.sim_config
                and self.impacts == other.impacts
                and np.array_equal(self.frames, other.frames)
                and np.array_equal(self.detector_probs, other.detector_probs)
                and np.array_equal(self.shifts, other.shifts))


def stark_shift(omega_s, delta_s: float, alpha: float):
    """Qubit frequency shift from a Stark tone of amplitude ``omega_s``."""
    if delta_s == 0 or alpha + delta_s == 0:
        raise ValueError("Stark shift is singular at this detuning")
    return alpha * np.square(omega_s) / (2.0 * delta_s * (alpha + delta_s))


def stark_sweep(cfg: TlsConfig):
    """Signed amplitude ramp and resulting shifts covering ``±shift_range``.

    The amplitude is ramped linearly, using the detuning sign that shifts
    the qubit down for the lower half and up for the upper half, so the
    shifts are quadratically spaced.  Returns ``(amplitudes, detunings, shifts)``.
    """
    ramp = np.linspace(-1.0, 1.0, cfg.n_steps)
    d = abs(cfg.stark_detuning)
    gain = {s: cfg.alpha / (2.0 * s * (cfg.alpha + s)) for s in (d, -d)}
    down = [s for s, g in gain.items() if g < 0]
    up = [s for s, g in gain.items() if g > 0]
    if not down or not up:
        raise ValueError("no detuning sign shifts the qubit both ways; check alpha and stark_detuning")
    detunings = np.where(ramp < 0, down[0], up[0])
    omega_max = np.sqrt(cfg.shift_range / np.abs(np.array([gain[s] for s in detunings])))
    amps = np.abs(ramp) * omega_max
    shifts = np.array([stark_shift(a, s, cfg.alpha) for a, s in zip(amps, detunings)])
    return amps, detunings, shifts


def tls_loss_rate(shifts, tls_offsets, tls_widths, tls_depths, probe_duration):
    """Added loss rate at each shift from a sum of Lorentzian TLS lines.

    Works on a single TLS configuration (1-D offsets) or one per row.
    """
    offsets = np.asarray(tls_offsets, dtype=float)
    if offsets.size == 0:
        return np.zeros(np.broadcast_shapes(offsets.shape[:-1], np.shape(shifts)))
    depth = np.minimum(np.asarray(tls_depths, dtype=float), 1.0 - 1e-12)
    peak_rate = -np.log1p(-depth) / probe_duration
    hw = np.asarray(tls_widths, dtype=float) / 2.0
    detune = (np.asarray(shifts)[..., :, None] - offsets[..., None, :]) / hw
    return np.sum(peak_rate / (1.0 + detune * detune), axis=-1)


def survival_spectrum(shifts, tls_offsets, cfg: TlsConfig, sim: SimConfig):
    """P(MS=1) at each shift, readout error included."""
    widths = [t[1] for t in cfg.tls_list]
    depths = [t[2] for t in cfg.tls_list]
    rate = 1.0 / sim.baseline_t1 + tls_loss_rate(shifts, tls_offsets, widths, depths, cfg.probe_duration)
    return with_readout_error(np.exp(-cfg.probe_duration * rate), sim.meas_error)


def iteration_clock(cfg: TlsConfig, sim: SimConfig) -> SimConfig:
    """SimConfig whose repetitions are spectroscopy iterations."""
    return sim.replace(n_reps=cfg.n_iterations, rep_period=cfg.iteration_period, run_duration=None)


def _tls_trajectory(cfg: TlsConfig, sim: SimConfig, qubit_id, qubit_pos, impacts):
    """TLS offsets for every iteration plus the scramble iterations."""
    n_iter = cfg.n_iterations
    base = np.array([t[0] for t in cfg.tls_list], dtype=float)
    n_tls = base.size
    offsets = np.broadcast_to(base, (n_iter, n_tls)).copy()
    scrambles = []
    clock = iteration_clock(cfg, sim)
    rng = stream(sim.seed, "tls_scramble", qubit_id)
    n_move = int(round(cfg.scramble_fraction * n_tls))
    for ev in impacts:
        if n_tls == 0 or n_move == 0:
            break
        if charge_response(ev, qubit_pos, sim.sigma_spatial) < cfg.scramble_min_dng:
            continue
        k = impact_rep_index(clock, ev.time)
        which = rng.choice(n_tls, size=n_move, replace=False)
        offsets[k:, which] = rng.uniform(-cfg.shift_range, cfg.shift_range, size=n_move)
        scrambles.append(k)
    if cfg.diffusing_tls and n_tls:
        steps = stream(sim.seed, "tls_walk", qubit_id).normal(0.0, cfg.diffusing_tls, n_iter)
        steps[0] = 0.0
        offsets[:, 0] += np.cumsum(steps)
    return offsets, tuple(sorted(set(scrambles)))


def _detector_charge(cfg: TlsConfig, sim: SimConfig, qubit_id, qubit_pos, impacts):
    """Offset charge per iteration (unwrapped)."""
    clock = iteration_clock(cfg, sim)
    n_iter = cfg.n_iterations
    initial = stream(sim.seed, "charge_init", qubit_id).random()
    step_var = sim.diffusion_var_per_hour / SECONDS_PER_HOUR * cfg.iteration_period
    inc = np.zeros(n_iter)
    if step_var > 0:
        inc = stream(sim.seed, "charge_walk", qubit_id).standard_normal(n_iter) * math.sqrt(step_var)
        inc[0] = 0.0
    if impacts:
        signs = stream(sim.seed, "jump_sign", qubit_id).choice([-1.0, 1.0], size=len(impacts))
        for ev, sign in zip(impacts, signs):
            inc[impact_rep_index(clock, ev.time)] += sign * charge_response(ev, qubit_pos, sim.sigma_spatial)
    return initial + np.cumsum(inc)


def simulate_tls_series(tls_config: TlsConfig, sim_config: SimConfig, impacts=(),
                        qubit_id: int = 0, qubit_pos=(0.0, 0.0)) -> SpectrumSeries:
    """Interleaved spectroscopy and averaged-detector record for one qubit."""
    cfg, sim = tls_config, sim_config
    impacts = tuple(sorted(impacts, key=lambda ev: ev.time))
    _, _, shifts = stark_sweep(cfg)
    offsets, scrambles = _tls_trajectory(cfg, sim, qubit_id, qubit_pos, impacts)

    if cfg.diffusing_tls:
        probs = survival_spectrum(shifts, offsets, cfg, sim)
    else:
        # offsets are piecewise constant; evaluate once per segment
        probs = np.empty((cfg.n_iterations, cfg.n_steps))
        edges = [0, *scrambles, cfg.n_iterations]
        for a, b in zip(edges, edges[1:]):
            if b > a:
                probs[a:b] = survival_spectrum(shifts, offsets[a], cfg, sim)
    u = stream(sim.seed, "tls_shots", qubit_id).random(probs.shape, dtype=np.float32)
    frames = (u < probs).view(np.uint8)

    ng = _detector_charge(cfg, sim, qubit_id, qubit_pos, impacts)
    p_mr = with_readout_error(ramsey_prob(ng, sim), sim.meas_error)
    counts = stream(sim.seed, "tls_detector", qubit_id).binomial(cfg.n_detector_shots, p_mr)
    return SpectrumSeries(frames, counts / cfg.n_detector_shots, shifts, qubit_id,
                          scrambles, cfg, sim, impacts)


def simulate_tls_run(tls_config: TlsConfig, sim_config: SimConfig, layout: ChipLayout,
                     qubit_ids=None, impacts=None) -> dict[int, SpectrumSeries]:
    """Spectroscopy series for every active qubit sharing one impact list."""
    ids = tuple(layout.active_ids if qubit_ids is None else qubit_ids)
    if impacts is None:
        impacts = generate_impacts(iteration_clock(tls_config, sim_config), layout)
    return {q: simulate_tls_series(tls_config, sim_config, impacts, q, layout.position(q))
            for q in ids}
