import numpy as np
import pytest

from radjump.chip import ChipLayout, ImpactEvent
from radjump.simulator import SimConfig
from radjump.stats import classify_scrambling, pearson_window_r
from radjump.tls import (TlsConfig, simulate_tls_run, simulate_tls_series, stark_shift, stark_sweep,
                         survival_spectrum, tls_loss_rate)


def small(**kw):
    base = dict(n_iterations=600, n_steps=101)
    base.update(kw)
    return TlsConfig(**base)


def test_stark_shift_examples():
    assert stark_shift(0.0, 50e6, -300e6) == 0.0
    assert stark_shift(20e6, 50e6, -300e6) == pytest.approx(4.8e6)
    assert stark_shift(40e6, 50e6, -300e6) == pytest.approx(4 * 4.8e6)
    assert stark_shift(20e6, -50e6, -300e6) < 0


@pytest.mark.parametrize("delta", [0.0, 300e6])
def test_stark_shift_singular(delta):
    with pytest.raises(ValueError):
        stark_shift(1e6, delta, -300e6)


def test_sweep_spans_range_monotonically():
    _, _, shifts = stark_sweep(TlsConfig())
    assert shifts[0] == pytest.approx(-20e6) and shifts[-1] == pytest.approx(20e6)
    assert shifts[125] == pytest.approx(0.0, abs=1e-6)
    assert np.all(np.diff(shifts) > 0)


def test_empty_tls_list_gives_flat_baseline():
    cfg, sim = small(tls_list=()), SimConfig()
    _, _, shifts = stark_sweep(cfg)
    assert np.all(tls_loss_rate(shifts, [], [], [], 50e-6) == 0)
    p = survival_spectrum(shifts, np.array([]), cfg, sim)
    assert np.allclose(p, p[0])
    series = simulate_tls_series(cfg, sim)
    assert series.scramble_iterations == ()


def test_tls_line_shows_up_where_it_sits():
    cfg, sim = TlsConfig(n_iterations=400), SimConfig(meas_error=0.0)
    s = simulate_tls_series(cfg, sim)
    mean = s.frames.mean(axis=0)
    i = np.argmin(np.abs(s.shifts + 14e6))
    far = np.argmin(np.abs(s.shifts + 10e6))
    assert mean[i] < 0.5 * mean[far]
    # one TLS on resonance removes `depth` of the baseline survival
    one = cfg.replace(tls_list=(cfg.tls_list[0],))
    p = survival_spectrum(np.array([-14e6]), np.array([-14e6]), one, sim)
    base = np.exp(-cfg.probe_duration / sim.baseline_t1)
    assert p[0] == pytest.approx(base * (1 - 0.6), rel=1e-9)


def test_close_impact_scrambles_spectrum_and_is_recovered():
    cfg = small()
    sim = SimConfig(diffusion_var_per_hour=0.0, seed=3)
    ev = ImpactEvent(time=300.5 * cfg.iteration_period, x=0.0, y=0.0)
    s = simulate_tls_series(cfg, sim, impacts=[ev])
    assert s.scramble_iterations == (300,)
    before, after = s.frames[:300].mean(0), s.frames[300:].mean(0)
    assert np.abs(before - after).max() > 0.3
    r = pearson_window_r(s.frames, 100)
    assert np.nanmin(r) < 0.4
    rep = classify_scrambling(r, [300], 0.4, window=100)
    assert len(rep.events) == 1 and abs(rep.events[0][0] - 300) <= 5


def test_far_impact_does_not_scramble():
    cfg, sim = small(), SimConfig(diffusion_var_per_hour=0.0)
    ev = ImpactEvent(time=1.0, x=100.0, y=0.0)
    s = simulate_tls_series(cfg, sim, impacts=[ev])
    assert s.scramble_iterations == ()
    r = pearson_window_r(s.frames, 100)
    assert np.nanmin(r) > 0.4


def test_diffusing_tls_moves_only_the_first_line():
    cfg = small(diffusing_tls=0.2e6, n_iterations=300)
    s = simulate_tls_series(cfg, SimConfig(seed=1))
    assert s.scramble_iterations == ()
    assert s.frames.shape == (300, 101)


def test_run_shares_impacts_and_is_deterministic():
    lay = ChipLayout.from_positions({0: (0.0, 0.0), 1: (1.0, 0.0)})
    cfg, sim = small(n_iterations=200), SimConfig(seed=4, impact_rate=1.0)
    a = simulate_tls_run(cfg, sim, lay)
    b = simulate_tls_run(cfg, sim, lay)
    assert a == b and set(a) == {0, 1}
    assert a[0].impacts == a[1].impacts
    assert a[0].detector_probs.shape == (200,)
    assert np.all((a[0].detector_probs >= 0) & (a[0].detector_probs <= 1))


@pytest.mark.parametrize("bad", [dict(n_steps=1), dict(tls_list=((0, 0, 0.5),)), dict(tls_list=((0, 1e6, 2),)),
                                 dict(scramble_fraction=2.0), dict(diffusing_tls=-1.0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TlsConfig(**bad)
