"""A small replication: trigger timing accuracy, the T1 dip and delay statistics.

    python demos/02_timing_and_dip.py [n_runs]

The full study uses 250 runs (``radjump replicate-appendix``); 20 runs
already show the dip and a timing spread of a few repetitions.
"""

import sys

from radjump.pipeline import appendix_report, replicate


def main(n_runs: int = 20) -> None:
    result = replicate(n_runs=n_runs, seed=0)
    rep = appendix_report(result, threshold=14, n_null_seeds=20)
    t, d, dl, ds = rep["timing"], rep["dip"], rep["delays"], rep["distance"]
    print(f"{n_runs} runs, {rep['detector_hours']:.2f} detector-hours")
    print(f"timing: median |offset| {t['median_abs']:.1f} reps, MAD {t['mad']:.1f} reps ({t['mad_us']:.0f} us)")
    print(f"dip: z = {d['min_z']:.2f} at offset {d['min_z_offset']} over {d['n_events']} triggers")
    print(f"null: |z| < 3 in {rep['null_dip']['fraction_abs_z_below_3']:.0%} of redraws")
    print(f"delays: tau {dl['tau_jump']:.1f} s (truth {dl['tau_true']:.1f}), "
          f"P_coinc {dl['p_coinc']:.2f} (truth {dl['p_coinc_true']:.2f})")
    print(f"distance: sigma {ds['sigma_mm']:.2f} mm {ds['flags'] or ''}")
    for name, ok in rep["checks"].items():
        print(f"  {'PASS' if ok else 'FAIL'} {name}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 20)
