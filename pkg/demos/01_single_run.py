"""Simulate one 44 s run, find the charge jumps and compare with the truth.

    python demos/01_single_run.py [seed]
"""

import sys

from radjump import DetectorParams, SimConfig, cluster_jumps, default_layout, detect_run, simulate_run
from radjump.simulator import impact_rep_index


def main(seed: int = 1) -> None:
    layout = default_layout()
    cfg = SimConfig(seed=seed)
    print(f"simulating {cfg.n_reps} repetitions on {len(layout.active_ids)} qubits ...")
    record = simulate_run(cfg, layout)
    print(f"{len(record.impacts)} impacts at t = " + ", ".join(f"{e.time:.2f} s" for e in record.impacts))

    params = DetectorParams()
    dets = detect_run(record, params)
    multi, singles = cluster_jumps(dets, params)
    print(f"{len(dets)} triggers above {params.threshold}: {len(multi)} multi-qubit jumps, "
          f"{len(singles)} single-qubit")
    truth = [impact_rep_index(cfg, e.time) for e in record.impacts]
    for mj in multi:
        nearest = min(truth, key=lambda k: abs(k - mj.start)) if truth else None
        off = "" if nearest is None else f", nearest impact {mj.start - nearest:+d} reps"
        print(f"  t = {mj.start * cfg.rep_period:7.3f} s  qubits {sorted(mj.qubits)}{off}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 1)
