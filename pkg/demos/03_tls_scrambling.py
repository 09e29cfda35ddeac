"""TLS spectra scrambled by impacts, found with the windowed Pearson r.

    python demos/03_tls_scrambling.py [seed]
"""

import sys

from radjump import DetectorParams, SimConfig, TlsConfig, default_layout
from radjump.pipeline import scramble_recall, tls_batch


def main(seed: int = 0) -> None:
    sim = SimConfig(diffusion_var_per_hour=0.02, impact_rate=1 / 30)
    for _, analysis in tls_batch(TlsConfig(), sim, default_layout(), [seed], DetectorParams()):
        print(f"{len(analysis.multi)} multi-qubit jumps at iterations {[mj.start for mj in analysis.multi]}")
        for q, rep in sorted(analysis.reports.items()):
            truth = analysis.series[q].scramble_iterations
            if truth or rep.events:
                print(f"  qubit {q:2d}: scrambled at {list(truth)}, classified {[k for k, _ in rep.events]}")
        print(scramble_recall(analysis, 200))


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 0)
