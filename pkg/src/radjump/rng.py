"""Named random streams derived from one master seed.

Each (purpose, qubit) pair gets its own ``SeedSequence`` child keyed by
``spawn_key``, so adding or removing qubits never perturbs another
qubit's stream and per-qubit work can run in any order.
"""

import numpy as np

PURPOSES = {
    "impacts": 0,
    "charge_init": 1,
    "charge_walk": 2,
    "jump_sign": 3,
    "m0": 4,
    "m1": 5,
    "tls_layout": 6,
    "tls_shots": 7,
    "tls_detector": 8,
    "tls_scramble": 9,
    "tls_walk": 10,
}

GLOBAL = -1


def stream(seed: int, purpose: str, qubit: int = GLOBAL) -> np.random.Generator:
    """Generator for ``purpose`` on ``qubit`` (``GLOBAL`` for chip-wide draws)."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    key = (PURPOSES[purpose], qubit + 1)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))
