"""Chip geometry and the charge response of qubits to an impact."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ChipLayout:
    """Qubit positions on the chip plane, in millimeters.

    ``active_ids`` are the qubits used for jump detection; the rest idle.
    """

    qubit_ids: tuple[int, ...]
    x_mm: tuple[float, ...]
    y_mm: tuple[float, ...]
    active_ids: tuple[int, ...] = ()
    source: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if not (len(self.qubit_ids) == len(self.x_mm) == len(self.y_mm)):
            raise ValueError("qubit_ids, x_mm and y_mm must have equal length")
        if len(set(self.qubit_ids)) != len(self.qubit_ids):
            raise ValueError("qubit ids must be unique")
        if not all(math.isfinite(v) for v in self.x_mm + self.y_mm):
            raise ValueError("qubit coordinates must be finite")
        if not self.active_ids:
            object.__setattr__(self, "active_ids", tuple(self.qubit_ids))
        missing = set(self.active_ids) - set(self.qubit_ids)
        if missing:
            raise ValueError(f"active ids not in layout: {sorted(missing)}")

    @classmethod
    def from_positions(cls, positions, active_ids=None):
        """Build a layout from ``{qubit_id: (x_mm, y_mm)}``."""
        ids = tuple(int(q) for q in positions)
        xs = tuple(float(positions[q][0]) for q in positions)
        ys = tuple(float(positions[q][1]) for q in positions)
        return cls(ids, xs, ys, tuple(active_ids) if active_ids is not None else ())

    def position(self, qubit_id: int) -> tuple[float, float]:
        try:
            i = self.qubit_ids.index(qubit_id)
        except ValueError:
            raise KeyError(f"unknown qubit id {qubit_id}") from None
        return self.x_mm[i], self.y_mm[i]

    def positions(self, ids=None) -> np.ndarray:
        """(n, 2) array of coordinates for ``ids`` (default: active qubits)."""
        ids = self.active_ids if ids is None else ids
        return np.array([self.position(q) for q in ids], dtype=float).reshape(-1, 2)

    def bounding_box(self) -> tuple[float, float, float, float]:
        return min(self.x_mm), max(self.x_mm), min(self.y_mm), max(self.y_mm)

    def area_mm2(self) -> float:
        x0, x1, y0, y1 = self.bounding_box()
        return (x1 - x0) * (y1 - y0)


def load_layout(path) -> ChipLayout:
    """Read a layout CSV with header ``qubit_id,x_mm,y_mm,active``."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"qubit_id", "x_mm", "y_mm", "active"}
        missing = expected - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing layout columns {sorted(missing)}")
        ids, xs, ys, active = [], [], [], []
        for row in reader:
            q = int(row["qubit_id"])
            ids.append(q)
            xs.append(float(row["x_mm"]))
            ys.append(float(row["y_mm"]))
            flag = row["active"].strip()
            if flag not in ("0", "1"):
                raise ValueError(f"{path}: active must be 0 or 1 (qubit {q})")
            if flag == "1":
                active.append(q)
    return ChipLayout(tuple(ids), tuple(xs), tuple(ys), tuple(active), source=str(path))


def save_layout(layout: ChipLayout, path) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write("qubit_id,x_mm,y_mm,active\n")
        for q, x, y in zip(layout.qubit_ids, layout.x_mm, layout.y_mm):
            fh.write(f"{q},{x!r},{y!r},{int(q in layout.active_ids)}\n")


def default_layout() -> ChipLayout:
    """27-qubit heavy-hex layout shipped with the package (1.5 mm grid).

    Active qubits are the 17 mutually non-adjacent ones.
    """
    ref = resources.files("radjump") / "data" / "falcon27_layout.csv"
    with resources.as_file(ref) as path:
        layout = load_layout(path)
    return ChipLayout(layout.qubit_ids, layout.x_mm, layout.y_mm, layout.active_ids,
                      source="builtin:falcon27")


def distance(layout: ChipLayout, a: int, b: int) -> float:
    """Euclidean distance between two qubits in mm."""
    xa, ya = layout.position(a)
    xb, yb = layout.position(b)
    return math.hypot(xa - xb, ya - yb)


@dataclass(frozen=True)
class ImpactEvent:
    time: float
    x: float
    y: float
    peak_charge: float = 0.1
    t1_epicenter: float = 1e-6

    def __post_init__(self):
        if self.time < 0 or self.peak_charge < 0 or self.t1_epicenter <= 0:
            raise ValueError(f"invalid impact event {self}")


def gaussian_falloff(d, sigma):
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    d = np.asarray(d, dtype=float)
    return np.exp(-d * d / (2.0 * sigma * sigma))


def charge_response(event: ImpactEvent, qubit_pos, sigma: float):
    """Offset-charge jump seen at ``qubit_pos`` (mm) from ``event``.

    ``qubit_pos`` may be a single ``(x, y)`` or an ``(n, 2)`` array.
    """
    pos = np.asarray(qubit_pos, dtype=float)
    d = np.hypot(pos[..., 0] - event.x, pos[..., 1] - event.y)
    out = event.peak_charge * gaussian_falloff(d, sigma)
    return float(out) if out.ndim == 0 else out


def wrap_charge(value):
    """Map offset charge into its representative in [0, 1)."""
    v = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("offset charge must be finite")
    w = np.mod(v, 1.0)
    # np.mod can return 1.0 for tiny negative inputs
    w = np.where(w >= 1.0, 0.0, w)
    return float(w) if w.ndim == 0 else w
