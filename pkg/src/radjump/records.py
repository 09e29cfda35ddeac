"""On-disk formats for runs, spectroscopy series, detections and reports.

A record is a JSON manifest plus payload files next to it.  Shots are
stored as CSV ``rep_index,qubit_id,m0,m1`` (interchange default) or in the
packed ``QRL1`` binary layout described in ``docs/qrl1_format.md``.
Readers and writers stream in chunks so intermediate text never has to be
held in memory at once.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import pandas as pd

from .chip import ImpactEvent
from .detector import DetectorParams, JumpDetection, cluster_ids
from .simulator import RunRecord, SimConfig
from .tls import SpectrumSeries, TlsConfig

FORMAT_VERSION = "1.0"
SUPPORTED_VERSIONS = ("1.0",)
QRL1_MAGIC = b"QRL1"
QRL1_HEADER = struct.Struct("<4sHHIQ")
CHUNK_REPS = 1 << 16
SHOT_COLUMNS = ("rep_index", "qubit_id", "m0", "m1")


class RecordError(ValueError):
    code = "record"


class FormatVersionError(RecordError):
    code = "version"


class ManifestError(RecordError):
    code = "manifest"


class TruncatedPayloadError(RecordError):
    code = "truncated"


class LengthMismatchError(RecordError):
    code = "length_mismatch"


class SchemaError(RecordError):
    """Malformed payload; ``row`` is the 1-based data row, ``column`` the field."""

    code = "schema"

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


def manifest_schema() -> dict:
    ref = resources.files("radjump") / "data" / "manifest.schema.json"
    return json.loads(ref.read_text())


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    version = data.get("format_version") if isinstance(data, dict) else None
    if version not in SUPPORTED_VERSIONS:
        raise FormatVersionError(f"{path}: unsupported format_version {version!r}")
    try:
        jsonschema.validate(data, manifest_schema())
    except jsonschema.ValidationError as exc:
        raise ManifestError(f"{path}: {exc.message}") from exc
    return data


def _impacts_to_json(impacts):
    return [dict(time=e.time, x=e.x, y=e.y, peak_charge=e.peak_charge, t1_epicenter=e.t1_epicenter)
            for e in impacts]


def _impacts_from_json(items):
    return tuple(ImpactEvent(**item) for item in items)


def _payload_path(manifest_path: Path, suffix: str) -> Path:
    return manifest_path.with_name(manifest_path.stem + suffix)


# ----------------------------------------------------------------- run records


def run_manifest(record: RunRecord, encoding: str, payload_name: str) -> dict:
    gt = None if record.impacts is None else {"impacts": _impacts_to_json(record.impacts)}
    return {
        "format_version": FORMAT_VERSION,
        "created_at": record.created_at,
        "mode": record.mode,
        "config": record.config.to_dict(),
        "layout_path": record.layout_path,
        "seed": record.config.seed,
        "qubit_ids": list(record.qubit_ids),
        "n_reps": record.n_reps,
        "payload": {"encoding": encoding, "file": payload_name},
        "ground_truth": gt,
        "extra": record.extra,
    }


def write_run(record: RunRecord, path, encoding: str = "csv") -> Path:
    """Write ``record`` as manifest ``path`` (``.json``) plus a payload file."""
    path = Path(path)
    if encoding == "csv":
        payload = _payload_path(path, ".shots.csv")
        write_shots_csv(payload, record.qubit_ids, record.m0, record.m1)
    elif encoding == "qrl1":
        payload = _payload_path(path, ".qrl1")
        write_qrl1(payload, record.qubit_ids, record.m0, record.m1)
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    _dump_json(run_manifest(record, encoding, payload.name), path)
    return path


def read_run(path) -> RunRecord:
    path = Path(path)
    man = read_manifest(path)
    if man["mode"] == "tls_interleaved":
        raise ManifestError(f"{path}: manifest describes a spectroscopy series")
    payload = man.get("payload") or {}
    if "file" not in payload:
        raise ManifestError(f"{path}: manifest has no payload file")
    config = SimConfig.from_dict(man["config"])
    n_reps = man.get("n_reps", config.n_reps)
    if n_reps != config.n_reps:
        raise LengthMismatchError(f"{path}: n_reps {n_reps} disagrees with config {config.n_reps}")
    qubit_ids = man.get("qubit_ids")
    file = path.with_name(payload["file"])
    if payload["encoding"] == "qrl1":
        ids, m0, m1 = read_qrl1(file, expected_reps=n_reps)
        if qubit_ids is not None and list(ids) != list(qubit_ids):
            raise LengthMismatchError(f"{file}: qubit ids disagree with manifest")
    elif payload["encoding"] == "csv":
        ids, m0, m1 = read_shots_csv(file, n_reps=n_reps, qubit_ids=qubit_ids)
    else:
        raise ManifestError(f"{path}: encoding {payload['encoding']!r} is not a run payload")
    gt = man.get("ground_truth")
    impacts = _impacts_from_json(gt["impacts"]) if gt and "impacts" in gt else None
    return RunRecord(config, tuple(ids), m0, m1, impacts, man.get("layout_path"),
                     man["mode"], man.get("created_at"), man.get("extra") or {})


def write_shots_csv(path, qubit_ids, m0, m1) -> None:
    """Repetition-major CSV, written ``CHUNK_REPS`` repetitions at a time."""
    ids = np.asarray(qubit_ids, dtype=np.int64)
    nq, n = m0.shape
    with open(path, "w", newline="") as fh:
        fh.write(",".join(SHOT_COLUMNS) + "\n")
        for a in range(0, n, CHUNK_REPS):
            b = min(a + CHUNK_REPS, n)
            reps = np.repeat(np.arange(a, b), nq)
            frame = pd.DataFrame({
                "rep_index": reps,
                "qubit_id": np.tile(ids, b - a),
                "m0": m0[:, a:b].T.reshape(-1),
                "m1": m1[:, a:b].T.reshape(-1),
            })
            frame.to_csv(fh, header=False, index=False, lineterminator="\n")


def _scan_csv_ids(path, chunk_rows):
    ids, max_rep = set(), -1
    for chunk in pd.read_csv(path, usecols=["rep_index", "qubit_id"], chunksize=chunk_rows):
        ids.update(int(q) for q in pd.unique(chunk["qubit_id"]))
        max_rep = max(max_rep, int(chunk["rep_index"].max()))
    return sorted(ids), max_rep + 1


def read_shots_csv(path, n_reps=None, qubit_ids=None, chunk_rows: int = 1 << 20):
    """Parse a shot CSV in bounded chunks.

    ``n_reps`` and ``qubit_ids`` may be omitted and are then inferred with an
    extra pass.  Every (repetition, qubit) cell must appear exactly once.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        header = next(csv.reader(fh), None)
    if header is None:
        raise SchemaError(f"{path}: empty file")
    header = [h.strip() for h in header]
    for col in SHOT_COLUMNS:
        if col not in header:
            raise SchemaError(f"{path}: missing column '{col}'", column=col)
    if qubit_ids is None or n_reps is None:
        found_ids, found_reps = _scan_csv_ids(path, chunk_rows)
        qubit_ids = found_ids if qubit_ids is None else qubit_ids
        n_reps = found_reps if n_reps is None else n_reps
    qubit_ids = [int(q) for q in qubit_ids]
    row_of = {q: i for i, q in enumerate(qubit_ids)}
    lut = np.full(max(qubit_ids) - min(qubit_ids) + 1, -1, dtype=np.int64)
    base = min(qubit_ids)
    for q, i in row_of.items():
        lut[q - base] = i
    nq = len(qubit_ids)
    m0 = np.zeros((nq, n_reps), dtype=np.uint8)
    m1 = np.zeros((nq, n_reps), dtype=np.uint8)
    seen = np.zeros((nq, n_reps), dtype=bool)
    rows_read = 0
    for chunk in pd.read_csv(path, usecols=list(SHOT_COLUMNS), chunksize=chunk_rows, dtype=str,
                             keep_default_na=False):
        values = {}
        for col in SHOT_COLUMNS:
            num = pd.to_numeric(chunk[col], errors="coerce")
            bad = num.isna().to_numpy() | (num.to_numpy() != np.floor(num.to_numpy()))
            if bad.any():
                row = rows_read + int(np.argmax(bad)) + 1
                raise SchemaError(f"{path}: row {row}: non-integer {col} "
                                  f"{chunk[col].iloc[int(np.argmax(bad))]!r}", row=row, column=col)
            values[col] = num.to_numpy().astype(np.int64)
        for col in ("m0", "m1"):
            bad = (values[col] != 0) & (values[col] != 1)
            if bad.any():
                row = rows_read + int(np.argmax(bad)) + 1
                raise SchemaError(f"{path}: row {row}: {col} must be 0 or 1, got {values[col][bad][0]}",
                                  row=row, column=col)
        reps, qs = values["rep_index"], values["qubit_id"]
        bad = (reps < 0) | (reps >= n_reps)
        if bad.any():
            row = rows_read + int(np.argmax(bad)) + 1
            raise LengthMismatchError(f"{path}: row {row}: rep_index {reps[bad][0]} outside 0..{n_reps - 1}")
        off = qs - base
        ok = (off >= 0) & (off < lut.size)
        rows = np.where(ok, lut[np.clip(off, 0, lut.size - 1)], -1)
        if (rows < 0).any():
            row = rows_read + int(np.argmax(rows < 0)) + 1
            raise SchemaError(f"{path}: row {row}: unknown qubit_id {qs[rows < 0][0]}", row=row, column="qubit_id")
        if seen[rows, reps].any():
            row = rows_read + int(np.argmax(seen[rows, reps])) + 1
            raise SchemaError(f"{path}: row {row}: duplicate shot", row=row)
        seen[rows, reps] = True
        m0[rows, reps] = values["m0"]
        m1[rows, reps] = values["m1"]
        rows_read += len(chunk)
    expected = nq * n_reps
    if rows_read != expected:
        raise LengthMismatchError(f"{path}: {rows_read} shot rows, manifest implies {expected}")
    if not seen.all():
        raise SchemaError(f"{path}: duplicate rows leave {expected - int(seen.sum())} shots missing")
    return tuple(qubit_ids), m0, m1


def _qrl1_payload_bytes(nq: int, n: int) -> int:
    return (2 * nq * n + 7) // 8


def write_qrl1(path, qubit_ids, m0, m1) -> None:
    nq, n = m0.shape
    step = CHUNK_REPS  # multiple of 8 keeps chunks byte aligned
    with open(path, "wb") as fh:
        fh.write(QRL1_HEADER.pack(QRL1_MAGIC, 1, 0, nq, n))
        fh.write(np.asarray(qubit_ids, dtype="<i4").tobytes())
        for a in range(0, n, step):
            b = min(a + step, n)
            bits = np.stack([m0[:, a:b].T, m1[:, a:b].T], axis=-1).reshape(-1)
            fh.write(np.packbits(bits, bitorder="little").tobytes())


def read_qrl1(path, expected_reps=None):
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(QRL1_HEADER.size)
        if len(head) < QRL1_HEADER.size:
            raise TruncatedPayloadError(f"{path}: header truncated")
        magic, version, _flags, nq, n = QRL1_HEADER.unpack(head)
        if magic != QRL1_MAGIC:
            raise SchemaError(f"{path}: bad magic {magic!r}")
        if version != 1:
            raise FormatVersionError(f"{path}: unsupported QRL1 version {version}")
        if expected_reps is not None and n != expected_reps:
            raise LengthMismatchError(f"{path}: {n} repetitions, manifest says {expected_reps}")
        raw_ids = fh.read(4 * nq)
        if len(raw_ids) < 4 * nq:
            raise TruncatedPayloadError(f"{path}: qubit id table truncated")
        ids = tuple(int(q) for q in np.frombuffer(raw_ids, dtype="<i4"))
        m0 = np.empty((nq, n), dtype=np.uint8)
        m1 = np.empty((nq, n), dtype=np.uint8)
        step = CHUNK_REPS
        for a in range(0, n, step):
            b = min(a + step, n)
            want = _qrl1_payload_bytes(nq, b - a)
            buf = fh.read(want)
            if len(buf) < want:
                raise TruncatedPayloadError(f"{path}: payload truncated at repetition {a}")
            bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little",
                                 count=2 * nq * (b - a)).reshape(b - a, nq, 2)
            m0[:, a:b] = bits[:, :, 0].T
            m1[:, a:b] = bits[:, :, 1].T
        if fh.read(1):
            raise LengthMismatchError(f"{path}: trailing bytes after payload")
    return ids, m0, m1


def ingest_external(csv_path, manifest_path) -> RunRecord:
    """Load lab-exported shots; the record carries no ground truth."""
    manifest_path = Path(manifest_path)
    man = read_manifest(manifest_path)
    config = SimConfig.from_dict(man["config"])
    n_reps = man.get("n_reps", config.n_reps)
    ids, m0, m1 = read_shots_csv(csv_path, n_reps=n_reps, qubit_ids=man.get("qubit_ids"))
    if m0.shape[1] != config.n_reps:
        raise LengthMismatchError(f"{csv_path}: {m0.shape[1]} repetitions, config says {config.n_reps}")
    return RunRecord(config, ids, m0, m1, None, man.get("layout_path"), "external",
                     man.get("created_at"), man.get("extra") or {})


# ------------------------------------------------------------ spectrum series


def write_spectrum(series: SpectrumSeries, path) -> Path:
    path = Path(path)
    ms_file = _payload_path(path, ".ms.csv")
    mr_file = _payload_path(path, ".mr.csv")
    n_iter, n_steps = series.frames.shape
    with open(ms_file, "w", newline="") as fh:
        fh.write("iteration,step_index,ms\n")
        chunk = max(1, CHUNK_REPS // n_steps)
        for a in range(0, n_iter, chunk):
            b = min(a + chunk, n_iter)
            pd.DataFrame({
                "iteration": np.repeat(np.arange(a, b), n_steps),
                "step_index": np.tile(np.arange(n_steps), b - a),
                "ms": series.frames[a:b].reshape(-1),
            }).to_csv(fh, header=False, index=False, lineterminator="\n")
    with open(mr_file, "w", newline="") as fh:
        fh.write("iteration,p_mr\n")
        for i, p in enumerate(series.detector_probs):
            fh.write(f"{i},{float(p)!r}\n")
    gt = None
    if series.impacts is not None or series.scramble_iterations is not None:
        gt = {"impacts": _impacts_to_json(series.impacts or ()),
              "scramble_iterations": list(series.scramble_iterations or ())}
    sim = series.sim_config or SimConfig()
    man = {
        "format_version": FORMAT_VERSION,
        "created_at": None,
        "mode": "tls_interleaved",
        "config": sim.to_dict(),
        "tls_config": None if series.tls_config is None else series.tls_config.to_dict(),
        "layout_path": None,
        "seed": sim.seed,
        "qubit_id": int(series.qubit_id),
        "shifts_hz": [float(s) for s in series.shifts],
        "payload": {"encoding": "spectrum_csv", "ms_file": ms_file.name, "mr_file": mr_file.name},
        "ground_truth": gt,
        "extra": {"has_sim_config": series.sim_config is not None},
    }
    _dump_json(man, path)
    return path


def read_spectrum(path) -> SpectrumSeries:
    path = Path(path)
    man = read_manifest(path)
    if man["mode"] != "tls_interleaved":
        raise ManifestError(f"{path}: not a spectroscopy manifest")
    shifts = np.array(man["shifts_hz"], dtype=float)
    n_steps = shifts.size
    tls = TlsConfig.from_dict(man["tls_config"]) if man.get("tls_config") else None
    mr = pd.read_csv(path.with_name(man["payload"]["mr_file"]), dtype={"iteration": np.int64, "p_mr": float},
                     float_precision="round_trip")
    n_iter = len(mr)
    if tls is not None and n_iter != tls.n_iterations:
        raise LengthMismatchError(f"{path}: {n_iter} detector rows, config says {tls.n_iterations}")
    if not np.array_equal(mr["iteration"].to_numpy(), np.arange(n_iter)):
        raise SchemaError(f"{path}: detector iterations must run 0..{n_iter - 1} in order")
    frames = np.zeros((n_iter, n_steps), dtype=np.uint8)
    rows = 0
    for chunk in pd.read_csv(path.with_name(man["payload"]["ms_file"]), chunksize=1 << 20):
        it, st, ms = (chunk[c].to_numpy() for c in ("iteration", "step_index", "ms"))
        if ((ms != 0) & (ms != 1)).any():
            raise SchemaError(f"{path}: ms must be 0 or 1")
        if (it >= n_iter).any() or (st >= n_steps).any():
            raise LengthMismatchError(f"{path}: spectrum index out of range")
        frames[it, st] = ms
        rows += len(chunk)
    if rows != n_iter * n_steps:
        raise LengthMismatchError(f"{path}: {rows} spectrum rows, expected {n_iter * n_steps}")
    gt = man.get("ground_truth")
    impacts = _impacts_from_json(gt["impacts"]) if gt else None
    scr = tuple(gt["scramble_iterations"]) if gt else None
    sim = SimConfig.from_dict(man["config"]) if (man.get("extra") or {}).get("has_sim_config", True) else None
    return SpectrumSeries(frames, mr["p_mr"].to_numpy(), shifts, man["qubit_id"], scr, tls, sim, impacts)


# ------------------------------------------------------------------ detections

DETECTION_COLUMNS = ("run_id", "qubit_id", "t_trigger_index", "t_trigger_seconds", "peak_value", "cluster_id")


def write_detections(path, detections, params: DetectorParams) -> None:
    ids = cluster_ids(detections, params)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETECTION_COLUMNS)
        for det in sorted(detections):
            w.writerow([det.run_id, det.qubit_id, det.t_trigger, repr(det.t_trigger * params.dt),
                        repr(det.peak_value), ids[det]])


def read_detections(path) -> list[JumpDetection]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(DETECTION_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise SchemaError(f"{path}: missing columns {sorted(missing)}", column=sorted(missing)[0])
        for i, row in enumerate(reader, start=1):
            try:
                out.append(JumpDetection(int(row["run_id"]), int(row["t_trigger_index"]),
                                         int(row["qubit_id"]), float(row["peak_value"])))
            except ValueError as exc:
                raise SchemaError(f"{path}: row {i}: {exc}", row=i) from exc
    return out


# --------------------------------------------------------------------- reports


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return None if not math.isfinite(float(obj)) else float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, obj) -> None:
    _dump_json(_jsonable(obj), path)


def write_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
