import json
import struct

import numpy as np
import pytest

from radjump.chip import ChipLayout, ImpactEvent
from radjump.detector import DetectorParams, JumpDetection
from radjump.records import (FormatVersionError, LengthMismatchError, ManifestError, SchemaError,
                             TruncatedPayloadError, ingest_external, manifest_schema, read_detections,
                             read_manifest, read_qrl1, read_run, read_shots_csv, read_spectrum, write_detections,
                             write_qrl1, write_run, write_shots_csv, write_spectrum)
from radjump.simulator import SimConfig, simulate_run
from radjump.tls import TlsConfig, simulate_tls_series


@pytest.fixture
def record():
    lay = ChipLayout.from_positions({0: (0.0, 0.0), 3: (1.0, 0.0), 7: (0.0, 2.0)})
    cfg = SimConfig(n_reps=20_011, seed=5, impact_rate=20.0)
    return simulate_run(cfg, lay)


@pytest.mark.parametrize("encoding", ["csv", "qrl1"])
def test_run_roundtrip(tmp_path, record, encoding):
    path = write_run(record, tmp_path / "run.json", encoding=encoding)
    back = read_run(path)
    assert back == record
    assert back.impacts == record.impacts and len(record.impacts) > 0
    man = read_manifest(path)
    assert man["created_at"] is None and man["payload"]["encoding"] == encoding


def test_qrl1_header_layout(tmp_path, record):
    write_qrl1(tmp_path / "x.qrl1", record.qubit_ids, record.m0, record.m1)
    raw = (tmp_path / "x.qrl1").read_bytes()
    magic, version, flags, nq, n = struct.unpack("<4sHHIQ", raw[:20])
    assert (magic, version, flags, nq, n) == (b"QRL1", 1, 0, 3, 20_011)
    assert np.frombuffer(raw[20:32], "<i4").tolist() == [0, 3, 7]
    assert len(raw) == 32 + (2 * 3 * 20_011 + 7) // 8
    # first repetition: bits m0(q0), m1(q0), m0(q3), ... least significant first
    first = raw[32]
    bits = [(first >> i) & 1 for i in range(6)]
    assert bits == [record.m0[0, 0], record.m1[0, 0], record.m0[1, 0], record.m1[1, 0],
                    record.m0[2, 0], record.m1[2, 0]]


def test_qrl1_errors(tmp_path, record):
    p = tmp_path / "x.qrl1"
    write_qrl1(p, record.qubit_ids, record.m0, record.m1)
    raw = p.read_bytes()
    p.write_bytes(raw[:-3])
    with pytest.raises(TruncatedPayloadError):
        read_qrl1(p)
    p.write_bytes(raw[:10])
    with pytest.raises(TruncatedPayloadError):
        read_qrl1(p)
    p.write_bytes(raw[:4] + struct.pack("<H", 2) + raw[6:])
    with pytest.raises(FormatVersionError):
        read_qrl1(p)
    p.write_bytes(raw + b"\0")
    with pytest.raises(LengthMismatchError):
        read_qrl1(p)
    p.write_bytes(raw)
    with pytest.raises(LengthMismatchError):
        read_qrl1(p, expected_reps=20_000)


def test_manifest_version_and_schema(tmp_path, record):
    path = write_run(record, tmp_path / "run.json", encoding="qrl1")
    man = json.loads(path.read_text())
    man["format_version"] = "2.0"
    path.write_text(json.dumps(man))
    with pytest.raises(FormatVersionError):
        read_run(path)
    man["format_version"] = "1.0"
    man["mode"] = "bogus"
    path.write_text(json.dumps(man))
    with pytest.raises(ManifestError):
        read_run(path)
    path.write_text("{not json")
    with pytest.raises(ManifestError):
        read_run(path)
    assert manifest_schema()["type"] == "object"


def test_length_mismatch_between_manifest_and_payload(tmp_path, record):
    path = write_run(record, tmp_path / "run.json", encoding="csv")
    man = json.loads(path.read_text())
    man["n_reps"] = 20_000
    man["config"]["n_reps"] = 20_000
    path.write_text(json.dumps(man))
    with pytest.raises(LengthMismatchError):
        read_run(path)


def _csv(tmp_path, text):
    p = tmp_path / "s.csv"
    p.write_text(text)
    return p


def test_csv_schema_errors(tmp_path):
    with pytest.raises(SchemaError) as err:
        read_shots_csv(_csv(tmp_path, "rep_index,qubit_id,m0\n0,0,1\n"))
    assert err.value.column == "m1"
    with pytest.raises(SchemaError) as err:
        read_shots_csv(_csv(tmp_path, "rep_index,qubit_id,m0,m1\n0,0,1,0\n1,0,2,0\n"))
    assert err.value.row == 2 and err.value.column == "m0"
    with pytest.raises(SchemaError) as err:
        read_shots_csv(_csv(tmp_path, "rep_index,qubit_id,m0,m1\n0,0,1,0\n1,0,x,0\n"))
    assert err.value.row == 2
    with pytest.raises(SchemaError, match="duplicate"):
        read_shots_csv(_csv(tmp_path, "rep_index,qubit_id,m0,m1\n0,0,1,0\n0,0,1,0\n"), n_reps=2, qubit_ids=[0])
    with pytest.raises(LengthMismatchError):
        read_shots_csv(_csv(tmp_path, "rep_index,qubit_id,m0,m1\n0,0,1,0\n"), n_reps=2, qubit_ids=[0])


def test_csv_rows_may_arrive_in_any_order(tmp_path):
    p = _csv(tmp_path, "m1,m0,qubit_id,rep_index\n1,0,4,1\n0,1,2,0\n1,1,2,1\n0,0,4,0\n")
    ids, m0, m1 = read_shots_csv(p)
    assert ids == (2, 4)
    assert m0.tolist() == [[1, 1], [0, 0]] and m1.tolist() == [[0, 1], [0, 1]]


def test_chunked_csv_matches_single_pass(tmp_path, record):
    p = tmp_path / "s.csv"
    write_shots_csv(p, record.qubit_ids, record.m0, record.m1)
    a = read_shots_csv(p, chunk_rows=997)
    b = read_shots_csv(p)
    assert a[0] == b[0] and np.array_equal(a[1], b[1]) and np.array_equal(a[2], b[2])


def test_ingest_external_matches_simulated_csv(tmp_path, record):
    path = write_run(record, tmp_path / "run.json", encoding="csv")
    ext = ingest_external(tmp_path / "run.shots.csv", path)
    assert ext.impacts is None and ext.mode == "external"
    assert np.array_equal(ext.m0, record.m0) and np.array_equal(ext.m1, record.m1)
    assert ext.qubit_ids == record.qubit_ids


def test_spectrum_roundtrip(tmp_path):
    cfg = TlsConfig(n_iterations=120, n_steps=31)
    s = simulate_tls_series(cfg, SimConfig(seed=2), impacts=[ImpactEvent(1.0, 0.0, 0.0)], qubit_id=4)
    path = write_spectrum(s, tmp_path / "tls.json")
    back = read_spectrum(path)
    assert back == s
    assert back.scramble_iterations == s.scramble_iterations == (41,)


def test_detections_roundtrip(tmp_path):
    p = DetectorParams()
    dets = [JumpDetection(0, 100, 2, 15.25), JumpDetection(0, 150, 4, 31.0), JumpDetection(1, 9, 2, 14.0)]
    write_detections(tmp_path / "d.csv", dets, p)
    assert read_detections(tmp_path / "d.csv") == sorted(dets)
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "run_id,qubit_id,t_trigger_index,t_trigger_seconds,peak_value,cluster_id"
    cluster = [line.split(",")[-1] for line in lines[1:]]
    assert cluster[0] == cluster[1] != cluster[2]
