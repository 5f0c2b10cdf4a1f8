"""Tests for storage module."""

import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from marginmatch.aum import AumBank
from marginmatch.errors import CountMismatchError, TraceFormatError, VersionMismatchError
from marginmatch.models import MaskDecision, TraceRecord
from marginmatch.network import OptimizerState, init_params
from marginmatch.policy import DecisionBatch
from marginmatch.storage import (
    JsonlWriter,
    RunCheckpoint,
    TraceFile,
    decision_from_payload,
    decision_payloads,
    load_run_checkpoint,
    read_checkpoint,
    read_jsonl,
    read_trace,
    save_run_checkpoint,
    trace_record_dtype,
    write_checkpoint,
    write_trace,
)


def sample_trace(config_hash="deadbeef"):
    rng = np.random.default_rng(0)
    ids = [10, 11, 12, 10, 11, 12]
    passes = [1, 1, 1, 2, 2, 2]
    return TraceFile.from_arrays(
        ids,
        passes,
        rng.normal(size=(6, 4)),
        num_classes=3,
        gold_labels=[0, 2, -1, 0, 2, -1],
        threshold_ids=[12],
        config_hash=config_hash,
    )


def test_trace_header_derived_from_body():
    """Test example, pass and record counts."""
    header = sample_trace().header
    assert header.example_count == 3
    assert header.pass_count == 2
    assert header.record_count == 6
    assert header.num_outputs == 4
    assert header.threshold_ids == (12,)


def test_trace_round_trip(tmp_path):
    """Test that a written trace reads back exactly."""
    trace = sample_trace()
    write_trace(trace, tmp_path / "t.bin")
    loaded = read_trace(tmp_path / "t.bin")
    assert loaded.header == trace.header
    assert_array_equal(loaded.example_ids, trace.example_ids)
    assert_array_equal(loaded.pass_indices, trace.pass_indices)
    assert_array_equal(loaded.gold_labels, trace.gold_labels)
    assert_array_equal(loaded.logits, trace.logits)
    assert [r.gold_label for r in loaded.records()][:3] == [0, 2, None]


def test_empty_trace_round_trip(tmp_path):
    """Test a trace with no records."""
    trace = TraceFile.from_arrays([], [], np.zeros((0, 3)), num_classes=2)
    write_trace(trace, tmp_path / "empty.bin")
    loaded = read_trace(tmp_path / "empty.bin")
    assert loaded.header.record_count == 0
    assert loaded.header.pass_count == 0
    assert list(loaded.records()) == []


def test_trace_from_records():
    """Test building a trace from TraceRecord objects."""
    records = [
        TraceRecord(example_id=1, pass_index=1, logits=(0.0, 1.0, 2.0)),
        TraceRecord(example_id=1, pass_index=2, logits=(1.0, 1.0, 2.0), gold_label=1),
    ]
    trace = TraceFile.from_records(records, num_classes=2)
    assert list(trace.records()) == records


def test_trace_rejects_bad_bodies():
    """Test non-finite logits and out-of-order passes."""
    with pytest.raises(TraceFormatError):
        TraceFile.from_arrays([1], [1], [[0.0, np.nan]], num_classes=1)
    with pytest.raises(TraceFormatError):
        TraceFile.from_arrays([1, 1], [2, 1], np.zeros((2, 2)), num_classes=1)
    with pytest.raises(TraceFormatError):
        TraceFile.from_arrays([1], [0], np.zeros((1, 2)), num_classes=1)


def test_trace_header_count_mismatch(tmp_path):
    """Test that a doctored header is caught."""
    trace = sample_trace()
    trace.header = trace.header.model_copy(update={"record_count": 5})
    with pytest.raises(CountMismatchError):
        trace.validate()


def test_truncated_trace_reports_offset(tmp_path):
    """Test that cutting a record short reports where that record starts."""
    trace = sample_trace(config_hash="abc")
    path = tmp_path / "t.bin"
    write_trace(trace, path)
    raw = path.read_bytes()
    header_size = 4 + 1 + 20 + 2 + 3 + 4 + 8
    record_size = trace_record_dtype(4).itemsize
    assert len(raw) == header_size + 6 * record_size

    path.write_bytes(raw[: header_size + 2 * record_size + 5])
    with pytest.raises(TraceFormatError) as excinfo:
        read_trace(path)
    assert excinfo.value.offset == header_size + 2 * record_size

    path.write_bytes(raw[:10])
    with pytest.raises(TraceFormatError) as excinfo:
        read_trace(path)
    assert excinfo.value.offset == 5


def test_trace_record_count_mismatch_on_read(tmp_path):
    """Test a body holding whole records but fewer than declared."""
    trace = sample_trace()
    path = tmp_path / "t.bin"
    write_trace(trace, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - trace_record_dtype(4).itemsize])
    with pytest.raises(CountMismatchError):
        read_trace(path)


def test_trace_bad_magic_and_version(tmp_path):
    """Test foreign files and future versions."""
    trace = sample_trace()
    path = tmp_path / "t.bin"
    write_trace(trace, path)
    raw = bytearray(path.read_bytes())

    path.write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(VersionMismatchError):
        read_trace(path)

    raw[4] = 2
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError) as excinfo:
        read_trace(path)
    assert excinfo.value.offset == 4


def test_checkpoint_round_trip(tmp_path):
    """Test named arrays and metadata."""
    arrays = {"a": np.arange(6, dtype=np.int64).reshape(2, 3), "b": np.array([0.5, -1.5])}
    write_checkpoint(tmp_path / "c.bin", arrays, {"pass_index": 3})
    loaded, meta = read_checkpoint(tmp_path / "c.bin")
    assert meta == {"pass_index": 3}
    assert_array_equal(loaded["a"], arrays["a"])
    assert_array_equal(loaded["b"], arrays["b"])


def test_checkpoint_rejects_trailing_bytes(tmp_path):
    """Test that extra data after the last array is an error."""
    path = tmp_path / "c.bin"
    write_checkpoint(path, {"a": np.zeros(2)}, {})
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(TraceFormatError):
        read_checkpoint(path)


def test_run_checkpoint_round_trip(tmp_path):
    """Test parameters, momentum and both banks."""
    params = init_params(3, [5], 4, np.random.default_rng(0), "tanh")
    optimizer = OptimizerState.for_params(params, total_steps=10, eta0=0.1, momentum=0.8)
    optimizer.step = 4
    unlabeled = AumBank([1, 2, 3], 4)
    unlabeled.update(np.arange(3), np.ones((3, 4)), 1, 0.9)
    supervised = AumBank([7], 4)
    save_run_checkpoint(
        tmp_path / "run.bin",
        RunCheckpoint(params, optimizer, unlabeled, supervised, {"pass_index": 1}),
    )
    loaded = load_run_checkpoint(tmp_path / "run.bin")
    assert loaded.meta == {"pass_index": 1}
    assert loaded.params.activation == "tanh"
    for a, b in zip(loaded.params.arrays(), params.arrays()):
        assert_array_equal(a, b)
    assert loaded.optimizer.step == 4
    assert loaded.optimizer.momentum == 0.8
    assert_array_equal(loaded.unlabeled_bank.aum, unlabeled.aum)
    assert_array_equal(loaded.unlabeled_bank.last_t, [1, 1, 1])
    assert loaded.supervised_bank.tracker(7).update_count == 0


def test_jsonl_header_and_records(tmp_path):
    """Test the header record and kind tags."""
    path = tmp_path / "m.jsonl"
    with JsonlWriter(path, "metrics", config_hash="abc") as writer:
        writer.write("pass", {"pass_index": 1, "mask_rate": 0.5})
    header, records = read_jsonl(path, stream="metrics")
    assert header["kind"] == "header"
    assert header["config_hash"] == "abc"
    assert records == [{"kind": "pass", "pass_index": 1, "mask_rate": 0.5}]
    with pytest.raises(VersionMismatchError):
        read_jsonl(path, stream="decisions")


def test_jsonl_refuses_nan(tmp_path):
    """Test that non-finite floats are never written."""
    with JsonlWriter(tmp_path / "m.jsonl", "metrics") as writer:
        with pytest.raises(ValueError):
            writer.write("pass", {"value": float("nan")})


def test_jsonl_errors_carry_line_numbers(tmp_path):
    """Test undecodable lines and missing headers."""
    path = tmp_path / "bad.jsonl"
    with JsonlWriter(path, "metrics") as writer:
        writer.write("pass", {"pass_index": 1})
    with open(path, "a", encoding="utf-8") as f:
        f.write("{not json\n")
    with pytest.raises(TraceFormatError) as excinfo:
        read_jsonl(path)
    assert excinfo.value.offset == 3

    path.write_text(json.dumps({"kind": "pass"}) + "\n")
    with pytest.raises(VersionMismatchError):
        read_jsonl(path)


def test_decision_payloads_rebuild_decisions():
    """Test that every logged decision rebuilds the original verdict."""
    batch = DecisionBatch(
        example_ids=np.array([4, 9]),
        pseudo_labels=np.array([1, 0]),
        confidences=np.array([0.97, 0.4]),
        conf_pass=np.array([True, False]),
        aum_pass=np.array([True, True]),
    )
    payloads = list(decision_payloads(3, "marginmatch", batch))
    assert payloads[0]["pass_index"] == 3 and payloads[0]["policy"] == "marginmatch"
    rebuilt = [decision_from_payload(p) for p in payloads]
    assert rebuilt == batch.to_decisions()
    assert rebuilt[1] == MaskDecision(
        example_id=9, pseudo_label=0, confidence=0.4, conf_pass=False, aum_pass=True, selected=False
    )
