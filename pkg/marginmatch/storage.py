"""On-disk formats: binary logit traces and checkpoints, JSONL metrics and decision logs."""

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional

import numpy as np
import structlog

from .aum import AumBank
from .errors import CountMismatchError, TraceFormatError, VersionMismatchError
from .models import MaskDecision, TraceHeader, TraceRecord
from .network import ClassifierParams, OptimizerState

logger = structlog.get_logger(__name__)

FORMAT_VERSION = 1
TRACE_MAGIC = b"MMTR"
CHECKPOINT_MAGIC = b"MMCK"
JSONL_MAGIC = "MMJL"

_TRACE_COUNTS = struct.Struct("<IIIQ")  # C, examples, passes, records
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")


def trace_record_dtype(num_outputs: int) -> np.dtype:
    """Packed little-endian layout of one trace record."""
    return np.dtype(
        [
            ("example_id", "<i8"),
            ("pass_index", "<u4"),
            ("gold_label", "<i4"),
            ("logits", "<f8", (num_outputs,)),
        ]
    )


@dataclass
class TraceFile:
    """
    A logit trace in column form.

    ``gold_labels`` holds -1 where a record carries no gold label.
    """

    header: TraceHeader
    example_ids: np.ndarray
    pass_indices: np.ndarray
    gold_labels: np.ndarray
    logits: np.ndarray

    @classmethod
    def from_arrays(
        cls,
        example_ids,
        pass_indices,
        logits,
        num_classes: int,
        gold_labels=None,
        threshold_ids: Iterable[int] = (),
        config_hash: str = "",
    ) -> "TraceFile":
        """Build a trace and derive its header counts from the body."""
        ids = np.asarray(example_ids, dtype=np.int64)
        passes = np.asarray(pass_indices, dtype=np.int64)
        z = np.asarray(logits, dtype=np.float64).reshape(ids.size, num_classes + 1)
        gold = (
            np.full(ids.size, -1, dtype=np.int64)
            if gold_labels is None
            else np.asarray(gold_labels, dtype=np.int64)
        )
        header = TraceHeader(
            version=FORMAT_VERSION,
            num_classes=num_classes,
            example_count=int(np.unique(ids).size),
            pass_count=int(passes.max()) if passes.size else 0,
            record_count=int(ids.size),
            config_hash=config_hash,
            threshold_ids=tuple(int(i) for i in threshold_ids),
        )
        trace = cls(header, ids, passes, gold, z)
        trace.validate()
        return trace

    @classmethod
    def from_records(
        cls,
        records: Iterable[TraceRecord],
        num_classes: int,
        threshold_ids: Iterable[int] = (),
        config_hash: str = "",
    ) -> "TraceFile":
        records = list(records)
        return cls.from_arrays(
            [r.example_id for r in records],
            [r.pass_index for r in records],
            np.array([r.logits for r in records], dtype=np.float64).reshape(-1, num_classes + 1),
            num_classes,
            gold_labels=[-1 if r.gold_label is None else r.gold_label for r in records],
            threshold_ids=threshold_ids,
            config_hash=config_hash,
        )

    def records(self) -> Iterator[TraceRecord]:
        for i in range(self.example_ids.size):
            gold = int(self.gold_labels[i])
            yield TraceRecord(
                example_id=int(self.example_ids[i]),
                pass_index=int(self.pass_indices[i]),
                logits=tuple(float(v) for v in self.logits[i]),
                gold_label=None if gold < 0 else gold,
            )

    def validate(self) -> None:
        """
        Check the header against the body and the per-record invariants.

        Raises:
            CountMismatchError: If header counts disagree with the body
            TraceFormatError: On non-finite logits or non-increasing pass indices
        """
        h = self.header
        n = self.example_ids.size
        if h.record_count != n:
            raise CountMismatchError(f"header declares {h.record_count} records, body has {n}")
        examples = np.unique(self.example_ids).size
        if h.example_count != examples:
            raise CountMismatchError(
                f"header declares {h.example_count} examples, body has {examples}"
            )
        body_passes = int(self.pass_indices.max()) if n else 0
        if h.pass_count != body_passes:
            raise CountMismatchError(
                f"header declares {h.pass_count} passes, body has {body_passes}"
            )
        if self.logits.shape != (n, h.num_outputs):
            raise TraceFormatError(
                f"logits of shape {self.logits.shape}, expected ({n}, {h.num_outputs})"
            )
        if not np.all(np.isfinite(self.logits)):
            raise TraceFormatError("trace contains non-finite logits")
        if n and self.pass_indices.min() < 1:
            raise TraceFormatError("pass indices start at 1")
        last: dict[int, int] = {}
        for i, (e, p) in enumerate(zip(self.example_ids.tolist(), self.pass_indices.tolist())):
            if e in last and p <= last[e]:
                raise TraceFormatError(f"example {e}: pass {p} does not follow pass {last[e]}", i)
            last[e] = p


def write_trace(trace: TraceFile, path: str | Path) -> None:
    """Write a trace: magic, version byte, counts, config hash, threshold ids, records."""
    trace.validate()
    h = trace.header
    body = np.zeros(trace.example_ids.size, dtype=trace_record_dtype(h.num_outputs))
    body["example_id"] = trace.example_ids
    body["pass_index"] = trace.pass_indices
    body["gold_label"] = trace.gold_labels
    body["logits"] = trace.logits
    config_hash = h.config_hash.encode("utf-8")
    with open(path, "wb") as f:
        f.write(TRACE_MAGIC)
        f.write(bytes([FORMAT_VERSION]))
        f.write(_TRACE_COUNTS.pack(h.num_classes, h.example_count, h.pass_count, h.record_count))
        f.write(_U16.pack(len(config_hash)))
        f.write(config_hash)
        f.write(_U32.pack(len(h.threshold_ids)))
        f.write(np.asarray(h.threshold_ids, dtype="<i8").tobytes())
        f.write(body.tobytes())
    logger.debug("trace_written", path=str(path), records=h.record_count)


class _Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, raw: bytes):
        self.raw = raw
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.raw):
            raise TraceFormatError(f"truncated file while reading {what}", self.offset)
        chunk = self.raw[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: struct.Struct, what: str) -> tuple:
        return fmt.unpack(self.take(fmt.size, what))


def _check_magic(reader: _Reader, magic: bytes) -> None:
    found = reader.take(len(magic), "magic")
    if found != magic:
        raise VersionMismatchError(f"bad magic {found!r}, expected {magic!r}", 0)
    version = reader.take(1, "version")[0]
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported version {version}", len(magic))


def read_trace(path: str | Path) -> TraceFile:
    """
    Read a trace written by :func:`write_trace`.

    Raises:
        VersionMismatchError: On unknown magic or version
        TraceFormatError: On truncation (with the byte offset)
        CountMismatchError: If the header counts disagree with the body
    """
    reader = _Reader(Path(path).read_bytes())
    _check_magic(reader, TRACE_MAGIC)
    num_classes, example_count, pass_count, record_count = reader.unpack(_TRACE_COUNTS, "counts")
    (hash_len,) = reader.unpack(_U16, "config hash length")
    config_hash = reader.take(hash_len, "config hash").decode("utf-8")
    (n_threshold,) = reader.unpack(_U32, "threshold id count")
    threshold_ids = np.frombuffer(reader.take(8 * n_threshold, "threshold ids"), dtype="<i8")
    dtype = trace_record_dtype(num_classes + 1)
    body = reader.raw[reader.offset :]
    if len(body) % dtype.itemsize:
        whole = len(body) // dtype.itemsize
        raise TraceFormatError("truncated record", reader.offset + whole * dtype.itemsize)
    if len(body) // dtype.itemsize != record_count:
        raise CountMismatchError(
            f"header declares {record_count} records, body has {len(body) // dtype.itemsize}",
            reader.offset,
        )
    records = np.frombuffer(body, dtype=dtype)
    header = TraceHeader(
        version=FORMAT_VERSION,
        num_classes=num_classes,
        example_count=example_count,
        pass_count=pass_count,
        record_count=record_count,
        config_hash=config_hash,
        threshold_ids=tuple(int(i) for i in threshold_ids),
    )
    trace = TraceFile(
        header=header,
        example_ids=records["example_id"].astype(np.int64),
        pass_indices=records["pass_index"].astype(np.int64),
        gold_labels=records["gold_label"].astype(np.int64),
        logits=np.array(records["logits"], dtype=np.float64).reshape(record_count, num_classes + 1),
    )
    trace.validate()
    return trace


def write_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> None:
    """Write named arrays plus JSON metadata: magic, version, header length, header, raw data."""
    entries = []
    blobs = []
    for name, array in arrays.items():
        a = np.ascontiguousarray(array)
        dtype = a.dtype.newbyteorder("<")
        entries.append({"name": name, "dtype": dtype.str, "shape": list(a.shape)})
        blobs.append(a.astype(dtype, copy=False).tobytes())
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(bytes([FORMAT_VERSION]))
        f.write(_U32.pack(len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """
    Read a checkpoint written by :func:`write_checkpoint`.

    Raises:
        VersionMismatchError: On unknown magic or version
        TraceFormatError: On truncation or trailing bytes
    """
    reader = _Reader(Path(path).read_bytes())
    _check_magic(reader, CHECKPOINT_MAGIC)
    (header_len,) = reader.unpack(_U32, "header length")
    header = json.loads(reader.take(header_len, "header").decode("utf-8"))
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = reader.take(size, f"array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
    if reader.offset != len(reader.raw):
        raise TraceFormatError("trailing bytes after last array", reader.offset)
    return arrays, header["meta"]


@dataclass
class RunCheckpoint:
    params: ClassifierParams
    optimizer: OptimizerState
    unlabeled_bank: AumBank
    supervised_bank: AumBank
    meta: dict[str, Any]


def save_run_checkpoint(path: str | Path, checkpoint: RunCheckpoint) -> None:
    """Persist parameters, optimizer state and both AUM banks."""
    arrays: dict[str, np.ndarray] = {}
    for i, a in enumerate(checkpoint.params.arrays()):
        arrays[f"param.{i}"] = a
    for i, b in enumerate(checkpoint.optimizer.buffers):
        arrays[f"momentum.{i}"] = b
    banks = {"unlabeled": checkpoint.unlabeled_bank, "supervised": checkpoint.supervised_bank}
    for prefix, bank in banks.items():
        arrays[f"{prefix}.ids"] = bank.example_ids
        arrays[f"{prefix}.aum"] = bank.aum
        arrays[f"{prefix}.last_t"] = bank.last_t
        arrays[f"{prefix}.update_count"] = bank.update_count
    opt = checkpoint.optimizer
    meta = {
        **checkpoint.meta,
        "activation": checkpoint.params.activation,
        "parameter_count": len(checkpoint.params.arrays()),
        "optimizer": {
            "step": opt.step,
            "total_steps": opt.total_steps,
            "eta0": opt.eta0,
            "momentum": opt.momentum,
            "weight_decay": opt.weight_decay,
        },
    }
    write_checkpoint(path, arrays, meta)


def load_run_checkpoint(path: str | Path) -> RunCheckpoint:
    """Inverse of :func:`save_run_checkpoint`."""
    arrays, meta = read_checkpoint(path)
    count = meta["parameter_count"]
    params = ClassifierParams.from_arrays(
        [arrays[f"param.{i}"] for i in range(count)], meta["activation"]
    )
    opt_meta = meta["optimizer"]
    optimizer = OptimizerState(
        buffers=[arrays[f"momentum.{i}"] for i in range(count)],
        total_steps=opt_meta["total_steps"],
        eta0=opt_meta["eta0"],
        momentum=opt_meta["momentum"],
        weight_decay=opt_meta["weight_decay"],
        step=opt_meta["step"],
    )
    banks = {
        prefix: AumBank.from_arrays(
            arrays[f"{prefix}.ids"],
            arrays[f"{prefix}.aum"],
            arrays[f"{prefix}.last_t"],
            arrays[f"{prefix}.update_count"],
        )
        for prefix in ("unlabeled", "supervised")
    }
    reserved = ("activation", "parameter_count", "optimizer")
    extra = {k: v for k, v in meta.items() if k not in reserved}
    return RunCheckpoint(params, optimizer, banks["unlabeled"], banks["supervised"], extra)


class JsonlWriter:
    """
    Append-only JSONL stream.

    The first line is a header record carrying the magic, format version, stream name and
    provenance. Every line has a ``kind`` field.
    """

    def __init__(self, path: str | Path, stream: str, **provenance: Any):
        self.path = Path(path)
        self._file = open(self.path, "w", encoding="utf-8")
        header = {"magic": JSONL_MAGIC, "version": FORMAT_VERSION, "stream": stream}
        self.write("header", {**header, **provenance})

    def write(self, kind: str, payload: dict[str, Any]) -> None:
        line = json.dumps({"kind": kind, **payload}, separators=(",", ":"), allow_nan=False)
        self._file.write(line + "\n")

    def flush(self) -> None:
        self._file.flush()

    def close(self) -> None:
        if not self._file.closed:
            self._file.close()

    def __enter__(self) -> "JsonlWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_jsonl(path: str | Path, stream: Optional[str] = None) -> tuple[dict, list[dict]]:
    """
    Read a JSONL stream written by :class:`JsonlWriter`.

    Returns:
        The header record and the remaining records

    Raises:
        VersionMismatchError: If the header is missing, foreign or of another version
        TraceFormatError: On undecodable lines (offset = 1-based line number)
    """
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise TraceFormatError(f"{Path(path).name}: {e.msg}", lineno) from None
            if "kind" not in record:
                raise TraceFormatError(f"{Path(path).name}: record without kind", lineno)
            records.append(record)
    if not records or records[0]["kind"] != "header":
        raise VersionMismatchError(f"{Path(path).name}: missing header record", 1)
    header = records[0]
    if header.get("magic") != JSONL_MAGIC or header.get("version") != FORMAT_VERSION:
        found = f"{header.get('magic')!r} v{header.get('version')}"
        raise VersionMismatchError(f"{Path(path).name}: unsupported stream {found}", 1)
    if stream is not None and header.get("stream") != stream:
        raise VersionMismatchError(f"{Path(path).name}: expected a {stream} stream", 1)
    return header, records[1:]


def decision_payloads(pass_index: int, policy: str, decisions) -> Iterator[dict[str, Any]]:
    """Decision-log payloads for a DecisionBatch, one per example."""
    selected = decisions.selected
    for i in range(len(decisions)):
        yield {
            "pass_index": pass_index,
            "policy": policy,
            "example_id": int(decisions.example_ids[i]),
            "pseudo_label": int(decisions.pseudo_labels[i]),
            "confidence": float(decisions.confidences[i]),
            "conf_pass": bool(decisions.conf_pass[i]),
            "aum_pass": bool(decisions.aum_pass[i]),
            "selected": bool(selected[i]),
        }


def decision_from_payload(payload: dict[str, Any]) -> MaskDecision:
    """Rebuild a MaskDecision from a decision-log record."""
    return MaskDecision(**{k: payload[k] for k in MaskDecision.model_fields})
