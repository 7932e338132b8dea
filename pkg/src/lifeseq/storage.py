"""On-disk formats: catalog, behavior logs, impressions, cluster store, parameter files.

Text formats are line-delimited JSON whose first line is a header carrying the
format name, version and record count. Floats are written with ``repr``
precision so a store/load round trip is bit-exact. Parameter files are a
binary header (JSON) followed by raw little-endian float64 data. See
``docs/formats.md``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from .cluster_repr import VirtualItem
from .compressor import Cluster, CompressedHistory
from .core import BehaviorSequence, Catalog, EmbeddingTables, FieldSpec, Schema
from .datagen import Impressions

CATALOG = "lifeseq-catalog"
LOGS = "lifeseq-logs"
IMPRESSIONS = "lifeseq-impressions"
CLUSTERS = "lifeseq-clusters"
PARAMS = "lifeseq-params"
VERSION = 1
PARAM_MAGIC = b"LSEQPRM1"


class ParseError(ValueError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), sort_keys=True, allow_nan=False)


def _write_jsonl(path, header: dict, records) -> None:
    records = list(records)
    header = {**header, "version": VERSION, "records": len(records)}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_dumps(header) + "\n")
        for rec in records:
            fh.write(_dumps(rec) + "\n")


def _read_jsonl(path, fmt: str) -> tuple[dict, Iterator[tuple[int, Any]]]:
    data = Path(path).read_bytes()
    lines = []
    offset = 0
    for raw in data.split(b"\n"):
        lines.append((offset, raw))
        offset += len(raw) + 1
    if not data.endswith(b"\n"):
        # last line has no terminator: the writer never produces that
        last_off = lines[-1][0] if lines else 0
        raise ParseError(path, last_off, "truncated file (missing final newline)")
    lines = lines[:-1]
    if not lines:
        raise ParseError(path, 0, "empty file")
    header = _parse_line(path, *lines[0])
    if not isinstance(header, dict) or header.get("format") != fmt:
        raise ParseError(path, 0, f"not a {fmt} file")
    if header.get("version") != VERSION:
        raise ParseError(path, 0, f"unsupported version {header.get('version')!r}")
    body = lines[1:]
    if len(body) != header.get("records"):
        raise ParseError(path, offset - 1, f"expected {header.get('records')} records, found {len(body)}")

    def records():
        for off, raw in body:
            yield off, _parse_line(path, off, raw)

    return header, records()


def _parse_line(path, offset: int, raw: bytes):
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", 0) or 0
        raise ParseError(path, offset + pos, f"malformed record: {exc}") from None


def _field(rec, key, path, off):
    try:
        return rec[key]
    except (KeyError, TypeError):
        raise ParseError(path, off, f"record missing field {key!r}") from None


# ---------------------------------------------------------------------------- schema

def schema_to_json(schema: Schema) -> list[dict]:
    return [{"name": f.name, "kind": f.kind, "vocab_size": f.vocab_size, "dim": f.dim} for f in schema.fields]


def schema_from_json(obj) -> Schema:
    return Schema(tuple(FieldSpec(d["name"], d["kind"], int(d.get("vocab_size", 0)), int(d.get("dim", 0))) for d in obj))


def load_schema_text(path) -> Schema:
    """Line-oriented schema file: ``name kind [vocab_size dim]`` per line, ``#`` comments."""
    fields = []
    offset = 0
    for raw in Path(path).read_bytes().split(b"\n"):
        line = raw.decode("utf-8").split("#", 1)[0].strip()
        if line:
            parts = line.split()
            try:
                if parts[1] == "numerical":
                    fields.append(FieldSpec(parts[0], parts[1]))
                else:
                    fields.append(FieldSpec(parts[0], parts[1], int(parts[2]), int(parts[3])))
            except (IndexError, ValueError) as exc:
                raise ParseError(path, offset, f"bad schema line {line!r}: {exc}") from None
        offset += len(raw) + 1
    return Schema(tuple(fields))


# ---------------------------------------------------------------------------- catalog

def store_catalog(path, catalog: Catalog) -> None:
    recs = (
        {"cat": c.tolist(), "num": n.tolist()} for c, n in zip(catalog.categorical, catalog.numerical)
    )
    _write_jsonl(path, {"format": CATALOG, "schema": schema_to_json(catalog.schema)}, recs)


def load_catalog(path) -> Catalog:
    header, recs = _read_jsonl(path, CATALOG)
    schema = schema_from_json(header["schema"])
    cats, nums = [], []
    for off, rec in recs:
        cats.append(_field(rec, "cat", path, off))
        nums.append(_field(rec, "num", path, off))
    n1, n2 = len(schema.categorical), len(schema.numerical)
    return Catalog(
        schema,
        np.array(cats, dtype=np.int64).reshape(-1, n1),
        np.array(nums, dtype=np.float64).reshape(-1, n2),
    )


# ---------------------------------------------------------------------------- behavior logs

def store_logs(path, sequences: list[BehaviorSequence]) -> None:
    recs = (
        {
            "user_id": s.user_id,
            "item_ids": s.item_ids.tolist(),
            "p": s.completion_ratios.tolist(),
            "ts": s.timestamps.tolist(),
        }
        for s in sequences
    )
    _write_jsonl(path, {"format": LOGS}, recs)


def load_logs(path) -> list[BehaviorSequence]:
    _, recs = _read_jsonl(path, LOGS)
    out = []
    for off, rec in recs:
        try:
            out.append(
                BehaviorSequence(
                    _field(rec, "user_id", path, off),
                    _field(rec, "item_ids", path, off),
                    _field(rec, "p", path, off),
                    _field(rec, "ts", path, off),
                )
            )
        except (ValueError, TypeError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(path, off, str(exc)) from None
    return out


# ---------------------------------------------------------------------------- impressions

def store_impressions(path, imp: Impressions, cutoff: int | None = None) -> None:
    recs = (
        [int(u), int(i), int(t), int(y)]
        for u, i, t, y in zip(imp.user_ids, imp.item_ids, imp.timestamps, imp.labels)
    )
    _write_jsonl(path, {"format": IMPRESSIONS, "columns": ["user_id", "item_id", "timestamp", "label"], "cutoff": cutoff}, recs)


def load_impressions(path) -> tuple[Impressions, int | None]:
    header, recs = _read_jsonl(path, IMPRESSIONS)
    rows = []
    for off, rec in recs:
        if not (isinstance(rec, list) and len(rec) == 4):
            raise ParseError(path, off, "impression must be [user_id, item_id, timestamp, label]")
        rows.append(rec)
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return Impressions(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]), header.get("cutoff")


# ---------------------------------------------------------------------------- cluster store

def _cluster_json(c: Cluster, v: VirtualItem | None) -> dict:
    d = {
        "group": int(c.group_id),
        "n": c.size,
        "members": c.member_ids.tolist(),
        "positions": c.positions.tolist(),
        "centroid": c.centroid.tolist(),
    }
    if v is not None:
        d["virtual"] = {
            "cat": v.categorical.tolist(),
            "num": v.numerical.tolist(),
            "cross": v.cross.tolist(),
            "donor": int(v.source_item_id),
        }
    return d


def store_clusters(path, entries, config: dict | None = None) -> None:
    """``entries``: iterable of ``(CompressedHistory, list[VirtualItem] | None)``."""
    recs = []
    for hist, vitems in entries:
        vs = vitems if vitems is not None else [None] * len(hist)
        recs.append(
            {
                "user_id": hist.user_id,
                "T": hist.source_length,
                "clusters": [_cluster_json(c, v) for c, v in zip(hist.clusters, vs)],
            }
        )
    _write_jsonl(path, {"format": CLUSTERS, "config": config or {}}, recs)


def load_clusters(path) -> tuple[dict, list[tuple[CompressedHistory, list[VirtualItem] | None]]]:
    header, recs = _read_jsonl(path, CLUSTERS)
    out = []
    for off, rec in recs:
        try:
            clusters, vitems = [], []
            for c in rec["clusters"]:
                members = np.array(c["members"], dtype=np.int64)
                if members.shape[0] != c["n"]:
                    raise ParseError(path, off, f"cluster size {c['n']} != member count {members.shape[0]}")
                clusters.append(
                    Cluster(members, np.array(c["positions"], dtype=np.int64), np.array(c["centroid"], dtype=np.float64), int(c["group"]))
                )
                if "virtual" in c:
                    v = c["virtual"]
                    vitems.append(
                        VirtualItem(
                            np.array(v["cat"], dtype=np.int64),
                            np.array(v["num"], dtype=np.float64),
                            np.array(v["cross"], dtype=np.float64),
                            int(v["donor"]),
                            int(c["n"]),
                        )
                    )
            hist = CompressedHistory(int(rec["user_id"]), int(rec["T"]), clusters)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(path, off, f"bad cluster record: {exc!r}") from None
        out.append((hist, vitems if len(vitems) == len(clusters) else None))
    return header.get("config", {}), out


# ---------------------------------------------------------------------------- parameter files

def store_params(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Deterministic binary: magic, u64 header length, JSON header, float64 LE payload."""
    entries = []
    offset = 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype=np.float64)
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size * 8
    header = _dumps({"format": PARAMS, "version": VERSION, "arrays": entries, "meta": meta or {}}).encode()
    with open(path, "wb") as fh:
        fh.write(PARAM_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in sorted(arrays):
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_params(path, expected_shapes: dict[str, tuple] | None = None) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != PARAM_MAGIC:
        raise ParseError(path, 0, "bad magic; not a parameter file")
    if len(data) < 16:
        raise ParseError(path, 8, "truncated header length")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + hlen:
        raise ParseError(path, 16, "truncated header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(path, 16, f"malformed header: {exc}") from None
    if header.get("format") != PARAMS or header.get("version") != VERSION:
        raise ParseError(path, 16, "unsupported parameter file format/version")
    base = 16 + hlen
    arrays = {}
    end = base
    for e in header["arrays"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        lo = base + e["offset"]
        hi = lo + 8 * n
        if hi > len(data):
            raise ParseError(path, min(lo, len(data)), f"truncated data for {e['name']}")
        arrays[e["name"]] = np.frombuffer(data[lo:hi], dtype="<f8").astype(np.float64).reshape(shape)
        end = max(end, hi)
    if end != len(data):
        raise ParseError(path, end, f"{len(data) - end} trailing bytes after the last array")
    if expected_shapes is not None:
        for name, shape in expected_shapes.items():
            if name not in arrays:
                raise ValueError(f"{path}: missing parameter {name}")
            if arrays[name].shape != tuple(shape):
                raise ValueError(f"{path}: shape drift for {name}: file {arrays[name].shape}, expected {tuple(shape)}")
        extra = set(arrays) - set(expected_shapes)
        if extra:
            raise ValueError(f"{path}: unexpected parameters {sorted(extra)}")
    return arrays, header.get("meta", {})


def store_tables(path, tables: EmbeddingTables) -> None:
    store_params(path, tables.tables, {"kind": "embedding-tables"})


def load_tables(path) -> EmbeddingTables:
    arrays, _ = load_params(path)
    return EmbeddingTables(arrays)
