"""Versioned text snapshots: ordered ``(name, shape, values)`` records.

Layout::

    ZSTCI-SNAPSHOT 1
    kind=model normalize_output=1 ...
    @ layer0.weight 16,128
    0.1234 -0.5 ...

Values are written with ``repr`` so a round trip is bit-exact.
"""

from __future__ import annotations

import numpy as np

from . import numeric as nc
from .errors import FormatError

MAGIC = "ZSTCI-SNAPSHOT"
VERSION = 1


def _fmt_meta(meta):
    for k, v in meta.items():
        if any(ch.isspace() for ch in f"{k}{v}") or "=" in str(k):
            raise ValueError(f"metadata {k}={v!r} may not contain whitespace or '='")
    return " ".join(f"{k}={v}" for k, v in meta.items())


def _parse_meta(text, line):
    meta = {}
    for tok in text.split():
        if "=" not in tok:
            raise FormatError(f"malformed field {tok!r}", line)
        k, v = tok.split("=", 1)
        meta[k] = v
    return meta


def write_snapshot(path, kind, meta, records):
    """``records`` is an iterable of ``(name, array, attrs)``."""
    lines = [f"{MAGIC} {VERSION}", _fmt_meta({"kind": kind, **meta})]
    for name, arr, attrs in records:
        arr = np.asarray(arr, dtype=np.float64)
        shape = ",".join(str(d) for d in arr.shape)
        head = f"@ {name} {shape or '-'}"
        if attrs:
            head += " " + _fmt_meta(attrs)
        lines.append(head)
        lines.append(" ".join(repr(float(x)) for x in arr.ravel()))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_snapshot(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].startswith(MAGIC + " "):
        raise FormatError("missing snapshot magic string", 1)
    version = lines[0].split()[1]
    if version != str(VERSION):
        raise FormatError(f"unsupported snapshot version {version}", 1)
    if len(lines) < 2:
        raise FormatError("missing header", 2)
    meta = _parse_meta(lines[1], 2)
    kind = meta.pop("kind", None)
    records = []
    i = 2
    while i < len(lines):
        head = lines[i].split()
        if len(head) < 3 or head[0] != "@":
            raise FormatError("expected a record header", i + 1)
        name, shape_txt = head[1], head[2]
        shape = () if shape_txt == "-" else tuple(int(d) for d in shape_txt.split(","))
        attrs = _parse_meta(" ".join(head[3:]), i + 1)
        if i + 1 >= len(lines):
            raise FormatError("record without values", i + 1)
        vals = [float(v) for v in lines[i + 1].split()]
        if len(vals) != int(np.prod(shape)):
            raise FormatError(f"record {name!r} has {len(vals)} values for shape {shape}", i + 2)
        records.append((name, np.asarray(vals).reshape(shape), attrs))
        i += 2
    return kind, meta, records


def save_model(model, path):
    meta = {
        "arch": ",".join(map(str, model.arch)),
        "normalize_output": int(model.normalize_output),
        "activation": model.activation,
    }
    write_snapshot(path, "model", meta, [(k, v, {}) for k, v in model.params.items()])


def load_model(path, dtype=np.float64):
    from .embedding import EmbeddingModel

    kind, meta, records = read_snapshot(path)
    if kind != "model":
        raise FormatError(f"expected a model snapshot, found kind={kind}")
    params = nc.ParamSet({name: arr.astype(dtype) for name, arr, _ in records})
    arch = tuple(int(d) for d in meta["arch"].split(","))
    return EmbeddingModel(params, arch, meta["normalize_output"] == "1", meta["activation"])


def save_importance(importance, path):
    write_snapshot(
        path,
        "importance",
        {"estimator": importance.estimator},
        [(k, v, {}) for k, v in importance.weights.items()],
    )


def load_importance(path):
    from .regularizers import ImportanceMap

    kind, meta, records = read_snapshot(path)
    if kind != "importance":
        raise FormatError(f"expected an importance snapshot, found kind={kind}")
    return ImportanceMap(nc.ParamSet({n: a for n, a, _ in records}), meta["estimator"])


def save_memory(memory, path):
    snap = memory.snapshot()
    records = [(f"class{c}", snap[c][0], {"class": c, "task": snap[c][1]}) for c in memory.insertion_log if c in snap]
    write_snapshot(path, "memory", {}, records)


def load_memory(path):
    from .translation import PrototypeMemory

    kind, _, records = read_snapshot(path)
    if kind != "memory":
        raise FormatError(f"expected a memory snapshot, found kind={kind}")
    entries, log = {}, []
    for _, arr, attrs in records:
        c = int(attrs["class"])
        entries[c] = (arr, int(attrs["task"]))
        log.append(c)
    return PrototypeMemory(entries, log)
