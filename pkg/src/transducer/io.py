"""Binary containers for meta-datasets and checkpoints, IDX files, report writers.

Both containers share one framing::

    magic (4 bytes) | version u32 LE | header length u64 LE | JSON header | f64 LE body

The JSON header is written with sorted keys and compact separators, and
floats use their shortest round-trip repr, so write -> read -> write is
byte-identical.
"""
from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from importlib import resources
from pathlib import Path

import numpy as np

from .model import ModelConfig, Params, param_shapes
from .pde import MetaDataset, OperatorDataset
from .random_fields import AdrCoefficients, Grid1D
from .training import AdamState

DATASET_MAGIC = b"TDXD"
CHECKPOINT_MAGIC = b"TDXC"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


class ContainerError(ValueError):
    """Malformed file; ``position`` is the byte offset where the problem was found."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at byte {position})")
        self.position = position


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def _frame(magic: bytes, header: dict, body: np.ndarray) -> bytes:
    blob = _dump_json(header)
    return _PREFIX.pack(magic, FORMAT_VERSION, len(blob)) + blob + body.astype("<f8").tobytes()


def _unframe(raw: bytes, magic: bytes) -> tuple[dict, np.ndarray, int]:
    """Return (header, body, body offset)."""
    if len(raw) < _PREFIX.size:
        raise ContainerError(f"file too short for a header: {len(raw)} bytes, need {_PREFIX.size}", len(raw))
    found, version, hlen = _PREFIX.unpack_from(raw)
    if found != magic:
        raise ContainerError(f"bad magic: expected {magic!r}, found {found!r}", 0)
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported format version {version} (this reader handles {FORMAT_VERSION})", 4)
    start = _PREFIX.size
    if start + hlen > len(raw):
        raise ContainerError(f"header of {hlen} bytes runs past end of file ({len(raw)} bytes)", start)
    try:
        header = json.loads(raw[start:start + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"header is not valid JSON: {exc}", start) from exc
    off = start + hlen
    if (len(raw) - off) % 8:
        raise ContainerError(f"body length {len(raw) - off} is not a multiple of 8", off)
    return header, np.frombuffer(raw, dtype="<f8", offset=off).astype(np.float64), off


def _expect_len(body: np.ndarray, count: int, offset: int) -> None:
    if body.size != count:
        raise ContainerError(f"payload holds {body.size * 8} bytes, header implies {count * 8}",
                             offset + min(body.size, count) * 8)


# -- meta-datasets -----------------------------------------------------------

def encode_meta_dataset(meta: MetaDataset) -> bytes:
    first = meta.datasets[0]
    pairs = {len(ds) for ds in meta.datasets}
    if len(pairs) != 1:
        raise ValueError(f"datasets differ in size {sorted(pairs)}; the container needs a uniform count")
    codim = 1 if first.inputs.ndim == 2 else int(first.inputs.shape[2])
    entries = []
    for ds in meta.datasets:
        e = {"key": list(ds.key), "resampled": int(ds.resampled), "t": ds.t}
        if ds.coeffs is not None:
            c = ds.coeffs
            e["coeffs"] = {"delta": c.delta.tolist(), "nu": c.nu.tolist(),
                           "k_reaction": float(c.k_reaction), "length_scale": float(c.length_scale)}
        entries.append(e)
    header = {"format": "meta-dataset", "grid_n": first.grid.n, "codomain_dim": codim,
              "pairs": pairs.pop(), "count": len(meta), "split": meta.split,
              "config": meta.config, "datasets": entries}
    body = np.stack([np.stack([ds.inputs, ds.outputs], axis=1) for ds in meta.datasets])
    return _frame(DATASET_MAGIC, header, body.ravel())


def decode_meta_dataset(raw: bytes) -> MetaDataset:
    h, body, off = _unframe(raw, DATASET_MAGIC)
    try:
        n, codim, pairs, count = h["grid_n"], h["codomain_dim"], h["pairs"], h["count"]
    except KeyError as exc:
        raise ContainerError(f"header misses field {exc}", _PREFIX.size) from exc
    if len(h.get("datasets", [])) != count:
        raise ContainerError(f"header lists {len(h.get('datasets', []))} datasets but count is {count}",
                             _PREFIX.size)
    per = (pairs, 2, n) if codim == 1 else (pairs, 2, n, codim)
    _expect_len(body, count * int(np.prod(per)), off)
    arr = body.reshape((count,) + per)
    grid = Grid1D(n)
    out = []
    for i, e in enumerate(h["datasets"]):
        coeffs = None
        if "coeffs" in e:
            c = e["coeffs"]
            coeffs = AdrCoefficients(np.array(c["delta"]), np.array(c["nu"]), c["k_reaction"], c["length_scale"])
        out.append(OperatorDataset(grid, arr[i, :, 0].copy(), arr[i, :, 1].copy(), coeffs, e["t"],
                                   tuple(e["key"]), e["resampled"]))
    return MetaDataset(out, h["split"], h["config"])


def save_meta_dataset(path, meta: MetaDataset) -> None:
    atomic_write(path, encode_meta_dataset(meta))


def load_meta_dataset(path) -> MetaDataset:
    return decode_meta_dataset(Path(path).read_bytes())


# -- checkpoints -------------------------------------------------------------

def _base_name(name: str) -> str:
    """Strip the ``adam.m.`` / ``adam.v.`` prefix of optimizer-moment entries."""
    return name[7:] if name.startswith("adam.") else name


def encode_checkpoint(params: Params, config: ModelConfig, provenance: dict | None = None,
                      state: AdamState | None = None, codec: dict | None = None) -> bytes:
    shapes = param_shapes(config)
    if set(params) != set(shapes):
        missing, extra = sorted(set(shapes) - set(params)), sorted(set(params) - set(shapes))
        raise ValueError(f"parameters do not match config: missing {missing}, unexpected {extra}")
    names = list(shapes)
    arrays = [params[k] for k in names]
    if state is not None:
        names += [f"adam.m.{k}" for k in shapes] + [f"adam.v.{k}" for k in shapes]
        arrays += [state.m[k] for k in shapes] + [state.v[k] for k in shapes]
    table, off = [], 0
    for name, a in zip(names, arrays):
        if a.shape != shapes[_base_name(name)]:
            raise ValueError(f"{name}: shape {a.shape} does not match config")
        table.append({"name": name, "shape": list(a.shape), "offset": off})
        off += a.size * 8
    header = {"format": "checkpoint", "config": config.to_dict(), "params": table,
              "provenance": provenance or {}, "codec": codec,
              "adam_t": None if state is None else int(state.t)}
    return _frame(CHECKPOINT_MAGIC, header, np.concatenate([a.ravel() for a in arrays]))


def decode_checkpoint(raw: bytes) -> tuple[Params, ModelConfig, dict, AdamState | None]:
    """Returns ``(params, config, header, adam state or None)``."""
    h, body, off = _unframe(raw, CHECKPOINT_MAGIC)
    try:
        config = ModelConfig.from_dict(h["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ContainerError(f"invalid model config in header: {exc}", _PREFIX.size) from exc
    shapes = param_shapes(config)
    arrays: dict[str, np.ndarray] = {}
    cursor = 0
    for entry in h["params"]:
        name, shape, o = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name in arrays:
            raise ContainerError(f"parameter {name} listed twice", off + o)
        if o != cursor:
            raise ContainerError(f"parameter {name} at offset {o}, expected {cursor}", off + o)
        base = _base_name(name)
        if base not in shapes or shapes[base] != shape:
            raise ContainerError(f"parameter {name} with shape {shape} is not implied by the config", off + o)
        size = int(np.prod(shape)) * 8
        if (o + size) > body.size * 8:
            raise ContainerError(f"parameter {name} needs bytes up to {o + size}, payload has {body.size * 8}",
                                 off + body.size * 8)
        arrays[name] = body[o // 8:(o + size) // 8].reshape(shape).copy()
        cursor = o + size
    _expect_len(body, cursor // 8, off)
    missing = [k for k in shapes if k not in arrays]
    if missing:
        raise ContainerError(f"checkpoint misses parameters {missing}", off + cursor)
    params = {k: arrays[k] for k in shapes}
    state = None
    if h.get("adam_t") is not None:
        try:
            state = AdamState({k: arrays[f"adam.m.{k}"] for k in shapes},
                              {k: arrays[f"adam.v.{k}"] for k in shapes}, h["adam_t"])
        except KeyError as exc:
            raise ContainerError(f"optimizer state misses {exc}", off + cursor) from exc
    return params, config, h, state


def save_checkpoint(path, params: Params, config: ModelConfig, provenance: dict | None = None,
                    state: AdamState | None = None, codec: dict | None = None) -> None:
    atomic_write(path, encode_checkpoint(params, config, provenance, state, codec))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


def read_header(path) -> dict:
    """Header of either container, plus its magic and body size."""
    raw = Path(path).read_bytes()
    magic = raw[:4]
    if magic not in (DATASET_MAGIC, CHECKPOINT_MAGIC):
        raise ContainerError(f"bad magic: expected {DATASET_MAGIC!r} or {CHECKPOINT_MAGIC!r}, found {magic!r}", 0)
    h, body, off = _unframe(raw, magic)
    return {"magic": magic.decode(), "version": FORMAT_VERSION, "body_bytes": body.size * 8,
            "body_offset": off, "header": h}


# -- IDX ---------------------------------------------------------------------

def decode_idx(raw: bytes, expected_magic: int | None = None) -> np.ndarray:
    """Unsigned-byte IDX tensor (big-endian sizes)."""
    if len(raw) < 4:
        raise ContainerError(f"IDX file too short: {len(raw)} bytes", len(raw))
    magic = int.from_bytes(raw[:4], "big")
    if raw[0] or raw[1] or raw[2] != 0x08 or raw[3] == 0:
        raise ContainerError(f"bad IDX magic 0x{magic:08x}: expected 0x0000080N for unsigned bytes", 0)
    if expected_magic is not None and magic != expected_magic:
        raise ContainerError(f"bad IDX magic: expected 0x{expected_magic:08x}, found 0x{magic:08x}", 0)
    ndim = raw[3]
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise ContainerError(f"IDX header declares {ndim} dimensions but the file ends", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:end])
    need = int(np.prod(dims, dtype=np.int64))
    if len(raw) - end != need:
        raise ContainerError(f"IDX payload is {len(raw) - end} bytes, dimensions {dims} imply {need}",
                             end + min(need, len(raw) - end))
    return np.frombuffer(raw, dtype=np.uint8, offset=end).reshape(dims).copy()


def encode_idx(array: np.ndarray) -> bytes:
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise ValueError("IDX writer handles unsigned bytes only")
    if not 1 <= a.ndim <= 255:
        raise ValueError("IDX rank must be in [1, 255]")
    return bytes([0, 0, 0x08, a.ndim]) + struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes()


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    return decode_idx(Path(path).read_bytes(), expected_magic)


def write_idx(path, array: np.ndarray) -> None:
    atomic_write(path, encode_idx(array))


def read_idx_images(path) -> np.ndarray:
    """Images flattened to ``(count, rows * cols)``."""
    a = read_idx(path, IDX_IMAGES)
    return a.reshape(len(a), -1)


def read_idx_labels(path) -> np.ndarray:
    return read_idx(path, IDX_LABELS)


# -- reports -----------------------------------------------------------------

def schema(name: str) -> dict:
    return json.loads(resources.files("transducer").joinpath(f"schemas/{name}.schema.json").read_text())


def write_json(path, obj) -> None:
    atomic_write(path, (json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n").encode())


def write_csv(path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    atomic_write(path, buf.getvalue().encode())
