"""Mesh and point-cloud files, the binary channel container, configs and provenance."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
import sys
import tempfile
import zlib
from pathlib import Path

import numpy as np

from . import __version__ as PACKAGE_VERSION
from . import geometry
from .sdf_diffusion import DiffusedGrid

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

FORMAT_VERSION = 2
MAGIC = b"LOOPFIT\x00"


class ParseError(ValueError):
    """Malformed input file; the message names the line or byte offset."""


class ContainerError(ValueError):
    pass


class ChecksumError(ContainerError):
    pass


class MigrationError(ContainerError):
    pass


class ConfigError(ValueError):
    pass


# -- atomic writes ----------------------------------------------------------------------

def atomic_write(path, data):
    """Write bytes or text to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc


# -- OBJ ------------------------------------------------------------------------------

def _parse_obj(path):
    verts, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    if len(parts) < 4:
                        raise ValueError("vertex needs three coordinates")
                    verts.append([float(x) for x in parts[1:4]])
                elif tag == "f":
                    idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                    if len(idx) < 3:
                        raise ValueError("face needs at least three vertices")
                    n = len(verts)
                    idx = [i - 1 if i > 0 else n + i for i in idx]
                    for i in idx:
                        if not 0 <= i < n:
                            raise ValueError(f"face index {i + 1} out of range (1..{n})")
                    faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from exc
    return (np.array(verts, dtype=np.float64).reshape(-1, 3),
            np.array(faces, dtype=np.int64).reshape(-1, 3))


def _write_obj(path, vertices, faces):
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(vertices, dtype=np.float64).tolist()]
    if faces is not None:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces).tolist()]
    atomic_write(path, "\n".join(lines) + "\n")


# -- PLY ------------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(raw, path):
    if not raw.startswith(b"ply"):
        raise ParseError(f"{path}: byte 0: missing 'ply' magic")
    end = raw.find(b"end_header")
    if end < 0:
        raise ParseError(f"{path}: no end_header")
    body_start = raw.index(b"\n", end) + 1
    fmt, elements = None, []
    for lineno, line in enumerate(raw[:end].decode("ascii", "replace").splitlines(), 1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise ParseError(f"{path}: line {lineno}: property before element")
            if parts[1] == "list":
                elements[-1]["props"].append((parts[4], ("list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise ParseError(f"{path}: line {lineno}: unknown type {parts[1]}")
                elements[-1]["props"].append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise ParseError(f"{path}: line {lineno}: unexpected header keyword {parts[0]!r}")
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise ParseError(f"{path}: unsupported PLY format {fmt!r}")
    return fmt, elements, body_start


def _parse_ply(path):
    raw = Path(path).read_bytes()
    fmt, elements, offset = _parse_ply_header(raw, path)
    data = {}
    if fmt == "ascii":
        lines = raw[offset:].decode("ascii").splitlines()
        header_lines = raw[:offset].count(b"\n")
        cursor = 0
        for el in elements:
            rows = []
            for _ in range(el["count"]):
                if cursor >= len(lines):
                    raise ParseError(f"{path}: line {header_lines + cursor + 1}: unexpected end of file")
                tokens = lines[cursor].split()
                try:
                    if any(isinstance(t, tuple) for _, t in el["props"]):
                        count = int(tokens[0])
                        rows.append([int(t) for t in tokens[1:1 + count]])
                    else:
                        rows.append([float(t) for t in tokens[:len(el["props"])]])
                except (ValueError, IndexError) as exc:
                    raise ParseError(f"{path}: line {header_lines + cursor + 1}: {exc}") from exc
                cursor += 1
            data[el["name"]] = rows
    else:
        order = "<" if fmt == "binary_little_endian" else ">"
        for el in elements:
            props = el["props"]
            if all(not isinstance(t, tuple) for _, t in props):
                dt = np.dtype([(name, order + t) for name, t in props])
                size = dt.itemsize * el["count"]
                if offset + size > len(raw):
                    raise ParseError(f"{path}: byte {len(raw)}: truncated {el['name']} block")
                arr = np.frombuffer(raw, dtype=dt, count=el["count"], offset=offset)
                offset += size
                data[el["name"]] = arr
            else:
                (_, (_, ct, it)), = props
                rows = []
                for _ in range(el["count"]):
                    cdt = np.dtype(order + ct)
                    if offset + cdt.itemsize > len(raw):
                        raise ParseError(f"{path}: byte {offset}: truncated face list")
                    n = int(np.frombuffer(raw, cdt, 1, offset)[0])
                    offset += cdt.itemsize
                    idt = np.dtype(order + it)
                    if offset + n * idt.itemsize > len(raw):
                        raise ParseError(f"{path}: byte {offset}: truncated face list")
                    rows.append(np.frombuffer(raw, idt, n, offset).astype(np.int64).tolist())
                    offset += n * idt.itemsize
                data[el["name"]] = rows
    vert = data.get("vertex")
    if vert is None:
        raise ParseError(f"{path}: no vertex element")
    if isinstance(vert, np.ndarray):
        if not {"x", "y", "z"} <= set(vert.dtype.names):
            raise ParseError(f"{path}: vertex element lacks x/y/z properties")
        vertices = np.stack([vert[c].astype(np.float64) for c in ("x", "y", "z")], axis=1)
        dtype = vert.dtype["x"].str[1:]
    else:
        names = [name for name, _ in next(el for el in elements if el["name"] == "vertex")["props"]]
        try:
            cols = [names.index(c) for c in ("x", "y", "z")]
        except ValueError as exc:
            raise ParseError(f"{path}: vertex element lacks x/y/z properties") from exc
        vertices = np.array(vert, dtype=np.float64).reshape(len(vert), -1)[:, cols] if vert else np.zeros((0, 3))
        dtype = "f8"
    faces = []
    for lineno, f in enumerate(data.get("face", [])):
        if len(f) < 3:
            raise ParseError(f"{path}: face {lineno}: fewer than three indices")
        for i in f:
            if not 0 <= i < len(vertices):
                raise ParseError(f"{path}: face {lineno}: index {i} out of range")
        faces.extend([f[0], f[k], f[k + 1]] for k in range(1, len(f) - 1))
    return vertices, np.array(faces, dtype=np.int64).reshape(-1, 3), dtype


def _write_ply(path, vertices, faces=None, dtype="f8"):
    v = np.asarray(vertices)
    ptype = {"f4": "float", "f8": "double"}[np.dtype(dtype).str[1:]]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(v)}",
              f"property {ptype} x", f"property {ptype} y", f"property {ptype} z"]
    if faces is not None:
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    body = [np.ascontiguousarray(v, dtype="<" + np.dtype(dtype).str[1:]).tobytes()]
    if faces is not None:
        f = np.asarray(faces, dtype=np.int64)
        rec = np.zeros(len(f), dtype=np.dtype([("n", "u1"), ("idx", "<i4", (3,))]))
        rec["n"] = 3
        rec["idx"] = f
        body.append(rec.tobytes())
    atomic_write(path, ("\n".join(header) + "\n").encode("ascii") + b"".join(body))


# -- public mesh API -----------------------------------------------------------------------

def load_mesh(path, check_manifold=True):
    """Vertices (float64) and triangle faces from OBJ or PLY.

    Polygons are fan-triangulated. Non-manifold meshes raise MeshError with
    the offending edges.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        v, f = _parse_obj(path)
    elif suffix == ".ply":
        v, f, _ = _parse_ply(path)
    else:
        raise ParseError(f"{path}: unsupported mesh extension {suffix!r}")
    if check_manifold and len(f):
        edges, counts = geometry.edge_face_counts(f)
        bad = edges[counts > 2].tolist()
        if bad:
            raise geometry.MeshError(f"{path}: {len(bad)} non-manifold edges (shared by more than two faces): "
                                     f"{bad[:10]}", bad)
    return v, f


def save_mesh(path, vertices, faces=None, dtype="f8"):
    """Write OBJ (text) or binary little-endian PLY; ``dtype`` applies to PLY."""
    path = Path(path)
    if path.suffix.lower() == ".obj":
        _write_obj(path, vertices, faces)
    elif path.suffix.lower() == ".ply":
        _write_ply(path, vertices, faces, dtype)
    else:
        raise ParseError(f"{path}: unsupported mesh extension")


def load_points(path):
    v, _ = load_mesh(path, check_manifold=False)
    return v


def save_points(path, points, dtype="f8"):
    save_mesh(path, points, None, dtype)


# -- channel container ------------------------------------------------------------------------

def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def pack_container(kind, channels, lo=(0.0,) * 3, hi=(0.0,) * 3, resolution=(0, 0, 0), metadata=None):
    """Serialize named arrays into the versioned little-endian container."""
    head = bytearray(MAGIC)
    head += struct.pack("<I", FORMAT_VERSION)
    head += _pack_str(kind)
    head += struct.pack("<6d", *np.asarray(lo, dtype=np.float64), *np.asarray(hi, dtype=np.float64))
    head += struct.pack("<3I", *(int(r) for r in resolution))
    head += struct.pack("<I", len(channels))
    blocks = []
    for name, arr in channels.items():
        arr = np.asarray(arr)
        code = {"f": "f", "i": "i", "u": "u"}.get(arr.dtype.kind)
        if code is None:
            raise ContainerError(f"channel {name}: unsupported dtype {arr.dtype}")
        dt = np.dtype(f"<{code}{arr.dtype.itemsize}")
        head += _pack_str(name)
        head += _pack_str(dt.str)
        head += struct.pack("<B", arr.ndim)
        head += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blocks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    head += struct.pack("<I", len(meta)) + meta
    payload = bytes(head) + b"".join(blocks)
    return payload + struct.pack("<I", zlib.crc32(payload))


class _Reader:
    def __init__(self, raw):
        self.raw, self.pos = raw, 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise ContainerError(f"truncated container at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self):
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def unpack_container(raw, expected_kind=None):
    """Inverse of pack_container; returns (kind, channels, lo, hi, resolution, metadata)."""
    raw = bytes(raw)
    if not raw.startswith(MAGIC):
        raise ContainerError("not a loopfit container (bad magic)")
    r = _Reader(raw)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise MigrationError(f"container format version {version} cannot be read by this build "
                             f"(expects {FORMAT_VERSION}); regenerate it with the current tools")
    if len(raw) < 4:
        raise ContainerError("truncated container")
    (stored,) = struct.unpack("<I", raw[-4:])
    kind = r.string()
    bounds = r.unpack("<6d")
    resolution = r.unpack("<3I")
    (count,) = r.unpack("<I")
    specs = []
    for _ in range(count):
        name = r.string()
        dt = np.dtype(r.string())
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        specs.append((name, dt, shape))
    (mlen,) = r.unpack("<I")
    metadata = json.loads(r.take(mlen).decode("utf-8"))
    channels = {}
    for name, dt, shape in specs:
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        channels[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos + 4 != len(raw):
        raise ContainerError(f"container length mismatch: {len(raw) - r.pos - 4} unexpected trailing bytes")
    if zlib.crc32(raw[:-4]) != stored:
        raise ChecksumError("container checksum mismatch")
    if expected_kind is not None and kind != expected_kind:
        raise ContainerError(f"expected a {expected_kind} container, found {kind}")
    return kind, channels, np.array(bounds[:3]), np.array(bounds[3:]), np.array(resolution), metadata


def save_grid(path, grid, provenance_info=None):
    meta = dict(grid.metadata)
    if provenance_info is not None:
        meta["provenance"] = provenance_info
    atomic_write(path, pack_container("grid", grid.channels, grid.lo, grid.hi, grid.resolution, meta))


def load_grid(path):
    _, channels, lo, hi, res, meta = unpack_container(Path(path).read_bytes(), "grid")
    return DiffusedGrid(lo, hi, res, channels, meta)


def save_regressor(path, params, provenance_info=None):
    meta = {"n_parts": params.n_parts, "radius": params.radius, "lo": params.lo, "hi": params.hi}
    if provenance_info is not None:
        meta["provenance"] = provenance_info
    channels = dict(params.weights)
    channels["feature_mean"] = params.feature_mean
    channels["feature_std"] = params.feature_std
    atomic_write(path, pack_container("regressor", channels, metadata=meta))


def load_regressor(path):
    from .regressor import RegressorParams

    _, ch, _, _, _, meta = unpack_container(Path(path).read_bytes(), "regressor")
    mean, std = ch.pop("feature_mean"), ch.pop("feature_std")
    return RegressorParams(ch, int(meta["n_parts"]), float(meta["radius"]), mean, std,
                           float(meta["lo"]), float(meta["hi"]))


# -- configs, logs, provenance ----------------------------------------------------------------

def load_config(path):
    """Parse a TOML config file into a dict."""
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def provenance(config, seed):
    """Header recorded in every output artifact; contains no timestamps."""
    return {"config_hash": config_hash(config), "seed": seed, "version": PACKAGE_VERSION}


def write_csv(path, rows, fieldnames=None):
    rows = list(rows)
    if fieldnames is None:
        fieldnames = []
        for row in rows:
            fieldnames += [k for k in row if k not in fieldnames]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(v) for k, v in row.items()})


def append_csv(path, row):
    """Append one row, writing a header when the file is new."""
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
        if new:
            w.writeheader()
        w.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
