"""File formats: LWC grids, PFM/PNG images, rigs, checkpoints, manifests and wind CSV."""
from __future__ import annotations

import csv
import hashlib
import json
import os
import struct

import numpy as np

from .errors import CorruptFileError, FormatError
from .geometry import GridSpec, LwcGrid, Rig

GRID_MAGIC = b"LWCGRID1"
GRID_UNITS = "kg_m3"
GRID_DTYPE = "float32_le"
GRID_ORDER = "x_fastest"
CHECKPOINT_FORMAT = "skytomo-checkpoint-1"
WIND_COLUMNS = ("time_bucket_start", "height_m", "u_ms", "v_ms", "speed_ms", "bearing_deg", "n_tracks")


def _read(path):
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


def _write(path, data: bytes):
    try:
        d = os.path.dirname(os.path.abspath(path))
        os.makedirs(d, exist_ok=True)
        with open(path, "wb") as f:
            f.write(data)
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc


def file_sha256(path):
    return hashlib.sha256(_read(path)).hexdigest()


def input_manifest(paths):
    """``{basename-or-path: sha256}`` for every existing input file."""
    return {str(p): file_sha256(p) for p in paths if p is not None and os.path.isfile(p)}


# -- grids ---------------------------------------------------------------------------

def grid_bytes(grid: LwcGrid, metadata=None) -> bytes:
    spec = grid.spec
    header = {
        "dims": list(spec.dims), "voxel_size": list(spec.voxel_size), "origin": list(spec.origin),
        "units": GRID_UNITS, "dtype": GRID_DTYPE, "ordering": GRID_ORDER,
        "metadata": metadata or {},
    }
    h = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.asarray(grid.rho, dtype="<f4").tobytes(order="F")
    return GRID_MAGIC + struct.pack("<I", len(h)) + h + payload


def write_grid(path, grid: LwcGrid, metadata=None):
    _write(path, grid_bytes(grid, metadata))


def parse_grid(raw: bytes, name="<bytes>"):
    if raw[:8] != GRID_MAGIC:
        raise FormatError(f"{name}: not a grid file (bad magic)")
    if len(raw) < 12:
        raise CorruptFileError(f"{name}: truncated header")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise CorruptFileError(f"{name}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{name}: unreadable header ({exc})") from exc
    if header.get("dtype") != GRID_DTYPE:
        raise FormatError(f"{name}: unsupported dtype {header.get('dtype')!r}")
    if header.get("units") != GRID_UNITS:
        raise FormatError(f"{name}: unsupported units {header.get('units')!r}")
    if header.get("ordering") != GRID_ORDER:
        raise FormatError(f"{name}: unsupported ordering {header.get('ordering')!r}")
    dims = tuple(int(d) for d in header["dims"])
    expected = int(np.prod(dims)) * 4
    payload = raw[12 + hlen:]
    if len(payload) != expected:
        raise CorruptFileError(f"{name}: payload has {len(payload)} bytes, header implies {expected}")
    rho = np.frombuffer(payload, dtype="<f4").reshape(dims, order="F").astype(np.float32)
    spec = GridSpec(origin=tuple(header["origin"]), dims=dims, voxel_size=tuple(header["voxel_size"]))
    return LwcGrid(spec, rho), header


def read_grid(path) -> LwcGrid:
    return parse_grid(_read(path), str(path))[0]


def read_grid_header(path) -> dict:
    return parse_grid(_read(path), str(path))[1]


# -- images --------------------------------------------------------------------------

def write_pfm(path, image):
    """Little-endian colour PFM, rows stored bottom-up."""
    a = np.asarray(getattr(image, "data", image), dtype="<f4")
    if a.ndim != 3 or a.shape[2] != 3:
        raise FormatError(f"PFM needs an (H, W, 3) image, got {a.shape}")
    h, w = a.shape[:2]
    _write(path, f"PF\n{w} {h}\n-1.0\n".encode("ascii") + a[::-1].tobytes())


def read_pfm(path) -> np.ndarray:
    raw = _read(path)
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"PF", b"Pf"):
        raise FormatError(f"{path}: not a PFM file")
    ch = 3 if parts[0] == b"PF" else 1
    try:
        w, h = (int(x) for x in parts[1].split())
        scale = float(parts[2])
    except ValueError as exc:
        raise CorruptFileError(f"{path}: bad PFM header") from exc
    dtype = "<f4" if scale < 0 else ">f4"
    n = w * h * ch * 4
    if len(parts[3]) != n:
        raise CorruptFileError(f"{path}: PFM payload has {len(parts[3])} bytes, expected {n}")
    a = np.frombuffer(parts[3], dtype=dtype).reshape(h, w, ch)[::-1]
    return np.ascontiguousarray(a.astype(np.float32))


def write_png(path, image):
    """8-bit PNG of a display image in [0, 1]."""
    from PIL import Image

    a = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        Image.fromarray(np.round(a * 255).astype(np.uint8)).save(path)
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc


def read_png(path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


# -- json documents ------------------------------------------------------------------

def write_json(path, obj):
    _write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def read_json(path):
    try:
        return json.loads(_read(path).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def write_rig(path, rig: Rig):
    write_json(path, rig.to_dict())


def read_rig(path) -> Rig:
    d = read_json(path)
    try:
        return Rig.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid rig ({exc})") from exc


# -- checkpoints ---------------------------------------------------------------------

def write_checkpoint(path, state_dict, config=None, step=0, seed=0, extra=None):
    """``path`` (JSON metadata) plus ``path + '.bin'`` holding float32 LE tensor blobs."""
    tensors, offset, blobs = [], 0, []
    for name, t in state_dict.items():
        a = np.asarray(t.detach().cpu().numpy() if hasattr(t, "detach") else t)
        b = np.ascontiguousarray(a, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    meta = {"format": CHECKPOINT_FORMAT, "config": config or {}, "step": int(step),
            "seed": int(seed), "dtype": GRID_DTYPE, "blob": os.path.basename(path) + ".bin",
            "tensors": tensors, "extra": extra or {}}
    _write(path + ".bin", b"".join(blobs))
    write_json(path, meta)


def read_checkpoint(path):
    """Return ``(metadata, {name: float32 ndarray})``."""
    meta = read_json(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a checkpoint ({meta.get('format')!r})")
    if meta.get("dtype") != GRID_DTYPE:
        raise FormatError(f"{path}: unsupported dtype {meta.get('dtype')!r}")
    raw = _read(os.path.join(os.path.dirname(os.path.abspath(path)), meta["blob"]))
    total = sum(t["nbytes"] for t in meta["tensors"])
    if len(raw) != total:
        raise CorruptFileError(f"{path}: blob has {len(raw)} bytes, metadata implies {total}")
    out = {}
    for t in meta["tensors"]:
        n = int(np.prod(t["shape"])) * 4
        if n != t["nbytes"]:
            raise CorruptFileError(f"{path}: tensor {t['name']} size mismatch")
        out[t["name"]] = np.frombuffer(raw[t["offset"]:t["offset"] + n], dtype="<f4").reshape(t["shape"]).copy()
    return meta, out


def load_state(module, arrays):
    import torch

    sd = module.state_dict()
    missing = set(sd) - set(arrays)
    if missing:
        raise FormatError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    module.load_state_dict({k: torch.as_tensor(arrays[k]).to(sd[k].dtype) for k in sd})
    return module


# -- wind ----------------------------------------------------------------------------

def _fmt(x):
    return "" if x is None or (isinstance(x, float) and not np.isfinite(x)) else repr(float(x))


def write_wind_csv(path, profile):
    try:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(WIND_COLUMNS)
            for t, h, e in profile.rows():
                if e.empty:
                    w.writerow((repr(float(t)), repr(float(h)), "", "", "", "", 0))
                else:
                    w.writerow((repr(float(t)), repr(float(h)), _fmt(e.u), _fmt(e.v), _fmt(e.speed),
                                _fmt(e.bearing), e.n_tracks))
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc


def read_wind_csv(path):
    from .wind import WindEntry, WindProfile

    try:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    buckets = {}
    for r in rows:
        n = int(r["n_tracks"])
        e = WindEntry(float(r["u_ms"]), float(r["v_ms"]), n) if n else WindEntry()
        buckets[(float(r["time_bucket_start"]), float(r["height_m"]))] = e
    return WindProfile(buckets)
