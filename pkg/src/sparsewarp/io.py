"""File formats: NIfTI-1 volumes and fields, raw+sidecar, landmark CSV, checkpoints.

The NIfTI writer/reader is self-contained and little-endian only. Payload
layout follows the standard (x fastest), which coincides byte-for-byte with
this package's C-ordered (z,y,x) arrays when dims are declared as (nx,ny,nz).
Displacement fields ship as 4-D files with three components on the t axis and
the voxel-unit convention spelled out in the description field.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import CheckpointError, InvalidInputError
from .volume import DisplacementField, Volume3

_DTYPES = {np.dtype(np.uint8): (2, 8), np.dtype(np.int16): (4, 16), np.dtype(np.float32): (16, 32)}
_CODES = {code: dt for dt, (code, _) in _DTYPES.items()}
_MAGIC = b"n+1\x00"
_FIELD_DESCRIP = b"sparsewarp field: (dz,dy,dx) displacements in voxel units, t = component"
_VOLUME_DESCRIP = b"sparsewarp volume"

CHECKPOINT_MAGIC = b"SWCK"
CHECKPOINT_VERSION = 1


def _nifti_bytes(data: np.ndarray, spacing, origin, descrip: bytes) -> bytes:
    """Serialize a (D,H,W) or (3,D,H,W) array to single-file NIfTI-1 bytes."""
    dt = np.dtype(data.dtype)
    if dt not in _DTYPES:
        raise InvalidInputError(f"unsupported NIfTI dtype {dt}; use uint8, int16 or float32")
    code, bits = _DTYPES[dt]
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    if data.ndim == 3:
        dims = (3, data.shape[2], data.shape[1], data.shape[0], 1, 1, 1, 1)
    else:
        dims = (4, data.shape[3], data.shape[2], data.shape[1], data.shape[0], 1, 1, 1)
    struct.pack_into("<8h", hdr, 40, *dims)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, bits)
    sz, sy, sx = (float(s) for s in spacing)
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<80s", hdr, 148, descrip[:79])
    oz, oy, ox = (float(o) for o in origin)
    struct.pack_into("<h", hdr, 254, 1)  # sform_code: scaled voxel axes
    struct.pack_into("<4f", hdr, 280, sx, 0.0, 0.0, ox)
    struct.pack_into("<4f", hdr, 296, 0.0, sy, 0.0, oy)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, sz, oz)
    struct.pack_into("<4s", hdr, 344, _MAGIC)
    little = data if data.dtype.byteorder in ("<", "=", "|") else data.astype(dt.newbyteorder("<"))
    return bytes(hdr) + np.ascontiguousarray(little).tobytes()


def _parse_nifti(raw: bytes):
    if len(raw) < 352:
        raise InvalidInputError("file too short to be a NIfTI-1 volume")
    if struct.unpack_from("<4s", raw, 344)[0] != _MAGIC:
        raise InvalidInputError("magic number mismatch: not a single-file NIfTI-1 (.nii)")
    (size,) = struct.unpack_from("<i", raw, 0)
    if size != 348:
        raise InvalidInputError("unsupported byte order (big-endian NIfTI not handled)")
    dim = struct.unpack_from("<8h", raw, 40)
    (code,) = struct.unpack_from("<h", raw, 70)
    if code not in _CODES:
        raise InvalidInputError(f"unsupported NIfTI datatype code {code}; use uint8/int16/float32")
    dt = _CODES[code].newbyteorder("<")
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    (slope,) = struct.unpack_from("<f", raw, 112)
    (inter,) = struct.unpack_from("<f", raw, 116)
    (sform,) = struct.unpack_from("<h", raw, 254)
    origin = (0.0, 0.0, 0.0)
    if sform > 0:
        ox = struct.unpack_from("<4f", raw, 280)[3]
        oy = struct.unpack_from("<4f", raw, 296)[3]
        oz = struct.unpack_from("<4f", raw, 312)[3]
        origin = (oz, oy, ox)
    nd = dim[0]
    if nd == 3:
        shape = (dim[3], dim[2], dim[1])
    elif nd == 4 and dim[4] == 3:
        shape = (dim[4], dim[3], dim[2], dim[1])
    else:
        raise InvalidInputError(f"expected 3 dims (volume) or 4 dims with 3 components (field), got dim={dim[:5]}")
    count = int(np.prod(shape))
    data = np.frombuffer(raw, dtype=dt, count=count, offset=int(vox_offset)).reshape(shape)
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data.astype(np.float32) * (slope or 1.0) + inter
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    return data, spacing, origin


def write_volume(path: str, vol: Volume3, dtype=np.float32) -> None:
    """Single-channel volume to .nii (or .raw + sidecar by extension)."""
    if str(path).endswith(".raw"):
        _write_raw(path, vol, dtype)
        return
    arr = vol.scalar()
    if np.dtype(dtype) != np.float32:
        arr = arr.astype(dtype)
    with open(path, "wb") as f:
        f.write(_nifti_bytes(arr, vol.spacing, vol.origin, _VOLUME_DESCRIP))


def read_volume(path: str) -> Volume3:
    if str(path).endswith(".raw"):
        return _read_raw(path)
    with open(path, "rb") as f:
        data, spacing, origin = _parse_nifti(f.read())
    if data.ndim != 3:
        raise InvalidInputError(f"{path} holds a 4-D field; use read_field")
    return Volume3(data.astype(np.float32), spacing, origin)


def field_bytes(fld: DisplacementField) -> bytes:
    return _nifti_bytes(fld.vectors.astype(np.float32), fld.grid.spacing, fld.grid.origin, _FIELD_DESCRIP)


def write_field(path: str, fld: DisplacementField) -> None:
    with open(path, "wb") as f:
        f.write(field_bytes(fld))


def read_field(path: str) -> DisplacementField:
    with open(path, "rb") as f:
        data, spacing, origin = _parse_nifti(f.read())
    if data.ndim != 4:
        raise InvalidInputError(f"{path} holds a scalar volume; use read_volume")
    return DisplacementField(Volume3(data.astype(np.float32), spacing, origin))


def _write_raw(path: str, vol: Volume3, dtype=np.float32) -> None:
    arr = vol.scalar().astype(dtype)
    with open(path, "wb") as f:
        f.write(np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("<"), copy=False)).tobytes())
    d, h, w = vol.dims
    lines = [
        f"dims: {d} {h} {w}",
        "order: z y x",
        f"spacing: {vol.spacing[0]} {vol.spacing[1]} {vol.spacing[2]}",
        f"origin: {vol.origin[0]} {vol.origin[1]} {vol.origin[2]}",
        f"dtype: {np.dtype(dtype).name}",
    ]
    with open(path + ".meta", "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def _read_raw(path: str) -> Volume3:
    meta = {}
    with open(path + ".meta", "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            if ":" not in line:
                raise InvalidInputError(f"{path}.meta line {lineno}: expected 'key: value'")
            k, v = line.split(":", 1)
            meta[k.strip()] = v.strip()
    for key in ("dims", "spacing", "dtype"):
        if key not in meta:
            raise InvalidInputError(f"{path}.meta missing required key {key!r}")
    dims = tuple(int(t) for t in meta["dims"].split())
    spacing = tuple(float(t) for t in meta["spacing"].split())
    origin = tuple(float(t) for t in meta.get("origin", "0 0 0").split())
    try:
        dt = np.dtype(meta["dtype"]).newbyteorder("<")
    except TypeError:
        raise InvalidInputError(f"{path}.meta: unknown dtype {meta['dtype']!r}") from None
    data = np.fromfile(path, dtype=dt)
    if data.size != int(np.prod(dims)):
        raise InvalidInputError(f"{path}: payload holds {data.size} values, dims need {int(np.prod(dims))}")
    return Volume3(data.reshape(dims).astype(np.float32), spacing, origin)


def voxel_to_mm(pts, spacing, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """(z,y,x) voxel coords -> (x,y,z) world mm."""
    p = np.asarray(pts, np.float64).reshape(-1, 3)
    sp = np.asarray(spacing, np.float64)
    og = np.asarray(origin, np.float64)
    return (p * sp + og)[:, ::-1]


def mm_to_voxel(pts_mm, spacing, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """(x,y,z) world mm -> (z,y,x) voxel coords."""
    p = np.asarray(pts_mm, np.float64).reshape(-1, 3)[:, ::-1]
    sp = np.asarray(spacing, np.float64)
    og = np.asarray(origin, np.float64)
    return (p - og) / sp


def write_landmarks(path: str, pts_voxel, spacing, origin=(0.0, 0.0, 0.0)) -> None:
    """One landmark per line as world-mm x,y,z with a fixed header."""
    mm = voxel_to_mm(pts_voxel, spacing, origin)
    with open(path, "w", encoding="utf-8") as f:
        f.write("x,y,z\n")
        for row in mm:
            f.write(f"{row[0]:.6f},{row[1]:.6f},{row[2]:.6f}\n")


def read_landmarks(path: str, spacing, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """CSV world-mm landmarks -> (N,3) voxel coords; parse errors carry line numbers."""
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.strip() for ln in f]
    if not lines or lines[0].replace(" ", "") != "x,y,z":
        raise InvalidInputError(f"{path} line 1: expected header 'x,y,z'")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise InvalidInputError(f"{path} line {lineno}: expected 3 comma-separated values")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise InvalidInputError(f"{path} line {lineno}: non-numeric coordinate") from None
    return mm_to_voxel(np.asarray(rows, np.float64).reshape(-1, 3), spacing, origin)


def save_checkpoint(path: str, model, meta: dict | None = None) -> None:
    """Versioned manifest + float32 little-endian blob, hash-guarded."""
    params = [{"name": k, "shape": list(v.shape)} for k, v in model.store.items()]
    blob = model.store.flat().astype("<f4").tobytes()
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "seed": model.store.seed,
        "scales": model.scales,
        "plan": list(model.plan),
        "params": params,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "meta": meta or {},
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        f.write(blob)


def load_checkpoint(path: str):
    """Returns (KernelModel, manifest). Rejects bad magic, version, or hash."""
    from .kernel.model import KernelModel

    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (magic mismatch)")
    (mlen,) = struct.unpack_from("<I", raw, 4)
    try:
        manifest = json.loads(raw[8:8 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable manifest ({e})") from None
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version!r} (expected {CHECKPOINT_VERSION})")
    blob = raw[8 + mlen:]
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError(f"{path}: parameter blob corrupted (hash mismatch)")
    model = KernelModel.build(seed=int(manifest["seed"]), scales=int(manifest["scales"]),
                              plan=tuple(manifest["plan"]))
    recorded = [(p["name"], tuple(p["shape"])) for p in manifest["params"]]
    actual = [(k, v.shape) for k, v in model.store.items()]
    if recorded != actual:
        raise CheckpointError(f"{path}: manifest parameter layout does not match model configuration")
    model.store.load_flat(np.frombuffer(blob, dtype="<f4"))
    return model, manifest
