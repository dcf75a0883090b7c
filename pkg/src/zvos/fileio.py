"""Binary file formats.

Tensor dump: magic "TNSR", u32 rank, u32 per-dim sizes, float64 little-endian
row-major payload.

Checkpoint: magic "ZVOS1"/"ZVOS2"/"ZVOS3" (per stage), u32 version, u32 record
count, then per record a u32 name length, the UTF-8 name, and one tensor dump.

Images: binary PPM (P6, 8-bit) for frames, binary PGM (P5) for masks (8-bit,
0/255) and depth (16-bit, big-endian sample order per netpbm). Flow fields use
the Middlebury .flo layout: float32 magic 202021.25, u32 width, u32 height,
interleaved float32 little-endian (u, v) pairs, row-major.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError

TENSOR_MAGIC = b"TNSR"
FLO_MAGIC = 202021.25
CHECKPOINT_VERSION = 1
STAGE_MAGICS = {1: b"ZVOS1", 2: b"ZVOS2", 3: b"ZVOS3"}


# ---------------------------------------------------------------- tensor dump

def write_tensor_record(stream, array: np.ndarray) -> None:
    # np.ascontiguousarray would promote rank-0 arrays to rank 1; asarray
    # with an explicit order keeps the shape intact.
    arr = np.asarray(array, dtype=np.float64, order="C")
    stream.write(TENSOR_MAGIC)
    stream.write(struct.pack("<I", arr.ndim))
    stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    stream.write(arr.astype("<f8", copy=False).tobytes())


def read_tensor_record(stream, path=None) -> np.ndarray:
    magic = stream.read(4)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}", path)
    (rank,) = struct.unpack("<I", _read_exact(stream, 4, path))
    dims = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank, path)) if rank else ()
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    payload = _read_exact(stream, 8 * count, path)
    return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()


def _read_exact(stream, n: int, path=None) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}", path)
    return buf


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor_record(f, array)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor_record(f, path)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, stage: int, named_arrays: dict) -> None:
    if stage not in STAGE_MAGICS:
        raise FormatError(f"unknown checkpoint stage {stage}")
    with open(path, "wb") as f:
        f.write(STAGE_MAGICS[stage])
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(named_arrays)))
        for name, arr in named_arrays.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            write_tensor_record(f, arr)


def load_checkpoint(path, stage: int | None = None) -> tuple[int, dict]:
    """Read a checkpoint; verifies the stage magic when `stage` is given."""
    with open(path, "rb") as f:
        magic = f.read(5)
        found = next((s for s, m in STAGE_MAGICS.items() if m == magic), None)
        if found is None:
            raise FormatError(f"bad checkpoint magic {magic!r}", path)
        if stage is not None and found != stage:
            raise FormatError(f"expected a stage-{stage} checkpoint, found stage {found}", path)
        version, count = struct.unpack("<II", _read_exact(f, 8, path))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", path)
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(f, 4, path))
            name = _read_exact(f, name_len, path).decode("utf-8")
            arrays[name] = read_tensor_record(f, path)
    return found, arrays


# -------------------------------------------------------------- netpbm images

def _write_netpbm(path, kind: bytes, width: int, height: int, maxval: int, payload: bytes) -> None:
    with open(path, "wb") as f:
        f.write(kind + b"\n%d %d\n%d\n" % (width, height, maxval))
        f.write(payload)


def _read_netpbm_header(f, path) -> tuple[bytes, int, int, int]:
    def token():
        # skip whitespace and '#' comment lines
        t = b""
        while True:
            ch = f.read(1)
            if not ch:
                raise FormatError("truncated netpbm header", path)
            if ch == b"#":
                while ch not in (b"\n", b""):
                    ch = f.read(1)
                continue
            if ch.isspace():
                if t:
                    return t
                continue
            t += ch

    kind = token()
    if kind not in (b"P5", b"P6"):
        raise FormatError(f"unsupported netpbm kind {kind!r}", path)
    width, height, maxval = (int(token()) for _ in range(3))
    if maxval not in (255, 65535):
        raise FormatError(f"unsupported netpbm maxval {maxval}", path)
    return kind, width, height, maxval


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3, H, W) array of [0,1] reals as an 8-bit binary PPM."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise FormatError(f"write_ppm: expected (3, H, W), got {image.shape}")
    q = np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    _, h, w = q.shape
    _write_netpbm(path, b"P6", w, h, 255, q.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind, w, h, maxval = _read_netpbm_header(f, path)
        if kind != b"P6" or maxval != 255:
            raise FormatError("expected an 8-bit P6 image", path)
        raw = np.frombuffer(_read_exact(f, 3 * w * h, path), dtype=np.uint8)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_mask_pgm(path, mask: np.ndarray) -> None:
    """Write a binary (H, W) mask as an 8-bit PGM with values 0/255."""
    if mask.ndim != 2:
        raise FormatError(f"write_mask_pgm: expected (H, W), got {mask.shape}")
    q = np.where(mask > 0, 255, 0).astype(np.uint8)
    h, w = q.shape
    _write_netpbm(path, b"P5", w, h, 255, q.tobytes())


def read_mask_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind, w, h, maxval = _read_netpbm_header(f, path)
        if kind != b"P5" or maxval != 255:
            raise FormatError("expected an 8-bit P5 mask", path)
        raw = np.frombuffer(_read_exact(f, w * h, path), dtype=np.uint8)
    return (raw.reshape(h, w) >= 128).astype(np.uint8)


def write_depth_pgm(path, depth: np.ndarray) -> None:
    """Write an (H, W) array of [0,1] reals as a 16-bit PGM."""
    if depth.ndim != 2:
        raise FormatError(f"write_depth_pgm: expected (H, W), got {depth.shape}")
    q = np.rint(np.clip(depth, 0.0, 1.0) * 65535.0).astype(">u2")
    h, w = depth.shape
    _write_netpbm(path, b"P5", w, h, 65535, q.tobytes())


def read_depth_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind, w, h, maxval = _read_netpbm_header(f, path)
        if kind != b"P5" or maxval != 65535:
            raise FormatError("expected a 16-bit P5 depth map", path)
        raw = np.frombuffer(_read_exact(f, 2 * w * h, path), dtype=">u2")
    return raw.reshape(h, w).astype(np.float64) / 65535.0


# ----------------------------------------------------------------- .flo flow

def write_flo(path, flow: np.ndarray) -> None:
    """Write a (2, H, W) displacement field (u, v channels) as a .flo file."""
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise FormatError(f"write_flo: expected (2, H, W), got {flow.shape}")
    _, h, w = flow.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<fII", FLO_MAGIC, w, h))
        f.write(flow.transpose(1, 2, 0).astype("<f4").tobytes())


def read_flo(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, w, h = struct.unpack("<fII", _read_exact(f, 12, path))
        if abs(magic - FLO_MAGIC) > 1e-3:
            raise FormatError(f"bad .flo magic {magic}", path)
        raw = np.frombuffer(_read_exact(f, 8 * w * h, path), dtype="<f4")
    return np.ascontiguousarray(raw.reshape(h, w, 2).transpose(2, 0, 1))
