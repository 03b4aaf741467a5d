"""File formats: binary PGM (P5) images and masks, PPM (P6) color output,
the DFF1 deformation-field container, and landmark CSV files."""

from __future__ import annotations

import csv
import struct

import numpy as np

from .errors import DataFormatError
from .metrics import LandmarkSet, SegMask
from .warp import DeformationField, Image2D

FIELD_MAGIC = b"DFF1"


# ---------------------------------------------------------------------------
# PGM / PPM
# ---------------------------------------------------------------------------


def _read_pgm_raw(data, path):
    """Parse a binary P5 file into (array of raw samples, maxval)."""

    pos = 0

    def fail(msg, at=None):
        raise DataFormatError(f"{path}: {msg} at byte {pos if at is None else at}")

    def next_token():
        nonlocal pos
        while pos < len(data):
            ch = data[pos : pos + 1]
            if ch == b"#":
                nl = data.find(b"\n", pos)
                if nl < 0:
                    fail("unterminated comment")
                pos = nl + 1
            elif ch.isspace():
                pos += 1
            else:
                break
        if pos >= len(data):
            fail("unexpected end of header")
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        return data[start:pos], start

    magic, at = next_token()
    if magic != b"P5":
        fail(f"unsupported magic {magic!r} (only binary P5 is supported)", at)
    fields = []
    for what in ("width", "height", "maxval"):
        token, at = next_token()
        try:
            value = int(token)
        except ValueError:
            fail(f"non-numeric {what} {token!r}", at)
        if value <= 0:
            fail(f"non-positive {what} {value}", at)
        fields.append(value)
    width, height, maxval = fields
    if maxval > 65535:
        fail(f"maxval {maxval} exceeds 65535")
    # exactly one whitespace byte separates header and payload
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        fail("missing whitespace before payload")
    pos += 1
    bytes_per = 2 if maxval > 255 else 1
    expected = width * height * bytes_per
    payload = data[pos : pos + expected]
    if len(payload) != expected:
        raise DataFormatError(
            f"{path}: truncated payload at byte {pos + len(payload)}: "
            f"expected {expected} bytes, got {len(payload)}"
        )
    if pos + expected != len(data):
        raise DataFormatError(f"{path}: trailing bytes at byte {pos + expected}")
    dtype = ">u2" if bytes_per == 2 else "u1"  # 16-bit samples are big-endian
    arr = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return arr, maxval


def read_image(path):
    """Read a binary PGM (P5) file; intensities map to [0,1] via maxval."""
    with open(path, "rb") as f:
        data = f.read()
    arr, maxval = _read_pgm_raw(data, str(path))
    return Image2D(arr.astype(np.float32) / maxval)


def write_image(path, image, bit_depth=16):
    """Write an Image2D as binary P5; 16-bit by default for exact round-trips."""
    if bit_depth not in (8, 16):
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    arr = image.pixels if isinstance(image, Image2D) else np.asarray(image, dtype=np.float32)
    maxval = 65535 if bit_depth == 16 else 255
    quant = np.clip(np.rint(arr.astype(np.float64) * maxval), 0, maxval)
    quant = quant.astype(">u2" if bit_depth == 16 else "u1")
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(quant.tobytes())


def read_mask(path):
    """Read a P5 mask, thresholding samples above maxval/2 to 1."""
    with open(path, "rb") as f:
        data = f.read()
    arr, maxval = _read_pgm_raw(data, str(path))
    return SegMask((arr > maxval / 2).astype(np.uint8))


def write_mask(path, mask):
    values = mask.values if isinstance(mask, SegMask) else SegMask(mask).values
    write_image(path, values.astype(np.float32), bit_depth=8)


def write_ppm(path, rgb, comment=None):
    """Write an [H,W,3] uint8 array as binary P6."""
    arr = np.asarray(rgb, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataFormatError(f"write_ppm expects [H,W,3], got shape {tuple(arr.shape)}")
    header = b"P6\n"
    if comment:
        for line in comment.splitlines():
            header += f"# {line}\n".encode("ascii")
    header += f"{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes())


# ---------------------------------------------------------------------------
# deformation fields
# ---------------------------------------------------------------------------


def write_field(path, field):
    """DFF1 container: magic, u32 LE width and height, float32 LE (dx,dy)
    row-major."""
    fd = field.disp if isinstance(field, DeformationField) else np.asarray(field, dtype=np.float32)
    h, w = fd.shape[:2]
    with open(path, "wb") as f:
        f.write(FIELD_MAGIC)
        f.write(struct.pack("<II", w, h))
        f.write(np.ascontiguousarray(fd, dtype="<f4").tobytes())


def read_field(path):
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12:
        raise DataFormatError(f"{path}: file too short ({len(data)} bytes) for a DFF1 header")
    if data[:4] != FIELD_MAGIC:
        raise DataFormatError(f"{path}: bad magic {data[:4]!r} at byte 0, expected {FIELD_MAGIC!r}")
    w, h = struct.unpack("<II", data[4:12])
    expected = h * w * 2 * 4
    if len(data) - 12 != expected:
        raise DataFormatError(
            f"{path}: payload is {len(data) - 12} bytes at byte 12 but header "
            f"{w}x{h} requires {expected}"
        )
    arr = np.frombuffer(data[12:], dtype="<f4").reshape(h, w, 2).copy()
    return DeformationField(arr)


# ---------------------------------------------------------------------------
# landmarks
# ---------------------------------------------------------------------------


def read_landmarks(path, image_hw=None):
    """CSV with a header and rows 'index,x,y'. Duplicate indices and, when
    ``image_hw`` is given, out-of-bounds points are rejected with their
    line numbers."""
    indices, points = [], []
    seen = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [c.strip().lower() for c in header[:3]] != ["index", "x", "y"]:
            raise DataFormatError(f"{path}: line 1: expected header 'index,x,y', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 3:
                raise DataFormatError(f"{path}: line {lineno}: expected 'index,x,y', got {row}")
            try:
                idx = int(row[0])
                x, y = float(row[1]), float(row[2])
            except ValueError:
                raise DataFormatError(f"{path}: line {lineno}: non-numeric landmark {row}")
            if idx in seen:
                raise DataFormatError(
                    f"{path}: line {lineno}: duplicate index {idx} (first on line {seen[idx]})"
                )
            seen[idx] = lineno
            if image_hw is not None:
                h, w = image_hw
                if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
                    raise DataFormatError(
                        f"{path}: line {lineno}: landmark ({x}, {y}) outside image {h}x{w}"
                    )
            indices.append(idx)
            points.append((x, y))
    if not points:
        raise DataFormatError(f"{path}: no landmarks found")
    return LandmarkSet(points, indices)


def write_landmarks(path, landmarks):
    lms = landmarks if isinstance(landmarks, LandmarkSet) else LandmarkSet(landmarks)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "x", "y"])
        for idx, (x, y) in zip(lms.indices, lms.points):
            writer.writerow([int(idx), f"{x:.6g}", f"{y:.6g}"])


# ---------------------------------------------------------------------------
# field visualization
# ---------------------------------------------------------------------------


def field_to_color(field, percentile=98.0):
    """Color-code a field: hue is the displacement angle, saturation the
    magnitude normalized to the given percentile, full value."""
    fd = field.disp if isinstance(field, DeformationField) else np.asarray(field)
    dx, dy = fd[..., 0].astype(np.float64), fd[..., 1].astype(np.float64)
    mag = np.hypot(dx, dy)
    scale = np.percentile(mag, percentile)
    sat = np.clip(mag / max(scale, 1e-12), 0.0, 1.0)
    hue = (np.arctan2(dy, dx) / (2.0 * np.pi)) % 1.0
    # HSV -> RGB with V = 1
    h6 = hue * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = 1.0 - sat
    q = 1.0 - sat * f
    t = 1.0 - sat * (1.0 - f)
    ones = np.ones_like(sat)
    channels = [
        (ones, t, p), (q, ones, p), (p, ones, t),
        (p, q, ones), (t, p, ones), (ones, p, q),
    ]
    rgb = np.zeros(fd.shape[:2] + (3,), dtype=np.float64)
    for sector, (r, g, b) in enumerate(channels):
        m = i == sector
        rgb[m, 0] = r[m]
        rgb[m, 1] = g[m]
        rgb[m, 2] = b[m]
    return np.clip(np.rint(rgb * 255), 0, 255).astype(np.uint8)
