"""HDR image codecs and equirectangular geometry.

Radiance maps are plain ``float32`` arrays of shape ``(H, W, 3)`` holding
linear RGB. Direction convention (used by every module in the package)::

    v = (row + 0.5) / H,  u = (col + 0.5) / W
    theta = pi * v             # polar angle from +Y (up)
    phi = 2 * pi * (u - 0.5)   # azimuth, 0 at the map center
    d = (sin(theta) sin(phi), cos(theta), -sin(theta) cos(phi))

so the center pixel looks down ``-Z``.
"""

from __future__ import annotations

import io
import re
from pathlib import Path

import numpy as np

MIN_RLE_WIDTH = 8
MAX_RLE_WIDTH = 0x7FFF


class HdrFormatError(ValueError):
    """Malformed HDR/PFM byte stream. ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def check_radiance_map(env: np.ndarray) -> np.ndarray:
    env = np.asarray(env)
    if env.ndim != 3 or env.shape[2] != 3 or env.shape[0] < 1 or env.shape[1] < 1:
        raise ValueError(f"radiance map must have shape (H, W, 3), got {env.shape}")
    if not np.all(np.isfinite(env)):
        raise ValueError("radiance map contains non-finite values")
    if np.any(env < 0):
        raise ValueError("radiance map contains negative values")
    return env


# --------------------------------------------------------------------------
# Radiance RGBE
# --------------------------------------------------------------------------

def rgbe_to_float(quads: np.ndarray) -> np.ndarray:
    """Decode ``uint8[..., 4]`` RGBE quads to float32 RGB."""
    quads = np.asarray(quads, dtype=np.uint8)
    mant = quads[..., :3].astype(np.float64)
    e = quads[..., 3:].astype(np.int64)
    scale = np.ldexp(1.0, e - (128 + 8))
    rgb = np.where(e > 0, (mant + 0.5) * scale, 0.0)
    return rgb.astype(np.float32)


def float_to_rgbe(rgb: np.ndarray) -> np.ndarray:
    """Encode float RGB to ``uint8[..., 4]`` RGBE quads."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if not np.all(np.isfinite(rgb)):
        raise ValueError("cannot RGBE-encode non-finite values")
    rgb = np.maximum(rgb, 0.0)
    m = rgb.max(axis=-1)
    _, k = np.frexp(m)
    if np.any((m >= 1e-38) & (k + 128 > 255)):
        raise ValueError("value too large for RGBE exponent")
    quads = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    live = (m >= 1e-38) & (k + 128 >= 1)
    kk = k[live][:, None]
    mant = np.floor(rgb[live] * 256.0 / np.ldexp(1.0, kk))
    quads[live, :3] = np.clip(mant, 0, 255).astype(np.uint8)
    quads[live, 3] = (k[live] + 128).astype(np.uint8)
    return quads


_RES_RE = re.compile(rb"^-Y (\d+) \+X (\d+)$")


def _parse_header(data: bytes) -> tuple[int, int, int]:
    """Return (height, width, offset of first scanline byte)."""
    pos = 0

    def line() -> tuple[bytes, int]:
        nonlocal pos
        start = pos
        end = data.find(b"\n", pos)
        if end < 0:
            raise HdrFormatError("unterminated header line", start)
        pos = end + 1
        return data[start:end], start

    magic, off = line()
    if not (magic.startswith(b"#?RADIANCE") or magic.startswith(b"#?RGBE")):
        raise HdrFormatError("missing #?RADIANCE / #?RGBE signature", off)
    fmt_seen = False
    while True:
        text, off = line()
        if text == b"":
            break
        if text.startswith(b"FORMAT="):
            if text != b"FORMAT=32-bit_rle_rgbe":
                raise HdrFormatError(f"unsupported format {text.decode(errors='replace')!r}", off)
            fmt_seen = True
    if not fmt_seen:
        raise HdrFormatError("header lacks FORMAT=32-bit_rle_rgbe", off)
    res, off = line()
    m = _RES_RE.match(res)
    if m is None:
        if re.match(rb"^[+-][XY] \d+ [+-][XY] \d+$", res):
            raise HdrFormatError(f"unsupported orientation {res.decode()!r}", off)
        raise HdrFormatError("malformed resolution line", off)
    h, w = int(m.group(1)), int(m.group(2))
    if h < 1 or w < 1:
        raise HdrFormatError("empty image", off)
    return h, w, pos


def _read_rle_scanline(data: bytes, pos: int, w: int, out: np.ndarray) -> int:
    for c in range(4):
        i = 0
        while i < w:
            if pos >= len(data):
                raise HdrFormatError("truncated scanline", pos)
            code = data[pos]
            pos += 1
            if code > 128:
                count = code - 128
                if i + count > w:
                    raise HdrFormatError("RLE run overflows scanline", pos - 1)
                if pos >= len(data):
                    raise HdrFormatError("truncated scanline", pos)
                out[i:i + count, c] = data[pos]
                pos += 1
            else:
                count = code
                if count == 0 or i + count > w:
                    raise HdrFormatError("RLE literal overflows scanline", pos - 1)
                if pos + count > len(data):
                    raise HdrFormatError("truncated scanline", len(data))
                out[i:i + count, c] = np.frombuffer(data, np.uint8, count, pos)
                pos += count
            i += count
    return pos


def decode_rgbe(data: bytes) -> np.ndarray:
    """Parse a Radiance ``.hdr`` byte stream into an ``(H, W, 3)`` float32 map."""
    h, w, pos = _parse_header(data)
    quads = np.empty((h, w, 4), dtype=np.uint8)
    for y in range(h):
        is_rle = (
            MIN_RLE_WIDTH <= w <= MAX_RLE_WIDTH
            and pos + 4 <= len(data)
            and data[pos] == 2 and data[pos + 1] == 2 and not data[pos + 2] & 0x80
        )
        if is_rle:
            sw = (data[pos + 2] << 8) | data[pos + 3]
            if sw != w:
                raise HdrFormatError(f"scanline width {sw} != image width {w}", pos)
            pos = _read_rle_scanline(data, pos + 4, w, quads[y])
        else:
            n = 4 * w
            if pos + n > len(data):
                raise HdrFormatError("truncated scanline", len(data))
            quads[y] = np.frombuffer(data, np.uint8, n, pos).reshape(w, 4)
            pos += n
    return rgbe_to_float(quads)


def _rle_encode_channel(values: np.ndarray) -> bytes:
    out = bytearray()
    n = len(values)
    i = 0
    while i < n:
        # find next run of >= 4 identical bytes
        run_start = i
        run_len = 0
        while run_start < n:
            run_len = 1
            while (run_start + run_len < n and run_len < 127
                   and values[run_start + run_len] == values[run_start]):
                run_len += 1
            if run_len >= 4:
                break
            run_start += run_len
        # literal span before the run
        while i < run_start:
            count = min(128, run_start - i)
            out.append(count)
            out.extend(values[i:i + count].tobytes())
            i += count
        if run_start < n and run_len >= 4:
            out.append(128 + run_len)
            out.append(int(values[run_start]))
            i = run_start + run_len
    return bytes(out)


def encode_rgbe(env: np.ndarray, rle: bool = True) -> bytes:
    """Serialize an ``(H, W, 3)`` map as a Radiance ``.hdr`` stream.

    New-style RLE is used whenever the width allows it and ``rle`` is set,
    flat quads otherwise.
    """
    env = np.asarray(env)
    if env.ndim != 3 or env.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3), got {env.shape}")
    quads = float_to_rgbe(env)
    h, w = env.shape[:2]
    buf = io.BytesIO()
    buf.write(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n")
    buf.write(f"-Y {h} +X {w}\n".encode())
    use_rle = rle and MIN_RLE_WIDTH <= w <= MAX_RLE_WIDTH
    for y in range(h):
        if use_rle:
            buf.write(bytes([2, 2, w >> 8, w & 0xFF]))
            for c in range(4):
                buf.write(_rle_encode_channel(quads[y, :, c]))
        else:
            buf.write(quads[y].tobytes())
    return buf.getvalue()


# --------------------------------------------------------------------------
# PFM
# --------------------------------------------------------------------------

def encode_pfm(image: np.ndarray, little_endian: bool = True) -> bytes:
    """Serialize an ``(H, W, 3)`` float image as color PFM (rows bottom-to-top)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3), got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("cannot PFM-encode non-finite values")
    h, w = image.shape[:2]
    dtype = "<f4" if little_endian else ">f4"
    scale = -1.0 if little_endian else 1.0
    header = f"PF\n{w} {h}\n{scale}\n".encode()
    return header + np.ascontiguousarray(image[::-1], dtype=dtype).tobytes()


def decode_pfm(data: bytes) -> np.ndarray:
    pos = 0
    fields = []
    # three whitespace-terminated header tokens groups: magic, "w h", scale
    for _ in range(3):
        end = data.find(b"\n", pos)
        if end < 0:
            raise HdrFormatError("truncated PFM header", pos)
        fields.append((data[pos:end].strip(), pos))
        pos = end + 1
    (magic, _), (dims, dims_off), (scale_s, scale_off) = fields
    if magic == b"Pf":
        raise HdrFormatError("grayscale PFM is not supported", 0)
    if magic != b"PF":
        raise HdrFormatError("bad PFM magic", 0)
    try:
        w, h = (int(x) for x in dims.split())
    except ValueError:
        raise HdrFormatError("malformed PFM dimensions", dims_off) from None
    try:
        scale = float(scale_s)
    except ValueError:
        raise HdrFormatError("malformed PFM scale", scale_off) from None
    if w < 1 or h < 1 or scale == 0:
        raise HdrFormatError("invalid PFM dimensions or scale", dims_off)
    n = w * h * 3 * 4
    if len(data) - pos != n:
        raise HdrFormatError(f"payload is {len(data) - pos} bytes, expected {n}", pos)
    dtype = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(data, dtype, w * h * 3, pos).reshape(h, w, 3)[::-1]
    if not np.all(np.isfinite(img)):
        bad = int(np.argmax(~np.isfinite(img[::-1].reshape(-1))))
        raise HdrFormatError("non-finite sample in PFM payload", pos + 4 * bad)
    return img.astype(np.float32)


def read_image(path: str | Path) -> np.ndarray:
    """Load ``.hdr`` or ``.pfm`` by extension."""
    path = Path(path)
    data = path.read_bytes()
    if path.suffix.lower() == ".pfm":
        return decode_pfm(data)
    return decode_rgbe(data)


def write_image(path: str | Path, image: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        path.write_bytes(encode_pfm(image))
    elif path.suffix.lower() == ".hdr":
        path.write_bytes(encode_rgbe(image))
    elif path.suffix.lower() == ".png":
        write_png(path, tonemap_preview(image))
    else:
        raise ValueError(f"unknown image extension {path.suffix!r}")


# --------------------------------------------------------------------------
# Equirectangular geometry
# --------------------------------------------------------------------------

def pixel_to_dir(dims: tuple[int, int], row, col) -> np.ndarray:
    """Unit direction through the center of pixel ``(row, col)``.

    Accepts scalars or broadcastable integer arrays; returns ``(..., 3)``.
    """
    h, w = dims
    row = np.asarray(row)
    col = np.asarray(col)
    if np.any((row < 0) | (row >= h)) or np.any((col < 0) | (col >= w)):
        raise IndexError(f"pixel index out of range for {h}x{w} map")
    theta = np.pi * (row + 0.5) / h
    phi = 2.0 * np.pi * ((col + 0.5) / w - 0.5)
    st = np.sin(theta)
    return np.stack(np.broadcast_arrays(st * np.sin(phi), np.cos(theta), -st * np.cos(phi)), axis=-1)


def dir_to_pixel(dims: tuple[int, int], d) -> tuple[np.ndarray, np.ndarray]:
    """Pixel ``(row, col)`` containing direction ``d`` (need not be normalized)."""
    h, w = dims
    d = np.asarray(d, dtype=np.float64)
    n = np.linalg.norm(d, axis=-1)
    if np.any(n == 0) or not np.all(np.isfinite(n)):
        raise ValueError("direction must be finite and non-zero")
    x, y, z = (d[..., i] / n for i in range(3))
    theta = np.arccos(np.clip(y, -1.0, 1.0))
    phi = np.arctan2(x, -z)
    row = np.clip(np.floor(theta / np.pi * h).astype(np.int64), 0, h - 1)
    col = np.floor((phi / (2.0 * np.pi) + 0.5) * w).astype(np.int64) % w
    return row, col


def direction_grid(dims: tuple[int, int]) -> np.ndarray:
    """``(H, W, 3)`` float64 array of pixel-center directions."""
    h, w = dims
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return pixel_to_dir(dims, rows, cols)


def pixel_solid_angle(dims: tuple[int, int], row) -> np.ndarray:
    """Steradians subtended by any pixel in ``row`` (float64)."""
    h, w = dims
    row = np.asarray(row)
    return (2.0 * np.pi / w) * (np.cos(np.pi * row / h) - np.cos(np.pi * (row + 1) / h))


def solid_angle_grid(dims: tuple[int, int]) -> np.ndarray:
    h, w = dims
    return np.repeat(pixel_solid_angle(dims, np.arange(h))[:, None], w, axis=1)


def env_integral(env: np.ndarray) -> np.ndarray:
    """Per-channel ``sum L * dOmega`` over the full sphere, float64."""
    omega = solid_angle_grid(env.shape[:2])
    return np.einsum("hwc,hw->c", env.astype(np.float64), omega)


def rotate_env(env: np.ndarray, yaw: float) -> np.ndarray:
    """Rotate the environment about +Y by ``yaw`` radians.

    Content moves toward increasing column. Yaws that are whole multiples
    of the pixel pitch are an exact roll; others are bilinear with wrap.
    """
    env = np.asarray(env)
    w = env.shape[1]
    shift = (float(yaw) % (2.0 * np.pi)) * w / (2.0 * np.pi)
    nearest = round(shift)
    if abs(shift - nearest) < 1e-9:
        return np.roll(env, nearest % w, axis=1)
    i = int(np.floor(shift))
    f = shift - i
    a = np.roll(env, i, axis=1).astype(np.float64)
    b = np.roll(env, i + 1, axis=1).astype(np.float64)
    return ((1.0 - f) * a + f * b).astype(env.dtype)


# --------------------------------------------------------------------------
# LDR preview
# --------------------------------------------------------------------------

def tonemap_preview(image: np.ndarray, exposure_stops: float = 0.0, gamma: float = 2.2) -> np.ndarray:
    c = np.clip(np.asarray(image, dtype=np.float64) * 2.0 ** exposure_stops, 0.0, 1.0)
    c = c ** (1.0 / gamma)
    return np.floor(c * 255.0 + 0.5).astype(np.uint8)


def write_png(path: str | Path, ldr: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(ldr, dtype=np.uint8)).save(Path(path), format="PNG")


def read_png(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(Path(path)) as im:
        return np.asarray(im.convert("RGB"))

