"""Frame decoding and the luma -> log-intensity front end.

The simulator consumes 8-bit grayscale (luma) frames. Standard video is
linear in intensity while DVS pixels respond to log intensity, so luma is
mapped through a lin-log curve: linear below a junction of 20 DN (which
suppresses quantization noise in dark pixels), natural log above it. The
two branches are scaled to meet exactly at the junction.

Supported on-disk inputs: binary PGM (P5, maxval 255), 8-bit grayscale
PNG, and raw RGB as binary PPM (P6) which is reduced to luma with BT.601
weights.
"""

from __future__ import annotations

import io
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DecodeError

LIN_LOG_JUNCTION = 20.0
_LN20 = math.log(20.0)

#: BT.601 luma weights for RGB reduction.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass
class LumaFrame:
    """One 8-bit grayscale frame: (height, width) uint8 array + timestamp in us."""

    data: np.ndarray
    t_us: int = 0

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if self.data.ndim != 2 or self.data.size == 0:
            raise DataError(f"luma frame must be a non-empty 2-d array, got shape {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class LogFrame:
    """Log-intensity frame (float64, natural-log units) + timestamp in us."""

    data: np.ndarray
    t_us: int = 0

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.size == 0:
            raise DataError(f"log frame must be a non-empty 2-d array, got shape {self.data.shape}")
        if not np.isfinite(self.data).all() or (self.data < 0).any():
            raise DataError("log frame values must be finite and >= 0")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def lin_log(y):
    """Map luma DN in [0, 255] to log intensity.

    L = (Y/20) * ln(20) for Y <= 20, L = ln(Y) above; continuous at the
    junction and monotone over the full DN range.
    """
    arr = np.asarray(y, dtype=np.float64)
    if (arr < 0).any() or (arr > 255).any():
        raise DataError("luma value outside [0, 255]")
    out = np.where(arr <= LIN_LOG_JUNCTION, arr * (_LN20 / LIN_LOG_JUNCTION), np.log(np.maximum(arr, 1e-30)))
    return out if out.ndim else float(out)


def normalize_luma(y):
    """Luma DN -> fraction of full scale (Y / 255)."""
    arr = np.asarray(y, dtype=np.float64)
    if (arr < 0).any() or (arr > 255).any():
        raise DataError("luma value outside [0, 255]")
    out = arr / 255.0
    return out if out.ndim else float(out)


def log_frame(frame: LumaFrame) -> LogFrame:
    return LogFrame(lin_log(frame.data), t_us=frame.t_us)


# ---------------------------------------------------------------------------
# decoding


def _parse_pnm_header(raw: bytes, magic: bytes):
    """Parse a binary PNM header (P5/P6), returning (width, height, data offset).

    Handles whitespace and '#' comments between tokens.
    """
    if not raw.startswith(magic):
        raise DecodeError(f"expected {magic.decode()} magic", offset=0)
    pos = len(magic)
    tokens = []
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            end = raw.find(b"\n", pos)
            if end < 0:
                raise DecodeError("unterminated comment in header", offset=pos)
            pos = end + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DecodeError("truncated header", offset=pos)
        tok = raw[start:pos]
        if not re.fullmatch(rb"\d+", tok):
            raise DecodeError(f"non-numeric header token {tok!r}", offset=start)
        tokens.append(int(tok))
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise DecodeError("missing whitespace after maxval", offset=pos)
    pos += 1  # single whitespace byte separates header from payload
    width, height, maxval = tokens
    if maxval != 255:
        raise DecodeError(f"unsupported maxval {maxval}, need 255", offset=len(magic))
    if width == 0 or height == 0:
        raise DecodeError("zero-sized image", offset=len(magic))
    return width, height, pos


def decode_frame(raw: bytes, format: str, t_us: int = 0) -> LumaFrame:
    """Decode image bytes into a LumaFrame.

    format: 'pgm' (binary P5), 'png' (8-bit grayscale PNG), or 'rgb'
    (binary PPM P6; reduced to luma with BT.601 weights, rounded to
    nearest).
    """
    fmt = format.lower().replace("-", "_")
    if fmt in ("pgm", "pgm_p5"):
        width, height, pos = _parse_pnm_header(raw, b"P5")
        need = width * height
        payload = raw[pos : pos + need]
        if len(payload) < need:
            raise DecodeError(f"truncated payload, need {need} bytes got {len(payload)}", offset=pos + len(payload))
        data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
        return LumaFrame(data, t_us=t_us)
    if fmt in ("rgb", "rgb_triplets", "ppm", "ppm_p6"):
        width, height, pos = _parse_pnm_header(raw, b"P6")
        need = width * height * 3
        payload = raw[pos : pos + need]
        if len(payload) < need:
            raise DecodeError(f"truncated payload, need {need} bytes got {len(payload)}", offset=pos + len(payload))
        rgb = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).astype(np.float64)
        y = np.rint(rgb @ np.array(LUMA_WEIGHTS)).astype(np.uint8)
        return LumaFrame(y, t_us=t_us)
    if fmt in ("png", "png_grayscale"):
        from PIL import Image, UnidentifiedImageError

        try:
            img = Image.open(io.BytesIO(raw))
            img.load()
        except UnidentifiedImageError as exc:
            raise DecodeError(f"not a PNG image: {exc}", offset=0) from exc
        except OSError as exc:
            raise DecodeError(f"corrupt PNG payload: {exc}") from exc
        if img.mode != "L":
            raise DecodeError(f"PNG must be 8-bit grayscale (mode L), got mode {img.mode}")
        return LumaFrame(np.asarray(img, dtype=np.uint8), t_us=t_us)
    raise DataError(f"unknown frame format {format!r}")


def encode_pgm(frame: LumaFrame) -> bytes:
    """Binary P5 encoding; decode_frame(encode_pgm(f), 'pgm') is the identity."""
    header = f"P5\n{frame.width} {frame.height}\n255\n".encode()
    return header + frame.data.tobytes()


# ---------------------------------------------------------------------------
# sequence directories


@dataclass
class SequenceMeta:
    fps: float = 60.0
    label: int | None = None
    extra: dict | None = None


def parse_meta(text: str) -> SequenceMeta:
    """Parse line-oriented key=value metadata (fps=60, label=3)."""
    meta = SequenceMeta(extra={})
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"meta.txt line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if key == "fps":
            meta.fps = float(value)
            if meta.fps <= 0:
                raise DataError(f"meta.txt line {lineno}: fps must be positive")
        elif key == "label":
            meta.label = int(value)
        else:
            meta.extra[key] = value
    return meta


def frame_timestamp_us(index: int, fps: float) -> int:
    """Timestamp of frame `index` at the given rate; exact integer microseconds."""
    return (index * 1_000_000) // round(fps) if float(fps).is_integer() else int(round(index * 1e6 / fps))


def load_sequence(path: str | Path) -> tuple[list[LumaFrame], SequenceMeta]:
    """Load `<path>/frames/%06d.pgm|.png` plus `<path>/meta.txt`.

    Frames are ordered by their numeric name; timestamps come from the
    sequence fps (default 60) when the container provides none.
    """
    path = Path(path)
    frames_dir = path / "frames"
    if not frames_dir.is_dir():
        raise DataError(f"no frames/ directory under {path}")
    meta_path = path / "meta.txt"
    meta = parse_meta(meta_path.read_text()) if meta_path.exists() else SequenceMeta(extra={})
    files = sorted(p for p in frames_dir.iterdir() if p.suffix in (".pgm", ".png"))
    if not files:
        raise DataError(f"no .pgm/.png frames under {frames_dir}")
    frames = []
    for k, p in enumerate(files):
        fmt = "pgm" if p.suffix == ".pgm" else "png"
        frames.append(decode_frame(p.read_bytes(), fmt, t_us=frame_timestamp_us(k, meta.fps)))
    shape = frames[0].data.shape
    for k, f in enumerate(frames):
        if f.data.shape != shape:
            raise DataError(f"frame {k} shape {f.data.shape} differs from first frame {shape}")
    return frames, meta
