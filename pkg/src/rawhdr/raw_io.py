"""RAW bracket containers, CFA (dis)assembly and file I/O.

Sensor frames are stored as 16-bit binary PGM mosaics, linear results as
little-endian PFM. A stack is described by a small sidecar text file::

    black_offset = 64
    white_level = 4095
    cfa_pattern = RGGB
    wb_gains = 2.0 1.0 1.5            # optional
    srgb_matrix = 1 0 0 0 1 0 0 0 1   # optional, row-major
    frame_000.pgm 0.0025
    frame_001.pgm 0.01
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CFA_PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")

# (row, col) offset inside the 2x2 cell of the r, g1, g2, b planes
_CELL_OFFSETS = {
    "RGGB": ((0, 0), (0, 1), (1, 0), (1, 1)),
    "BGGR": ((1, 1), (0, 1), (1, 0), (0, 0)),
    "GRBG": ((0, 1), (0, 0), (1, 1), (1, 0)),
    "GBRG": ((1, 0), (0, 0), (1, 1), (0, 1)),
}

IMAGE_FORMATS = ("pgm16", "pfm", "ppm8")


class DimensionError(ValueError):
    pass


class StackLoadError(RuntimeError):
    pass


class ImageFormatError(ValueError):
    pass


@dataclass
class RawFrame:
    data: np.ndarray
    cfa_pattern: str = "RGGB"

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class QuadFrame:
    """Half-resolution (r, g1, g2, b) planes stacked as a (4, h, w) array."""

    channels: np.ndarray
    exposure_time: float = 1.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels.shape[1:]


@dataclass
class RawStack:
    frames: list[QuadFrame]
    black_offset: float
    white_level: float
    cfa_pattern: str = "RGGB"
    wb_gains: tuple[float, float, float] = (1.0, 1.0, 1.0)
    srgb_matrix: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("a stack needs at least one frame")
        if any(t <= 0 for t in self.exposure_times):
            raise ValueError("exposure times must be strictly positive")
        if self.black_offset >= self.white_level:
            raise ValueError("black_offset must be below white_level")
        shapes = {f.channels.shape for f in self.frames}
        if len(shapes) != 1:
            raise DimensionError(f"frames have inconsistent dimensions: {sorted(shapes)}")

    @property
    def exposure_times(self) -> list[float]:
        return [f.exposure_time for f in self.frames]

    @property
    def reference_index(self) -> int:
        return reference_index(self.exposure_times)

    @property
    def reference(self) -> QuadFrame:
        return self.frames[self.reference_index]


def reference_index(exposure_times) -> int:
    """Index of the median exposure; an even count picks the longer of the middle pair."""
    order = sorted(range(len(exposure_times)), key=lambda i: (exposure_times[i], i))
    return order[len(order) // 2]


def disassemble_cfa(frame: RawFrame, black_offset: float = 0.0) -> QuadFrame:
    """Split a Bayer mosaic into (r, g1, g2, b) half-resolution planes.

    Values are copied as they are; ``black_offset`` is accepted for symmetry
    with the normalization step but is not subtracted here.
    """
    data = np.asarray(frame.data)
    h, w = data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"CFA dimensions must be even, got {h}x{w}")
    offsets = _CELL_OFFSETS[_check_pattern(frame.cfa_pattern)]
    planes = np.stack([data[dy::2, dx::2] for dy, dx in offsets]).astype(np.float64)
    return QuadFrame(planes)


def reassemble_cfa(quad: QuadFrame | np.ndarray, cfa_pattern: str = "RGGB", dtype=None) -> RawFrame:
    if isinstance(quad, (list, tuple)) and len({np.shape(p) for p in quad}) != 1:
        raise DimensionError(f"plane sizes differ: {[np.shape(p) for p in quad]}")
    planes = quad.channels if isinstance(quad, QuadFrame) else np.asarray(quad)
    if planes.ndim != 3 or planes.shape[0] != 4:
        raise DimensionError(f"expected 4 planes, got array of shape {planes.shape}")
    h, w = planes.shape[1:]
    out = np.empty((2 * h, 2 * w), dtype=dtype or planes.dtype)
    for plane, (dy, dx) in zip(planes, _CELL_OFFSETS[_check_pattern(cfa_pattern)]):
        out[dy::2, dx::2] = plane
    return RawFrame(out, cfa_pattern)


def cfa_channel_map(cfa_pattern: str) -> np.ndarray:
    """2x2 array giving, for each cell position, the quad plane index (0=r, 1=g1, 2=g2, 3=b)."""
    cell = np.empty((2, 2), dtype=int)
    for idx, (dy, dx) in enumerate(_CELL_OFFSETS[_check_pattern(cfa_pattern)]):
        cell[dy, dx] = idx
    return cell


def _check_pattern(pattern: str) -> str:
    pattern = pattern.upper()
    if pattern not in CFA_PATTERNS:
        raise ValueError(f"unknown CFA pattern {pattern!r}, expected one of {CFA_PATTERNS}")
    return pattern


# -- portable any-map I/O ---------------------------------------------------

def _read_header_tokens(fh, count: int) -> list[bytes]:
    tokens: list[bytes] = []
    while len(tokens) < count:
        line = fh.readline()
        if not line:
            raise ImageFormatError("truncated header")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    return tokens


def write_pgm16(path, data: np.ndarray) -> None:
    data = np.clip(np.rint(np.asarray(data, dtype=np.float64)), 0, 65535).astype(">u2")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, w, h, maxval = _read_header_tokens(fh, 4)
        if magic != b"P5":
            raise ImageFormatError(f"{path}: not a binary PGM")
        w, h, maxval = int(w), int(h), int(maxval)
        dtype = ">u2" if maxval > 255 else "u1"
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size < w * h:
        raise ImageFormatError(f"{path}: truncated pixel data")
    return data[: w * h].reshape(h, w).astype(np.uint16)


def write_pfm(path, data: np.ndarray) -> None:
    """Little-endian PFM. Rows are written bottom-to-top as the format requires."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        magic, h, w = "Pf", *data.shape
        body = data[::-1]
    elif data.ndim == 3 and data.shape[0] == 3:
        magic, h, w = "PF", *data.shape[1:]
        body = np.moveaxis(data, 0, -1)[::-1]
    else:
        raise ImageFormatError(f"PFM holds 1 or 3 planes, got shape {data.shape}")
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(body).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, w, h, scale = _read_header_tokens(fh, 4)
        w, h, scale = int(w), int(h), float(scale)
        dtype = "<f4" if scale < 0 else ">f4"
        raw = np.frombuffer(fh.read(), dtype=dtype)
    if magic == b"Pf":
        return raw[: w * h].reshape(h, w)[::-1].astype(np.float32)
    if magic == b"PF":
        return np.moveaxis(raw[: 3 * w * h].reshape(h, w, 3)[::-1], -1, 0).astype(np.float32)
    raise ImageFormatError(f"{path}: not a PFM file")


def write_ppm8(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise ImageFormatError(f"8-bit output expects a (3, h, w) image, got {rgb.shape}")
    data = np.clip(np.rint(rgb.astype(np.float64)), 0, 255).astype(np.uint8)
    h, w = data.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(np.moveaxis(data, 0, -1)).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, w, h, _ = _read_header_tokens(fh, 4)
        if magic != b"P6":
            raise ImageFormatError(f"{path}: not a binary PPM")
        w, h = int(w), int(h)
        data = np.frombuffer(fh.read(), dtype=np.uint8)[: 3 * w * h]
    return np.moveaxis(data.reshape(h, w, 3), -1, 0)


def save_image(image, path, fmt: str, cfa_pattern: str = "RGGB") -> None:
    """Write an image.

    ``pgm16``: 4-plane images are reassembled into the CFA mosaic and written
    as 16-bit counts (rounded, clamped); 2D arrays are written directly.
    ``pfm``: float32 map; 4-plane images are written as their mosaic.
    ``ppm8``: (3, h, w) image, values clamped to [0, 255].
    """
    if fmt not in IMAGE_FORMATS:
        raise ImageFormatError(f"unknown image format {fmt!r}, expected one of {IMAGE_FORMATS}")
    data = getattr(image, "channels", image)
    data = np.asarray(data)
    if fmt in ("pgm16", "pfm") and data.ndim == 3 and data.shape[0] == 4:
        data = reassemble_cfa(data, getattr(image, "cfa_pattern", cfa_pattern)).data
    try:
        if fmt == "pgm16":
            write_pgm16(path, data)
        elif fmt == "pfm":
            write_pfm(path, data)
        else:
            write_ppm8(path, data)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


# -- stack metadata ---------------------------------------------------------

def _parse_metadata(text: str, source: str) -> tuple[dict, list[tuple[str, float]]]:
    header: dict[str, str] = {}
    frames: list[tuple[str, float]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" in line:
            key, value = (s.strip() for s in line.split("=", 1))
            header[key.lower()] = value
            continue
        parts = line.rsplit(None, 1)
        if len(parts) != 2:
            raise StackLoadError(f"{source}:{lineno}: expected 'filename exposure_seconds'")
        try:
            frames.append((parts[0], _parse_exposure(parts[1])))
        except ValueError:
            raise StackLoadError(f"{source}:{lineno}: bad exposure time {parts[1]!r}") from None
    for key in ("black_offset", "white_level"):
        if key not in header:
            raise StackLoadError(f"{source}: missing '{key}' entry")
    if not frames:
        raise StackLoadError(f"{source}: no frames listed")
    return header, frames


def _parse_exposure(token: str) -> float:
    if "/" in token:
        num, den = token.split("/", 1)
        return float(num) / float(den)
    return float(token)


def _floats(value: str, count: int, key: str, source: str) -> list[float]:
    try:
        out = [float(v) for v in value.replace(",", " ").split()]
    except ValueError:
        out = []
    if len(out) != count:
        raise StackLoadError(f"{source}: '{key}' needs {count} numbers")
    return out


def load_stack(metadata_path, directory=None) -> RawStack:
    """Read a sidecar metadata file and the 16-bit PGM mosaics it lists.

    Frame paths are resolved relative to ``directory`` (default: the folder
    holding the metadata file).
    """
    metadata_path = Path(metadata_path)
    directory = Path(directory) if directory is not None else metadata_path.parent
    try:
        text = metadata_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise StackLoadError(f"cannot read metadata {metadata_path}: {exc}") from exc
    header, entries = _parse_metadata(text, str(metadata_path))
    try:
        black_offset = float(header["black_offset"])
        white_level = float(header["white_level"])
    except ValueError:
        raise StackLoadError(f"{metadata_path}: black_offset/white_level must be numeric") from None
    pattern = header.get("cfa_pattern", "RGGB").upper()
    if pattern not in CFA_PATTERNS:
        raise StackLoadError(f"{metadata_path}: unknown cfa_pattern {pattern!r}")
    wb = tuple(_floats(header["wb_gains"], 3, "wb_gains", str(metadata_path))) if "wb_gains" in header else (1.0, 1.0, 1.0)
    matrix = (np.array(_floats(header["srgb_matrix"], 9, "srgb_matrix", str(metadata_path))).reshape(3, 3)
              if "srgb_matrix" in header else np.eye(3))

    frames = []
    shape = None
    for name, exposure in entries:
        path = directory / name
        if not path.is_file():
            raise StackLoadError(f"frame file not found: {path}")
        try:
            mosaic = read_pgm(path)
        except (ImageFormatError, ValueError) as exc:
            raise StackLoadError(f"cannot decode {path}: {exc}") from exc
        if shape is not None and mosaic.shape != shape:
            raise StackLoadError(f"{path}: dimensions {mosaic.shape} differ from first frame {shape}")
        shape = mosaic.shape
        try:
            quad = disassemble_cfa(RawFrame(mosaic, pattern), black_offset)
        except DimensionError as exc:
            raise StackLoadError(f"{path}: {exc}") from exc
        quad.exposure_time = exposure
        frames.append(quad)
    try:
        return RawStack(frames, black_offset, white_level, pattern, wb, matrix)
    except ValueError as exc:
        raise StackLoadError(f"{metadata_path}: {exc}") from exc


def save_stack(stack: RawStack, directory, metadata_name: str = "stack.txt", prefix: str = "frame") -> Path:
    """Write every frame as a 16-bit PGM mosaic plus the metadata sidecar. Returns the sidecar path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [
        f"black_offset = {stack.black_offset!r}",
        f"white_level = {stack.white_level!r}",
        f"cfa_pattern = {stack.cfa_pattern}",
        "wb_gains = " + " ".join(repr(float(g)) for g in stack.wb_gains),
        "srgb_matrix = " + " ".join(repr(float(v)) for v in np.asarray(stack.srgb_matrix).ravel()),
    ]
    for i, frame in enumerate(stack.frames):
        name = f"{prefix}_{i:03d}.pgm"
        save_image(frame, directory / name, "pgm16", stack.cfa_pattern)
        lines.append(f"{name} {frame.exposure_time!r}")
    meta = directory / metadata_name
    meta.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return meta


def load_pfm_quad(path, cfa_pattern: str = "RGGB") -> np.ndarray:
    """Read a mosaic PFM written by :func:`save_image` back into (4, h, w) planes."""
    mosaic = read_pfm(path)
    return disassemble_cfa(RawFrame(mosaic, cfa_pattern)).channels
