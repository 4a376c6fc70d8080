"""Image ingestion, overlapping patch partitioning, and inverse reassembly.

Rasters are binary PPM (P6, 3 channels) and PGM (P5, 1 channel) with
maxval 255; pixel bytes map to [0, 1] via v/255.  Partitioning cuts an
H x W x C image into rows x cols patches of size s x s with overlap rate
r in [0, 1); reassembly averages every pixel over the patches that cover
it, so a partition/reassemble round trip reproduces the image exactly up
to floating-point addition order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidLayout, ParseError, UnsupportedFormat

__all__ = [
    "Image",
    "PatchLayout",
    "PatchGrid",
    "load_image",
    "write_image",
    "make_layout",
    "patch_count",
    "patch_positions",
    "partition",
    "reassemble",
    "reassemble_raw",
]


@dataclass(frozen=True)
class Image:
    """Dense H x W x C raster with float64 values in [0, 1]."""

    height: int
    width: int
    channels: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ValueError("image dimensions must be >= 1")
        expected = (self.height, self.width, self.channels)
        if self.data.shape != expected:
            raise ValueError(f"data shape {self.data.shape} != {expected}")
        if not np.isfinite(self.data).all():
            raise ValueError("image data must be finite")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")

    @property
    def pixel_count(self) -> int:
        return self.height * self.width * self.channels


@dataclass(frozen=True)
class PatchLayout:
    """Patch geometry plus the source dimensions needed to invert it."""

    patch_size: int
    overlap_rate: float
    rows: int
    cols: int
    stride: float
    height: int
    width: int
    channels: int

    @property
    def patch_total(self) -> int:
        return self.rows * self.cols

    @property
    def patch_len(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass(frozen=True)
class PatchGrid:
    """Row-major ordered patch vectors with their layout."""

    layout: PatchLayout
    patches: np.ndarray = field(repr=False)  # (rows*cols, s*s*C)

    def __post_init__(self):
        expected = (self.layout.patch_total, self.layout.patch_len)
        if self.patches.shape != expected:
            raise InvalidLayout(
                f"patch matrix shape {self.patches.shape} != {expected}"
            )


def _read_header_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    """Next whitespace-delimited header token, skipping '#' comment lines."""
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            while pos < n and buf[pos : pos + 1] != b"\n":
                pos += 1
        else:
            break
    if pos >= n:
        raise ParseError("unexpected end of header")
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    return buf[start:pos], pos


def load_image(path) -> Image:
    """Read a binary PPM (P6) or PGM (P5) file with maxval 255.

    Raises ParseError on malformed or truncated files and
    UnsupportedFormat on other magics or maxvals.
    """
    with open(path, "rb") as fh:
        buf = fh.read()

    magic, pos = _read_header_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise UnsupportedFormat(f"unsupported raster magic {magic!r}")
    channels = 1 if magic == b"P5" else 3

    fields = []
    for name in ("width", "height", "maxval"):
        tok, pos = _read_header_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise ParseError(f"non-numeric {name} field {tok!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ParseError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise UnsupportedFormat(f"maxval {maxval} not supported (only 255)")

    # Exactly one whitespace byte separates the header from the payload.
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ParseError("missing whitespace before pixel payload")
    pos += 1

    expected = height * width * channels
    payload = buf[pos : pos + expected]
    if len(payload) < expected:
        raise ParseError(
            f"truncated payload: expected {expected} bytes, found {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0
    return Image(height, width, channels, data.reshape(height, width, channels))


def write_image(path, img: Image) -> None:
    """Write a 1-channel image as binary PGM (P5) or 3-channel as PPM (P6)."""
    if img.channels == 1:
        magic = b"P5"
    elif img.channels == 3:
        magic = b"P6"
    else:
        raise UnsupportedFormat(f"cannot write {img.channels}-channel raster")
    payload = np.rint(np.clip(img.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(magic + b"\n")
        fh.write(f"{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(payload.tobytes())


def _axis_count(extent: int, s: int, r: float) -> int:
    if r == 0.0:
        return math.ceil(extent / s)
    return math.ceil((extent - s * (1.0 - r)) / (s * r))


def patch_count(height: int, width: int, s: int, r: float) -> tuple[int, int]:
    """Number of patch rows and columns for an H x W image.

    r = 0 is plain non-overlapping tiling (ceil(H/s) per axis); r > 0
    follows ceil((extent - s(1-r)) / (s r)) per axis, with the step s*r.
    """
    if not 0.0 <= r < 1.0:
        raise InvalidLayout(f"overlap rate {r} outside [0, 1)")
    if s < 1:
        raise InvalidLayout(f"patch size {s} < 1")
    if s > height or s > width:
        raise InvalidLayout(
            f"patch size {s} exceeds image extent {height}x{width}"
        )
    return _axis_count(height, s, r), _axis_count(width, s, r)


def _axis_offsets(extent: int, s: int, r: float, count: int) -> list[int]:
    """Top/left pixel offsets for one axis; the last patches clamp inward."""
    step = float(s) if r == 0.0 else s * r
    return [min(int(round(i * step)), extent - s) for i in range(count)]


def patch_positions(layout: PatchLayout) -> list[tuple[int, int]]:
    """Row-major (top, left) pixel offsets of every patch."""
    tops = _axis_offsets(layout.height, layout.patch_size, layout.overlap_rate, layout.rows)
    lefts = _axis_offsets(layout.width, layout.patch_size, layout.overlap_rate, layout.cols)
    return [(t, l) for t in tops for l in lefts]


def make_layout(height: int, width: int, channels: int, s: int, r: float) -> PatchLayout:
    """Patch layout for an image of the given dimensions."""
    rows, cols = patch_count(height, width, s, r)
    stride = float(s) if r == 0.0 else s * r
    return PatchLayout(
        patch_size=s,
        overlap_rate=r,
        rows=rows,
        cols=cols,
        stride=stride,
        height=height,
        width=width,
        channels=channels,
    )


def partition(img: Image, s: int, r: float) -> PatchGrid:
    """Cut an image into row-major s x s patches with overlap rate r.

    Each patch is flattened in (row, col, channel) order.  Boundary
    patches are clamped inward so every patch is drawn entirely from
    real pixels.
    """
    layout = make_layout(img.height, img.width, img.channels, s, r)
    patches = np.empty((layout.patch_total, layout.patch_len), dtype=np.float64)
    for i, (top, left) in enumerate(patch_positions(layout)):
        patches[i] = img.data[top : top + s, left : left + s, :].reshape(-1)
    return PatchGrid(layout, patches)


def reassemble_raw(layout: PatchLayout, patches: np.ndarray) -> np.ndarray:
    """Average patch vectors back into an H x W x C array, without clamping."""
    s = layout.patch_size
    if patches.shape != (layout.patch_total, layout.patch_len):
        raise InvalidLayout(
            f"patch matrix shape {patches.shape} != "
            f"{(layout.patch_total, layout.patch_len)}"
        )
    acc = np.zeros((layout.height, layout.width, layout.channels), dtype=np.float64)
    cnt = np.zeros((layout.height, layout.width, 1), dtype=np.float64)
    for i, (top, left) in enumerate(patch_positions(layout)):
        acc[top : top + s, left : left + s, :] += patches[i].reshape(
            s, s, layout.channels
        )
        cnt[top : top + s, left : left + s, :] += 1.0
    if cnt.min() == 0.0:
        raise InvalidLayout("layout leaves pixels uncovered")
    return acc / cnt


def reassemble(grid: PatchGrid) -> Image:
    """Invert partition: average every pixel over its covering patches."""
    lay = grid.layout
    data = reassemble_raw(lay, grid.patches)
    return Image(lay.height, lay.width, lay.channels, np.clip(data, 0.0, 1.0))


def reassemble_adjoint(grid_layout: PatchLayout, d_image: np.ndarray) -> np.ndarray:
    """Adjoint of the linear map patches -> averaged image.

    Used by the decoder backward pass: routes a pixel gradient back to
    every patch entry that contributed to that pixel, weighted 1/coverage.
    """
    lay = grid_layout
    s = lay.patch_size
    cnt = np.zeros((lay.height, lay.width, 1), dtype=np.float64)
    for top, left in patch_positions(lay):
        cnt[top : top + s, left : left + s, :] += 1.0
    weighted = d_image / cnt
    d_patches = np.empty((lay.patch_total, lay.patch_len), dtype=np.float64)
    for i, (top, left) in enumerate(patch_positions(lay)):
        d_patches[i] = weighted[top : top + s, left : left + s, :].reshape(-1)
    return d_patches
