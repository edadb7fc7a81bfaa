"""Image, sequence and warp-field types plus the shared raster primitives.

Pixels are stored as float64 in native units (0..dyn_range). Nothing is
clamped until an image is written to disk.
"""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any

import numpy as np

if TYPE_CHECKING:
    from .turbsim import Kernel, TurbulenceParams

MIN_SIDE = 8

FRAME_PATTERN = "frame_{:03d}.png"
GT_NAME = "gt.png"


class ImageIOError(Exception):
    """Base class for image file errors."""


class UnsupportedFormatError(ImageIOError):
    pass


class TruncatedFileError(ImageIOError):
    pass


class BorderMode(enum.Enum):
    CLAMP = "clamp"
    ZERO = "zero"


@dataclass(frozen=True, eq=False)
class Image:
    """Single-channel raster, ``data`` has shape (height, width)."""

    data: np.ndarray
    dyn_range: float = 255.0

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"image data must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < MIN_SIDE or arr.shape[1] < MIN_SIDE:
            raise ValueError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {arr.shape[1]}x{arr.shape[0]}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        if not self.dyn_range > 0:
            raise ValueError("dyn_range must be positive")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "dyn_range", float(self.dyn_range))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def like(self, data: np.ndarray) -> Image:
        """New image with the same dynamic range."""
        return Image(data, self.dyn_range)

    def clamped(self) -> np.ndarray:
        return np.clip(self.data, 0.0, self.dyn_range)


@dataclass(frozen=True, eq=False)
class WarpField:
    """Backward displacement field: output (x, y) samples input (x+dx, y+dy)."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        dx = np.asarray(self.dx, dtype=np.float64)
        dy = np.asarray(self.dy, dtype=np.float64)
        if dx.ndim != 2 or dx.shape != dy.shape:
            raise ValueError("dx and dy must be 2-D arrays of equal shape")
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
            raise ValueError("warp field contains non-finite displacements")
        object.__setattr__(self, "dx", dx)
        object.__setattr__(self, "dy", dy)

    @classmethod
    def zeros(cls, width: int, height: int) -> WarpField:
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @property
    def width(self) -> int:
        return self.dx.shape[1]

    @property
    def height(self) -> int:
        return self.dx.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dx, self.dy)


@dataclass(eq=False)
class Sequence:
    frames: list[Image]
    params: TurbulenceParams
    scene_id: str = ""
    seed: int = 0
    kernel: Kernel | None = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.frames) != self.params.num_frames:
            raise ValueError(f"sequence has {len(self.frames)} frames, params say {self.params.num_frames}")
        if self.frames:
            shape, dyn = self.frames[0].shape, self.frames[0].dyn_range
            for f in self.frames[1:]:
                if f.shape != shape or f.dyn_range != dyn:
                    raise ValueError("all frames must share dimensions and dyn_range")

    def __len__(self) -> int:
        return len(self.frames)

    def stack(self) -> np.ndarray:
        return np.stack([f.data for f in self.frames])


def warp_image(src: Image, field: WarpField, border: BorderMode = BorderMode.CLAMP) -> Image:
    """Bilinear backward warp of ``src`` by ``field``."""
    if field.shape != src.shape:
        raise ValueError(f"warp field {field.shape} does not match image {src.shape}")
    return src.like(_warp_array(src.data, field.dx, field.dy, border))


def _warp_array(img: np.ndarray, dx: np.ndarray, dy: np.ndarray, border: BorderMode = BorderMode.CLAMP) -> np.ndarray:
    if not (np.any(dx) or np.any(dy)):
        return img.copy()
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    x = xx + dx
    y = yy + dy
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    x1 = x0 + 1
    y1 = y0 + 1

    if border is BorderMode.CLAMP:
        def tap(yi, xi):
            return img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    else:
        def tap(yi, xi):
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            return np.where(inside, vals, 0.0)

    return ((1 - fy) * ((1 - fx) * tap(y0, x0) + fx * tap(y0, x1))
            + fy * ((1 - fx) * tap(y1, x0) + fx * tap(y1, x1)))


def kernel_otf(taps: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Real-FFT transfer function of a centred kernel embedded circularly in ``shape``."""
    kh, kw = taps.shape
    if kh > shape[0] or kw > shape[1]:
        raise ValueError(f"kernel {kh}x{kw} larger than image {shape[1]}x{shape[0]}")
    pad = np.zeros(shape)
    pad[:kh, :kw] = taps
    pad = np.roll(pad, (-(kh // 2), -(kw // 2)), axis=(0, 1))
    return np.fft.rfft2(pad)


def convolve_fft(src: Image, kernel: Kernel) -> Image:
    """Circular convolution of ``src`` with a centred kernel."""
    taps = np.asarray(kernel.taps, dtype=np.float64)
    if not np.all(np.isfinite(taps)):
        raise ValueError("kernel has non-finite taps")
    return src.like(_convolve_array(src.data, taps))


def _convolve_array(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    c = taps.shape[0] // 2
    if taps[c, c] == 1.0 and np.count_nonzero(taps) == 1:
        # identity kernel: skip the FFT round trip so the output is exact
        return img.copy()
    otf = kernel_otf(taps, img.shape)
    return np.fft.irfft2(np.fft.rfft2(img) * otf, s=img.shape)


# --------------------------------------------------------------------------
# file I/O


def load_image(path: str | Path) -> Image:
    """Read a grayscale PNG or binary PGM. RGB input is averaged to gray."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head.startswith(b"\x89PNG"):
        return _load_png(path)
    if head[:2] == b"P5":
        return _load_pgm(path)
    raise UnsupportedFormatError(f"{path}: not a PNG or binary PGM file")


def save_image(img: Image, path: str | Path) -> None:
    """Write ``img`` clamped and rounded to its bit depth (PNG or PGM by suffix)."""
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"directory {path.parent} does not exist")
    dyn = img.dyn_range
    if dyn > 65535:
        raise UnsupportedFormatError(f"dyn_range {dyn:g} exceeds 16 bits")
    dtype = np.uint8 if dyn <= 255 else np.uint16
    arr = np.rint(img.clamped()).astype(dtype)
    suffix = path.suffix.lower()
    if suffix == ".png":
        _save_png(arr, path)
    elif suffix in (".pgm", ".pnm"):
        _save_pgm(arr, int(round(dyn)), path)
    else:
        raise UnsupportedFormatError(f"{path}: unsupported output suffix {path.suffix!r}")


def _load_png(path: Path) -> Image:
    from PIL import Image as PILImage

    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            arr = np.array(im)
    except (OSError, SyntaxError, ValueError, zlib.error) as exc:
        raise TruncatedFileError(f"{path}: {exc}") from exc

    if mode in ("I;16", "I;16B", "I;16L", "I"):
        dyn = 65535.0
    elif mode in ("L", "P", "RGB", "RGBA", "LA"):
        dyn = 255.0
        if mode == "P":
            with PILImage.open(path) as im:
                arr = np.array(im.convert("RGB"))
    elif mode == "1":
        arr = arr.astype(np.uint8) * 255
        dyn = 255.0
    else:
        raise UnsupportedFormatError(f"{path}: unsupported PNG mode {mode}")

    arr = arr.astype(np.float64)
    if arr.ndim == 3:
        arr = arr[..., :3].mean(axis=2) if arr.shape[2] >= 3 else arr[..., 0]
    return Image(arr, dyn)


def _save_png(arr: np.ndarray, path: Path) -> None:
    from PIL import Image as PILImage

    PILImage.fromarray(arr).save(path, format="PNG")


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    i = 2
    n = len(buf)
    while len(tokens) < count:
        while i < n and buf[i:i + 1].isspace():
            i += 1
        if i < n and buf[i:i + 1] == b"#":
            while i < n and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not buf[i:i + 1].isspace() and buf[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise TruncatedFileError("PGM header is incomplete")
        tokens.append(buf[start:i])
    # exactly one whitespace byte separates header from raster
    if i >= n:
        raise TruncatedFileError("PGM file has no raster data")
    return tokens, i + 1


def _load_pgm(path: Path) -> Image:
    buf = path.read_bytes()
    try:
        tokens, offset = _pgm_tokens(buf, 3)
    except TruncatedFileError as exc:
        raise TruncatedFileError(f"{path}: {exc}") from exc
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise UnsupportedFormatError(f"{path}: malformed PGM header") from exc
    if not 0 < maxval <= 65535:
        raise UnsupportedFormatError(f"{path}: PGM maxval {maxval} out of range")
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    need = width * height * dtype.itemsize
    raster = buf[offset:offset + need]
    if len(raster) < need:
        raise TruncatedFileError(f"{path}: expected {need} raster bytes, found {len(raster)}")
    arr = np.frombuffer(raster, dtype=dtype).reshape(height, width).astype(np.float64)
    return Image(arr, float(maxval))


def _save_pgm(arr: np.ndarray, maxval: int, path: Path) -> None:
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii")
    body = arr.astype(np.uint8 if maxval < 256 else ">u2").tobytes()
    path.write_bytes(header + body)


def load_sequence(seq_dir: str | Path) -> tuple[Sequence, Image, dict[str, Any]]:
    """Load frames, ground truth and the raw params record of a sequence directory."""
    import json

    from .turbsim import TurbulenceParams

    seq_dir = Path(seq_dir)
    meta = json.loads((seq_dir / "params.json").read_text())
    params = TurbulenceParams.from_dict(meta["params"])
    frames = [load_image(seq_dir / FRAME_PATTERN.format(i)) for i in range(params.num_frames)]
    gt = load_image(seq_dir / GT_NAME)
    seq = Sequence(frames, params, scene_id=meta.get("scene_id", ""), seed=int(meta.get("seed", 0)))
    return seq, gt, meta
