"""Turbulence degradation simulator and dataset builder.

Forward model per frame: blur by a stationary long-exposure kernel, warp by
a per-frame correlated random tilt field, then add Gaussian noise.

Seed derivation (dataset version 1): ``derive_seed(*parts)`` is the first
8 bytes (little endian) of BLAKE2b over the UTF-8 text formed by joining
``repr`` of each part with ``"|"``. Integers, strings and floats all have
stable reprs, so seeds are platform independent. Changing this scheme
requires bumping ``DATASET_VERSION``.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from decimal import Decimal
from pathlib import Path

import numpy as np

from .imgcore import (
    FRAME_PATTERN,
    GT_NAME,
    Image,
    ImageIOError,
    Sequence,
    WarpField,
    _convolve_array,
    _warp_array,
    load_image,
    save_image,
)

log = logging.getLogger(__name__)

DATASET_VERSION = 1
NO_TURBULENCE = math.inf
MAX_TILT_PX = 8.0
DEFAULT_KERNEL_SIZE = 31
KERNEL_ENERGY_MIN = 0.999
MANIFEST_COLUMNS = ["scene_id", "L_km", "a", "b", "cn2", "seed", "path", "n_frames"]


def derive_seed(*parts) -> int:
    text = "|".join(repr(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class TurbulenceParams:
    path_length_m: float
    cn2: float
    aperture_m: float = 0.054
    focal_m: float = 0.3
    wavelength_m: float = 0.525e-6
    num_frames: int = 50
    noise_sigma: float = 0.0
    pixel_pitch_m: float = 4e-6

    def __post_init__(self):
        checks = {
            "path_length_m": self.path_length_m > 0,
            "cn2": self.cn2 >= 0,
            "aperture_m": self.aperture_m > 0,
            "focal_m": self.focal_m > 0,
            "wavelength_m": self.wavelength_m > 0,
            "num_frames": self.num_frames >= 1,
            "noise_sigma": self.noise_sigma >= 0,
            "pixel_pitch_m": self.pixel_pitch_m > 0,
        }
        for name, ok in checks.items():
            if not ok:
                raise ValueError(f"invalid TurbulenceParams.{name}: {getattr(self, name)!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TurbulenceParams:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def replace(self, **kw) -> TurbulenceParams:
        return TurbulenceParams(**{**asdict(self), **kw})


@dataclass(frozen=True, eq=False)
class Kernel:
    taps: np.ndarray

    def __post_init__(self):
        taps = np.asarray(self.taps, dtype=np.float64)
        if taps.ndim != 2 or taps.shape[0] != taps.shape[1] or taps.shape[0] % 2 == 0:
            raise ValueError(f"kernel must be square with odd size, got {taps.shape}")
        if not np.all(np.isfinite(taps)):
            raise ValueError("kernel has non-finite taps")
        if abs(taps.sum() - 1.0) > 1e-6:
            raise ValueError(f"kernel taps sum to {taps.sum():.9g}, expected 1")
        if taps.min() < -1e-12:
            raise ValueError("kernel has negative taps")
        object.__setattr__(self, "taps", taps)

    @property
    def size(self) -> int:
        return self.taps.shape[0]

    @classmethod
    def delta(cls, size: int = 1) -> Kernel:
        taps = np.zeros((size, size))
        taps[size // 2, size // 2] = 1.0
        return cls(taps)

    @classmethod
    def box(cls, size: int) -> Kernel:
        return cls(np.full((size, size), 1.0 / size**2))

    @classmethod
    def gaussian(cls, size: int, sigma: float) -> Kernel:
        r = np.arange(size) - size // 2
        g = np.exp(-0.5 * (r / sigma) ** 2)
        taps = np.outer(g, g)
        return cls(taps / taps.sum())

    def second_moment(self) -> float:
        """Mean squared radius of the kernel, in pixels^2."""
        r = np.arange(self.size) - self.size // 2
        rr = r[:, None] ** 2 + r[None, :] ** 2
        return float((rr * self.taps).sum())


@dataclass(frozen=True)
class SweepGrid:
    distances_km: tuple = (1, 2, 3, 4)
    a_values: tuple = (1, 3, 5, 7, 9)
    b_values: tuple = (14, 15, 16, 17)

    def __post_init__(self):
        for name in ("distances_km", "a_values", "b_values"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise ValueError(f"SweepGrid.{name} is empty")
            if len(set(vals)) != len(vals):
                raise ValueError(f"SweepGrid.{name} has duplicates")
            object.__setattr__(self, name, vals)
        if any(v <= 0 for v in self.distances_km):
            raise ValueError("distances must be positive")

    def combinations(self) -> list[tuple]:
        return list(itertools.product(self.distances_km, self.a_values, self.b_values))

    def __len__(self) -> int:
        return len(self.distances_km) * len(self.a_values) * len(self.b_values)

    @staticmethod
    def parse(text: str) -> SweepGrid:
        """Parse ``"L=1,2;a=1,3;b=14,15"``; omitted keys keep their defaults."""
        keys = {"L": "distances_km", "a": "a_values", "b": "b_values"}
        kw = {}
        for part in filter(None, (p.strip() for p in text.split(";"))):
            key, _, vals = part.partition("=")
            key = key.strip()
            if key not in keys or not vals:
                raise ValueError(f"bad grid clause {part!r}; expected L=..., a=... or b=...")
            kw[keys[key]] = tuple(_number(v) for v in vals.split(","))
        return SweepGrid(**kw)


def _number(text: str):
    value = float(text)
    return int(value) if value.is_integer() else value


def cn2_from_ab(a: float, b: float) -> float:
    """C_n^2 = a * 10**-b (m^-2/3), correctly rounded so 5, 15 gives exactly 5e-15."""
    a, b = Decimal(repr(float(a))), Decimal(repr(float(b)))
    if b == b.to_integral_value():
        return float(a.scaleb(-int(b)))
    return float(a * Decimal(10) ** -b)


def fried_parameter(p: TurbulenceParams) -> float:
    """Plane-wave Fried parameter r0 in metres; ``NO_TURBULENCE`` (inf) when cn2 == 0."""
    if p.cn2 == 0:
        return NO_TURBULENCE
    k = 2.0 * math.pi / p.wavelength_m
    return (0.423 * k**2 * p.cn2 * p.path_length_m) ** (-3.0 / 5.0)


def tilt_sigma_px(p: TurbulenceParams, r0: float | None = None) -> float:
    """Per-axis tilt standard deviation in pixels, capped at ``MAX_TILT_PX``."""
    if r0 is None:
        r0 = fried_parameter(p)
    if math.isinf(r0):
        return 0.0
    sigma = (0.36 * p.wavelength_m / r0) * (p.aperture_m / r0) ** (1.0 / 6.0) * p.focal_m / p.pixel_pitch_m
    return min(max(sigma, 0.0), MAX_TILT_PX)


def tilt_correlation_px(p: TurbulenceParams) -> int:
    return max(4, round(p.focal_m * p.wavelength_m / (p.aperture_m * p.pixel_pitch_m)))


def _otf(p: TurbulenceParams, r0: float, n: int) -> np.ndarray:
    nu = np.fft.fftfreq(n) / p.pixel_pitch_m  # cycles per metre on the sensor
    rho = np.hypot(nu[:, None], nu[None, :])
    cutoff = p.aperture_m / (p.wavelength_m * p.focal_m)
    x = np.minimum(rho / cutoff, 1.0)
    otf = (2.0 / np.pi) * (np.arccos(x) - x * np.sqrt(1.0 - x * x))
    if not math.isinf(r0):
        otf = otf * np.exp(-3.44 * (p.wavelength_m * p.focal_m * rho / r0) ** (5.0 / 3.0))
    return otf


_warned: set = set()


def long_exposure_kernel(p: TurbulenceParams, size: int = DEFAULT_KERNEL_SIZE, r0: float | None = None) -> Kernel:
    """Long-exposure PSF (diffraction x atmosphere) sampled on a ``size`` x ``size`` grid.

    The OTF is evaluated on a grid at least four times larger than the
    support, inverted, and the centre cropped. ``r0`` overrides the value
    implied by ``p`` (used by the semi-blind search).
    """
    if size < 3 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 3, got {size}")
    nominal = r0 is None
    if nominal:
        r0 = fried_parameter(p)
    if r0 <= 0:
        raise ValueError("r0 must be positive")
    n = max(256, 4 * size)
    psf = np.fft.fftshift(np.real(np.fft.ifft2(_otf(p, r0, n))))
    c = n // 2
    h = size // 2
    taps = psf[c - h:c + h + 1, c - h:c + h + 1]
    energy = taps.sum() / psf.sum()
    taps = np.clip(taps, 0.0, None)
    taps = taps / taps.sum()
    if energy < KERNEL_ENERGY_MIN and (size, round(r0, 9)) not in _warned:
        _warned.add((size, round(r0, 9)))
        # trial r0 values from a parameter search are expected to be off
        log.log(logging.WARNING if nominal else logging.DEBUG,"kernel %dx%d holds only %.2f%% of PSF energy (r0=%.4g m)", size, size, 100 * energy, r0)
    return Kernel(taps)


def kernel_energy_fraction(p: TurbulenceParams, size: int = DEFAULT_KERNEL_SIZE, r0: float | None = None) -> float:
    if r0 is None:
        r0 = fried_parameter(p)
    n = max(256, 4 * size)
    psf = np.fft.fftshift(np.real(np.fft.ifft2(_otf(p, r0, n))))
    c, h = n // 2, size // 2
    return float(psf[c - h:c + h + 1, c - h:c + h + 1].sum() / psf.sum())


def _gaussian_transfer(shape: tuple[int, int], ell: float) -> np.ndarray:
    fy = np.fft.fftfreq(shape[0])[:, None]
    fx = np.fft.rfftfreq(shape[1])[None, :]
    return np.exp(-2.0 * np.pi**2 * ell**2 * (fx**2 + fy**2))


def _smoothed_std(shape: tuple[int, int], transfer: np.ndarray) -> float:
    # Per-pixel std of periodically filtered unit white noise (Parseval).
    full = np.fft.irfft2(transfer, s=shape)
    return float(np.sqrt((full**2).sum()))


def sample_warp_field(p: TurbulenceParams, width: int, height: int, seed: int) -> WarpField:
    """Correlated zero-mean Gaussian tilt field with per-pixel std ``tilt_sigma_px(p)``."""
    if width < 8 or height < 8:
        raise ValueError("warp field must be at least 8x8")
    sigma = tilt_sigma_px(p)
    if sigma == 0.0:
        return WarpField.zeros(width, height)
    shape = (height, width)
    transfer = _gaussian_transfer(shape, tilt_correlation_px(p))
    scale = sigma / _smoothed_std(shape, transfer)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((2, height, width))
    smooth = np.fft.irfft2(np.fft.rfft2(noise) * transfer, s=shape)
    return WarpField(smooth[0] * scale, smooth[1] * scale)


def degrade_frame(u: Image, k: Kernel, field: WarpField, noise_sigma: float, seed: int) -> Image:
    """Blur, then warp, then add Gaussian noise. The result is not clamped."""
    if field.shape != u.shape:
        raise ValueError("warp field does not match image")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    out = _warp_array(_convolve_array(u.data, k.taps), field.dx, field.dy)
    if noise_sigma > 0:
        out = out + noise_sigma * np.random.default_rng(seed).standard_normal(out.shape)
    return u.like(out)


def kernel_size_for(shape: tuple[int, int], size: int = DEFAULT_KERNEL_SIZE) -> int:
    """Largest odd size <= ``size`` that fits inside ``shape``."""
    limit = min(size, *shape)
    return limit if limit % 2 else limit - 1


def simulate_sequence(u: Image, p: TurbulenceParams, seed: int,
                      kernel_size: int = DEFAULT_KERNEL_SIZE) -> Sequence:
    kernel = long_exposure_kernel(p, kernel_size_for(u.shape, kernel_size))
    blurred = _convolve_array(u.data, kernel.taps)
    frames = []
    for i in range(p.num_frames):
        wf = sample_warp_field(p, u.width, u.height, derive_seed(seed, i, "warp"))
        out = _warp_array(blurred, wf.dx, wf.dy)
        if p.noise_sigma > 0:
            rng = np.random.default_rng(derive_seed(seed, i, "noise"))
            out = out + p.noise_sigma * rng.standard_normal(out.shape)
        frames.append(u.like(out))
    return Sequence(frames, p, seed=seed, kernel=kernel)


# --------------------------------------------------------------------------
# dataset builder


@dataclass
class ManifestEntry:
    scene_id: str
    L_km: float
    a: float
    b: float
    cn2: float
    seed: int
    path: str
    n_frames: int


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def write(self) -> None:
        with open(self.root / "manifest.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_COLUMNS)
            for e in self.entries:
                w.writerow([e.scene_id, _fmt(e.L_km), _fmt(e.a), _fmt(e.b), repr(e.cn2), e.seed, e.path, e.n_frames])
        meta = {"dataset_version": DATASET_VERSION, "n_sequences": len(self.entries), "warnings": self.warnings}
        (self.root / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> DatasetManifest:
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.csv"
        entries = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != MANIFEST_COLUMNS:
                raise ValueError(f"{path}: unexpected manifest header {reader.fieldnames}")
            for row in reader:
                entries.append(ManifestEntry(
                    scene_id=row["scene_id"], L_km=_number(row["L_km"]), a=_number(row["a"]),
                    b=_number(row["b"]), cn2=float(row["cn2"]), seed=int(row["seed"]),
                    path=row["path"], n_frames=int(row["n_frames"])))
        warnings = []
        meta = path.parent / "manifest.json"
        if meta.exists():
            warnings = json.loads(meta.read_text()).get("warnings", [])
        return cls(path.parent, entries, warnings)


def _fmt(v: float) -> str:
    return f"{v:g}"


def sequence_dirname(L_km: float, a: float, b: float) -> str:
    return f"L{_fmt(L_km)}km_a{_fmt(a)}_b{_fmt(b)}"


def center_crop(img: Image, size: int) -> Image:
    h = min(size, img.height)
    w = min(size, img.width)
    y0 = (img.height - h) // 2
    x0 = (img.width - w) // 2
    return img.like(img.data[y0:y0 + h, x0:x0 + w])


@dataclass(frozen=True)
class _SeqTask:
    gt_path: str
    scene_id: str
    L_km: float
    a: float
    b: float
    seed: int
    out_dir: str
    crop: int
    base: dict
    kernel_size: int


def _write_sequence(task: _SeqTask) -> str:
    gt = center_crop(load_image(task.gt_path), task.crop)
    cn2 = cn2_from_ab(task.a, task.b)
    p = TurbulenceParams.from_dict({**task.base, "path_length_m": task.L_km * 1000.0, "cn2": cn2})
    seq = simulate_sequence(gt, p, task.seed, task.kernel_size)
    out = Path(task.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_image(gt, out / GT_NAME)
    for i, frame in enumerate(seq.frames):
        save_image(frame, out / FRAME_PATTERN.format(i))
    r0 = fried_parameter(p)
    record = {
        "dataset_version": DATASET_VERSION,
        "scene_id": task.scene_id,
        "L_km": task.L_km,
        "a": task.a,
        "b": task.b,
        "cn2": cn2,
        "seed": task.seed,
        "params": p.to_dict(),
        "r0_m": None if math.isinf(r0) else r0,
        "tilt_sigma_px": tilt_sigma_px(p),
        "tilt_correlation_px": tilt_correlation_px(p),
        "kernel_size": seq.kernel.size,
        "kernel_energy": kernel_energy_fraction(p, seq.kernel.size),
    }
    (out / "params.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return task.out_dir


IMAGE_SUFFIXES = (".png", ".pgm", ".pnm")


def build_dataset(gt_dir: str | Path, grid: SweepGrid, out_dir: str | Path, master_seed: int,
                  base_params: TurbulenceParams | None = None, crop: int = 256,
                  kernel_size: int = DEFAULT_KERNEL_SIZE, workers: int = 1) -> DatasetManifest:
    """Simulate every (ground truth, grid combination) pair into ``out_dir``.

    ``base_params`` supplies the fixed optics, frame count and noise level;
    its path length and cn2 are replaced per combination.
    """
    gt_dir, out_dir = Path(gt_dir), Path(out_dir)
    base = (base_params or TurbulenceParams(1000.0, 0.0)).to_dict()
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise RuntimeError(f"output directory {out_dir} is not writable: {exc}") from exc

    manifest = DatasetManifest(out_dir)
    tasks = []
    for path in sorted(gt_dir.iterdir()):
        if path.suffix.lower() not in IMAGE_SUFFIXES or not path.is_file():
            continue
        try:
            img = load_image(path)
        except (ImageIOError, ValueError, OSError) as exc:
            msg = f"skipped {path.name}: {exc}"
            log.warning(msg)
            manifest.warnings.append(msg)
            continue
        scene_id = path.stem
        if img.height < crop or img.width < crop:
            manifest.warnings.append(f"{path.name}: smaller than {crop}x{crop}, used at {img.width}x{img.height}")
        for L_km, a, b in grid.combinations():
            seed = derive_seed(master_seed, scene_id, L_km, a, b)
            rel = f"{scene_id}/{sequence_dirname(L_km, a, b)}"
            tasks.append(_SeqTask(str(path), scene_id, L_km, a, b, seed, str(out_dir / rel), crop, base, kernel_size))
            manifest.entries.append(ManifestEntry(scene_id, L_km, a, b, cn2_from_ab(a, b), seed, rel,
                                                  base["num_frames"]))
    if not tasks and not manifest.warnings:
        raise FileNotFoundError(f"no ground-truth images found in {gt_dir}")

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_write_sequence, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    else:
        for t in tasks:
            _write_sequence(t)
    manifest.write()
    return manifest


def tree_checksums(root: str | Path) -> dict[str, str]:
    """SHA-256 of every file under ``root``, keyed by relative path."""
    root = Path(root)
    out = {}
    for dirpath, _, names in os.walk(root):
        for name in names:
            p = Path(dirpath) / name
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return dict(sorted(out.items()))
