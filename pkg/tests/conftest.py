from __future__ import annotations

import numpy as np
import pytest

from turbench.imgcore import Image, save_image


def blob_image(h: int = 64, w: int = 64, seed: int = 0, n_blobs: int = 12, dyn: float = 255.0) -> Image:
    """Smooth random test image: a sum of Gaussian blobs on a gray background."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.full((h, w), 0.3 * dyn)
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        s = rng.uniform(2.0, 6.0)
        amp = rng.uniform(-0.3, 0.5) * dyn
        out += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return Image(np.clip(out, 0, dyn), dyn)


def card_image(h: int = 64, w: int = 64) -> Image:
    """Bars, a disc and a ramp: sharp edges in every direction."""
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.full((h, w), 60.0)
    out[(xx // 6) % 2 == 0] += 80.0
    out[(yy - h / 2) ** 2 + (xx - w / 2) ** 2 < (min(h, w) / 5) ** 2] = 220.0
    out[: h // 6] = np.linspace(0, 255, w)[None, :]
    return Image(out)


def scene_images(size: int = 256) -> dict[str, np.ndarray]:
    """Four natural grayscale scenes from scikit-image, centre-cropped."""
    from skimage import color, data

    raw = {
        "astronaut": color.rgb2gray(data.astronaut()) * 255.0,
        "brick": data.brick().astype(float),
        "camera": data.camera().astype(float),
        "coins": data.coins().astype(float),
    }
    out = {}
    for name, arr in raw.items():
        h, w = arr.shape
        y0, x0 = (h - size) // 2, (w - size) // 2
        out[name] = np.rint(arr[y0:y0 + size, x0:x0 + size])
    return out


def write_scenes(directory, scenes: dict[str, np.ndarray]) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for name, arr in scenes.items():
        save_image(Image(arr), directory / f"{name}.png")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_dataset(root, grid: str = "L=1;a=5;b=15", frames: int = 4, size: int = 48, scenes: int = 1,
                  noise: float = 0.0, seed: int = 3):
    """Build a tiny simulated dataset under ``root`` and return its manifest."""
    from turbench.turbsim import SweepGrid, TurbulenceParams, build_dataset

    gt_dir = root / "gt"
    gt_dir.mkdir(parents=True, exist_ok=True)
    for i in range(scenes):
        save_image(blob_image(size, size, seed=10 + i, n_blobs=15), gt_dir / f"scene{i}.png")
    base = TurbulenceParams(1000.0, 0.0, num_frames=frames, noise_sigma=noise)
    return build_dataset(gt_dir, SweepGrid.parse(grid), root / "data", seed, base, crop=size, kernel_size=15)


# PASS/FAIL lines from the acceptance suite, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
