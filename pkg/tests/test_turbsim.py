from __future__ import annotations

import json
import math
import os
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import blob_image
from turbench.imgcore import FRAME_PATTERN, GT_NAME, Image, WarpField, convolve_fft, load_sequence, save_image
from turbench.turbsim import (
    NO_TURBULENCE,
    DatasetManifest,
    Kernel,
    SweepGrid,
    TurbulenceParams,
    build_dataset,
    cn2_from_ab,
    degrade_frame,
    derive_seed,
    fried_parameter,
    long_exposure_kernel,
    sample_warp_field,
    simulate_sequence,
    tilt_sigma_px,
    tree_checksums,
)


def fried_oracle(wavelength: str, cn2: str, L: str) -> float:
    """r0 = (0.423 k^2 cn2 L)^(-3/5) in 50-digit decimal arithmetic."""
    getcontext().prec = 50
    pi = Decimal("3.14159265358979323846264338327950288419716939937510")
    k = 2 * pi / Decimal(wavelength)
    x = Decimal("0.423") * k * k * Decimal(cn2) * Decimal(L)
    return float((x.ln() * Decimal(-3) / Decimal(5)).exp())


def test_params_validation():
    with pytest.raises(ValueError):
        TurbulenceParams(0.0, 1e-15)
    with pytest.raises(ValueError):
        TurbulenceParams(1000.0, -1e-15)
    with pytest.raises(ValueError):
        TurbulenceParams(1000.0, 1e-15, num_frames=0)
    p = TurbulenceParams(1000.0, 1e-15)
    assert TurbulenceParams.from_dict(p.to_dict()) == p


def test_cn2_interpretation():
    assert cn2_from_ab(5, 15) == 5e-15
    assert cn2_from_ab(1, 17) == 1e-17
    assert cn2_from_ab(9, 14) == 9e-14


def test_fried_parameter_matches_high_precision_oracle():
    p = TurbulenceParams(2000.0, 1e-15)
    r0 = fried_parameter(p)
    assert r0 == pytest.approx(fried_oracle("0.525e-6", "1e-15", "2000"), rel=1e-13)
    assert r0 == pytest.approx(0.056, abs=0.001)
    assert fried_parameter(TurbulenceParams(1000.0, 0.0)) == NO_TURBULENCE


@settings(max_examples=50, deadline=None)
@given(L=st.floats(10.0, 1e5), cn2=st.floats(1e-18, 1e-12))
def test_fried_scaling_with_distance(L, cn2):
    ratio = fried_parameter(TurbulenceParams(2 * L, cn2)) / fried_parameter(TurbulenceParams(L, cn2))
    assert abs(ratio - 2 ** (-0.6)) < 1e-12


def test_kernel_normalisation_across_default_grid():
    for L, a, b in SweepGrid().combinations():
        k = long_exposure_kernel(TurbulenceParams(L * 1000.0, cn2_from_ab(a, b)))
        assert abs(k.taps.sum() - 1.0) < 1e-6
        assert k.taps.min() >= -1e-12


def test_kernel_spread_is_monotone_over_default_grid():
    grid = SweepGrid()
    m = {}
    for L, a, b in grid.combinations():
        m[(L, cn2_from_ab(a, b))] = long_exposure_kernel(TurbulenceParams(L * 1000.0, cn2_from_ab(a, b))).second_moment()
    cn2s = sorted({c for _, c in m})
    for L in grid.distances_km:
        vals = [m[(L, c)] for c in cn2s]
        assert all(y >= x for x, y in zip(vals, vals[1:])), f"not monotone in cn2 at L={L}"
    for c in cn2s:
        vals = [m[(L, c)] for L in sorted(grid.distances_km)]
        assert all(y >= x for x, y in zip(vals, vals[1:])), f"not monotone in L at cn2={c}"


def test_strong_kernel_is_wider_than_weak():
    strong = long_exposure_kernel(TurbulenceParams(4000.0, 9e-14))
    weak = long_exposure_kernel(TurbulenceParams(1000.0, 1e-17))
    assert strong.second_moment() > weak.second_moment()


def test_no_turbulence_kernel_is_diffraction_only():
    k0 = long_exposure_kernel(TurbulenceParams(1000.0, 0.0))
    assert abs(k0.taps.sum() - 1) < 1e-6
    # a huge r0 leaves only the aperture term
    k_big = long_exposure_kernel(TurbulenceParams(1000.0, 1e-15), r0=1e9)
    assert np.allclose(k0.taps, k_big.taps, atol=1e-12)


def test_kernel_size_errors():
    with pytest.raises(ValueError):
        long_exposure_kernel(TurbulenceParams(1000.0, 1e-15), size=30)
    with pytest.raises(ValueError):
        Kernel(np.ones((3, 3)))


def test_warp_field_zero_without_turbulence():
    wf = sample_warp_field(TurbulenceParams(1000.0, 0.0), 16, 16, 3)
    assert not np.any(wf.dx) and not np.any(wf.dy)


def test_warp_field_is_seeded():
    p = TurbulenceParams(2000.0, 5e-15)
    a = sample_warp_field(p, 32, 24, 99)
    b = sample_warp_field(p, 32, 24, 99)
    assert np.array_equal(a.dx, b.dx) and np.array_equal(a.dy, b.dy)
    with pytest.raises(ValueError):
        sample_warp_field(p, 4, 24, 99)


def test_warp_field_moments_monte_carlo():
    p = TurbulenceParams(2000.0, 5e-15)
    sigma = tilt_sigma_px(p)
    samples = np.array([sample_warp_field(p, 32, 32, derive_seed("mc", i)).dx[16, 16] for i in range(10_000)])
    assert abs(samples.mean()) < 4 * sigma / 100
    assert abs(samples.std() - sigma) < 0.05 * sigma


def test_tilt_is_capped():
    assert tilt_sigma_px(TurbulenceParams(4000.0, 1e-12)) == 8.0


def test_degrade_identity_and_noise():
    u = blob_image(32, 32)
    out = degrade_frame(u, Kernel.delta(1), WarpField.zeros(32, 32), 0.0, 1)
    assert np.array_equal(out.data, u.data)

    flat = Image(np.full((256, 256), 100.0))
    noisy = degrade_frame(flat, Kernel.delta(1), WarpField.zeros(256, 256), 2.0, 7)
    assert abs(noisy.data.std() - 2.0) < 0.1
    again = degrade_frame(flat, Kernel.delta(1), WarpField.zeros(256, 256), 2.0, 7)
    assert np.array_equal(noisy.data, again.data)


def test_degrade_preserves_mean_intensity():
    u = blob_image(128, 128, seed=4)
    p = TurbulenceParams(3000.0, 5e-15)
    out = degrade_frame(u, long_exposure_kernel(p), sample_warp_field(p, 128, 128, 5), 0.0, 0)
    assert abs(out.data.mean() - u.data.mean()) < 0.005 * u.data.mean()


def test_simulate_sequence_properties():
    u = blob_image(64, 64, seed=2)
    one = simulate_sequence(u, TurbulenceParams(1000.0, 0.0, num_frames=1), seed=3)
    expect = long_exposure_kernel(TurbulenceParams(1000.0, 0.0))
    assert len(one) == 1
    assert np.allclose(one.frames[0].data, convolve_fft(u, expect).data, atol=1e-9)

    p = TurbulenceParams(2000.0, 5e-15, num_frames=3)
    a = simulate_sequence(u, p, seed=11)
    b = simulate_sequence(u, p, seed=11)
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a.frames, b.frames))
    w0 = sample_warp_field(p, 64, 64, derive_seed(11, 0, "warp"))
    w1 = sample_warp_field(p, 64, 64, derive_seed(11, 1, "warp"))
    assert np.mean(np.abs(w0.dx - w1.dx) > 1e-6) >= 0.01


def test_sweep_grid():
    assert len(SweepGrid()) == 80 and len(SweepGrid().combinations()) == 80
    g = SweepGrid.parse("L=1,2;b=15")
    assert g.distances_km == (1, 2) and g.a_values == (1, 3, 5, 7, 9) and g.b_values == (15,)
    with pytest.raises(ValueError):
        SweepGrid.parse("x=1")
    with pytest.raises(ValueError):
        SweepGrid(distances_km=())


def test_minimal_dataset_and_rebuild(tmp_path):
    gt_dir = tmp_path / "gt"
    gt_dir.mkdir()
    save_image(blob_image(80, 96, seed=1), gt_dir / "scene.png")
    (gt_dir / "broken.png").write_bytes(b"\x89PNG not really")
    grid = SweepGrid((2,), (5,), (15,))
    base = TurbulenceParams(1000.0, 0.0, num_frames=50)

    m1 = build_dataset(gt_dir, grid, tmp_path / "d1", 42, base, crop=64)
    assert len(m1.entries) == 1
    assert any("broken.png" in w for w in m1.warnings)
    seq_dir = tmp_path / "d1" / m1.entries[0].path
    files = sorted(os.listdir(seq_dir))
    assert GT_NAME in files and "params.json" in files
    assert sum(f.startswith("frame_") for f in files) == 50
    assert FRAME_PATTERN.format(49) in files
    meta = json.loads((seq_dir / "params.json").read_text())
    assert meta["cn2"] == 5e-15 and meta["params"]["num_frames"] == 50
    seq, gt, _ = load_sequence(seq_dir)
    assert gt.shape == (64, 64) and len(seq) == 50

    build_dataset(gt_dir, grid, tmp_path / "d2", 42, base, crop=64)
    assert tree_checksums(tmp_path / "d1") == tree_checksums(tmp_path / "d2")
    build_dataset(gt_dir, grid, tmp_path / "d3", 43, base, crop=64)
    assert tree_checksums(tmp_path / "d1") != tree_checksums(tmp_path / "d3")

    back = DatasetManifest.read(tmp_path / "d1")
    assert back.entries == m1.entries


def test_parallel_build_matches_serial(tmp_path):
    gt_dir = tmp_path / "gt"
    gt_dir.mkdir()
    for i in range(2):
        save_image(blob_image(48, 48, seed=i), gt_dir / f"s{i}.png")
    grid = SweepGrid((1, 3), (1,), (14, 16))
    base = TurbulenceParams(1000.0, 0.0, num_frames=3, noise_sigma=1.0)
    build_dataset(gt_dir, grid, tmp_path / "serial", 5, base, crop=48)
    build_dataset(gt_dir, grid, tmp_path / "par", 5, base, crop=48, workers=3)
    assert tree_checksums(tmp_path / "serial") == tree_checksums(tmp_path / "par")


def test_unwritable_output_is_fatal(tmp_path):
    gt_dir = tmp_path / "gt"
    gt_dir.mkdir()
    save_image(blob_image(32, 32), gt_dir / "s.png")
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(RuntimeError):
        build_dataset(gt_dir, SweepGrid((1,), (1,), (15,)), blocker / "out", 1, crop=32)


def test_seed_derivation_is_stable():
    # pinned value: changing the mix invalidates published datasets
    assert derive_seed(0, "camera", 1, 1, 14) == 5333878036457758669
    assert derive_seed(0, "camera", 1, 1, 14) != derive_seed(0, "camera", 1, 1, 15)
    assert 0 <= derive_seed("x") < 2**64
    assert math.isfinite(float(derive_seed(1)))
