from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage as ndi

from conftest import blob_image, card_image
from turbench import _tv
from turbench.evalproto import psnr
from turbench.imgcore import Image, Sequence, WarpField, warp_image
from turbench.stabilize import (
    FlowOptions,
    Regularizer,
    StabilizerKind,
    StabilizerSpec,
    estimate_flow,
    mao_gilles,
    mao_gilles_run,
    nltv_weights,
    stabilize,
    temporal_mean,
    temporal_median,
)
from turbench.stabilize.flow import _median
from turbench.turbsim import TurbulenceParams


def make_seq(frames) -> Sequence:
    frames = [f if isinstance(f, Image) else Image(f) for f in frames]
    return Sequence(frames, TurbulenceParams(1000.0, 0.0, num_frames=len(frames)))


def shifted(img: Image, dx: float, dy: float) -> Image:
    """frame(x) = img(x - d): content moved by (dx, dy)."""
    h, w = img.shape
    return warp_image(img, WarpField(np.full((h, w), -dx), np.full((h, w), -dy)))


def block_search(ref: np.ndarray, frame: np.ndarray, y: int, x: int, half: int = 4, reach: int = 4):
    """Integer displacement d minimising the SSD between frame at x+d and ref at x."""
    best, best_d = np.inf, (0, 0)
    patch = ref[y - half:y + half + 1, x - half:x + half + 1]
    for dy in range(-reach, reach + 1):
        for dx in range(-reach, reach + 1):
            cand = frame[y + dy - half:y + dy + half + 1, x + dx - half:x + dx + half + 1]
            ssd = float(((cand - patch) ** 2).sum())
            if ssd < best:
                best, best_d = ssd, (dx, dy)
    return best_d


# -- temporal references ----------------------------------------------------

def test_mean_of_identical_and_two_point():
    f = blob_image(16, 16)
    assert np.array_equal(temporal_mean(make_seq([f, f, f])).data, f.data)
    out = temporal_mean(make_seq([np.zeros((8, 8)), np.full((8, 8), 2.0)]))
    assert np.array_equal(out.data, np.ones((8, 8)))


def test_mean_noise_averaging(rng):
    gt = blob_image(64, 64, seed=3)
    frames = [gt.data + rng.normal(0, 5, gt.shape) for _ in range(50)]
    resid = temporal_mean(make_seq(frames)).data - gt.data
    assert abs(resid.std() - 5 / np.sqrt(50)) < 0.15 * 5 / np.sqrt(50)


def test_median_cases():
    c = np.full((8, 8), 7.0)
    assert np.array_equal(temporal_median(make_seq([c, c, c])).data, c)
    out = temporal_median(make_seq([np.zeros((8, 8)), np.ones((8, 8)), np.full((8, 8), 100.0)]))
    assert np.all(out.data == 1.0)
    lower = temporal_median(make_seq([np.full((8, 8), v) for v in (4.0, 1.0, 3.0, 2.0)]))
    assert np.all(lower.data == 2.0)


def test_median_rejects_outlier_frames(rng):
    gt = blob_image(32, 32, seed=1)
    frames = []
    for i in range(20):
        f = gt.data + rng.normal(0, 2, gt.shape)
        if i % 10 == 0:
            f = np.where(rng.uniform(size=gt.shape) < 0.5, 0.0, 255.0)
        frames.append(f)
    seq = make_seq(frames)
    assert psnr(gt, temporal_median(seq)) > psnr(gt, temporal_mean(seq))


def test_empty_sequence_rejected():
    with pytest.raises(ValueError):
        make_seq([])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 7))
def test_temporal_references_are_permutation_invariant(seed, n):
    rng = np.random.default_rng(seed)
    frames = [rng.uniform(0, 255, (8, 9)) for _ in range(n)]
    perm = [frames[i] for i in rng.permutation(n)]
    assert np.allclose(temporal_mean(make_seq(frames)).data, temporal_mean(make_seq(perm)).data, atol=1e-12)
    assert np.array_equal(temporal_median(make_seq(frames)).data, temporal_median(make_seq(perm)).data)


# -- optical flow -------------------------------------------------------------

@pytest.mark.parametrize("method", ["lk", "tvl1"])
def test_null_motion(method):
    f = blob_image(48, 48, seed=5)
    wf = estimate_flow(f, f, FlowOptions(method=method))
    assert wf.magnitude().max() < 0.05


@pytest.mark.parametrize("method", ["lk", "tvl1"])
def test_translation_recovery(method):
    ref = blob_image(64, 64, seed=7, n_blobs=20)
    frame = shifted(ref, 2.0, 1.0)
    wf = estimate_flow(ref, frame, FlowOptions(method=method))
    inner = (slice(12, -12), slice(12, -12))
    epe = np.hypot(wf.dx[inner] - 2.0, wf.dy[inner] - 1.0)
    assert epe.mean() < 0.25


def test_lk_agrees_with_block_search():
    ref = blob_image(64, 64, seed=8, n_blobs=25)
    frame = shifted(ref, 2.0, 1.0)
    wf = estimate_flow(ref, frame)
    for y in range(16, 48, 6):
        for x in range(16, 48, 6):
            bx, by = block_search(ref.data, frame.data, y, x)
            assert abs(wf.dx[y, x] - bx) <= 0.5 and abs(wf.dy[y, x] - by) <= 0.5


def test_flow_options_validation():
    with pytest.raises(ValueError):
        FlowOptions(lk_window=6)
    with pytest.raises(ValueError):
        FlowOptions(pyramid_levels=0)
    with pytest.raises(ValueError):
        estimate_flow(Image(np.zeros((8, 8))), Image(np.zeros((9, 8))))


# -- Mao-Gilles ---------------------------------------------------------------

def mg_spec(**kw) -> StabilizerSpec:
    return StabilizerSpec(kind=StabilizerKind.MAO_GILLES, **kw)


def test_identical_frames_are_a_fixed_point():
    f = card_image(32, 32)
    out = mao_gilles(make_seq([f] * 4), mg_spec(fusion_mu=1e-6, outer_iterations=2))
    assert np.max(np.abs(out.data - f.data)) < 0.5


def test_rigid_shifts_are_undone():
    card = card_image(64, 64)
    rng = np.random.default_rng(21)
    frames = [shifted(card, *rng.integers(-2, 3, size=2)) for _ in range(10)]
    seq = make_seq(frames)
    out = mao_gilles(seq, mg_spec(outer_iterations=5, fusion_mu=1.0))
    inner = (slice(4, -4), slice(4, -4))
    crop = lambda im: Image(im.data[inner])  # noqa: E731
    assert psnr(crop(card), crop(out)) >= psnr(crop(card), crop(temporal_mean(seq))) + 1.0


def test_huge_mu_flattens_output():
    card = card_image(32, 32)
    seq = make_seq([card, shifted(card, 1, 0), shifted(card, 0, 1)])
    out = mao_gilles(seq, mg_spec(fusion_mu=1e6, outer_iterations=1))
    assert _tv.tv(out.data) < 0.01 * _tv.tv(card.data)


@pytest.mark.parametrize("reg,flow", [("tv", "lk"), ("tv", "tvl1"), ("nltv", "lk")])
def test_fusion_objective_descends(reg, flow):
    rng = np.random.default_rng(3)
    card = blob_image(40, 40, seed=2, n_blobs=15)
    frames = [Image(shifted(card, *rng.normal(0, 0.8, 2)).data + rng.normal(0, 2, card.shape)) for _ in range(5)]
    res = mao_gilles_run(make_seq(frames), mg_spec(regularizer=reg, flow=FlowOptions(method=flow),
                                                   outer_iterations=3))
    assert len(res.objectives) == 3
    for before, after in res.objectives:
        assert after <= before


def test_integer_shift_equivariance():
    rng = np.random.default_rng(9)
    base = blob_image(48, 48, seed=6, n_blobs=20)
    frames = [shifted(base, *rng.normal(0, 0.7, 2)) for _ in range(4)]
    seq = make_seq(frames)
    moved = make_seq([Image(np.roll(f.data, (2, 3), axis=(0, 1))) for f in frames])
    spec = mg_spec(outer_iterations=2)
    a = np.roll(mao_gilles(seq, spec).data, (2, 3), axis=(0, 1))
    b = mao_gilles(moved, spec).data
    inner = (slice(10, -10), slice(10, -10))
    assert np.max(np.abs(a[inner] - b[inner])) < 1.0


def test_stabilize_dispatch_and_labels():
    f = blob_image(16, 16)
    seq = make_seq([f, f])
    assert np.array_equal(stabilize(seq, StabilizerSpec()).data, f.data)
    assert np.array_equal(stabilize(seq, StabilizerSpec(kind="median")).data, f.data)
    assert StabilizerSpec().label == "Temporal_Average"
    assert mg_spec(regularizer=Regularizer.NLTV, flow=FlowOptions(method="tvl1")).label == "NLTV-TVL1"
    with pytest.raises(ValueError):
        mao_gilles(make_seq([f]))
    with pytest.raises(ValueError):
        StabilizerSpec(fusion_mu=0)
    with pytest.raises(ValueError):
        StabilizerSpec(nltv_patch=11, nltv_search=11)


# -- non-local weights -------------------------------------------------------

def test_constant_image_gives_uniform_weights():
    g = nltv_weights(Image(np.full((16, 16), 5.0)), mg_spec())
    assert np.allclose(g.weights, 1.0 / 10)


def test_stripe_neighbours_lie_on_period():
    period = 4
    xx = np.tile(np.arange(24), (24, 1))
    stripes = Image(np.where(xx % period < 2, 200.0, 20.0))
    g = nltv_weights(stripes, mg_spec(nltv_neighbors=4))
    yy, xs = np.mgrid[0:24, 0:24]
    inner = (slice(8, -8), slice(8, -8))
    offsets = (g.xs - xs[..., None])[inner]
    assert np.all(offsets % period == 0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_weight_rows_are_stochastic(seed):
    img = Image(np.random.default_rng(seed).uniform(0, 255, (12, 12)))
    g = nltv_weights(img, mg_spec(nltv_patch=3, nltv_search=7, nltv_neighbors=5))
    assert np.allclose(g.weights.sum(axis=2), 1.0, atol=1e-9)
    assert np.all(g.weights >= 0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), h=st.integers(1, 12), w=st.integers(1, 12))
def test_fast_median_matches_scipy(seed, h, w):
    a = np.random.default_rng(seed).normal(size=(h, w))
    assert np.array_equal(_median(a), ndi.median_filter(a, 5, mode="nearest"))
