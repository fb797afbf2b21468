import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mesostitch import geometry as G
from mesostitch import synthlab as S

SHARP = S.Camera((48, 64), blur=0.0)


def test_flat_parallel_frame_is_scaled_crop(flat_scene, ctx):
    pose = G.CameraPose(X=1.0, Y=-2.0, Z=ctx.Z_0, f_ph=ctx.f_ph)
    img = S.render_frame(flat_scene, pose, None, SHARP)
    # pinhole: object point = lateral position - pixel * pitch * Z / f_ph
    scale = SHARP.pixel_pitch * pose.Z / pose.f_ph
    xy = np.array([1.0, -2.0]) - SHARP.pixel_offsets() * scale
    assert np.allclose(img, flat_scene.color_at(xy), atol=1e-12)


def test_lateral_moves_translate_the_frame(flat_scene, ctx):
    cell = SHARP.pixel_pitch / ctx.M_0
    a = S.render_frame(flat_scene, G.CameraPose(Z=ctx.Z_0, f_ph=ctx.f_ph), None, SHARP)
    b = S.render_frame(flat_scene, G.CameraPose(X=3 * cell, Y=-2 * cell, Z=ctx.Z_0, f_ph=ctx.f_ph),
                       None, SHARP)
    # pixel p of b sees what pixel p - (X, Y) / cell of a sees (inverted image)
    assert np.allclose(b[:, :-2, 3:], a[:, 2:, :-3], atol=1e-9)


def test_plateau_parallax_matches_displacement(small_scene, ctx):
    pose = G.CameraPose(X=-1.0, Y=0.5, Z=ctx.Z_0, f_ph=ctx.f_ph)
    xy = np.array([[3.0, 2.0], [-10.0, 8.0]])
    h = small_scene.height_at(xy)
    assert h[0] == pytest.approx(0.4) and h[1] == 0.0
    px = S.project_points(xy, h, pose, None, SHARP)
    r_flat = S.pixel_to_flat(px, pose, None, SHARP)
    R = np.array([pose.X, pose.Y])
    # seen position is pushed away from the vanishing point by h / (Z - h)
    assert np.allclose(r_flat - xy, (xy - R) * (h / (pose.Z - h))[:, None], atol=1e-12)
    assert np.allclose(S.parallax_source(r_flat, pose, small_scene), xy, atol=1e-9)


def test_flat_render_ignores_parallax_switch(flat_scene, ctx):
    pose = S.make_poses(2, ctx, seed=1, positions=((0, 0), (2.0, 1.0)))[1]
    a = S.render_frame(flat_scene, pose, None, SHARP, parallax=True)
    b = S.render_frame(flat_scene, pose, None, SHARP, parallax=False)
    assert np.array_equal(a, b)


def test_card_phantom_heights():
    scene = S.make_phantom(S.card_spec())
    got = sorted(round(v * 1000) for k, v in scene.region_heights.items() if k > 0)
    assert got == [295, 350, 420, 485, 555, 625]
    for k, h in scene.region_heights.items():
        assert np.all(scene.height[scene.labels == k] == h)
    assert set(np.unique(scene.labels)) == set(range(7))


def test_empty_spec_is_flat():
    scene = S.make_phantom(S.PhantomSpec(extent=(-10, 10, -8, 8)))
    assert np.all(scene.height == 0) and np.all(scene.labels == 0)
    assert scene.region_heights == {0: 0.0}


def test_overlap_rejected():
    spec = S.PhantomSpec([S.Plateau(0, 0, 4, 4, 100), S.Plateau(3, 0, 4, 4, 200)],
                         extent=(-10, 10, -10, 10))
    with pytest.raises(S.OverlapError):
        S.make_phantom(spec)
    with pytest.raises(S.SynthError):
        S.PhantomSpec([S.Plateau(9, 0, 4, 4, 100)], extent=(-10, 10, -10, 10)).validate()


def test_footprint_exceeds_scene(small_scene, ctx):
    with pytest.raises(S.FootprintExceedsScene):
        S.render_frame(small_scene, G.CameraPose(X=28.0, Z=ctx.Z_0, f_ph=ctx.f_ph))


def test_noise_is_seeded(flat_scene, ctx):
    pose = G.CameraPose(Z=ctx.Z_0, f_ph=ctx.f_ph)
    a = S.render_frame(flat_scene, pose, None, SHARP, noise=0.01, rng=np.random.default_rng(1))
    b = S.render_frame(flat_scene, pose, None, SHARP, noise=0.01, rng=np.random.default_rng(1))
    assert np.array_equal(a, b)
    clean = S.render_frame(flat_scene, pose, None, SHARP)
    assert np.std(a - clean) == pytest.approx(0.01, rel=0.1)


def test_barrel_profile_normalized():
    prof = S.barrel_profile((189, 252))
    m = prof.magnification_at(np.linspace(0, prof.max_radius, 50))
    assert m.max() == pytest.approx(1.0) and np.all(np.diff(m) >= 0)


def test_dataset_round_trip(tmp_path, small_scene, ctx):
    und = S.barrel_profile((40, 48), center=(1.0, -0.5))
    seq = S.make_sequence(small_scene, 3, und, S.Camera((40, 48)), ctx, seed=4, spread=0.2)
    S.save_dataset(seq, tmp_path)
    gt = S.load_ground_truth(tmp_path)
    assert len(gt.poses) == 3 and gt.region_heights == small_scene.region_heights
    assert np.array_equal(gt.labels, small_scene.labels)
    for a, b in zip(gt.poses, seq.poses):
        assert (a.X, a.Y, a.Z, a.theta) == (b.X, b.Y, b.Z, b.theta)
    assert np.allclose(gt.undist.magnification_at([0.0, 10.0]), und.magnification_at([0.0, 10.0]))


# -- evaluation -------------------------------------------------------------------------

def _regions(shape=(60, 80)):
    rm = np.zeros(shape, dtype=np.int32)
    rows, cols = shape
    w = cols // 3
    for k in range(1, 4):
        rm[rows // 6:rows // 2, w * (k - 1) + 2:w * k - 2] = k
    truth = {0: 0.0, 1: 0.295, 2: 0.42, 3: 0.625}
    h = np.vectorize(truth.get)(rm).astype(float)
    return rm, truth, h


def test_shifted_estimate_scores_zero():
    rm, truth, h = _regions()
    ev = S.evaluate_heights(h + 0.4, rm, truth)
    assert np.allclose(ev.accuracy, 0, atol=1e-12) and np.allclose(ev.precision, 0, atol=1e-12)
    assert ev.shift == pytest.approx(-0.4)


def test_half_scale_rescale_is_two():
    rm, truth, h = _regions()
    assert S.evaluate_heights(0.5 * h, rm, truth).rescale == pytest.approx(2.0)


def test_noise_precision_oracle():
    rm, truth, h = _regions((400, 400))
    noise = np.random.default_rng(0).normal(0, 0.030, h.shape)
    ev = S.evaluate_heights(h + noise, rm, truth)
    # sample-statistics oracle: per-region stdev of the injected noise itself
    expect = [noise[rm == k].std() for k in sorted(truth)]
    assert np.allclose(ev.precision, expect, rtol=1e-9)
    assert np.allclose(ev.precision, 0.030, rtol=0.05)


def test_nan_cells_and_empty_region():
    rm, truth, h = _regions()
    h[rm == 1] = np.nan
    with pytest.raises(S.EmptyRegion):
        S.evaluate_heights(h, rm, truth)


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 5))
def test_evaluation_shift_invariant(c):
    rm, truth, h = _regions()
    h = h + np.random.default_rng(2).normal(0, 0.02, h.shape)
    a = S.evaluate_heights(h, rm, truth)
    b = S.evaluate_heights(h + c, rm, truth)
    assert np.allclose(a.accuracy, b.accuracy, atol=1e-9)
    assert np.allclose(a.precision, b.precision, atol=1e-9)


def test_region_labels_on_grid():
    from mesostitch.fileio import HeightMap
    labels = np.zeros((20, 20), dtype=np.int32)
    labels[5:15, 5:15] = 1
    hm = HeightMap(np.zeros((10, 10)), 0.2, (0.0, 0.0))
    rm = S.region_labels_on(hm, labels, 0.1, (0.0, 0.0))
    assert rm[5, 5] == 1 and rm[0, 0] == 0
    eroded = S.region_labels_on(hm, labels, 0.1, (0.0, 0.0), erode=0.2)
    assert eroded[3, 3] == -1 and eroded[5, 5] == 1
