import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xlris_track import channel_sim as cs
from xlris_track import features as ft
from xlris_track import tensor_nn as tn


@pytest.fixture(scope="module")
def geom():
    return cs.build_geometry(10, 10, 4, 4)


def plane_wave(geom, theta, phi):
    k = 2 * np.pi / geom.wavelength
    rel = geom.ris_elements - geom.ris_center
    return np.exp(1j * k * (rel @ geom.ris_row_axis * np.cos(theta)
                            + rel @ geom.ris_col_axis * np.sin(theta) * np.cos(phi)))


# ---- preprocess / CNN ----

def test_preprocess_ris_layout():
    rng = np.random.default_rng(0)
    y = rng.normal(size=100) + 1j * rng.normal(size=100)
    t = ft.preprocess_ris(y, 10, 10)
    assert t.shape == (2, 10, 10)
    np.testing.assert_array_equal((t.data[0] + 1j * t.data[1]).reshape(-1), y)
    assert np.all(ft.preprocess_ris(1j * np.ones(100), 10, 10).data[0] == 0)
    with pytest.raises(tn.ShapeError):
        ft.preprocess_ris(np.zeros(99, complex), 10, 10)


def test_cnn_output_length_and_zero_input():
    cfg = ft.CNNConfig(n_f=12)
    model = ft.init_cnn(cfg, 0)
    rng = np.random.default_rng(1)
    assert ft.cnn_features(rng.normal(size=(2, 10, 10)), model).shape == (12,)
    for w, b in model.convs:
        b.data[:] = 0
    model.dense_b.data[:] = 0
    assert np.all(ft.cnn_features(np.zeros((2, 10, 10)), model).data == 0)


def test_cnn_composition_oracle():
    model = ft.init_cnn(ft.CNNConfig(), 2)
    x = np.random.default_rng(3).normal(size=(2, 10, 10))
    h = x
    for w, b in model.convs:
        h = tn.conv2d(h, w.data, b.data, padding=1).data
        h = np.maximum(h, 0)
        c, hh, ww = h.shape
        h = h[:, :hh // 2 * 2, :ww // 2 * 2].reshape(c, hh // 2, 2, ww // 2, 2).max(axis=(2, 4))
    want = model.dense_w.data @ h.reshape(-1) + model.dense_b.data
    np.testing.assert_allclose(ft.cnn_features(x, model).data, want, atol=1e-12)


def test_cnn_small_grids():
    for rows, cols in [(4, 4), (16, 16)]:
        model = ft.init_cnn(ft.CNNConfig(rows=rows, cols=cols), 0)
        assert ft.cnn_features(np.zeros((3, 2, rows, cols)), model).shape == (3, 32)
    with pytest.raises(tn.ShapeError):
        ft.CNNConfig(rows=2, cols=2).flat_size


def test_cnn_pretraining_reduces_loss():
    rng = np.random.default_rng(4)
    pos = rng.uniform(0, 1, (256, 3))
    sig = np.exp(1j * np.outer(pos[:, 0] * 3 + pos[:, 1], np.arange(16))) * (1 + pos[:, 2:3])
    _, curve = ft.pretrain_cnn(sig, pos, ft.CNNConfig(rows=4, cols=4, n_f=8),
                               ft.CNNHyper(epochs=15, batch_size=32, lr=3e-3), seed=0)
    assert curve[-1][1] < 0.5 * curve[0][1]


# ---- normalization and spectra ----

def test_normalize_examples():
    np.testing.assert_array_equal(ft.normalize_signal([0, 5, 10]), [0, 0.5, 1])
    np.testing.assert_array_equal(ft.normalize_signal([3, 3, 3]), [0, 0, 0])
    with pytest.raises(ValueError):
        ft.normalize_signal([])


@settings(max_examples=100)
@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(-50, 50))
def test_normalize_positive_affine_invariance(seed, a, c):
    v = np.random.default_rng(seed).normal(size=20)
    np.testing.assert_allclose(ft.normalize_signal(a * v + c), ft.normalize_signal(v), atol=1e-9)


def test_impulse_gives_maximum_entropy():
    x = np.zeros(32, complex)
    x[3] = 2.0
    feats, degenerate = ft.tf_features(x)
    assert not degenerate
    assert feats[3] == pytest.approx(math.log(32), abs=1e-12)


def test_single_tone_gives_zero_entropy():
    n = 32
    tone = np.exp(2j * np.pi * 5 * np.arange(n) / n)
    energy, entropy, p, degenerate = ft.spectral_stats(tone)
    assert not degenerate and entropy == pytest.approx(0.0, abs=1e-12)
    assert p.argmax() == 5 and p.sum() == pytest.approx(1.0, abs=1e-12)
    # its magnitude is flat, so the normalized sequence is all zeros
    feats, degenerate = ft.tf_features(tone)
    assert degenerate and feats[3] == 0.0


def test_parseval_unnormalized_fft():
    v = ft.normalize_signal(np.abs(np.random.default_rng(5).normal(size=100)))
    energy, *_ = ft.spectral_stats(v)
    assert energy == pytest.approx(100 * np.sum(v ** 2), rel=1e-9)


@settings(max_examples=200)
@given(st.integers(0, 100_000), st.integers(2, 64))
def test_entropy_bounds_and_mass(seed, n):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=n) + 1j * rng.normal(size=n)
    feats, degenerate = ft.tf_features(y)
    assert 0.0 <= feats[3] <= math.log(n) + 1e-12
    assert feats[2] >= 0
    if not degenerate:
        _, _, p, _ = ft.spectral_stats(ft.normalize_signal(np.abs(y)))
        assert abs(p.sum() - 1) < 1e-12


def test_tf_batched_matches_single():
    y = np.random.default_rng(6).normal(size=(4, 10)) + 0j
    batch, _ = ft.tf_features(y)
    for i in range(4):
        np.testing.assert_array_equal(batch[i], ft.tf_features(y[i])[0])


# ---- sub-arrays ----

def test_partition_2x2(geom):
    subs = ft.partition_subarrays(geom, 2, 2)
    assert len(subs) == 4 and all(s.rows == 5 and s.cols == 5 for s in subs)
    np.testing.assert_array_equal(subs[0].elements[:6], [0, 1, 2, 3, 4, 10])
    np.testing.assert_array_equal(subs[3].elements[0], 55)


def test_partition_single(geom):
    (sub,) = ft.partition_subarrays(geom, 1, 1)
    np.testing.assert_array_equal(sub.elements, np.arange(100))


def test_partition_not_divisible(geom):
    with pytest.raises(ValueError):
        ft.partition_subarrays(geom, 3, 2)


@settings(max_examples=40, deadline=None)
@given(st.sampled_from([1, 2, 3, 4, 6]), st.sampled_from([1, 2, 3, 4, 6]),
       st.integers(1, 3), st.integers(1, 3))
def test_partition_is_set_partition(r, c, mr, mc):
    g = cs.build_geometry(r * mr, c * mc, 1, 1)
    subs = ft.partition_subarrays(g, mr, mc)
    allidx = np.concatenate([s.elements for s in subs])
    assert sorted(allidx) == list(range(g.n_elements))


# ---- snapshots and covariance ----

def test_noise_free_constant_pilot_columns_identical(geom):
    sub = ft.partition_subarrays(geom, 2, 2)[1]
    y = plane_wave(geom, 1.0, 2.0)
    x = ft.subarray_snapshots(y, sub, 8, 0.0, 0, pilot_mode="constant", preprocess=False)
    assert x.shape == (25, 8)
    assert np.all(x == x[:, :1])
    np.testing.assert_array_equal(ft.covariance(x), 0)


def test_snapshot_rank_bound(geom):
    sub = ft.partition_subarrays(geom, 2, 2)[0]
    x = ft.subarray_snapshots(plane_wave(geom, 1.0, 1.0), sub, 3, 0.5, 1)
    assert np.linalg.matrix_rank(ft.covariance(x), tol=1e-10) <= 3


def test_snapshot_preconditions(geom):
    sub = ft.partition_subarrays(geom, 2, 2)[0]
    with pytest.raises(ValueError):
        ft.subarray_snapshots(plane_wave(geom, 1, 1), sub, 1, 0.1, 0)


def test_covariance_monte_carlo(geom):
    sub = ft.partition_subarrays(geom, 2, 2)[2]
    y = plane_wave(geom, 1.2, 1.9)
    var = 0.3
    x = ft.subarray_snapshots(y, sub, 10_000, var, 7, preprocess=False)
    a = y[sub.elements]
    model = np.outer(a, a.conj()) + var * np.eye(25)
    r = ft.covariance(x)
    assert np.linalg.norm(r - model) / np.linalg.norm(model) < 0.05


def test_covariance_two_point_hand_case():
    rng = np.random.default_rng(8)
    v, m = rng.normal(size=4) + 1j * rng.normal(size=4), rng.normal(size=4) + 0j
    x = np.stack([m + v, m - v], axis=1)
    np.testing.assert_allclose(ft.covariance(x), np.outer(v, v.conj()), atol=1e-12)


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_covariance_hermitian_psd(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 9)) + 1j * rng.normal(size=(6, 9))
    r = ft.covariance(x)
    assert np.abs(r - r.conj().T).max() <= 1e-12
    assert np.linalg.eigvalsh(r).min() >= -1e-10


# ---- MUSIC ----

@pytest.mark.parametrize("preprocess", [True, False])
def test_music_on_grid_exact(geom, preprocess):
    cfg = ft.MusicConfig(preprocess=preprocess)
    subs = ft.partition_subarrays(geom, 2, 2)
    out = ft.aoa_features(plane_wave(geom, np.deg2rad(63), np.deg2rad(121)), subs, cfg, 0.0, 0)
    np.testing.assert_allclose(np.rad2deg(out), [63, 121] * 4, atol=1e-9)


def test_music_spectrum_positive_and_scale_invariant(geom):
    cfg = ft.MusicConfig(resolution_deg=3.0)
    sub = ft.partition_subarrays(geom, 2, 2)[0]
    steer = ft.steering_for(sub, cfg)
    r = ft.covariance(ft.subarray_snapshots(plane_wave(geom, 1.1, 1.4), sub, 64, 0.05, 3))
    spec = ft.music_spectrum(r, steer)
    assert np.isrealobj(spec) and np.all(spec > 0)
    a = ft.music_aoa(r, steer)
    b = ft.music_aoa(7.5 * r, steer)
    assert a == b


def test_music_tie_breaks_to_smallest_angles(geom):
    cfg = ft.MusicConfig(resolution_deg=10.0, preprocess=False)
    subs = ft.partition_subarrays(geom, 2, 2)
    # at theta = 0 every phi gives the same steering vector, so phi ties exactly
    out = ft.aoa_features(plane_wave(geom, 0.0, 1.0), subs, cfg, 0.0, 0)
    np.testing.assert_array_equal(out, 0.0)


def test_music_rejects_non_finite(geom):
    cfg = ft.MusicConfig(resolution_deg=10.0)
    steer = ft.steering_for(ft.partition_subarrays(geom, 2, 2)[0], cfg)
    r = np.eye(25, dtype=complex)
    r[0, 0] = np.nan
    with pytest.raises(ft.MusicError):
        ft.music_aoa(r, steer)


def test_true_angles_match_plane_wave_convention(geom):
    sub = ft.partition_subarrays(geom, 1, 1)[0]
    p = sub.center + 50.0 * np.array([0.3, 0.8, 0.5]) / np.linalg.norm([0.3, 0.8, 0.5])
    th, ph = ft.true_angles(p, sub)
    far = cs.los_steering(p, geom)
    ref = plane_wave(geom, th, ph)
    # far source: spherical wavefront close to the plane wave with these angles
    assert np.abs(np.vdot(ref, far)) / 100 > 0.99


def test_aoa_lengths(geom):
    y = plane_wave(geom, 1.0, 1.0)
    cfg = ft.MusicConfig(resolution_deg=5.0)
    assert ft.aoa_features(y, ft.partition_subarrays(geom, 1, 1), cfg, 0.0, 0).shape == (2,)
    assert ft.aoa_features(y, ft.partition_subarrays(geom, 2, 2), cfg, 0.0, 0).shape == (8,)


def test_near_source_shows_curvature_across_subarrays():
    g = cs.build_geometry(10, 10, 4, 4)
    subs = ft.partition_subarrays(g, 2, 2)
    p = g.ris_center + np.array([0.0, 0.06, 0.0])  # 6 cm in front of the panel
    out = np.rad2deg(ft.aoa_features(cs.los_steering(p, g), subs, ft.MusicConfig(), 0.0, 0))
    thetas, phis = out[0::2], out[1::2]
    assert max(np.ptp(thetas), np.ptp(phis)) > 1.0


# ---- assembly and persistence ----

def test_final_features_offsets():
    layout = ft.FeatureLayout(5, 4, 8)
    rng = np.random.default_rng(9)
    parts = [rng.normal(size=5), rng.normal(size=4), rng.normal(size=8)]
    final = ft.final_features(*parts, layout=layout)
    assert final.shape == (17,)
    for name, part in zip(["cnn", "tf", "aoa"], parts):
        np.testing.assert_array_equal(layout.split(final)[name], part)
    assert np.all(ft.final_features(np.zeros(5), np.zeros(4), np.zeros(8)) == 0)
    with pytest.raises(tn.ShapeError):
        ft.final_features(np.zeros(4), np.zeros(4), np.zeros(8), layout=layout)


def test_feature_roundtrip(tmp_path):
    layout = ft.FeatureLayout(3, 4, 2)
    vals = {0.0: np.random.default_rng(10).normal(size=(2, 5, 9)),
            20.0: np.random.default_rng(11).normal(size=(2, 5, 9))}
    ft.save_features(ft.FeatureSet("true_ris", "wave", layout, vals, {"seed": 3}), tmp_path)
    back = ft.load_features(tmp_path)
    assert back.layout == layout and back.meta["seed"] == 3
    for k in vals:
        np.testing.assert_array_equal(back.values[k], vals[k])


def test_cnn_checkpoint_roundtrip(tmp_path):
    model = ft.init_cnn(ft.CNNConfig(rows=4, cols=4, n_f=6), 5)
    model.input_scale = 2.5
    ft.save_cnn(model, tmp_path)
    back = ft.load_cnn(tmp_path)
    sig = np.random.default_rng(0).normal(size=(3, 16)) + 0j
    np.testing.assert_array_equal(ft.extract_cnn(sig, back), ft.extract_cnn(sig, model))
