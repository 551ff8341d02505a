import numpy as np
import pytest

import regbench as rb

from testutil import smooth_velocity, textured_volume


def jacobian_oracle(u):
    """Explicit-loop finite-difference Jacobian determinant.

    Central differences in the interior, one-sided at faces, cofactor
    expansion per voxel. Slow on purpose; independent of the vectorized path.
    """
    u = u.astype(np.float64)
    nx, ny, nz = u.shape[:3]
    out = np.empty((nx, ny, nz))

    def deriv(comp, axis, x, y, z):
        idx = [x, y, z]
        n = u.shape[axis]
        if 0 < idx[axis] < n - 1:
            hi = list(idx)
            lo = list(idx)
            hi[axis] += 1
            lo[axis] -= 1
            return (u[hi[0], hi[1], hi[2], comp] - u[lo[0], lo[1], lo[2], comp]) / 2.0
        if idx[axis] == 0:
            hi = list(idx)
            hi[axis] += 1
            return u[hi[0], hi[1], hi[2], comp] - u[idx[0], idx[1], idx[2], comp]
        lo = list(idx)
        lo[axis] -= 1
        return u[idx[0], idx[1], idx[2], comp] - u[lo[0], lo[1], lo[2], comp]

    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                J = np.empty((3, 3))
                for comp in range(3):
                    for axis in range(3):
                        J[comp, axis] = deriv(comp, axis, x, y, z)
                    J[comp, comp] += 1.0
                out[x, y, z] = (
                    J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
                    - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
                    + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0])
                )
    return out


def constant_field(dims, t, spacing=(1.0, 1.0, 1.0)):
    u = np.zeros(tuple(dims) + (3,), dtype=np.float32)
    u[...] = np.asarray(t, dtype=np.float32)
    return rb.DisplacementField(u, spacing)


def field_energy(u):
    return float((u.astype(np.float64) ** 2).sum())


# --------------------------------------------------------------------------
# validation


def test_displacement_field_validation():
    with pytest.raises(ValueError):
        rb.DisplacementField(np.zeros((4, 4, 4, 2), dtype=np.float32), (1, 1, 1))
    bad = np.zeros((4, 4, 4, 3), dtype=np.float32)
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        rb.DisplacementField(bad, (1, 1, 1))


def test_compose_dim_mismatch():
    f = constant_field((4, 4, 4), (0, 0, 0))
    g = constant_field((5, 4, 4), (0, 0, 0))
    with pytest.raises(ValueError):
        rb.compose(f, g)


# --------------------------------------------------------------------------
# warping


def test_warp_zero_field_identity(rng):
    vol = rb.Volume(textured_volume(rng, (8, 8, 8)), (1, 1, 1))
    f = constant_field((8, 8, 8), (0, 0, 0))
    out = rb.warp(vol, f)
    assert np.allclose(out.data, vol.data, atol=1e-5)


def test_warp_pullback_convention():
    data = np.zeros((16, 10, 10), dtype=np.float32)
    data[10, 5, 5] = 100.0
    vol = rb.Volume(data, (1, 1, 1))
    f = constant_field((16, 10, 10), (2, 0, 0))
    out = rb.warp(vol, f, fill=0.0)
    assert out.data[8, 5, 5] == pytest.approx(100.0)
    assert out.data[10, 5, 5] == pytest.approx(0.0)


def test_warp_constant_volume_constant(rng):
    vol = rb.Volume(np.full((8, 8, 8), 42.0, dtype=np.float32), (1, 1, 1))
    v = smooth_velocity(rng, (8, 8, 8), 2.0)
    f = rb.exp_svf(rb.VelocityField(v, (1, 1, 1)))
    out = rb.warp(vol, f, fill=42.0)
    assert np.allclose(out.data, 42.0, atol=1e-4)


def test_warp_labels_nearest_translation():
    lab = np.zeros((12, 8, 8), dtype=np.uint16)
    lab[6, 4, 4] = 3
    mask = rb.LabelMask(lab, (1, 1, 1))
    f = constant_field((12, 8, 8), (2, 0, 0))
    out = rb.warp_labels(mask, f)
    assert out.labels[4, 4, 4] == 3
    assert out.labels[6, 4, 4] == 0


def test_warp_fill_outside():
    vol = rb.Volume(np.ones((6, 6, 6), dtype=np.float32), (1, 1, 1))
    f = constant_field((6, 6, 6), (20, 0, 0))
    out = rb.warp(vol, f, fill=-7.0)
    assert np.allclose(out.data, -7.0)


# --------------------------------------------------------------------------
# composition


def test_compose_identity_element(rng):
    v = smooth_velocity(rng, (8, 8, 8), 2.0)
    f = rb.DisplacementField(v, (1, 1, 1))
    zero = constant_field((8, 8, 8), (0, 0, 0))
    assert np.allclose(rb.compose(f, zero).u, f.u, atol=1e-5)
    assert np.allclose(rb.compose(zero, f).u, f.u, atol=1e-5)


def test_compose_translations_add():
    t1 = (1.5, 0.0, -2.0)
    t2 = (0.5, 1.0, 1.0)
    f = constant_field((12, 12, 12), t1)
    g = constant_field((12, 12, 12), t2)
    out = rb.compose(f, g)
    expected = np.asarray(t1) + np.asarray(t2)
    assert np.allclose(out.u, expected, atol=1e-5)


# --------------------------------------------------------------------------
# jacobian and sdlogj


def test_jacobian_zero_field_is_one():
    f = constant_field((6, 6, 6), (0, 0, 0))
    assert np.allclose(rb.jacobian_determinant(f), 1.0)


def test_jacobian_affine_closed_form():
    dims = (10, 10, 10)
    grid = rb.identity_grid(dims).reshape(dims + (3,))
    u = (0.1 * grid).astype(np.float32)
    det = rb.jacobian_determinant(rb.DisplacementField(u, (1, 1, 1)))
    interior = det[1:-1, 1:-1, 1:-1]
    assert np.abs(interior - 1.1 ** 3).max() < 1e-6


def test_jacobian_matches_loop_oracle(rng):
    u = smooth_velocity(rng, (7, 6, 5), 1.5)
    det = rb.jacobian_determinant(rb.DisplacementField(u, (1, 1, 1)))
    ref = jacobian_oracle(u)
    assert np.abs(det - ref).max() < 1e-9


def test_sdlogj_zero_field():
    f = constant_field((8, 8, 8), (0, 0, 0))
    assert rb.sdlogj(f) == 0.0


def test_sdlogj_translation_invariant(rng):
    v = smooth_velocity(rng, (10, 10, 10), 1.0)
    base = rb.sdlogj(rb.DisplacementField(v, (1, 1, 1)))
    shifted = rb.sdlogj(rb.DisplacementField(v + np.float32(3.0), (1, 1, 1)))
    assert abs(base - shifted) < 1e-6


def test_sdlogj_two_region_hand_value():
    # left half det 1, right half det e^2; sd of {0, 2} at equal counts is 1
    dims = (20, 16, 16)
    a = np.e ** 2 - 1.0
    u = np.zeros(dims + (3,), dtype=np.float32)
    x = np.arange(dims[0], dtype=np.float32)
    u[..., 0] = np.maximum(x - 10.0, 0.0)[:, None, None] * np.float32(a)
    mask = np.zeros(dims, dtype=bool)
    mask[2:10] = True   # x in [2, 9]: derivative 0 (stencil clear of the kink)
    mask[11:19] = True  # x in [11, 18]: derivative a
    got = rb.sdlogj(rb.DisplacementField(u, (1, 1, 1)), mask)
    assert abs(got - 1.0) < 1e-4


def test_sdlogj_empty_mask_errors():
    f = constant_field((6, 6, 6), (0, 0, 0))
    with pytest.raises(ValueError):
        rb.sdlogj(f, np.zeros((6, 6, 6), dtype=bool))


# --------------------------------------------------------------------------
# stationary velocity fields


def test_exp_svf_zero():
    v = rb.VelocityField(np.zeros((6, 6, 6, 3), dtype=np.float32), (1, 1, 1))
    assert np.allclose(rb.exp_svf(v).u, 0.0)


def test_exp_svf_constant_translation():
    u = np.zeros((12, 12, 12, 3), dtype=np.float32)
    u[..., 0] = 2.0
    f = rb.exp_svf(rb.VelocityField(u, (1, 1, 1)))
    interior = f.u[3:-3, 3:-3, 3:-3]
    assert np.allclose(interior, [2.0, 0.0, 0.0], atol=1e-4)


def test_exp_svf_inverse_consistency(rng):
    v = smooth_velocity(rng, (24, 24, 24), 4.0)
    f = rb.exp_svf(rb.VelocityField(v, (1, 1, 1)), steps=7)
    b = rb.exp_svf(rb.VelocityField(-v, (1, 1, 1)), steps=7)
    assert rb.inverse_consistency_error(f, b) < 0.05


def test_exp_svf_steps_reduce_error(rng):
    v = smooth_velocity(rng, (20, 20, 20), 3.0)
    errs = []
    for steps in (4, 8):
        f = rb.exp_svf(rb.VelocityField(v, (1, 1, 1)), steps=steps)
        b = rb.exp_svf(rb.VelocityField(-v, (1, 1, 1)), steps=steps)
        errs.append(rb.inverse_consistency_error(f, b))
    assert errs[1] < errs[0]


def test_exp_svf_invalid_steps():
    v = rb.VelocityField(np.zeros((4, 4, 4, 3), dtype=np.float32), (1, 1, 1))
    with pytest.raises(ValueError):
        rb.exp_svf(v, steps=0)


def test_sqrt_field_zero():
    v = rb.VelocityField(np.zeros((5, 5, 5, 3), dtype=np.float32), (1, 1, 1))
    assert np.allclose(rb.sqrt_field(v).u, 0.0)


def test_sqrt_field_half_translation():
    u = np.zeros((12, 12, 12, 3), dtype=np.float32)
    u[..., 0] = 2.0
    f = rb.sqrt_field(rb.VelocityField(u, (1, 1, 1)))
    interior = f.u[3:-3, 3:-3, 3:-3]
    assert np.allclose(interior, [1.0, 0.0, 0.0], atol=1e-4)


def test_sqrt_squares_to_exp(rng):
    v = smooth_velocity(rng, (20, 20, 20), 3.0)
    vf = rb.VelocityField(v, (1, 1, 1))
    half = rb.sqrt_field(vf)
    full = rb.exp_svf(vf)
    twice = rb.compose(half, half)
    diff = np.linalg.norm(
        (twice.u - full.u)[4:-4, 4:-4, 4:-4].astype(np.float64), axis=-1
    )
    assert diff.mean() < 0.05


# --------------------------------------------------------------------------
# two-step consistent composition


def test_tsc_zero_zero():
    z = rb.VelocityField(np.zeros((6, 6, 6, 3), dtype=np.float32), (1, 1, 1))
    assert np.allclose(rb.tsc_compose(z, z).u, 0.0)


def test_tsc_identity_second_stage(rng):
    v = smooth_velocity(rng, (20, 20, 20), 2.0)
    vf = rb.VelocityField(v, (1, 1, 1))
    zero = rb.VelocityField(np.zeros_like(v), (1, 1, 1))
    sandwich = rb.tsc_compose(vf, zero)
    plain = rb.exp_svf(vf)
    diff = np.linalg.norm(
        (sandwich.u - plain.u)[4:-4, 4:-4, 4:-4].astype(np.float64), axis=-1
    )
    assert diff.mean() < 0.05


def test_tsc_inverse_consistency(rng):
    v = smooth_velocity(rng, (24, 24, 24), 2.0)
    w = smooth_velocity(rng, (24, 24, 24), 1.5)
    fwd = rb.tsc_compose(
        rb.VelocityField(v, (1, 1, 1)), rb.VelocityField(w, (1, 1, 1))
    )
    bwd = rb.tsc_compose(
        rb.VelocityField(-v, (1, 1, 1)), rb.VelocityField(-w, (1, 1, 1))
    )
    assert rb.inverse_consistency_error(fwd, bwd) < 0.1


def test_tsc_dim_mismatch():
    a = rb.VelocityField(np.zeros((6, 6, 6, 3), dtype=np.float32), (1, 1, 1))
    b = rb.VelocityField(np.zeros((5, 6, 6, 3), dtype=np.float32), (1, 1, 1))
    with pytest.raises(ValueError):
        rb.tsc_compose(a, b)


# --------------------------------------------------------------------------
# inverse-consistency error


def test_ice_zero_pair():
    z = constant_field((8, 8, 8), (0, 0, 0))
    assert rb.inverse_consistency_error(z, z) == 0.0


def test_ice_opposite_translations():
    t = (1.0, -0.5, 2.0)
    f = constant_field((16, 16, 16), t)
    b = constant_field((16, 16, 16), tuple(-c for c in t))
    assert rb.inverse_consistency_error(f, b) < 1e-6


def test_ice_grows_with_magnitude(rng):
    base = smooth_velocity(rng, (24, 24, 24), 1.0)
    errs = []
    for scale in (1.0, 2.0, 4.0):
        v = base * np.float32(scale)
        f = rb.exp_svf(rb.VelocityField(v, (1, 1, 1)))
        b = rb.exp_svf(rb.VelocityField(-v, (1, 1, 1)))
        errs.append(rb.inverse_consistency_error(f, b))
    assert errs[0] < errs[1] < errs[2]


# --------------------------------------------------------------------------
# band-limited representation


def test_bandlimited_constant_patch():
    patch = np.zeros((4, 4, 4, 3), dtype=np.float64)
    patch[..., 1] = 2.5
    bl = rb.BandLimitedField.from_patch(patch, (12, 12, 12), (1, 1, 1))
    dense = rb.bandlimited_to_dense(bl)
    assert dense.dims == (12, 12, 12)
    assert np.allclose(dense.u[..., 1], 2.5, atol=1e-5)
    assert np.allclose(dense.u[..., 0], 0.0, atol=1e-5)


def test_bandlimited_full_dims_identity(rng):
    u = smooth_velocity(rng, (6, 6, 6), 2.0)
    f = rb.DisplacementField(u, (1, 1, 1))
    bl = rb.dense_to_bandlimited(f, (6, 6, 6))
    back = rb.bandlimited_to_dense(bl)
    scale = np.abs(u).max()
    assert np.abs(back.u - u).max() / scale < 1e-5


def test_bandlimited_round_trip_on_patch_space(rng):
    u = smooth_velocity(rng, (12, 10, 8), 2.0)
    f = rb.DisplacementField(u, (1, 1, 1))
    s = rb.dense_to_bandlimited(f, (5, 4, 3))
    dense = rb.bandlimited_to_dense(s)
    s2 = rb.dense_to_bandlimited(dense, (5, 4, 3))
    scale = np.abs(s.spectrum).max()
    assert np.abs(s2.spectrum - s.spectrum).max() / scale < 1e-5


def test_bandlimited_reconstruction_is_projection(rng):
    u = smooth_velocity(rng, (10, 10, 10), 2.0)
    f = rb.DisplacementField(u, (1, 1, 1))
    recon = rb.bandlimited_to_dense(rb.dense_to_bandlimited(f, (4, 4, 4)))
    assert field_energy(recon.u) <= field_energy(f.u) * (1.0 + 1e-6)
    # projecting twice changes nothing
    again = rb.bandlimited_to_dense(rb.dense_to_bandlimited(recon, (4, 4, 4)))
    scale = max(np.abs(recon.u).max(), 1e-9)
    assert np.abs(again.u - recon.u).max() / scale < 1e-5


def test_bandlimited_dense_field_is_real_and_constant_dc():
    f = constant_field((9, 9, 9), (1.0, -2.0, 0.5))
    bl = rb.dense_to_bandlimited(f, (3, 3, 3))
    back = rb.bandlimited_to_dense(bl)
    assert np.allclose(back.u, f.u, atol=1e-5)


def test_bandlimited_patch_larger_than_dims_errors(rng):
    u = smooth_velocity(rng, (6, 6, 6), 1.0)
    f = rb.DisplacementField(u, (1, 1, 1))
    with pytest.raises(ValueError):
        rb.dense_to_bandlimited(f, (8, 6, 6))


def test_bandlimited_from_patch_rejects_complex():
    patch = np.zeros((3, 3, 3, 3), dtype=np.complex128)
    with pytest.raises(ValueError):
        rb.BandLimitedField.from_patch(patch, (6, 6, 6), (1, 1, 1))


# --------------------------------------------------------------------------
# thin-plate splines


def test_tps_constant_reproduction(rng):
    pts = rng.uniform(1, 8, size=(12, 3))
    t = np.array([1.5, -0.5, 2.0])
    sd = rb.SparseDisplacements(pts, np.tile(t, (12, 1)))
    f = rb.tps_densify(sd, (10, 10, 10), (1, 1, 1), lam=0.0)
    assert np.abs(f.u - t.astype(np.float32)).max() < 1e-4


def test_tps_interpolates_at_lambda_zero(rng):
    pts = rng.uniform(1, 8, size=(15, 3))
    vecs = rng.normal(scale=1.5, size=(15, 3))
    sd = rb.SparseDisplacements(pts, vecs)
    f = rb.tps_densify(sd, (10, 10, 10), (1, 1, 1), lam=0.0)
    at_pts = rb.sample_trilinear(f.u, pts)
    # trilinear sampling of the dense grid adds its own error; evaluate on a
    # snapped copy instead so the interpolation property is tested directly
    snapped = np.round(pts)
    sd2 = rb.SparseDisplacements(snapped, vecs)
    f2 = rb.tps_densify(sd2, (10, 10, 10), (1, 1, 1), lam=0.0)
    idx = snapped.astype(int)
    got = f2.u[idx[:, 0], idx[:, 1], idx[:, 2]]
    assert np.abs(got - vecs).max() < 1e-4
    assert at_pts.shape == vecs.shape


def test_tps_affine_reproduction(rng):
    A = np.eye(3) + rng.normal(scale=0.05, size=(3, 3))
    t = rng.normal(scale=1.0, size=3)
    pts = rng.uniform(0.5, 9.0, size=(14, 3))
    vecs = pts @ (A - np.eye(3)).T + t
    sd = rb.SparseDisplacements(pts, vecs)
    f = rb.tps_densify(sd, (10, 10, 10), (1, 1, 1), lam=0.0)
    grid = rb.identity_grid((10, 10, 10)).reshape(10, 10, 10, 3)
    expected = grid @ (A - np.eye(3)).T + t
    assert np.abs(f.u - expected).max() < 1e-3


def test_tps_degenerate_points():
    # all points on a plane: affine system is rank-deficient
    pts = np.array([[2.0, 2.0, 5.0], [8.0, 2.0, 5.0], [2.0, 8.0, 5.0],
                    [8.0, 8.0, 5.0], [5.0, 5.0, 5.0]])
    vecs = np.ones((5, 3))
    sd = rb.SparseDisplacements(pts, vecs)
    with pytest.raises(rb.DegenerateConfigurationError):
        rb.tps_densify(sd, (10, 10, 10), (1, 1, 1), lam=0.0)


def test_tps_lambda_smooths(rng):
    pts = rng.uniform(1, 8, size=(20, 3))
    vecs = rng.normal(scale=2.0, size=(20, 3))
    sd = rb.SparseDisplacements(pts, vecs)
    exact = rb.tps_densify(sd, (10, 10, 10), (1, 1, 1), lam=0.0)
    smooth = rb.tps_densify(sd, (10, 10, 10), (1, 1, 1), lam=10.0)
    tv = lambda u: sum(
        np.abs(np.diff(u[..., c], axis=ax)).sum()
        for c in range(3) for ax in range(3)
    )
    assert tv(smooth.u) < tv(exact.u)


# --------------------------------------------------------------------------
# smoothing


def test_smooth_field_window_one_identity(rng):
    u = smooth_velocity(rng, (8, 8, 8), 2.0)
    f = rb.DisplacementField(u, (1, 1, 1))
    out = rb.smooth_field(f, window=1, repeats=2)
    assert np.allclose(out.u, u)


def test_smooth_field_constant_unchanged():
    f = constant_field((8, 8, 8), (1.0, 2.0, 3.0))
    out = rb.smooth_field(f, window=3, repeats=2)
    assert np.allclose(out.u, f.u, atol=1e-5)


def test_smooth_field_reduces_total_variation(rng):
    u = rng.normal(scale=2.0, size=(10, 10, 10, 3)).astype(np.float32)
    f = rb.DisplacementField(u, (1, 1, 1))
    out = rb.smooth_field(f, window=3, repeats=2)
    tv = lambda a: sum(
        np.abs(np.diff(a[..., c], axis=ax)).sum()
        for c in range(3) for ax in range(3)
    )
    assert tv(out.u) <= tv(u)


def test_smooth_field_even_window_errors(rng):
    f = constant_field((6, 6, 6), (0, 0, 0))
    with pytest.raises(ValueError):
        rb.smooth_field(f, window=4)


# --------------------------------------------------------------------------
# serialization


def test_field_nifti_round_trip(tmp_path, rng):
    u = smooth_velocity(rng, (7, 6, 5), 2.0)
    f = rb.DisplacementField(u, (1.5, 1.5, 1.5))
    path = tmp_path / "f.nii.gz"
    rb.write_field(f, path)
    back = rb.read_field(path)
    assert back.u.tobytes() == f.u.tobytes()
    assert back.spacing == f.spacing


def test_field_raw_round_trip(tmp_path, rng):
    u = smooth_velocity(rng, (6, 5, 4), 1.0)
    f = rb.DisplacementField(u, (1.0, 1.0, 1.0))
    path = tmp_path / "f.raw"
    rb.write_field_raw(f, path)
    back = rb.read_field_raw(path, (6, 5, 4), (1.0, 1.0, 1.0))
    assert back.u.tobytes() == f.u.tobytes()


# --------------------------------------------------------------------------
# samplers


def test_sample_trilinear_exact_at_grid(rng):
    data = rng.normal(size=(6, 6, 6)).astype(np.float32)
    coords = np.array([[2.0, 3.0, 4.0], [0.0, 0.0, 0.0], [5.0, 5.0, 5.0]])
    got = rb.sample_trilinear(data, coords)
    expected = np.array([data[2, 3, 4], data[0, 0, 0], data[5, 5, 5]])
    assert np.allclose(got, expected)


def test_sample_trilinear_midpoint(rng):
    data = rng.normal(size=(4, 4, 4)).astype(np.float32)
    got = rb.sample_trilinear(data, np.array([[1.5, 2.0, 2.0]]))
    expected = 0.5 * (data[1, 2, 2] + data[2, 2, 2])
    assert np.allclose(got, expected, atol=1e-6)


def test_sample_nearest_rounds(rng):
    data = rng.normal(size=(4, 4, 4)).astype(np.float32)
    got = rb.sample_nearest(data, np.array([[1.4, 2.6, 0.2]]))
    assert got[0] == data[1, 3, 0]
