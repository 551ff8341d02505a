"""Dense displacement/velocity fields and the algebra on them.

A displacement field u lives on the fixed-image grid, in voxel units, with
the pull-back convention: ``warp(moving, u)(x) = moving(x + u(x))``. The
trailing array axis holds (ux, uy, uz).
"""
from __future__ import annotations

import dataclasses

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.spatial.distance import cdist

from . import nifti
from .volume import LabelMask, Volume, _as_spacing

__all__ = [
    "DisplacementField",
    "VelocityField",
    "BandLimitedField",
    "SparseDisplacements",
    "DegenerateConfigurationError",
    "warp",
    "warp_labels",
    "compose",
    "jacobian_determinant",
    "sdlogj",
    "exp_svf",
    "sqrt_field",
    "tsc_compose",
    "inverse_consistency_error",
    "bandlimited_to_dense",
    "dense_to_bandlimited",
    "tps_densify",
    "smooth_field",
    "read_field",
    "write_field",
    "read_field_raw",
    "write_field_raw",
]


class DegenerateConfigurationError(ValueError):
    """Input admits no well-posed solution (e.g. coplanar spline points)."""


def _check_vector_array(u) -> np.ndarray:
    u = np.ascontiguousarray(u, dtype=np.float32)
    if u.ndim != 4 or u.shape[-1] != 3:
        raise ValueError(f"vector field must have shape (nx, ny, nz, 3), got {u.shape}")
    if not np.isfinite(u).all():
        raise ValueError("vector field contains non-finite values")
    return u


@dataclasses.dataclass(frozen=True)
class DisplacementField:
    """Voxel-unit displacements on the fixed grid."""

    u: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "u", _check_vector_array(self.u))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.u.shape[:3]


@dataclasses.dataclass(frozen=True)
class VelocityField:
    """Stationary velocity field; exponentiates to a diffeomorphism."""

    u: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "u", _check_vector_array(self.u))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.u.shape[:3]


@dataclasses.dataclass(frozen=True)
class SparseDisplacements:
    """Displacement vectors known at scattered voxel locations."""

    points: np.ndarray
    vectors: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(np.atleast_2d(self.points), dtype=np.float64)
        v = np.ascontiguousarray(np.atleast_2d(self.vectors), dtype=np.float64)
        if p.shape != v.shape or p.ndim != 2 or p.shape[1] != 3:
            raise ValueError(
                f"points and vectors must both be (N, 3), got {p.shape} and {v.shape}"
            )
        if not (np.isfinite(p).all() and np.isfinite(v).all()):
            raise ValueError("sparse displacements contain non-finite values")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "vectors", v)

    def __len__(self) -> int:
        return self.points.shape[0]


# --------------------------------------------------------------------------
# interpolation primitives


def identity_grid(dims) -> np.ndarray:
    """(nx, ny, nz, 3) float32 array of voxel coordinates."""
    axes = [np.arange(d, dtype=np.float32) for d in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def sample_trilinear(values: np.ndarray, coords: np.ndarray, mode="clamp", fill=0.0,
                     want_grad=False):
    """Trilinear sampling of a scalar or channel-last volume.

    Parameters
    ----------
    values : (nx, ny, nz) or (nx, ny, nz, C) array
    coords : (..., 3) voxel coordinates
    mode : "clamp" replicates edge values; "fill" blends to ``fill`` outside
    want_grad : also return d(value)/d(coordinate), shape (..., C, 3)

    Returns
    -------
    sampled values with shape coords.shape[:-1] (+ (C,) if multichannel),
    optionally followed by the gradient array.
    """
    scalar_input = values.ndim == 3
    if scalar_input:
        values = values[..., None]
    if values.ndim != 4:
        raise ValueError(f"expected 3-D or channel-last 4-D data, got {values.shape}")
    coords = np.asarray(coords, dtype=np.float32)
    lead_shape = coords.shape[:-1]
    pts = coords.reshape(-1, 3)

    if mode == "fill":
        values = np.pad(
            values, ((1, 1), (1, 1), (1, 1), (0, 0)),
            mode="constant", constant_values=np.float32(fill),
        )
        pts = pts + np.float32(1.0)
    elif mode != "clamp":
        raise ValueError(f"unknown sampling mode {mode!r}")

    # a 1-voxel axis breaks corner gathering; edge-pad keeps clamp semantics
    for a in range(3):
        if values.shape[a] < 2:
            widths = [(0, 0)] * 4
            widths[a] = (0, 1)
            values = np.pad(values, widths, mode="edge")

    nx, ny, nz, nc = values.shape
    flat = values.reshape(-1, nc)

    x = np.clip(pts[:, 0], 0.0, nx - 1)
    y = np.clip(pts[:, 1], 0.0, ny - 1)
    z = np.clip(pts[:, 2], 0.0, nz - 1)
    # inside-domain indicator for gradients: clamped samples are flat
    if want_grad:
        live = [
            (pts[:, 0] > 0) & (pts[:, 0] < nx - 1),
            (pts[:, 1] > 0) & (pts[:, 1] < ny - 1),
            (pts[:, 2] > 0) & (pts[:, 2] < nz - 1),
        ]

    ix = np.minimum(x.astype(np.int64), max(nx - 2, 0))
    iy = np.minimum(y.astype(np.int64), max(ny - 2, 0))
    iz = np.minimum(z.astype(np.int64), max(nz - 2, 0))
    fx = (x - ix)[:, None]
    fy = (y - iy)[:, None]
    fz = (z - iz)[:, None]

    sx, sy = ny * nz, nz
    base = ix * sx + iy * sy + iz
    c000 = flat[base]
    c100 = flat[base + sx]
    c010 = flat[base + sy]
    c001 = flat[base + 1]
    c110 = flat[base + sx + sy]
    c101 = flat[base + sx + 1]
    c011 = flat[base + sy + 1]
    c111 = flat[base + sx + sy + 1]

    c00 = c000 + (c100 - c000) * fx
    c01 = c001 + (c101 - c001) * fx
    c10 = c010 + (c110 - c010) * fx
    c11 = c011 + (c111 - c011) * fx
    c0 = c00 + (c10 - c00) * fy
    c1 = c01 + (c11 - c01) * fy
    out = c0 + (c1 - c0) * fz

    if want_grad:
        # d/dx: interpolate the x-differences over (y, z); same pattern per axis
        dx0 = (c100 - c000) + ((c110 - c010) - (c100 - c000)) * fy
        dx1 = (c101 - c001) + ((c111 - c011) - (c101 - c001)) * fy
        gx = dx0 + (dx1 - dx0) * fz
        dy0 = (c010 - c000) + ((c110 - c100) - (c010 - c000)) * fx
        dy1 = (c011 - c001) + ((c111 - c101) - (c011 - c001)) * fx
        gy = dy0 + (dy1 - dy0) * fz
        gz = c1 - c0
        grad = np.stack([gx, gy, gz], axis=-1)
        for a in range(3):
            grad[..., a] *= live[a][:, None]
        grad = grad.reshape(lead_shape + (nc, 3))

    out = out.reshape(lead_shape + (nc,))
    if scalar_input:
        out = out[..., 0]
        if want_grad:
            grad = grad[..., 0, :]
    return (out, grad) if want_grad else out


def sample_nearest(values: np.ndarray, coords: np.ndarray, fill=0.0) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float32)
    lead_shape = coords.shape[:-1]
    pts = np.rint(coords.reshape(-1, 3)).astype(np.int64)
    dims = values.shape[:3]
    inside = np.ones(pts.shape[0], dtype=bool)
    for a in range(3):
        inside &= (pts[:, a] >= 0) & (pts[:, a] < dims[a])
    safe = np.clip(pts, 0, np.asarray(dims) - 1)
    out = values[safe[:, 0], safe[:, 1], safe[:, 2]]
    out = np.where(inside.reshape(inside.shape + (1,) * (out.ndim - 1)), out,
                   np.asarray(fill, dtype=values.dtype))
    return out.reshape(lead_shape + values.shape[3:])


# --------------------------------------------------------------------------
# warping and composition


def _field_coords(field: DisplacementField) -> np.ndarray:
    return identity_grid(field.dims) + field.u


def warp(moving: Volume, field: DisplacementField, interp="trilinear",
         fill=-1000.0) -> Volume:
    """Resample ``moving`` at x + u(x) for every fixed-grid voxel x."""
    if interp not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interp!r}")
    coords = _field_coords(field)
    if interp == "trilinear":
        data = sample_trilinear(moving.data, coords, mode="fill", fill=fill)
    else:
        data = sample_nearest(moving.data, coords, fill=fill)
    return Volume(data, field.spacing)


def warp_labels(moving: LabelMask, field: DisplacementField) -> LabelMask:
    """Nearest-neighbour label warp; out-of-volume samples become background."""
    coords = _field_coords(field)
    data = sample_nearest(moving.labels, coords, fill=0)
    return LabelMask(data.astype(np.int64), field.spacing)


def compose(f: DisplacementField, g: DisplacementField) -> DisplacementField:
    """Displacement of the coordinate map (id+f) o (id+g).

    ``compose(f, g)(x) = g(x) + f(x + g(x))``; warping with the result
    equals warping by f first, then by g.
    """
    if f.dims != g.dims:
        raise ValueError(f"field dims differ: {f.dims} vs {g.dims}")
    coords = identity_grid(g.dims) + g.u
    f_at = sample_trilinear(f.u, coords, mode="clamp")
    return DisplacementField(g.u + f_at, g.spacing)


# --------------------------------------------------------------------------
# regularity measures


def jacobian_determinant(field: DisplacementField) -> np.ndarray:
    """Pointwise det of d(x+u)/dx; central differences, one-sided at faces."""
    u = field.u.astype(np.float64)
    J = np.empty(field.dims + (3, 3), dtype=np.float64)
    for comp in range(3):
        for axis in range(3):
            J[..., comp, axis] = np.gradient(u[..., comp], axis=axis)
        J[..., comp, comp] += 1.0
    a, b, c = J[..., 0, 0], J[..., 0, 1], J[..., 0, 2]
    d, e, f = J[..., 1, 0], J[..., 1, 1], J[..., 1, 2]
    g, h, i = J[..., 2, 0], J[..., 2, 1], J[..., 2, 2]
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


def sdlogj(field: DisplacementField, mask=None) -> float:
    """Std-dev of log Jacobian determinant over masked interior voxels.

    Determinants are floored at 1e-6 before the log so folded voxels give a
    large but finite penalty.
    """
    det = jacobian_determinant(field)
    sel = np.zeros(field.dims, dtype=bool)
    sel[1:-1, 1:-1, 1:-1] = True
    if mask is not None:
        m = mask.mask if hasattr(mask, "mask") else np.asarray(mask, dtype=bool)
        if m.shape != field.dims:
            raise ValueError(f"mask dims {m.shape} differ from field dims {field.dims}")
        sel &= m
    if not sel.any():
        raise ValueError("no voxels selected for sdlogj")
    logs = np.log(np.maximum(det[sel], 1e-6))
    return float(logs.std())


# --------------------------------------------------------------------------
# stationary velocity fields


def exp_svf(v: VelocityField, steps: int = 7) -> DisplacementField:
    """Exponentiate a stationary velocity field by scaling and squaring."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    phi = DisplacementField(v.u / np.float32(2 ** steps), v.spacing)
    for _ in range(steps):
        phi = compose(phi, phi)
    return phi


def sqrt_field(v: VelocityField, steps: int = 7) -> DisplacementField:
    """Displacement whose self-composition approximates exp(v)."""
    return exp_svf(VelocityField(v.u * np.float32(0.5), v.spacing), steps)


def tsc_compose(phi_v: VelocityField, psi_v: VelocityField,
                steps: int = 7) -> DisplacementField:
    """Two-sided symmetric sandwich of exp(psi_v) by the square root of exp(phi_v).

    Returns the displacement of sqrt(Phi) o Psi o sqrt(Phi), which is
    inverse-consistent with the result for the negated velocities.
    """
    if phi_v.dims != psi_v.dims:
        raise ValueError(f"field dims differ: {phi_v.dims} vs {psi_v.dims}")
    half = sqrt_field(phi_v, steps)
    psi = exp_svf(psi_v, steps)
    return compose(half, compose(psi, half))


def inverse_consistency_error(f_ab: DisplacementField, f_ba: DisplacementField,
                              mask=None) -> float:
    """Mean interior norm of compose(f_ab, f_ba), in voxels.

    The interior excludes a margin of ceil(max displacement) + 1 voxels,
    where edge-clamped sampling would bias the composition.
    """
    if f_ab.dims != f_ba.dims:
        raise ValueError(f"field dims differ: {f_ab.dims} vs {f_ba.dims}")
    residual = compose(f_ab, f_ba).u
    mag = max(float(np.abs(f_ab.u).max()), float(np.abs(f_ba.u).max()))
    margin = int(np.ceil(mag)) + 1
    sel = np.zeros(f_ab.dims, dtype=bool)
    lo = [min(margin, (d - 1) // 2) for d in f_ab.dims]
    sel[lo[0]:f_ab.dims[0] - lo[0], lo[1]:f_ab.dims[1] - lo[1],
        lo[2]:f_ab.dims[2] - lo[2]] = True
    if mask is not None:
        m = mask.mask if hasattr(mask, "mask") else np.asarray(mask, dtype=bool)
        sel &= m
    if not sel.any():
        raise ValueError("no interior voxels left for inverse-consistency error")
    norms = np.linalg.norm(residual[sel].astype(np.float64), axis=-1)
    return float(norms.mean())


# --------------------------------------------------------------------------
# band-limited representation

# A field is stored as the centred spectrum of a small spatial patch; the
# dense field is its zero-padded inverse FFT. Kept Hermitian-consistent so
# both transforms stay real.


def _neg_freq_index(n: int) -> np.ndarray:
    idx = np.arange(n)
    return (2 * (n // 2) - idx) % n


def _hermitian_project(spec: np.ndarray, full_dims) -> np.ndarray:
    """Symmetrise a centred spectrum; zero unpaired planes of even axes."""
    out = spec.copy()
    for axis in range(3):
        n = out.shape[axis]
        if n % 2 == 0 and n < full_dims[axis]:
            # the -n/2 plane has no +n/2 partner inside the box; when the
            # patch spans the whole axis that plane is its own mirror and
            # the flip below symmetrises it in place instead
            sl = [slice(None)] * out.ndim
            sl[axis] = 0
            out[tuple(sl)] = 0.0
    flipped = out[np.ix_(_neg_freq_index(out.shape[0]),
                         _neg_freq_index(out.shape[1]),
                         _neg_freq_index(out.shape[2]))]
    return 0.5 * (out + np.conj(flipped))


@dataclasses.dataclass(frozen=True)
class BandLimitedField:
    """Low-frequency displacement field parameterised by a patch spectrum."""

    spectrum: np.ndarray
    full_dims: tuple[int, int, int]
    spacing: tuple[float, float, float]

    def __post_init__(self):
        spec = np.ascontiguousarray(self.spectrum, dtype=np.complex128)
        if spec.ndim != 4 or spec.shape[-1] != 3:
            raise ValueError(
                f"spectrum must have shape (px, py, pz, 3), got {spec.shape}"
            )
        full = tuple(int(d) for d in self.full_dims)
        if any(p > f for p, f in zip(spec.shape[:3], full)):
            raise ValueError(
                f"patch dims {spec.shape[:3]} exceed full dims {full}"
            )
        spec = _hermitian_project(spec, full)
        object.__setattr__(self, "spectrum", spec)
        object.__setattr__(self, "full_dims", full)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def patch_dims(self) -> tuple[int, int, int]:
        return self.spectrum.shape[:3]

    @staticmethod
    def from_patch(patch: np.ndarray, full_dims, spacing) -> "BandLimitedField":
        if np.iscomplexobj(patch):
            raise ValueError(
                "from_patch expects a real spatial patch; pass a spectrum "
                "to the BandLimitedField constructor instead"
            )
        patch = np.asarray(patch, dtype=np.float64)
        spec = np.fft.fftshift(np.fft.fftn(patch, axes=(0, 1, 2)), axes=(0, 1, 2))
        return BandLimitedField(spec, tuple(full_dims), spacing)


def _centered_slices(small, big):
    out = []
    for s, b in zip(small, big):
        start = b // 2 - s // 2
        out.append(slice(start, start + s))
    return tuple(out)


def bandlimited_to_dense(s: BandLimitedField) -> DisplacementField:
    """Zero-pad the patch spectrum to full size and inverse-transform.

    Scaled so a constant patch maps to the same constant dense field.
    """
    full = s.full_dims
    pad = np.zeros(full + (3,), dtype=np.complex128)
    pad[_centered_slices(s.patch_dims, full)] = s.spectrum
    scale = np.prod(full) / np.prod(s.patch_dims)
    dense = np.fft.ifftn(np.fft.ifftshift(pad, axes=(0, 1, 2)),
                         axes=(0, 1, 2)) * scale
    return DisplacementField(dense.real.astype(np.float32), s.spacing)


def dense_to_bandlimited(f: DisplacementField, patch_dims) -> BandLimitedField:
    """Project a dense field onto the central low-frequency box."""
    patch_dims = tuple(int(p) for p in patch_dims)
    if any(p < 1 for p in patch_dims):
        raise ValueError(f"patch dims must be positive, got {patch_dims}")
    if any(p > d for p, d in zip(patch_dims, f.dims)):
        raise ValueError(f"patch dims {patch_dims} exceed field dims {f.dims}")
    spec = np.fft.fftshift(np.fft.fftn(f.u.astype(np.float64), axes=(0, 1, 2)),
                           axes=(0, 1, 2))
    crop = spec[_centered_slices(patch_dims, f.dims)]
    crop = crop * (np.prod(patch_dims) / np.prod(f.dims))
    return BandLimitedField(crop, f.dims, f.spacing)


# --------------------------------------------------------------------------
# scattered-to-dense interpolation


def tps_densify(sd: SparseDisplacements, dims, spacing,
                lam: float = 0.0) -> DisplacementField:
    """Thin-plate-spline interpolation of sparse displacements to a grid.

    Uses the 3-D kernel U(r) = r with an affine term; ``lam`` adds diagonal
    regularisation to the kernel block (lam = 0 interpolates exactly).
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    pts = sd.points
    vec = sd.vectors
    n = pts.shape[0]
    if n < 4:
        raise DegenerateConfigurationError(
            f"thin-plate spline needs >= 4 points, got {n}"
        )
    P = np.hstack([np.ones((n, 1)), pts])
    if np.linalg.matrix_rank(P) < 4:
        raise DegenerateConfigurationError(
            "spline points are coplanar; affine part is underdetermined"
        )
    K = cdist(pts, pts)
    A = np.zeros((n + 4, n + 4), dtype=np.float64)
    A[:n, :n] = K + lam * np.eye(n)
    A[:n, n:] = P
    A[n:, :n] = P.T
    rhs = np.zeros((n + 4, 3), dtype=np.float64)
    rhs[:n] = vec
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as err:
        raise DegenerateConfigurationError(f"singular spline system: {err}") from err
    w, aff = sol[:n], sol[n:]

    dims = tuple(int(d) for d in dims)
    out = np.empty(dims + (3,), dtype=np.float32)
    yy, zz = np.meshgrid(np.arange(dims[1], dtype=np.float64),
                         np.arange(dims[2], dtype=np.float64), indexing="ij")
    plane = np.stack([np.zeros_like(yy), yy, zz], axis=-1).reshape(-1, 3)
    for x in range(dims[0]):  # slab at a time keeps the distance matrix small
        plane[:, 0] = x
        vals = cdist(plane, pts) @ w
        vals += np.hstack([np.ones((plane.shape[0], 1)), plane]) @ aff
        out[x] = vals.reshape(dims[1], dims[2], 3)
    return DisplacementField(out, spacing)


def smooth_field(field, window: int = 3, repeats: int = 1):
    """Box-mean filter each component; edge-replicated, applied ``repeats`` times."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    if repeats < 0:
        raise ValueError(f"repeats must be >= 0, got {repeats}")
    u = field.u
    for _ in range(repeats):
        u = np.stack(
            [uniform_filter(u[..., c], size=window, mode="nearest") for c in range(3)],
            axis=-1,
        )
    return type(field)(u, field.spacing)


# --------------------------------------------------------------------------
# serialization


def write_field(field: DisplacementField, path) -> None:
    """Write as a 4-D float32 NIfTI with the component axis last."""
    nifti._write_array(path, field.u, field.spacing + (1.0,), 16)


def read_field(path) -> DisplacementField:
    arr, spacing = nifti._read_array(path)
    if arr.ndim == 5 and arr.shape[3] == 1:  # dim[0]=5 vector-intent layout
        arr = arr[:, :, :, 0, :]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise nifti.UnsupportedNiftiError(
            f"{path}: expected a (nx, ny, nz, 3) field, got shape {arr.shape}"
        )
    return DisplacementField(np.ascontiguousarray(arr, dtype=np.float32),
                             spacing[:3])


def write_field_raw(field: DisplacementField, path) -> None:
    """Raw little-endian float32 dump, Fortran order.

    Layout: x varies fastest, then y, then z, with the (ux, uy, uz)
    component axis slowest; no header.
    """
    with open(path, "wb") as fh:
        fh.write(field.u.astype("<f4").tobytes(order="F"))


def read_field_raw(path, dims, spacing) -> DisplacementField:
    dims = tuple(int(d) for d in dims)
    expect = int(np.prod(dims)) * 3
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != expect:
        raise ValueError(
            f"{path}: {raw.size} float32 values, expected {expect} for dims {dims}"
        )
    u = raw.reshape(dims + (3,), order="F")
    return DisplacementField(np.ascontiguousarray(u), spacing)
