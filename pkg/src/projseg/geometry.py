"""Rotation geometry for the projection pipeline.

Three pieces live here:

  * the equidistant angle fan used to sample projection directions,
  * the three scan orientations (exact 90-degree axis permutations),
  * differentiable in-plane rotation of a volume about its third axis.

Sign convention: positive angles rotate counterclockwise in the
(axis0, axis1) plane viewed with axis0 pointing down the rows.  With
that convention a +90 rotation maps new[i, j] = old[j, n-1-i].
"""

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .autodiff import Tensor


@dataclass(frozen=True)
class AngleSet:
    """Ordered fan of projection angles in degrees.

    angles[k] = k * (180*M) / (d1*pi) - 90 for k = 0 .. floor(d1*pi/M) - 1,
    so the fan starts at -90 and tiles [-90, 90) without overlap.
    """

    angles: tuple
    M: float
    d1: int

    def __len__(self):
        return len(self.angles)

    @property
    def p(self):
        return len(self.angles)


def angle_set(d1, M):
    """Equidistant angles covering the half-circle, density set by M.

    Larger M means fewer directions; M=1 is the densest fan this
    parameterization produces.
    """
    if d1 < 2:
        raise ValueError(f"angle_set: d1 must be >= 2, got {d1}")
    if M < 1:
        raise ValueError(f"angle_set: M must be >= 1, got {M}")
    count = int(np.floor(d1 * np.pi / M))
    if count < 1:
        raise ValueError(f"angle_set: d1={d1}, M={M} yields no angles")
    spacing = (180.0 * M) / (d1 * np.pi)
    angles = tuple(k * spacing - 90.0 for k in range(count))
    return AngleSet(angles=angles, M=float(M), d1=int(d1))


# ---- scan orientations ----------------------------------------------------
#
# Orientation 1 is the identity.  Orientations 2 and 3 are proper 90-degree
# rotations (axis swap plus one flip, determinant +1):
#   2: about the first axis,  (d1,d2,d3) -> (d1,d3,d2)
#   3: about the second axis, (d1,d2,d3) -> (d3,d2,d1)

ORIENTATIONS = (1, 2, 3)


def _check_orientation(v):
    if v not in ORIENTATIONS:
        raise ValueError(f"orientation must be one of {ORIENTATIONS}, got {v}")


def _flip_axis(t, axis):
    idx = [slice(None)] * t.ndim
    idx[axis] = slice(None, None, -1)
    return t[tuple(idx)]


def _rot90_pair(vol, k, axes):
    """np.rot90 semantics for both ndarray and Tensor inputs."""
    if isinstance(vol, Tensor):
        a, b = axes
        perm = list(range(vol.ndim))
        perm[a], perm[b] = perm[b], perm[a]
        if k % 4 == 1:
            return _flip_axis(vol, b).transpose(tuple(perm))
        if k % 4 == 3:
            return _flip_axis(vol.transpose(tuple(perm)), b)
        raise ValueError(f"unsupported quarter-turn count {k}")
    return np.ascontiguousarray(np.rot90(vol, k, axes=axes))


def orient(volume, v):
    """Rotate a volume into scan orientation v by exact voxel permutation."""
    _check_orientation(v)
    if v == 1:
        return volume
    if v == 2:
        return _rot90_pair(volume, 1, (1, 2))
    return _rot90_pair(volume, 1, (0, 2))


def orient_inverse(volume, v):
    """Undo orient(·, v); exact inverse permutation."""
    _check_orientation(v)
    if v == 1:
        return volume
    if v == 2:
        return _rot90_pair(volume, 3, (1, 2))
    return _rot90_pair(volume, 3, (0, 2))


# ---- in-plane rotation ----------------------------------------------------

# cache of (S, S^T) CSR pairs keyed by grid size and angle; the transpose is
# the exact adjoint used in backward passes and in backprojection
_ROT_CACHE = {}
_ROT_CACHE_LIMIT = 4096

# exact quarter-turn trig, indexed by number of +90 steps
_QUARTER_TRIG = ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))


def rotation_matrix(n, angle_deg):
    """Sparse (n*n, n*n) operator taking a flattened (n,n) slice to its
    rotation by angle_deg.  Returns (S, S_transpose), both CSR.

    Inverse-mapped bilinear interpolation with zero fill.  For integer
    multiples of 90 the trig values are taken exactly, which collapses the
    matrix to a pure permutation (one unit entry per row).
    """
    key = (int(n), round(float(angle_deg), 9))
    hit = _ROT_CACHE.get(key)
    if hit is not None:
        return hit

    angle_deg = float(angle_deg)
    if angle_deg % 90.0 == 0.0:
        cosv, sinv = _QUARTER_TRIG[int(round(angle_deg / 90.0)) % 4]
    else:
        th = np.deg2rad(angle_deg)
        cosv, sinv = np.cos(th), np.sin(th)

    c = (n - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    di = ii - c
    dj = jj - c
    # inverse map: source position that lands on output pixel (i, j)
    src_i = c + cosv * di + sinv * dj
    src_j = c - sinv * di + cosv * dj
    i0 = np.floor(src_i)
    j0 = np.floor(src_j)
    fi = src_i - i0
    fj = src_j - j0

    out_idx = (ii * n + jj).ravel()
    rows, cols, vals = [], [], []
    corners = (
        (0, 0, (1 - fi) * (1 - fj)),
        (0, 1, (1 - fi) * fj),
        (1, 0, fi * (1 - fj)),
        (1, 1, fi * fj),
    )
    for oi, oj, w in corners:
        ni = (i0 + oi).astype(np.int64)
        nj = (j0 + oj).astype(np.int64)
        w = w.ravel()
        keep = ((ni >= 0) & (ni < n) & (nj >= 0) & (nj < n)).ravel() & (w > 0)
        rows.append(out_idx[keep])
        cols.append((ni * n + nj).ravel()[keep])
        vals.append(w[keep])

    S = sparse.csr_array(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n * n, n * n),
    )
    ST = S.T.tocsr()
    if len(_ROT_CACHE) >= _ROT_CACHE_LIMIT:
        _ROT_CACHE.clear()
    _ROT_CACHE[key] = (S, ST)
    return S, ST


def rotate_inplane(volume, angle_deg):
    """Rotate each axial slice (fixed third index) about the slice center.

    Accepts a single (n, n) slice or an (n, n, d3) volume, as ndarray or
    Tensor; the in-plane cross-section must be square.  Zero fill outside
    the grid; differentiable via the operator transpose.
    """
    is_tensor = isinstance(volume, Tensor)
    arr = volume.data if is_tensor else np.asarray(volume, dtype=np.float64)
    if arr.ndim not in (2, 3):
        raise ValueError(f"rotate_inplane: expected 2-d or 3-d input, got {arr.shape}")
    n = arr.shape[0]
    if arr.shape[1] != n:
        raise ValueError(
            f"rotate_inplane: in-plane extents must be square, got {arr.shape[:2]}"
        )
    S, ST = rotation_matrix(n, angle_deg)
    shp = arr.shape
    data = (S @ arr.reshape(n * n, -1)).reshape(shp)

    if not is_tensor:
        return data
    out = Tensor(data, _parents=(volume,))
    if out.requires_grad:
        src = volume

        def bw():
            g = (ST @ out.grad.reshape(n * n, -1)).reshape(shp)
            src._accum(g)

        out._backward = bw
    return out
