"""Line-integral projections and their learnable inverse.

The forward model sums rotated volumes over the first (depth) axis, one
image per angle.  Everything downstream of it is built from exact
adjoints: backprojection is the literal transpose of projection, the
ramp filter is self-adjoint by construction, and filtered backprojection
chains the two with a pi/p Riemann weight.  The lift op adds the
learnable pieces (per-class smoothing kernel, scale, bias) that turn a
filtered backprojection into a soft volumetric mask.

Mask-weighted projection replaces the plain depth sum with
out(s, z) = sum_t rot(x)(t, s, z) * q(t, z), so a weight image q in
(depth, axial) coordinates can suppress depth ranges per axial slice.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import AngleSet, rotation_matrix


@dataclass
class ProjectionStack:
    """Per-angle projection images, shape (p, d2, d3): angle x transverse x
    axial.  data is a Tensor inside differentiable chains, a plain ndarray
    otherwise."""

    data: object
    angles: AngleSet

    def __post_init__(self):
        arr = self.data.data if isinstance(self.data, Tensor) else self.data
        if arr.ndim != 3:
            raise ValueError(f"projection stack must be 3-d, got {arr.shape}")
        if arr.shape[0] != len(self.angles):
            raise ValueError(
                f"stack has {arr.shape[0]} images for {len(self.angles)} angles"
            )
        if not np.all(np.isfinite(arr)):
            raise ad.NumericsError("projection stack contains non-finite values")

    @property
    def p(self):
        return len(self.angles)


@dataclass
class DepthMask:
    """Depth weights q(t, z) in [0, 1]: depth along the projection
    direction x axial.  Wraps a Tensor when the weights come out of a
    network and gradients should keep flowing."""

    q: object

    def __post_init__(self):
        arr = self.q.data if isinstance(self.q, Tensor) else np.asarray(self.q)
        if arr.ndim != 2:
            raise ValueError(f"depth mask must be 2-d, got {arr.shape}")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("depth mask entries must lie in [0, 1]")

    @property
    def shape(self):
        return (self.q.data if isinstance(self.q, Tensor) else self.q).shape


def _check_volume(arr):
    if arr.ndim != 3:
        raise ValueError(f"volume must be 3-d, got {arr.shape}")
    if arr.shape[0] != arr.shape[1]:
        raise ValueError(
            f"in-plane extents must be square, got {arr.shape[:2]}"
        )


def _weighted_project_raw(arr, angle_deg, q):
    """sum_t rotate(arr, angle)(t, s, z) * q(t, z) on raw arrays.

    The plain projection goes through this same line with q of ones, so
    the two agree bitwise for any angle.
    """
    n, _, d3 = arr.shape
    S, _ = rotation_matrix(n, angle_deg)
    rot = (S @ arr.reshape(n * n, d3)).reshape(n, n, d3)
    return np.einsum("tsz,tz->sz", rot, q), rot


_ONES = {}


def _ones_mask(n, d3):
    key = (n, d3)
    if key not in _ONES:
        _ONES[key] = np.ones((n, d3))
    return _ONES[key]


def _radon_raw(arr, angles):
    n, _, d3 = arr.shape
    q = _ones_mask(n, d3)
    out = np.empty((len(angles), n, d3))
    for i, ang in enumerate(angles.angles):
        out[i] = _weighted_project_raw(arr, ang, q)[0]
    return out


def _backproject_raw(stack_arr, angles):
    """Exact transpose of _radon_raw: replicate each image along depth,
    then apply the transposed rotation, summing angles in fixed order."""
    _, n, d3 = stack_arr.shape
    out = np.zeros((n, n, d3))
    for i, ang in enumerate(angles.angles):
        _, ST = rotation_matrix(n, ang)
        rep = np.broadcast_to(stack_arr[i][None], (n, n, d3)).reshape(n * n, d3)
        out += (ST @ rep).reshape(n, n, d3)
    return out


def _ramp_raw(stack_arr):
    d2 = stack_arr.shape[1]
    npad = 1 << (2 * d2 - 1).bit_length()
    response = np.fft.rfftfreq(npad)  # |frequency| in cycles/sample, DC = 0
    spec = np.fft.rfft(stack_arr, n=npad, axis=1)
    filtered = np.fft.irfft(spec * response[None, :, None], n=npad, axis=1)
    return filtered[:, :d2, :]


# ---- public operations ----------------------------------------------------


def radon_plain(volume, angles):
    """Project a volume at every angle of the fan: rotate in-plane, then
    sum over the first axis.  Differentiable; gradient is backprojection."""
    is_t = isinstance(volume, Tensor)
    arr = volume.data if is_t else np.asarray(volume, dtype=np.float64)
    _check_volume(arr)
    data = _radon_raw(arr, angles)
    if not is_t:
        return ProjectionStack(data, angles)
    out = Tensor(data, _parents=(volume,))
    if out.requires_grad:
        out._backward = lambda: volume._accum(_backproject_raw(out.grad, angles))
    return ProjectionStack(out, angles)


def radon_orthogonal(volume, angle_deg):
    """Single projection from the direction orthogonal to angle_deg.

    Output coordinates are (depth along direction angle_deg, axial), which
    is the frame the depth-mask weights live in.
    """
    is_t = isinstance(volume, Tensor)
    arr = volume.data if is_t else np.asarray(volume, dtype=np.float64)
    _check_volume(arr)
    n, _, d3 = arr.shape
    q = _ones_mask(n, d3)
    data, rot = _weighted_project_raw(arr, angle_deg + 90.0, q)
    if not is_t:
        return data
    out = Tensor(data, _parents=(volume,))
    if out.requires_grad:
        def bw():
            _, ST = rotation_matrix(n, angle_deg + 90.0)
            rep = np.broadcast_to(out.grad[None], (n, n, d3)).reshape(n * n, d3)
            volume._accum((ST @ rep).reshape(n, n, d3))

        out._backward = bw
    return out


def radon_weighted(volume, angle_deg, mask):
    """Depth-weighted projection: out(s,z) = sum_t rot(x)(t,s,z) * q(t,z).

    Differentiable in both the volume and the weights q.
    """
    if isinstance(mask, DepthMask):
        mask = mask.q
    vol_t = isinstance(volume, Tensor)
    mask_t = isinstance(mask, Tensor)
    arr = volume.data if vol_t else np.asarray(volume, dtype=np.float64)
    _check_volume(arr)
    q = mask.data if mask_t else np.asarray(mask, dtype=np.float64)
    n, _, d3 = arr.shape
    if q.shape != (n, d3):
        raise ValueError(
            f"depth mask must have shape ({n}, {d3}), got {q.shape}"
        )
    if q.min() < 0.0 or q.max() > 1.0:
        raise ValueError("depth mask entries must lie in [0, 1]")
    data, rot = _weighted_project_raw(arr, angle_deg, q)
    if not (vol_t or mask_t):
        return data

    parents = tuple(t for t in (volume, mask) if isinstance(t, Tensor))
    out = Tensor(data, _parents=parents)
    if out.requires_grad:
        def bw():
            g = out.grad
            if mask_t and mask.requires_grad:
                mask._accum(np.einsum("tsz,sz->tz", rot, g))
            if vol_t and volume.requires_grad:
                _, ST = rotation_matrix(n, angle_deg)
                drot = g[None, :, :] * q[:, None, :]
                volume._accum((ST @ drot.reshape(n * n, d3)).reshape(n, n, d3))

        out._backward = bw
    return out


def backproject(stack):
    """Exact adjoint of radon_plain; the gradient path of projection."""
    is_t = isinstance(stack.data, Tensor)
    arr = stack.data.data if is_t else stack.data
    vol = _backproject_raw(arr, stack.angles)
    if not is_t:
        return vol
    out = Tensor(vol, _parents=(stack.data,))
    if out.requires_grad:
        src, angles = stack.data, stack.angles
        out._backward = lambda: src._accum(_radon_raw(out.grad, angles))
    return out


def ramp_filter(stack):
    """Ram-Lak filter each transverse profile (fixed angle and axial index).

    Zero-padded to the next power of two >= 2*d2, frequency response equal
    to |frequency| with the DC bin zeroed.  Linear and self-adjoint.
    """
    is_t = isinstance(stack.data, Tensor)
    arr = stack.data.data if is_t else stack.data
    data = _ramp_raw(arr)
    if not is_t:
        return ProjectionStack(data, stack.angles)
    out = Tensor(data, _parents=(stack.data,))
    if out.requires_grad:
        src = stack.data
        out._backward = lambda: src._accum(_ramp_raw(out.grad))
    return ProjectionStack(out, stack.angles)


def fbp(stack):
    """Filtered backprojection: (pi/p) * backproject(ramp_filter(stack)).

    Linear; the gradient is the adjoint chain (pi/p) * ramp(project(g)).
    """
    p = len(stack.angles)
    if p == 0:
        raise ValueError("fbp: empty angle set")
    scale = np.pi / p
    is_t = isinstance(stack.data, Tensor)
    arr = stack.data.data if is_t else stack.data
    vol = scale * _backproject_raw(_ramp_raw(arr), stack.angles)
    if not is_t:
        return vol
    out = Tensor(vol, _parents=(stack.data,))
    if out.requires_grad:
        src, angles = stack.data, stack.angles
        out._backward = lambda: src._accum(
            scale * _ramp_raw(_radon_raw(out.grad, angles))
        )
    return out


# ---- learnable lift -------------------------------------------------------


@dataclass
class LiftParams:
    """Per-class parameters of the projection-to-volume lift: a depthwise
    smoothing kernel applied to each angle's image, then a scale and bias
    inside the output sigmoid."""

    kernel: Tensor  # (classes, k, k), k odd
    scale: Tensor   # (classes,)
    bias: Tensor    # (classes,)

    def __post_init__(self):
        c, kh, kw = self.kernel.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("lift kernel extents must be odd")
        if self.scale.shape != (c,) or self.bias.shape != (c,):
            raise ValueError("lift scale/bias must be per-class vectors")

    @classmethod
    def initial(cls, classes=1, ksize=5, scale=10.0, bias=-5.0,
                requires_grad=True):
        """Delta kernel with a soft threshold at reconstruction value 0.5:
        sigmoid(scale * r + bias) crosses 1/2 at r = -bias/scale."""
        k = np.zeros((classes, ksize, ksize))
        k[:, ksize // 2, ksize // 2] = 1.0
        return cls(
            kernel=Tensor(k, requires_grad=requires_grad),
            scale=Tensor(np.full(classes, float(scale)), requires_grad=requires_grad),
            bias=Tensor(np.full(classes, float(bias)), requires_grad=requires_grad),
        )

    @property
    def classes(self):
        return self.kernel.shape[0]


def _lift_responses(collapsed, params, angles):
    """Per-class pre-activation reconstructions: smooth each angle image
    with the class kernel, then filtered backprojection."""
    x = collapsed if isinstance(collapsed, Tensor) else Tensor(collapsed)
    p, d2, d3, c = x.shape
    if p != len(angles):
        raise ValueError(f"lift: {p} images for {len(angles)} angles")
    if c != params.classes:
        raise ValueError(f"lift: {c} classes vs params for {params.classes}")
    ksize = params.kernel.shape[1]
    for k in range(c):
        imgs = x[..., k].reshape(p, 1, d2, d3)
        kern = params.kernel[k].reshape(1, 1, ksize, ksize)
        sm = ad.conv2d(imgs, kern, padding="same").reshape(p, d2, d3)
        yield fbp(ProjectionStack(sm, angles))


def lift_response(collapsed, params, angles):
    """The linear part of the lift, (d1, d2, d3, c): what the output
    sigmoid sees before scale and bias are applied.  Exposed so the
    sigmoid operating point can be placed against actual reconstruction
    values instead of guessed."""
    return ad.stack(list(_lift_responses(collapsed, params, angles)), axis=-1)


def lift(collapsed, params, angles):
    """Lift per-angle class images (p, d2, d3, c) to soft volume masks
    (d1, d2, d3, c): smooth each image with the class kernel, filtered
    backprojection over angles, then sigmoid(scale * r + bias)."""
    outs = [
        ad.sigmoid(r * params.scale[k] + params.bias[k])
        for k, r in enumerate(_lift_responses(collapsed, params, angles))
    ]
    return ad.stack(outs, axis=-1)
