"""Volume-in, soft-segmentation-out composition.

One forward pass runs, per orientation: orthogonal projection to depth
weights, weighted projection per angle, 2D segmentation into per-class
bin scores, learnable bin collapse, learnable filtered backprojection
back to a soft volume.  The per-orientation volumes are un-rotated and
merged by a learned (orientation, class) weight matrix; thresholding
the merged volume gives the final binary mask.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from .autodiff import Tensor
from .binning import BinWeights, collapse_bins
from .geometry import angle_set
from .networks import (ParameterStore, init_unet_params, masker_config,
                       predict_depth_mask, segmenter_config, unet_forward,
                       zscore_image)
from .radon import LiftParams, lift, radon_orthogonal, radon_weighted


@dataclass(frozen=True)
class PipelineConfig:
    """Scalar knobs of the whole chain.

    The 2D network configurations are derived, so a config serializes as
    a flat dict of scalars.  weighted=False short-circuits the depth
    mask to all-ones, which is the ablation mode.
    """

    v: int = 1
    M: float = 10.0
    bins: int = 5
    classes: int = 1
    tau: float = 0.5
    weighted: bool = True
    net_depth: int = 3
    net_filters: int = 16

    def __post_init__(self):
        if self.v not in (1, 2, 3):
            raise ValueError(f"v must be 1, 2 or 3, got {self.v}")
        if self.bins < 2:
            raise ValueError("bins must be at least 2")
        if self.classes < 1:
            raise ValueError("classes must be positive")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.M < 1.0:
            raise ValueError("angle sampling factor M must be >= 1")

    @property
    def seg_config(self):
        return segmenter_config(self.classes, self.bins, self.net_depth,
                                self.net_filters, in_channels=self.classes)

    @property
    def mask_config(self):
        return masker_config(self.classes, self.net_depth, self.net_filters)


@dataclass
class FusionWeights:
    """Per-(orientation, class) mixing weights, shape (v, classes)."""

    W: Tensor

    def __post_init__(self):
        arr = self.W.data if isinstance(self.W, Tensor) else self.W
        if arr.ndim != 2:
            raise ValueError(f"fusion weights must be 2-d, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("fusion weights must be finite")

    @property
    def v(self):
        return self.W.shape[0]

    @property
    def classes(self):
        return self.W.shape[1]


def init_pipeline_params(config, seed):
    """Fresh ParameterStore with every trainable group.

    Both networks are always initialized, even in unweighted mode, so
    toggling the ablation never changes the checkpoint layout.
    """
    store = ParameterStore()
    store.add_group("seg", init_unet_params(
        config.seg_config, np.random.default_rng([seed, 0])))
    store.add_group("mask", init_unet_params(
        config.mask_config, np.random.default_rng([seed, 1])))
    lp = LiftParams.initial(classes=config.classes)
    store.add("lift.kernel", lp.kernel)
    store.add("lift.scale", lp.scale)
    store.add("lift.bias", lp.bias)
    store.add("bins.w", BinWeights.centers(config.classes, config.bins).w)
    store.add("fusion.W", Tensor(np.ones((config.v, config.classes)),
                                 requires_grad=True))
    return store


def lift_params_from(store):
    return LiftParams(store["lift.kernel"], store["lift.scale"],
                      store["lift.bias"])


def _oriented_shape(shape, v):
    d1, d2, d3 = shape
    if v == 1:
        return (d1, d2, d3)
    if v == 2:
        return (d1, d3, d2)
    return (d3, d2, d1)


def check_volume_for(config, shape):
    """Reject incompatible volumes before any heavy compute."""
    if len(shape) != 3:
        raise ValueError(f"volume must be 3-d, got {shape}")
    div = config.seg_config.divisor
    for l in range(1, config.v + 1):
        s = _oriented_shape(shape, l)
        if s[0] != s[1]:
            raise ValueError(
                f"orientation {l} sees in-plane extents {s[:2]}; the "
                f"projection chain needs them square")
        if s[1] % div or s[2] % div:
            raise ValueError(
                f"orientation {l} projection extents ({s[1]}, {s[2]}) "
                f"must be divisible by 2^depth = {div}")


def pad_to_square(volume):
    """Zero-pad the smaller in-plane axis, centered, until d1 = d2."""
    arr = np.asarray(volume, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"volume must be 3-d, got {arr.shape}")
    d1, d2, _ = arr.shape
    if d1 == d2:
        return arr
    diff = abs(d1 - d2)
    lo, hi = diff // 2, diff - diff // 2
    pad = [(0, 0)] * 3
    pad[0 if d1 < d2 else 1] = (lo, hi)
    return np.pad(arr, pad)


def depth_weights(config, store, x_l, angle_deg):
    """Per-class depth weight images for one projection direction."""
    arr = x_l.data if isinstance(x_l, Tensor) else x_l
    n, _, d3 = arr.shape
    if not config.weighted:
        q = np.ones((n, d3))
        return [q] * config.classes
    ortho = radon_orthogonal(x_l, angle_deg)
    dm = predict_depth_mask(config.mask_config, store.group("mask"), ortho)
    if config.classes == 1:
        return [dm.q]
    return [m.q for m in dm]


def project_and_segment(config, store, x_l, angles, mask_override=None):
    """Weighted projections for all angles, segmented in one batch.

    Returns (p, d2, d3, classes, bins) bin scores.  mask_override, when
    given, is called as (x_l, angle) -> list of per-class depth weights
    and replaces the depth-mask network (diagnostics and ablation
    equivalence tests).
    """
    imgs = []
    for angle in angles.angles:
        if mask_override is not None:
            qs = mask_override(x_l, angle)
        else:
            qs = depth_weights(config, store, x_l, angle)
        chans = [zscore_image(radon_weighted(x_l, angle, q)) for q in qs]
        imgs.append(ad.stack(chans, axis=0))
    batch = ad.stack(imgs, axis=0)  # (p, classes, d2, d3)
    return unet_forward(config.seg_config, store.group("seg"), batch)


def forward(config, store, x, mask_override=None):
    """Soft segmentation (d1, d2, d3, classes) of one volume."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    check_volume_for(config, arr.shape)
    vols = []
    orientations = tuple(range(1, config.v + 1))
    for l in orientations:
        x_l = geo.orient(x if isinstance(x, Tensor) else arr, l)
        l_arr = x_l.data if isinstance(x_l, Tensor) else x_l
        angles = angle_set(l_arr.shape[0], config.M)
        scores = project_and_segment(config, store, x_l, angles,
                                     mask_override=mask_override)
        collapsed = collapse_bins(scores, BinWeights(store["bins.w"]))
        vols.append(lift(collapsed, lift_params_from(store), angles))
    return fuse(vols, FusionWeights(store["fusion.W"]),
                orientations=orientations)


def fuse(volumes, weights, orientations=None):
    """Un-rotate each orientation's soft volume and mix them per class.

    out[..., k] = (1/v) * sum_l orient_inverse(vol_l, l)[..., k] * W[l, k]
    """
    vols = [v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))
            for v in volumes]
    nv = len(vols)
    if nv == 0:
        raise ValueError("fuse needs at least one volume")
    if orientations is None:
        orientations = tuple(range(1, nv + 1))
    W = weights.W if isinstance(weights, FusionWeights) else weights
    if not isinstance(W, Tensor):
        W = Tensor(np.asarray(W, dtype=np.float64))
    c = vols[0].shape[-1]
    if W.shape != (nv, c):
        raise ValueError(
            f"fusion weights shape {W.shape} does not match "
            f"{nv} volumes with {c} classes")
    outs = []
    for k in range(c):
        acc = None
        shape0 = None
        for idx, (l, vol) in enumerate(zip(orientations, vols)):
            un = geo.orient_inverse(vol[..., k], l)
            if shape0 is None:
                shape0 = un.shape
            elif un.shape != shape0:
                raise ValueError(
                    f"orientation {l} un-rotates to {un.shape}, "
                    f"expected {shape0}")
            term = un * W[idx, k]
            acc = term if acc is None else acc + term
        outs.append(acc * (1.0 / nv))
    return ad.stack(outs, axis=-1)


def threshold(soft, tau=0.5):
    """Binary mask: voxel on iff soft value >= tau."""
    arr = soft.data if isinstance(soft, Tensor) else np.asarray(soft)
    return (arr >= tau).astype(np.float64)
