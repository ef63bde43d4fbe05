"""Bin-discretized regression targets and their learnable collapse.

Projection-space regression targets are quantized per class into b
equidistant bins of the per-sample value range, giving one-hot maps a
softmax head can be trained against.  Predicted bin probabilities come
back to scalar maps as a weighted sum over the bin axis; the weights
start at the bin centers and stay learnable.

Axis convention: bin maps are (..., c, b) with classes then bins last,
matching the segmentation-head output layout.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class BinnedMap:
    """Per-pixel bin encoding, shape (d2, d3, c, b).

    kind "onehot" marks discretized targets (exactly one 1 per pixel and
    class); kind "probability" marks predicted distributions (nonnegative,
    unit sum over bins).  A one-hot map is itself a valid probability map.
    y_max keeps the per-class target maxima used for scaling (targets only).
    """

    data: np.ndarray
    kind: str
    y_max: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ValueError(f"bin map must be 4-d, got {self.data.shape}")
        if self.kind == "onehot":
            if not np.all((self.data == 0.0) | (self.data == 1.0)):
                raise ValueError("one-hot bin map must contain only 0 and 1")
            if not np.all(self.data.sum(axis=-1) == 1.0):
                raise ValueError("one-hot bin map needs exactly one 1 per bin axis")
        elif self.kind == "probability":
            _check_probability(self.data)
        else:
            raise ValueError(f"unknown bin map kind {self.kind!r}")


def _check_probability(arr):
    if arr.min() < 0.0:
        raise ValueError("bin probabilities must be nonnegative")
    sums = arr.sum(axis=-1)
    if np.abs(sums - 1.0).max() > 1e-9:
        raise ValueError("bin probabilities must sum to 1 over the bin axis")


@dataclass
class BinWeights:
    """Learnable per-class collapse weights, shape (c, b)."""

    w: Tensor

    def __post_init__(self):
        if self.w.ndim != 2:
            raise ValueError(f"bin weights must be (classes, bins), got {self.w.shape}")
        if not np.all(np.isfinite(self.w.data)):
            raise ValueError("bin weights must be finite")

    @classmethod
    def centers(cls, classes, bins, requires_grad=True):
        """Initialize at the bin centers (j + 0.5) / b."""
        w = np.tile((np.arange(bins) + 0.5) / bins, (classes, 1))
        return cls(w=Tensor(w, requires_grad=requires_grad))


def discretize_target(y, b):
    """Quantize a nonnegative target map (d2, d3, c) into b one-hot bins.

    Values are scaled by the per-class maximum of this sample, bin index
    min(floor(scaled * b), b - 1); an all-zero class maps to bin 0.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 3:
        raise ValueError(f"target must be (d2, d3, c), got {y.shape}")
    if b < 2:
        raise ValueError(f"need at least 2 bins, got {b}")
    if y.min() < 0.0:
        raise ValueError("target values must be nonnegative")
    y_max = y.max(axis=(0, 1))
    scale = np.where(y_max > 0.0, y_max, 1.0)
    idx = np.minimum((y / scale * b).astype(np.int64), b - 1)
    data = np.zeros(y.shape + (b,))
    np.put_along_axis(data, idx[..., None], 1.0, axis=-1)
    return BinnedMap(data=data, kind="onehot", y_max=y_max)


def collapse_bins(pred, weights):
    """Weighted sum over the bin axis: out[..., k] = sum_j p[..., k, j] w[k, j].

    pred is a probability-kind BinnedMap, or a raw Tensor/ndarray of shape
    (..., c, b) that satisfies the probability invariant (a one-hot target
    qualifies).  Differentiable in both the predictions and the weights.
    """
    if isinstance(pred, BinnedMap):
        arr, pt = pred.data, None
    elif isinstance(pred, Tensor):
        arr, pt = pred.data, pred
    else:
        arr, pt = np.asarray(pred, dtype=np.float64), None
        if arr.ndim < 2:
            raise ValueError(f"bin predictions must be (..., c, b), got {arr.shape}")
    _check_probability(arr)

    w = weights.w if isinstance(weights, BinWeights) else weights
    wt = w if isinstance(w, Tensor) else None
    warr = w.data if isinstance(w, Tensor) else np.asarray(w, dtype=np.float64)
    if warr.shape != arr.shape[-2:]:
        raise ValueError(
            f"weights {warr.shape} do not match class/bin axes {arr.shape[-2:]}"
        )

    data = np.einsum("...kj,kj->...k", arr, warr)
    parents = tuple(t for t in (pt, wt) if t is not None)
    if not any(t.requires_grad for t in parents):
        # keep the caller's container type, but record no graph
        return Tensor(data) if pt is not None else data
    out = Tensor(data, _parents=parents)
    c, b = warr.shape

    def bw():
        g = out.grad
        if pt is not None and pt.requires_grad:
            pt._accum(np.einsum("...k,kj->...kj", g, warr))
        if wt is not None and wt.requires_grad:
            wt._accum(np.einsum("nkj,nk->kj", arr.reshape(-1, c, b),
                                g.reshape(-1, c)))

    out._backward = bw
    return out
