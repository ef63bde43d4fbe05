"""Losses, the Adadelta optimizer, the staged training recipe, and the
evaluation side: Dice, Hausdorff, per-sample reports, cross-validation.

Training runs in up to three stages.  "mask" fits the depth-mask net on
orthogonal-projection supervision, "seg" fits the segmenter on weighted
projections against bin-discretized targets with the mask net frozen,
and "finetune" adjusts the small operator set (lift kernel/scale/bias,
bin weights, fusion weights) against volumetric Dice.  A flag unfreezes
the networks during fine-tuning for fully end-to-end updates.
"""

import json
import time
from dataclasses import dataclass, asdict, replace

import numpy as np
from scipy import ndimage

from . import geometry as geo
from .autodiff import Tensor, NumericsError, ShapeError
from .binning import BinnedMap, BinWeights, collapse_bins, discretize_target
from .geometry import angle_set
from .networks import unet_forward, zscore_image, depth_mask_target
from .pipeline import (FusionWeights, check_volume_for, depth_weights,
                       forward, fuse, init_pipeline_params, lift_params_from,
                       project_and_segment, threshold)
from .radon import (lift, lift_response, radon_orthogonal, radon_plain,
                    radon_weighted)

STAGES = ("mask", "seg", "finetune")

# per-purpose rng stream tags, combined with the user seed
_STREAM_MASK = 11
_STREAM_SEG = 12
_STREAM_FINETUNE = 13
_STREAM_FOLDS = 29


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of the staged recipe.  epochs applies per stage.

    The 130-epoch default matches full-scale runs; desk-scale runs pass
    30.  minibatch counts projection images in the two network stages;
    fine-tuning always steps per whole volume.
    """

    stages: tuple = STAGES
    epochs: int = 130
    minibatch: int = 10
    lr: float = 0.2
    rho: float = 0.95
    eps: float = 1e-6
    seed: int = 0
    unfreeze_networks: bool = False
    calibrate_lift: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        unknown = [s for s in self.stages if s not in STAGES]
        if unknown:
            raise ValueError(
                f"unknown stages {unknown}; valid stages are {STAGES}")
        if len(set(self.stages)) != len(self.stages):
            raise ValueError(f"duplicate stages in {self.stages}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.minibatch < 1:
            raise ValueError(f"minibatch must be >= 1, got {self.minibatch}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")


# ---- losses ---------------------------------------------------------------


def _plain(x):
    if isinstance(x, BinnedMap):
        x = x.data
    if isinstance(x, Tensor):
        x = x.data
    return np.asarray(x, dtype=np.float64)


def dice_loss(pred, target, eps=1.0, spatial_axes=None):
    """Smoothed soft-Dice loss: 1 - (2*sum(p*g) + eps)/(sum p + sum g + eps).

    pred is a Tensor (or array) of soft values in [0, 1]; target must be
    binary and is treated as a constant.  With spatial_axes=None a single
    Dice is computed over all entries.  Otherwise the sums run over the
    given axes only and the per-channel losses are averaged, which is how
    multi-bin, multi-class targets are scored: one Dice per (sample,
    class, bin) channel.
    """
    if eps < 0:
        raise ValueError(f"smoothing must be >= 0, got {eps}")
    p = pred if isinstance(pred, Tensor) else Tensor(_plain(pred))
    g = _plain(target)
    if p.shape != g.shape:
        raise ShapeError(
            f"dice_loss: prediction {p.shape} vs target {g.shape}")
    if not np.all((g == 0.0) | (g == 1.0)):
        raise ValueError("dice_loss: target must be binary")
    inter = (p * g).sum(axis=spatial_axes)
    psum = p.sum(axis=spatial_axes)
    gsum = g.sum(axis=spatial_axes)
    frac = (inter * 2.0 + eps) / (psum + gsum + eps)
    loss = 1.0 - frac
    if spatial_axes is None:
        return loss
    return loss.mean()


def dice_score(a, b):
    """Overlap of two binary masks, 2|A&B| / (|A|+|B|); 1.0 when both
    are empty."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"dice_score: shapes {a.shape} vs {b.shape}")
    for name, arr in (("a", a), ("b", b)):
        if not np.all((arr == 0.0) | (arr == 1.0)):
            raise ValueError(f"dice_score: {name} is not binary")
    na, nb = a.sum(), b.sum()
    if na + nb == 0:
        return 1.0
    return float(2.0 * (a * b).sum() / (na + nb))


def hausdorff(a, b):
    """Symmetric Hausdorff distance between two masks, in voxel units.

    Nonzero entries are set members; distances are Euclidean over voxel
    indices, computed with an exact distance transform.  Both sets empty
    gives 0.0; exactly one empty gives +inf as a sentinel.
    """
    a = np.asarray(a) > 0
    b = np.asarray(b) > 0
    if a.shape != b.shape:
        raise ShapeError(f"hausdorff: shapes {a.shape} vs {b.shape}")
    ea, eb = bool(a.any()), bool(b.any())
    if not ea and not eb:
        return 0.0
    if ea != eb:
        return float("inf")
    to_b = ndimage.distance_transform_edt(~b)
    to_a = ndimage.distance_transform_edt(~a)
    return float(max(to_b[a].max(), to_a[b].max()))


# ---- optimizer ------------------------------------------------------------


def adadelta_step(param, grad, state, lr=0.2, rho=0.95, eps=1e-6):
    """One Adadelta update on a single array; pure, returns new values.

    state is (avg_sq_grad, avg_sq_step) shaped like param, or None for a
    fresh start.  E[g2] <- rho E[g2] + (1-rho) g2; the step scales g by
    lr * RMS(prev steps)/RMS(g) with RMS(t) = sqrt(t + eps).
    """
    p = np.asarray(param, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != p.shape:
        raise ShapeError(f"adadelta_step: grad {g.shape} vs param {p.shape}")
    if not np.isfinite(g).all():
        raise NumericsError("adadelta_step: non-finite gradient")
    if state is None:
        eg2 = np.zeros_like(p)
        ed2 = np.zeros_like(p)
    else:
        eg2, ed2 = (np.asarray(s, dtype=np.float64) for s in state)
    eg2 = rho * eg2 + (1.0 - rho) * g * g
    delta = -lr * np.sqrt(ed2 + eps) / np.sqrt(eg2 + eps) * g
    ed2 = rho * ed2 + (1.0 - rho) * delta * delta
    return p + delta, (eg2, ed2)


class Adadelta:
    """Stateful wrapper driving adadelta_step over named tensors.

    A missing gradient counts as zero: the parameter stays put and the
    accumulators decay.  Non-finite gradients abort with the offending
    parameter names, since continuing would poison the accumulators.
    """

    def __init__(self, named_tensors, lr=0.2, rho=0.95, eps=1e-6):
        if lr < 0:
            raise ValueError(f"lr must be >= 0, got {lr}")
        if not 0.0 < rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1), got {rho}")
        if eps <= 0:
            raise ValueError(f"eps must be > 0, got {eps}")
        if isinstance(named_tensors, dict):
            named_tensors = named_tensors.items()
        self.lr, self.rho, self.eps = float(lr), float(rho), float(eps)
        self.steps = 0
        self._slots = []
        for name, t in named_tensors:
            if not isinstance(t, Tensor):
                raise TypeError(f"parameter {name!r} is not a Tensor")
            self._slots.append(
                [name, t, np.zeros_like(t.data), np.zeros_like(t.data)])

    def zero_grads(self):
        for _, t, _, _ in self._slots:
            t.zero_grad()

    def step(self):
        self.steps += 1
        bad = [name for name, t, _, _ in self._slots
               if t.grad is not None and not np.isfinite(t.grad).all()]
        if bad:
            raise NumericsError(
                f"non-finite gradient at step {self.steps} in: "
                + ", ".join(bad))
        for slot in self._slots:
            name, t, eg2, ed2 = slot
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            new, (eg2, ed2) = adadelta_step(
                t.data, g, (eg2, ed2), self.lr, self.rho, self.eps)
            t.data[...] = new
            slot[2], slot[3] = eg2, ed2


# ---- stage datasets -------------------------------------------------------


def _orient_mask(y, l):
    """Rotate a binary mask volume, per class for a trailing class axis."""
    y = np.asarray(y)
    if y.ndim == 3:
        return geo.orient(y.astype(np.float64), l)
    return np.stack(
        [geo.orient(y[..., k].astype(np.float64), l)
         for k in range(y.shape[-1])], axis=-1)


def _mask_classes(y):
    y = np.asarray(y)
    if y.ndim == 3:
        return 1
    if y.ndim == 4:
        return y.shape[-1]
    raise ShapeError(f"mask must be 3-d or (d1,d2,d3,c), got {y.shape}")


def _check_pairs(pairs, config):
    if not pairs:
        raise ValueError("empty training dataset")
    for x, y, sid in pairs:
        check_volume_for(config, np.asarray(x).shape)
        c = _mask_classes(y)
        if c != config.classes:
            raise ValueError(
                f"sample {sid}: mask has {c} classes, config expects "
                f"{config.classes}")


def mask_stage_data(pairs, config):
    """Inputs and targets for the depth-mask stage.

    One item per (sample, orientation, angle): the z-scored orthogonal
    projection as a single-channel image, and the binary reach-through
    target.  Returns (inputs (N,1,d1,d3), targets (N,d1,d3,c)).
    """
    _check_pairs(pairs, config)
    inputs, targets = [], []
    for x, y, _sid in pairs:
        x = np.asarray(x, dtype=np.float64)
        for l in range(1, config.v + 1):
            x_l = geo.orient(x, l)
            y_l = _orient_mask(y, l)
            angles = angle_set(x_l.shape[0], config.M)
            for a in angles.angles:
                img = zscore_image(radon_orthogonal(x_l, a))
                t = depth_mask_target(y_l, a)
                if t.ndim == 2:
                    t = t[..., None]
                inputs.append(img[None])
                targets.append(t)
    return np.stack(inputs), np.stack(targets)


def seg_stage_data(pairs, config, store):
    """Inputs and targets for the segmenter stage.

    Inputs are the per-class depth-weighted projections, z-scored and
    stacked as channels; the weights come from the frozen depth-mask net
    (or are flat in unweighted mode).  Targets are bin-discretized plain
    projections of the mask.  Returns (inputs (N,c,d2,d3), targets
    (N,d2,d3,c,b)).
    """
    _check_pairs(pairs, config)
    det = store.detached()
    if config.weighted and not det.group("mask"):
        raise ValueError(
            "weighted mode needs depth-mask parameters in the store; "
            "run the mask stage first or set weighted=False")
    inputs, targets = [], []
    for x, y, _sid in pairs:
        x = np.asarray(x, dtype=np.float64)
        for l in range(1, config.v + 1):
            x_l = geo.orient(x, l)
            y_l = _orient_mask(y, l)
            angles = angle_set(x_l.shape[0], config.M)
            if y_l.ndim == 3:
                mask_projs = [radon_plain(y_l, angles).data]
            else:
                mask_projs = [radon_plain(y_l[..., k], angles).data
                              for k in range(y_l.shape[-1])]
            for i, a in enumerate(angles.angles):
                qs = depth_weights(config, det, x_l, a)
                chans = []
                for q in qs:  # all inputs off-graph: the weights are frozen
                    rw = radon_weighted(x_l, a, q)
                    chans.append(zscore_image(np.asarray(
                        rw.data if isinstance(rw, Tensor) else rw)))
                inputs.append(np.stack(chans))
                ymap = np.stack([mp[i] for mp in mask_projs], axis=-1)
                targets.append(discretize_target(ymap, config.bins).data)
    return np.stack(inputs), np.stack(targets)


# ---- the shared projection-stage loop -------------------------------------


def _run_projection_stage(inputs, targets, net_config, params, tcfg,
                          stream, label):
    """Shuffled-minibatch Adadelta epochs on one 2-d network.

    params maps bare layer names to tensors (a store group).  Returns
    the per-epoch mean loss history.
    """
    n = inputs.shape[0]
    if n == 0:
        raise ValueError(f"{label}: empty training dataset")
    opt = Adadelta(
        [(f"{label}.{k}", t) for k, t in params.items()],
        lr=tcfg.lr, rho=tcfg.rho, eps=tcfg.eps)
    rng = np.random.default_rng([tcfg.seed, stream])
    history = []
    for _epoch in range(tcfg.epochs):
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for s in range(0, n, tcfg.minibatch):
            idx = order[s:s + tcfg.minibatch]
            out = unet_forward(net_config, params, Tensor(inputs[idx]))
            loss = dice_loss(out, targets[idx], spatial_axes=(1, 2))
            opt.zero_grads()
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
            seen += len(idx)
        history.append(total / seen)
    return history


def train_depth_mask(pairs, config, tcfg, store):
    """Stage one: fit the depth-mask net on orthogonal projections."""
    inputs, targets = mask_stage_data(pairs, config)
    return _run_projection_stage(
        inputs, targets, config.mask_config, store.group("mask"),
        tcfg, _STREAM_MASK, "mask")


def train_segmenter(pairs, config, tcfg, store):
    """Stage two: fit the segmenter on weighted projections against
    bin-discretized targets; the depth-mask net stays frozen.

    The bin weights are not touched here: the projection loss scores the
    bin channels directly, so it carries no gradient for them.  They
    stay at the bin centers until fine-tuning.
    """
    inputs, targets = seg_stage_data(pairs, config, store)
    return _run_projection_stage(
        inputs, targets, config.seg_config, store.group("seg"),
        tcfg, _STREAM_SEG, "seg")


# ---- fine-tuning ----------------------------------------------------------

_FINETUNE_NAMES = ("lift.kernel", "lift.scale", "lift.bias",
                   "bins.w", "fusion.W")


def calibrate_lift(pairs, config, store, sample_cap=8):
    """Place the lift sigmoid against observed reconstruction values.

    The bin-normalized projections reconstruct to values well below 1,
    so a fixed operating point leaves the sigmoid saturated and the
    sub-voxel steps of Adadelta cannot move scale and bias far enough to
    recover.  This measures the median pre-activation response inside
    and outside the true masks on (a few of) the training volumes and
    solves for scale and bias mapping those medians to +/-2.  Mutates
    the store in place; returns the chosen values per class.
    """
    det = store.detached()
    ins = [[] for _ in range(config.classes)]
    outs = [[] for _ in range(config.classes)]
    for x, y, _sid in pairs[:sample_cap]:
        x = np.asarray(x, dtype=np.float64)
        for l in range(1, config.v + 1):
            x_l = geo.orient(x, l)
            y_l = _orient_mask(y, l)
            if y_l.ndim == 3:
                y_l = y_l[..., None]
            angles = angle_set(x_l.shape[0], config.M)
            scores = project_and_segment(config, det, x_l, angles)
            collapsed = collapse_bins(scores.data,
                                      BinWeights(det["bins.w"]))
            r = lift_response(collapsed, lift_params_from(det), angles)
            arr = r.data if isinstance(r, Tensor) else r
            for k in range(config.classes):
                sel = y_l[..., k] > 0
                ins[k].append(arr[..., k][sel])
                outs[k].append(arr[..., k][~sel])
    scale = store["lift.scale"].data
    bias = store["lift.bias"].data
    for k in range(config.classes):
        inside = np.concatenate(ins[k]) if ins[k] else np.empty(0)
        outside = np.concatenate(outs[k]) if outs[k] else np.empty(0)
        if inside.size == 0 or outside.size == 0:
            continue
        med_in = float(np.median(inside))
        # the outside distribution has a long upper tail of streak
        # artifacts; anchoring its 99th percentile (not the median)
        # keeps those streaks below the decision point
        hi_out = float(np.quantile(outside, 0.99))
        span = med_in - hi_out
        if span <= 1e-6:
            continue  # no usable contrast; an untrained or degenerate net
        # map the two anchors to +2/-2, capping the slope so a thin span
        # cannot produce a saturated step function
        scale[k] = min(4.0 / span, 1e3)
        bias[k] = -scale[k] * (med_in + hi_out) / 2.0
    return {"scale": scale.tolist(), "bias": bias.tolist()}


def finetune_e2e(pairs, config, tcfg, store):
    """Stage three: whole-volume Dice steps on the small operator set.

    With the networks frozen (the default) the per-orientation bin
    scores are constants, so they are computed once and each step only
    rebuilds the collapse/lift/fuse tail.  unfreeze_networks switches to
    the full forward graph per step and trains everything.  Returns
    {"loss": history, "calibration": per-class values or None}.
    """
    _check_pairs(pairs, config)
    calibration = None
    if tcfg.calibrate_lift:
        calibration = calibrate_lift(pairs, config, store)

    names = list(_FINETUNE_NAMES)
    if tcfg.unfreeze_networks:
        names += [n for n in store.names() if n.startswith(("seg.", "mask."))]
    opt = Adadelta([(n, store[n]) for n in names],
                   lr=tcfg.lr, rho=tcfg.rho, eps=tcfg.eps)
    rng = np.random.default_rng([tcfg.seed, _STREAM_FINETUNE])

    orientations = tuple(range(1, config.v + 1))
    frozen = []
    if not tcfg.unfreeze_networks:
        det = store.detached()
        for x, y, _sid in pairs:
            x = np.asarray(x, dtype=np.float64)
            per_l = []
            for l in orientations:
                x_l = geo.orient(x, l)
                angles = angle_set(x_l.shape[0], config.M)
                scores = project_and_segment(config, det, x_l, angles)
                per_l.append((scores.data, angles))
            frozen.append(per_l)

    y4s = []
    for _x, y, _sid in pairs:
        y_l = np.asarray(y, dtype=np.float64)
        y4s.append(y_l[..., None] if y_l.ndim == 3 else y_l)

    history = []
    n = len(pairs)
    for _epoch in range(tcfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in order:
            if tcfg.unfreeze_networks:
                fused = forward(config, store, np.asarray(
                    pairs[i][0], dtype=np.float64))
            else:
                vols = []
                for scores, angles in frozen[i]:
                    collapsed = collapse_bins(
                        scores, BinWeights(store["bins.w"]))
                    vols.append(lift(
                        collapsed, lift_params_from(store), angles))
                fused = fuse(vols, FusionWeights(store["fusion.W"]),
                             orientations=orientations)
            loss = dice_loss(fused, y4s[i], spatial_axes=(0, 1, 2))
            opt.zero_grads()
            loss.backward()
            opt.step()
            total += float(loss.data)
        history.append(total / n)
    if tcfg.calibrate_lift:
        # the Dice steps above move the kernels and bin weights, which
        # shifts the reconstruction values the sigmoid sees and tends to
        # leave the 0.5 level about a voxel outside the boundary;
        # re-placing the operating point against the final fields puts
        # it back on the surface
        calibration = calibrate_lift(pairs, config, store)
    return {"loss": history, "calibration": calibration}


def train(pairs, config, tcfg, store=None):
    """Run the requested stages in recipe order; returns (store, log).

    Stages always execute mask -> seg -> finetune regardless of the
    order given, since each consumes the previous stage's parameters.
    In unweighted mode the mask stage is skipped (the net exists but
    nothing reads it) and noted in the log.
    """
    _check_pairs(pairs, config)
    if store is None:
        store = init_pipeline_params(config, tcfg.seed)
    log = {}
    if "mask" in tcfg.stages:
        if config.weighted:
            log["mask"] = train_depth_mask(pairs, config, tcfg, store)
        else:
            log["mask"] = "skipped: unweighted projections"
    if "seg" in tcfg.stages:
        log["seg"] = train_segmenter(pairs, config, tcfg, store)
    if "finetune" in tcfg.stages:
        ft = finetune_e2e(pairs, config, tcfg, store)
        log["finetune"] = ft["loss"]
        log["lift_calibration"] = ft["calibration"]
    return store, log


# ---- evaluation -----------------------------------------------------------


@dataclass
class EvalReport:
    """Per-sample metrics plus the summary statistics recomputable from
    them; config echo and seed pin down what produced the numbers."""

    samples: tuple
    aggregates: dict
    config: dict
    seed: object = None

    def to_dict(self):
        return {
            "samples": [dict(s, hausdorff=_render_inf(s["hausdorff"]))
                        for s in self.samples],
            "aggregates": self.aggregates,
            "config": self.config,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        samples = tuple(
            dict(s, hausdorff=_parse_inf(s["hausdorff"]))
            for s in d["samples"])
        return cls(samples=samples, aggregates=d["aggregates"],
                   config=d["config"], seed=d.get("seed"))


def _render_inf(v):
    return "inf" if np.isinf(v) else float(v)


def _parse_inf(v):
    return float("inf") if v == "inf" else float(v)


def aggregate_stats(values, exclude_infinite=False):
    """Box-plot statistics of a value list: mean, std, min, quartiles,
    median, max.  With exclude_infinite, +inf entries are dropped from
    the arithmetic and reported as a count; all-infinite (or empty)
    input yields null statistics."""
    vals = np.asarray(list(values), dtype=np.float64)
    out = {}
    if exclude_infinite:
        finite = vals[np.isfinite(vals)]
        out["infinite"] = int(vals.size - finite.size)
        vals = finite
    if vals.size == 0:
        for k in ("mean", "std", "min", "q1", "median", "q3", "max"):
            out[k] = None
        return out
    q1, med, q3 = np.quantile(vals, [0.25, 0.5, 0.75])
    out.update({
        "mean": float(vals.mean()),
        "std": float(vals.std()),
        "min": float(vals.min()),
        "q1": float(q1),
        "median": float(med),
        "q3": float(q3),
        "max": float(vals.max()),
    })
    return out


def _report_aggregates(samples):
    return {
        "dice": aggregate_stats([s["dice"] for s in samples]),
        "hausdorff": aggregate_stats([s["hausdorff"] for s in samples],
                                     exclude_infinite=True),
        "seconds": aggregate_stats([s["seconds"] for s in samples]),
    }


def evaluate(pairs, config, store, seed=None):
    """Threshold the pipeline's soft output and score each sample.

    Dice is averaged over classes, Hausdorff takes the worst class, and
    seconds is the wall-clock forward-plus-threshold time per volume.
    """
    if not pairs:
        raise ValueError("empty evaluation dataset")
    det = store.detached()
    samples = []
    for x, y, sid in pairs:
        x = np.asarray(x, dtype=np.float64)
        y4 = np.asarray(y, dtype=np.float64)
        if y4.ndim == 3:
            y4 = y4[..., None]
        t0 = time.perf_counter()
        soft = forward(config, det, x)
        pred = threshold(soft, config.tau)
        seconds = time.perf_counter() - t0
        dices, hds = [], []
        for k in range(config.classes):
            dices.append(dice_score(pred[..., k], y4[..., k]))
            hds.append(hausdorff(pred[..., k], y4[..., k]))
        samples.append({
            "id": sid,
            "dice": float(np.mean(dices)),
            "hausdorff": float(max(hds)),
            "seconds": float(seconds),
        })
    return EvalReport(samples=tuple(samples),
                      aggregates=_report_aggregates(samples),
                      config=asdict(config), seed=seed)


def save_report(report, path):
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, allow_nan=False)
        fh.write("\n")


def load_report(path):
    with open(path) as fh:
        return EvalReport.from_dict(json.load(fh))


# ---- cross-validation -----------------------------------------------------


@dataclass(frozen=True)
class FoldSplit:
    """A disjoint, exhaustive assignment of sample indices to folds."""

    folds: int
    assignment: tuple

    def __post_init__(self):
        object.__setattr__(self, "assignment", tuple(self.assignment))
        if self.folds < 2:
            raise ValueError(f"need at least 2 folds, got {self.folds}")
        used = set(self.assignment)
        if not used <= set(range(self.folds)):
            raise ValueError("fold assignment out of range")
        if used != set(range(self.folds)):
            raise ValueError("some fold would be empty")

    def indices(self, fold):
        return tuple(i for i, f in enumerate(self.assignment) if f == fold)

    def complement(self, fold):
        return tuple(i for i, f in enumerate(self.assignment) if f != fold)


def fold_split(n, folds, seed):
    """Near-equal random partition of range(n) into folds."""
    if folds < 2:
        raise ValueError(f"need at least 2 folds, got {folds}")
    if n < folds:
        raise ValueError(f"{n} samples cannot fill {folds} folds")
    perm = np.random.default_rng([seed, _STREAM_FOLDS]).permutation(n)
    assignment = np.empty(n, dtype=int)
    for pos, idx in enumerate(perm):
        assignment[idx] = pos % folds
    return FoldSplit(folds=folds, assignment=tuple(int(f) for f in assignment))


def _fold_seed(seed, fold):
    return int(np.random.SeedSequence(
        entropy=[seed, 31, fold]).generate_state(1, np.uint64)[0])


def cross_validate(pairs, folds, config, tcfg):
    """Train on each fold's complement, evaluate on the fold.

    Returns (per-fold reports, combined report over every sample's
    held-out evaluation).  Per-fold training seeds derive from the
    master seed so folds are independent but the whole run reproduces.
    """
    split = fold_split(len(pairs), folds, tcfg.seed)
    reports = []
    for f in range(folds):
        train_pairs = [pairs[i] for i in split.complement(f)]
        test_pairs = [pairs[i] for i in split.indices(f)]
        fold_tcfg = replace(tcfg, seed=_fold_seed(tcfg.seed, f))
        store, _log = train(train_pairs, config, fold_tcfg)
        reports.append(
            evaluate(test_pairs, config, store, seed=fold_tcfg.seed))
    combined = tuple(s for r in reports for s in r.samples)
    aggregate = EvalReport(
        samples=combined,
        aggregates=_report_aggregates(combined),
        config=dict(asdict(config), folds=folds),
        seed=tcfg.seed)
    return reports, aggregate
