"""Encoder-decoder networks for projection images, plus parameter storage.

Two instances of the same U-net skeleton do the 2D work: one segments
weighted projection images into per-class bin scores (softmax over the
bin axis), the other looks at the orthogonal projection and predicts
which depth rows contain target material (sigmoid head, used as the
depth weights of the next projection).  Both share one forward function;
only the head differs.

Parameters live in flat name -> Tensor maps.  A ParameterStore collects
several groups under dotted prefixes and serializes them to a
checkpoint: fixed magic, a JSON table of names and shapes, then raw
little-endian float64 payloads.  Loading reproduces every bit.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .radon import DepthMask, radon_orthogonal

_VAR_FLOOR = 1e-8


@dataclass(frozen=True)
class UNetConfig:
    """Architecture knobs.  Channel width doubles per encoder level.

    head is "bins" (softmax over ``bins`` scores per class) or "sigmoid"
    (one probability per class).
    """

    depth: int
    base_filters: int
    in_channels: int
    head: str
    classes: int
    bins: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.base_filters < 1 or self.in_channels < 1 or self.classes < 1:
            raise ValueError("channel counts must be positive")
        if self.head not in ("bins", "sigmoid"):
            raise ValueError(f"unknown head {self.head!r}")
        if self.head == "bins" and self.bins < 2:
            raise ValueError("bins head needs at least 2 bins")

    @property
    def out_channels(self):
        return self.classes * self.bins if self.head == "bins" else self.classes

    @property
    def divisor(self):
        return 1 << self.depth


def segmenter_config(classes, bins, depth=3, base_filters=16, in_channels=1):
    """Default projection-segmentation net at desk scale."""
    return UNetConfig(depth, base_filters, in_channels, "bins", classes, bins)


def masker_config(classes=1, depth=3, base_filters=16):
    """Default depth-mask net at desk scale."""
    return UNetConfig(depth, base_filters, 1, "sigmoid", classes)


def _layer_shapes(config):
    """Yield (name, shape, fan_in) for every parameter in forward order."""
    f = [config.base_filters << i for i in range(config.depth + 1)]
    cin = config.in_channels
    for i in range(config.depth):
        yield f"enc{i}.conv1.kernel", (f[i], cin, 3, 3), cin * 9
        yield f"enc{i}.conv1.bias", (f[i],), 0
        yield f"enc{i}.conv2.kernel", (f[i], f[i], 3, 3), f[i] * 9
        yield f"enc{i}.conv2.bias", (f[i],), 0
        cin = f[i]
    yield "bottleneck.conv1.kernel", (f[-1], cin, 3, 3), cin * 9
    yield "bottleneck.conv1.bias", (f[-1],), 0
    yield "bottleneck.conv2.kernel", (f[-1], f[-1], 3, 3), f[-1] * 9
    yield "bottleneck.conv2.bias", (f[-1],), 0
    for i in reversed(range(config.depth)):
        yield f"up{i}.kernel", (f[i + 1], f[i], 2, 2), f[i + 1] * 4
        yield f"up{i}.bias", (f[i],), 0
        yield f"dec{i}.conv1.kernel", (f[i], 2 * f[i], 3, 3), 2 * f[i] * 9
        yield f"dec{i}.conv1.bias", (f[i],), 0
        yield f"dec{i}.conv2.kernel", (f[i], f[i], 3, 3), f[i] * 9
        yield f"dec{i}.conv2.bias", (f[i],), 0
    yield "head.kernel", (config.out_channels, f[0], 1, 1), f[0]
    yield "head.bias", (config.out_channels,), 0


def param_count(config):
    """Total parameter count, kernels plus biases."""
    return sum(int(np.prod(shape)) for _, shape, _ in _layer_shapes(config))


def init_unet_params(config, rng):
    """He-uniform kernels (limit sqrt(6 / fan_in)), zero biases."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params = {}
    for name, shape, fan_in in _layer_shapes(config):
        if fan_in:
            limit = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-limit, limit, size=shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


def zscore_image(image):
    """Normalize one image to zero mean, unit spread.

    Statistics are taken from the values and treated as constants, so
    gradients pass straight through the shift and scale.  The variance
    floor keeps constant images defined.
    """
    arr = image.data if isinstance(image, Tensor) else np.asarray(
        image, dtype=np.float64)
    mu = float(arr.mean())
    sd = float(np.sqrt(max(arr.var(), _VAR_FLOOR)))
    if isinstance(image, Tensor):
        return (image - mu) * (1.0 / sd)
    return (arr - mu) / sd


def _conv_block(x, params, name):
    x = ad.relu(ad.conv2d(x, params[f"{name}.conv1.kernel"],
                          params[f"{name}.conv1.bias"]))
    return ad.relu(ad.conv2d(x, params[f"{name}.conv2.kernel"],
                             params[f"{name}.conv2.bias"]))


def unet_forward(config, params, image):
    """Run the encoder-decoder on one image (C,H,W) or a batch (N,C,H,W).

    Output is head-shaped: (H,W,classes,bins) with a softmax over the
    last axis for the bins head, (H,W,classes) of sigmoids otherwise;
    batched inputs gain a leading N.
    """
    x = image if isinstance(image, Tensor) else Tensor(
        np.asarray(image, dtype=np.float64))
    if x.ndim not in (3, 4):
        raise ad.ShapeError(
            f"expected (C,H,W) or (N,C,H,W) input, got {x.shape}")
    batched = x.ndim == 4
    if not batched:
        x = x.reshape((1,) + x.shape)
    n, cin, h, w = x.shape
    if cin != config.in_channels:
        raise ad.ShapeError(
            f"input has {cin} channels, config expects {config.in_channels}")
    div = config.divisor
    if h % div or w % div:
        raise ad.ShapeError(
            f"spatial extents ({h}, {w}) must be divisible by "
            f"2^depth = {div}")

    skips = []
    for i in range(config.depth):
        x = _conv_block(x, params, f"enc{i}")
        skips.append(x)
        x = ad.maxpool2d(x)
    x = _conv_block(x, params, "bottleneck")
    for i in reversed(range(config.depth)):
        x = ad.transposed_conv2d(x, params[f"up{i}.kernel"])
        x = ad.bias_add(x, params[f"up{i}.bias"])
        x = ad.concat([skips[i], x], axis=1)
        x = _conv_block(x, params, f"dec{i}")
    x = ad.conv2d(x, params["head.kernel"], params["head.bias"])

    x = x.transpose((0, 2, 3, 1))  # (N,H,W,out_channels)
    if config.head == "bins":
        x = x.reshape((n, h, w, config.classes, config.bins))
        x = ad.softmax(x, axis=-1)
    else:
        x = ad.sigmoid(x)
    return x if batched else x[0]


def predict_depth_mask(config, params, ortho_projection):
    """Depth weights from an orthogonal projection image (d1, d3).

    The image is z-score normalized (variance floored at 1e-8 so
    constant inputs stay defined), run through the sigmoid-head net, and
    each class channel is returned as a DepthMask.  A single DepthMask
    for one class, a tuple for several.
    """
    if config.head != "sigmoid":
        raise ValueError("depth-mask net must have a sigmoid head")
    arr = ortho_projection.data if isinstance(ortho_projection, Tensor) \
        else np.asarray(ortho_projection, dtype=np.float64)
    if arr.ndim != 2:
        raise ad.ShapeError(
            f"orthogonal projection must be 2-d, got {arr.shape}")
    xn = zscore_image(ortho_projection)
    if not isinstance(xn, Tensor):
        xn = Tensor(xn)
    out = unet_forward(config, params, xn.reshape((1,) + arr.shape))
    if config.classes == 1:
        return DepthMask(out[:, :, 0])
    return tuple(DepthMask(out[:, :, k]) for k in range(config.classes))


def depth_mask_target(mask_volume, angle_deg):
    """Supervision for the depth-mask net: 1 where the line integral
    orthogonal to ``angle_deg`` passes through any mask voxel.

    mask_volume is binary (d1,d2,d3), or (d1,d2,d3,c) for per-class
    targets; output is (d1,d3) or (d1,d3,c).
    """
    m = mask_volume.data if isinstance(mask_volume, Tensor) else np.asarray(
        mask_volume, dtype=np.float64)
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValueError("depth-mask target requires a binary mask volume")
    if m.ndim == 3:
        proj = radon_orthogonal(m.astype(np.float64), angle_deg)
        return (proj > 0.0).astype(np.float64)
    if m.ndim == 4:
        cols = [depth_mask_target(m[..., k], angle_deg)
                for k in range(m.shape[-1])]
        return np.stack(cols, axis=-1)
    raise ValueError(f"mask volume must be 3-d or 4-d, got {m.shape}")


# ---- parameter storage -----------------------------------------------------


class ParameterStore:
    """Flat, ordered map from dotted parameter names to Tensors."""

    def __init__(self):
        self._params = {}

    def add(self, name, tensor):
        if not isinstance(tensor, Tensor):
            raise TypeError(f"parameter {name!r} must be a Tensor")
        if not name:
            raise ValueError("parameter name must be non-empty")
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor

    def add_group(self, prefix, mapping):
        """Register ``mapping`` under ``prefix.``; insertion order kept."""
        for key, tensor in mapping.items():
            self.add(f"{prefix}.{key}", tensor)

    def group(self, prefix):
        """The sub-map stored under ``prefix.``, keyed by suffix."""
        head = prefix + "."
        return {name[len(head):]: t for name, t in self._params.items()
                if name.startswith(head)}

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    @property
    def total_count(self):
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def detached(self):
        """Same parameter values, no gradient tracking; data is shared."""
        out = ParameterStore()
        for name, t in self._params.items():
            out.add(name, Tensor(t.data))
        return out


_CKPT_MAGIC = b"PJSGCKPT"
_CKPT_VERSION = 1


def save_checkpoint(store, path):
    """Write every parameter to ``path``; bit-exact on reload."""
    entries = [{"name": name, "shape": list(t.data.shape)}
               for name, t in store.items()]
    header = json.dumps({"version": _CKPT_VERSION,
                         "params": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for _, t in store.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint back into a fresh ParameterStore.

    All tensors come back with requires_grad=True so training can resume.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    (hlen,) = struct.unpack("<I", blob[8:12])
    head = json.loads(blob[12:12 + hlen].decode("utf-8"))
    if head.get("version") != _CKPT_VERSION:
        raise ValueError(
            f"{path}: unsupported checkpoint version {head.get('version')}")
    store = ParameterStore()
    offset = 12 + hlen
    for entry in head["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(blob):
            raise ValueError(f"{path}: truncated payload")
        arr = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape)
        store.add(entry["name"],
                  Tensor(arr.astype(np.float64, copy=True),
                         requires_grad=True))
        offset = end
    if offset != len(blob):
        raise ValueError(f"{path}: trailing bytes after payload")
    return store
