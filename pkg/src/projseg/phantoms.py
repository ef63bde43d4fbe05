"""Synthetic ellipsoid phantoms, volume file I/O, dataset manifests.

A phantom is background noise plus one target ellipsoid, optionally
plus a brighter confounder ellipsoid displaced along the transverse
in-plane axis.  The mask covers the target only, so a segmenter has to
rely on more than raw intensity whenever the confounder is on.

Files are raw little-endian payloads with a JSON sidecar per payload:
<id>.vol (float64) / <id>.mask (uint8 {0,1}), each with <name>.json
carrying dims, dtype, spacing, and id.  A manifest.json lists the pairs
of a dataset directory.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_REJECT_LIMIT = 100


@dataclass(frozen=True)
class Volume:
    """A dense 3-d grid with voxel spacing metadata and an id."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3-d, got {self.data.shape}")
        if min(self.data.shape) < 2:
            raise ValueError(f"every extent must be >= 2, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive reals, "
                             f"got {self.spacing}")

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class PhantomSpec:
    """Generation ranges; every length is a fraction of the grid size.

    separation is the minimum center-to-center distance of target and
    confounder along the transverse axis, as a fraction of d1; surfaces
    are additionally kept at least two voxels apart.
    """

    size: int = 48
    d3: int = 0  # 0 means cubic
    noise: float = 0.05
    confounder: bool = False
    target_semiaxis: tuple = (0.10, 0.15)
    target_intensity: tuple = (0.55, 0.85)
    confounder_ratio: tuple = (1.5, 2.0)
    separation: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.size < 8:
            raise ValueError("grid size must be at least 8")
        if self.d3 and self.d3 < 8:
            raise ValueError("axial extent must be at least 8")
        if self.noise < 0:
            raise ValueError("noise level must be nonnegative")
        for name in ("target_semiaxis", "target_intensity", "confounder_ratio"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} range must satisfy 0 < lo <= hi")
        if self.separation <= 0:
            raise ValueError("separation must be positive")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")

    @property
    def axial(self):
        return self.d3 if self.d3 else self.size


def _ellipsoid(shape, center, semi):
    ii, jj, kk = np.ogrid[:shape[0], :shape[1], :shape[2]]
    q = (((ii - center[0]) / semi[0]) ** 2
         + ((jj - center[1]) / semi[1]) ** 2
         + ((kk - center[2]) / semi[2]) ** 2)
    return q <= 1.0


def _fits_cylinder(center, semi, n, d3):
    # rotation happens in-plane, so the support must stay inside the
    # inscribed circle with a margin for interpolation spill
    cc = (n - 1) / 2.0
    r = np.hypot(center[0] - cc, center[1] - cc) + max(semi[0], semi[1])
    if r > n / 2.0 - 1.5:
        return False
    return center[2] - semi[2] >= 1.0 and center[2] + semi[2] <= d3 - 2.0


def _draw_geometry(rng, spec):
    n, d3 = spec.size, spec.axial
    cc = (n - 1) / 2.0
    lo, hi = spec.target_semiaxis
    for _ in range(_REJECT_LIMIT):
        semi_t = rng.uniform(lo * n, hi * n, size=3)
        off0 = rng.uniform(-0.10, 0.10) * n
        if spec.confounder:
            # which transverse side holds the confounder is a coin flip;
            # a fixed side would leak "the target is always on the left"
            # into training and plain projections could exploit it
            side = 1.0 if rng.random() < 0.5 else -1.0
            off1 = -side * rng.uniform(0.10, 0.20) * n
        else:
            off1 = rng.uniform(-0.15, 0.15) * n
        center_t = (cc + off0, cc + off1,
                    rng.uniform(0.35, 0.65) * (d3 - 1))
        it = rng.uniform(*spec.target_intensity)
        if not _fits_cylinder(center_t, semi_t, n, d3):
            continue
        if not spec.confounder:
            return {"target": (center_t, tuple(semi_t), it), "confounder": None}

        semi_c = rng.uniform(lo * n, hi * n, size=3)
        center_c = (cc + rng.uniform(-0.10, 0.10) * n,
                    cc + side * rng.uniform(0.15, 0.25) * n,
                    center_t[2] + rng.uniform(-0.10, 0.10) * (d3 - 1))
        ic = it * rng.uniform(*spec.confounder_ratio)
        if not _fits_cylinder(center_c, semi_c, n, d3):
            continue
        sep = side * (center_c[1] - center_t[1])
        gap = sep - semi_c[1] - semi_t[1]
        if sep < spec.separation * n or gap < 2.0:
            continue
        # the confounder must shadow most of the target's axial rows;
        # rows it misses project clean and carry no confounding at all
        zt0, zt1 = center_t[2] - semi_t[2], center_t[2] + semi_t[2]
        zc0, zc1 = center_c[2] - semi_c[2], center_c[2] + semi_c[2]
        if min(zt1, zc1) - max(zt0, zc0) < 0.75 * (zt1 - zt0):
            continue
        # the confounder has to out-shine the target in projection mass,
        # which is the whole point of the ablation phantoms
        mass_t = it * semi_t.prod()
        mass_c = ic * semi_c.prod()
        if mass_c <= 1.1 * mass_t:
            continue
        return {"target": (center_t, tuple(semi_t), it),
                "confounder": (center_c, tuple(semi_c), ic)}
    raise RuntimeError(
        f"no admissible ellipsoid layout after {_REJECT_LIMIT} draws; "
        f"spec ranges leave too little room")


def phantom_geometry(spec, index):
    """The accepted ellipsoid draw for (spec, index); pure and repeatable."""
    rng = np.random.default_rng([spec.seed, index])
    return _draw_geometry(rng, spec)


def generate_phantom(spec, index):
    """One (volume, mask) pair, deterministic in (spec.seed, index).

    The volume is noise + target + optional confounder, scaled to [0,1].
    The mask marks the target ellipsoid only.
    """
    if index < 0:
        raise ValueError("phantom index must be nonnegative")
    rng = np.random.default_rng([spec.seed, index])
    geom = _draw_geometry(rng, spec)
    n, d3 = spec.size, spec.axial
    shape = (n, n, d3)

    center, semi, it = geom["target"]
    target = _ellipsoid(shape, center, semi)
    vol = rng.uniform(0.0, spec.noise, size=shape) if spec.noise > 0 \
        else np.zeros(shape)
    vol[target] += it
    if geom["confounder"] is not None:
        c_center, c_semi, ic = geom["confounder"]
        conf = _ellipsoid(shape, c_center, c_semi)
        vol[conf] += ic
    peak = vol.max()
    if peak > 0:
        vol = vol / peak
    vid = f"p{index:04d}"
    return (Volume(vol, id=vid),
            Volume(target.astype(np.float64), id=vid))


# ---- file I/O ---------------------------------------------------------------


def _sidecar_path(path):
    return Path(str(path) + ".json")


def write_volume(volume, path):
    """Raw little-endian payload plus JSON sidecar.

    Extension picks the payload type: .vol stores float64, .mask stores
    uint8 and requires binary data.
    """
    path = Path(path)
    arr = volume.data
    if path.suffix == ".vol":
        payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        dtype = "f64"
    elif path.suffix == ".mask":
        if not np.all((arr == 0.0) | (arr == 1.0)):
            raise ValueError("mask payloads must be binary")
        payload = np.ascontiguousarray(arr, dtype=np.uint8).tobytes()
        dtype = "u8"
    else:
        raise ValueError(f"unknown volume extension {path.suffix!r}")
    path.write_bytes(payload)
    header = {"dims": list(arr.shape), "dtype": dtype,
              "spacing": list(volume.spacing), "id": volume.id}
    _sidecar_path(path).write_text(json.dumps(header))


def read_volume(path):
    path = Path(path)
    side = _sidecar_path(path)
    if not side.exists():
        raise FileNotFoundError(f"missing sidecar {side}")
    header = json.loads(side.read_text())
    dims = tuple(header["dims"])
    dtype = header["dtype"]
    itemsize = {"f64": 8, "u8": 1}[dtype]
    payload = path.read_bytes()
    expected = int(np.prod(dims)) * itemsize
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload is {len(payload)} bytes but the header "
            f"declares {dims} ({expected} bytes)")
    if dtype == "f64":
        arr = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(
            np.float64, copy=True)
    else:
        raw = np.frombuffer(payload, dtype=np.uint8).reshape(dims)
        if raw.max(initial=0) > 1:
            raise ValueError(f"{path}: mask payload has values outside {{0,1}}")
        arr = raw.astype(np.float64)
    return Volume(arr, spacing=tuple(header["spacing"]), id=header["id"])


# ---- manifests --------------------------------------------------------------


@dataclass(frozen=True)
class DatasetManifest:
    """Ordered list of sample entries plus provenance."""

    root: Path
    entries: tuple  # of {"id", "volume", "mask"} with paths relative to root
    seed: object = None
    tags: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def paths(self, entry):
        return self.root / entry["volume"], self.root / entry["mask"]


def build_manifest(directory, seed=None, tags=None):
    """Scan a directory of <id>.vol / <id>.mask pairs into a manifest.

    Unpaired files are an error; headers of each pair must agree on dims.
    """
    root = Path(directory)
    vols = {p.stem: p for p in root.glob("*.vol")}
    masks = {p.stem: p for p in root.glob("*.mask")}
    orphans = sorted(set(vols) ^ set(masks))
    if orphans:
        raise ValueError(f"unpaired volume/mask files: {', '.join(orphans)}")
    entries = []
    for vid in sorted(vols):
        vh = json.loads(_sidecar_path(vols[vid]).read_text())
        mh = json.loads(_sidecar_path(masks[vid]).read_text())
        if vh["dims"] != mh["dims"]:
            raise ValueError(
                f"{vid}: volume dims {vh['dims']} != mask dims {mh['dims']}")
        entries.append({"id": vid, "volume": vols[vid].name,
                        "mask": masks[vid].name})
    return DatasetManifest(root=root, entries=tuple(entries), seed=seed,
                           tags=dict(tags or {}))


def save_manifest(manifest, path=None):
    path = Path(path) if path else manifest.root / "manifest.json"
    doc = {"version": 1, "seed": manifest.seed, "tags": manifest.tags,
           "entries": list(manifest.entries)}
    path.write_text(json.dumps(doc, indent=2))
    return path


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text())
    if doc.get("version") != 1:
        raise ValueError(f"{path}: unsupported manifest version")
    root = path.parent
    manifest = DatasetManifest(root=root, entries=tuple(doc["entries"]),
                               seed=doc.get("seed"),
                               tags=dict(doc.get("tags") or {}))
    for entry in manifest.entries:
        vp, mp = manifest.paths(entry)
        if not vp.exists() or not mp.exists():
            raise FileNotFoundError(f"manifest entry {entry['id']} refers to "
                                    f"missing files")
    return manifest


def load_pairs(source):
    """Materialize (volume array, mask array, id) triples.

    source may be a DatasetManifest, a dataset directory, or a
    manifest.json path.
    """
    if isinstance(source, DatasetManifest):
        manifest = source
    else:
        p = Path(source)
        if p.is_dir() and not (p / "manifest.json").exists():
            manifest = build_manifest(p)
        else:
            manifest = load_manifest(p)
    pairs = []
    for entry in manifest.entries:
        vp, mp = manifest.paths(entry)
        pairs.append((read_volume(vp).data, read_volume(mp).data, entry["id"]))
    return pairs
