"""Project a phantom to 2D and reconstruct it back.

Walks the geometric core of the pipeline: a synthetic ellipsoid volume
is projected into a stack of per-angle images, then filtered
backprojection inverts the stack.  Two angle densities show the usual
trade: more angles, better inversion.  Writes PGM snapshots of the
volume, one projection, and the reconstruction into demos/out/.

Run from the repository root:  python3 demos/01_projections_and_fbp.py
"""

import pathlib
import time

import numpy as np

from projseg.cli import write_pgm
from projseg.geometry import angle_set
from projseg.phantoms import PhantomSpec, generate_phantom
from projseg.radon import fbp, radon_plain

OUT = pathlib.Path("demos/out")
OUT.mkdir(parents=True, exist_ok=True)

# a noise-free phantom so the round-trip number reflects the transform
# alone; the hard ellipsoid edge still keeps it in the tens of percent,
# smooth fields invert to within a few percent
spec = PhantomSpec(size=48, noise=0.0, seed=7)
vol, mask = generate_phantom(spec, 0)
x = vol.data
print(f"phantom {vol.id}: {x.shape}, foreground fraction "
      f"{mask.data.mean():.3f}")

for m in (16.0, 2.0):
    angles = angle_set(48, m)
    t0 = time.perf_counter()
    stack = radon_plain(x, angles)
    rec = fbp(stack)
    dt = time.perf_counter() - t0
    rel = np.linalg.norm(rec - x) / np.linalg.norm(x)
    print(f"M={m:4.0f}: {len(angles):3d} angles, "
          f"round-trip rel L2 {rel:.3f}  ({dt:.2f}s)")

# snapshots at the dense setting
angles = angle_set(48, 2.0)
stack = radon_plain(x, angles)
rec = fbp(stack)
z = x.shape[2] // 2
write_pgm(OUT / "01_volume_slice.pgm", x[:, :, z])
write_pgm(OUT / "01_projection_first_angle.pgm", stack.data[0])
write_pgm(OUT / "01_fbp_slice.pgm", rec[:, :, z])
print(f"wrote 3 snapshots to {OUT}/")
