"""Train the full pipeline at toy scale and score held-out phantoms.

Everything the big runs do, shrunk to about a minute: 8 training
phantoms at 32 cubed, three stages (depth-mask net, projection
segmenter, end-to-end finetune of the lift/bin/fusion parameters),
then Dice and Hausdorff on 3 unseen phantoms.  Expect held-out Dice
around 0.75 here; the acceptance gate in tests/test_acceptance.py runs
the real protocol at 48 cubed with more data and epochs.

Run from the repository root:  python3 demos/03_tiny_training.py
"""

import time

from projseg.phantoms import PhantomSpec, generate_phantom
from projseg.pipeline import PipelineConfig
from projseg.training import TrainConfig, evaluate, train

def dataset(spec, n):
    out = []
    for i in range(n):
        vol, mask = generate_phantom(spec, i)
        out.append((vol.data, mask.data, vol.id))
    return out


train_pairs = dataset(PhantomSpec(size=32, seed=21), 8)
test_pairs = dataset(PhantomSpec(size=32, seed=22), 3)

# library defaults: single orientation, M=10 angle budget, 5 bins,
# depth-3 U-nets at 16 base filters
config = PipelineConfig()
tcfg = TrainConfig(epochs=20, seed=5)

t0 = time.perf_counter()
store, log = train(train_pairs, config, tcfg)
minutes = (time.perf_counter() - t0) / 60.0

for stage in ("mask", "seg", "finetune"):
    entry = log[stage]
    if isinstance(entry, str):
        print(f"{stage:>8}: {entry}")
        continue
    print(f"{stage:>8}: loss {entry[0]:.4f} -> {entry[-1]:.4f} "
          f"over {len(entry)} epochs")
cal = log.get("lift_calibration")
if cal:
    print(f"    lift: calibrated to scale {cal['scale'][0]:.1f}, "
          f"bias {cal['bias'][0]:.2f}")
print(f"trained in {minutes:.1f} min")

report = evaluate(test_pairs, config, store, seed=tcfg.seed)
for s in report.samples:
    print(f"  {s['id']}: Dice {s['dice']:.3f}, "
          f"Hausdorff {s['hausdorff']:.1f} vox")
agg = report.aggregates["dice"]
print(f"held-out Dice median {agg['median']:.3f} "
      f"(range {agg['min']:.3f}..{agg['max']:.3f})")
