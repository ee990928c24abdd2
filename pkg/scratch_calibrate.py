"""Scratch calibration for desk-scale acceptance training (not part of the package)."""
import sys
import time

import numpy as np

from psep.signals import make_toy_dataset, SourceKind
from psep.training import TrainConfig, train_prior
from psep.flowprior import FlowConfig

lr = float(sys.argv[1]) if len(sys.argv) > 1 else 1e-3
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 2000
kinds = [SourceKind.from_name(k) for k in (sys.argv[3].split(",") if len(sys.argv) > 3 else ["sine", "square"])]

ds = make_toy_dataset(500, 60, 4000, 2048, seed=101)
rng = np.random.default_rng(0)
noise_inputs = [np.sqrt(0.5) * rng.standard_normal(2048) for _ in range(6)]

for kind in kinds:
    t0 = time.time()
    cfg = TrainConfig(learning_rate=lr, batch_size=4, total_steps=steps, seed=7, log_every=0)
    res = train_prior("flow", kind, ds, cfg)
    mins = (time.time() - t0) / 60
    model = res.model
    print(f"== {kind.label} lr={lr} steps={steps}  ({mins:.1f} min)  loss {res.losses[0]:.3f} -> {res.losses[-1]:.3f}")
    row = {}
    for other in SourceKind:
        frames = ds.source_frames("test", other)[:12]
        row[other.label] = float(np.mean([model.log_density(f) for f in frames]))
    print("   LL row:", {k: round(v, 2) for k, v in row.items()})
    c0 = model.log_density(np.zeros(2048))
    nz = float(np.mean([model.log_density(x) for x in noise_inputs]))
    print(f"   const0 {c0:+.4g}   noise(0,0.5) {nz:+.4g}")
    # log_s statistics on an in-class frame vs a noise frame
    sys.stdout.flush()
