"""Scratch: track peakedness vs steps for one flow prior (not part of the package)."""
import sys
import time

import numpy as np

from psep.flowprior import FlowConfig, FlowModel, initialize_actnorm
from psep.signals import make_toy_dataset, SourceKind
from psep.training import AdamState, TrainConfig, adam_step, lr_schedule, _pick_batch, _flow_step_loss

lr = float(sys.argv[1]) if len(sys.argv) > 1 else 3e-3
gamma = float(sys.argv[2]) if len(sys.argv) > 2 else 0.85
total = int(sys.argv[3]) if len(sys.argv) > 3 else 8000
kind = SourceKind.from_name(sys.argv[4] if len(sys.argv) > 4 else "sine")

ds = make_toy_dataset(500, 40, 4000, 2048, seed=101)
frames = ds.source_frames("train", kind)
test_frames = {k: ds.source_frames("test", k)[:8] for k in SourceKind}
rng = np.random.default_rng(0)
noise_inputs = [np.sqrt(0.5) * rng.standard_normal(2048) for _ in range(4)]

cfg = TrainConfig(learning_rate=lr, schedule_gamma=gamma, batch_size=4, total_steps=total, seed=7, log_every=0)
model = FlowModel(FlowConfig.desk(), rng=np.random.default_rng(17), sample_rate=4000)
params = model.parameters()
state = AdamState()
t0 = time.time()
for step in range(total):
    batch = _pick_batch(frames, cfg, step, model.length_multiple)
    if not model.actnorm_initialized:
        initialize_actnorm(model, [f.samples for f in batch])
    for _, p in params:
        p.zero_grad()
    loss = _flow_step_loss(model, batch)
    adam_step(params, state, lr_schedule(step, cfg))
    if (step + 1) % 1000 == 0:
        ll_in = float(np.mean([model.log_density(f) for f in test_frames[kind]]))
        c0 = model.log_density(np.zeros(2048))
        nz = float(np.mean([model.log_density(x) for x in noise_inputs]))
        # head_s bias stats across couplings (confidence proxy)
        biases = [float(step_.coupling.cond.head_s_b.data.mean())
                  for flows in model.blocks for step_ in flows]
        print(f"step {step+1:5d} ({(time.time()-t0)/60:5.1f} min) loss {loss:+.3f} "
              f"LL_in {ll_in:+.3f} const0 {c0:+.4g} noise {nz:+.6g} head_s_bias~{np.mean(biases):+.2f}",
              flush=True)
print("done", flush=True)
