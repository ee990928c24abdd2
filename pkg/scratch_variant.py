"""Scratch: compare conditioner head variants for OOD peaking (not part of the package)."""
import sys
import time

import numpy as np

import psep.flowprior as fp
from psep import diffcore as dc
from psep.flowprior import FlowConfig, FlowModel, initialize_actnorm
from psep.signals import make_toy_dataset, SourceKind
from psep.training import AdamState, TrainConfig, adam_step, lr_schedule, _pick_batch, _flow_step_loss

variant = sys.argv[1]  # 'tanh' or 'raw'
steps = int(sys.argv[2]) if len(sys.argv) > 2 else 3000
kind = SourceKind.from_name(sys.argv[3] if len(sys.argv) > 3 else "sine")
batch = int(sys.argv[4]) if len(sys.argv) > 4 else 2

if variant == "raw":
    def patched_call(self, x):
        h = dc.conv1d(x, self.front_w, self.front_b, dilation=1, mode="centered")
        skip_sum = None
        for i in range(self.n_layers):
            d = 2 ** i
            filt = dc.tanh(dc.conv1d(h, self.filt_w[i], self.filt_b[i], dilation=d, mode="centered"))
            gate = dc.sigmoid(dc.conv1d(h, self.gate_w[i], self.gate_b[i], dilation=d, mode="centered"))
            act = dc.mul(filt, gate)
            h = dc.add(h, dc.conv1d(act, self.res_w[i], self.res_b[i]))
            s = dc.conv1d(act, self.skip_w[i], self.skip_b[i])
            skip_sum = s if skip_sum is None else dc.add(skip_sum, s)
        raw_s = dc.conv1d(skip_sum, self.head_s_w, self.head_s_b)
        t = dc.conv1d(skip_sum, self.head_t_w, self.head_t_b)
        return raw_s, t
    fp.Conditioner.__call__ = patched_call

ds = make_toy_dataset(500, 40, 4000, 2048, seed=101)
frames = ds.source_frames("train", kind)
rng = np.random.default_rng(0)
noise_inputs = [np.sqrt(0.5) * rng.standard_normal(2048) for _ in range(4)]
test_frames = ds.source_frames("test", kind)[:8]

cfg = TrainConfig(learning_rate=2e-3, schedule_gamma=0.85, batch_size=batch,
                  total_steps=steps, seed=7, log_every=0)
model = FlowModel(FlowConfig.desk(), rng=np.random.default_rng(17), sample_rate=4000)
params = model.parameters()
state = AdamState()
t0 = time.time()
for step in range(steps):
    b = _pick_batch(frames, cfg, step, model.length_multiple)
    if not model.actnorm_initialized:
        initialize_actnorm(model, [f.samples for f in b])
    for _, p in params:
        p.zero_grad()
    loss = _flow_step_loss(model, b)
    adam_step(params, state, lr_schedule(step, cfg))
    if (step + 1) % 500 == 0:
        ll_in = float(np.mean([model.log_density(f) for f in test_frames]))
        c0 = model.log_density(np.zeros(2048))
        nz = float(np.mean([model.log_density(x) for x in noise_inputs]))
        print(f"[{variant}/{kind.label}] step {step+1:5d} ({(time.time()-t0)/60:5.1f} min) "
              f"loss {loss:+.3f} LL_in {ll_in:+.3f} const0 {c0:+.5g} noise {nz:+.6g}", flush=True)
