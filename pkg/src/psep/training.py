"""Optimizer, learning-rate schedule, and the training loops for both priors.

Training is a deterministic function of (seed, config, dataset): batches,
crops, conditioning noise and parameter init all derive independent RNG
streams from the seed, so re-running reproduces checkpoints bit for bit.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import flowprior
from .arprior import ARConfig, ARModel, ar_ce_graph
from .checkpoints import NOISE_LEVELS, save_checkpoint, serialize, content_hash
from .diffcore import affine
from .errors import ConfigError, NumericalError, ShapeError
from .flowprior import FlowConfig, FlowModel
from .signals import Frame, SourceKind, ToyDataset, mu_law_encode

log = logging.getLogger(__name__)

_TAG_INIT = 11
_TAG_BATCH = 12
_TAG_NOISE = 13

N_SCHEDULE_DROPS = 5


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    schedule_gamma: float = 0.6
    batch_size: int = 4
    total_steps: int = 1500
    seed: int = 0
    crop_len: int | None = None
    log_every: int = 100

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 < self.schedule_gamma < 1.0:
            raise ConfigError(f"schedule_gamma must be in (0, 1), got {self.schedule_gamma}")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ConfigError("batch_size and total_steps must be >= 1")


@dataclass(frozen=True)
class NoiseLevel:
    """A conditioning noise std-dev; the canonical ladder lives in NOISE_LEVELS."""

    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError(f"sigma must be >= 0, got {self.sigma}")

    @property
    def is_canonical(self) -> bool:
        return any(abs(self.sigma - s) < 1e-12 for s in NOISE_LEVELS)


# ----------------------------------------------------------------------
# optimizer and schedule
# ----------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: list, state: AdamState, lr: float,
              betas: tuple = (0.9, 0.999), eps: float = 1e-8,
              grads: list | None = None) -> AdamState:
    """One Adam update over named parameter tensors (grads default to .grad)."""
    state.step += 1
    b1, b2 = betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for i, (name, p) in enumerate(params):
        g = grads[i] if grads is not None else p.grad
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Stepwise decay: five equally spaced drops by schedule_gamma.

    Milestones sit at i/6 of the run (i = 1..5), so step 0 uses the initial
    rate and the final step has decayed gamma^5.
    """
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    total = config.total_steps
    k = sum(1 for i in range(1, N_SCHEDULE_DROPS + 1)
            if step >= max(1, (i * total) // (N_SCHEDULE_DROPS + 1)))
    return config.learning_rate * config.schedule_gamma ** k


# ----------------------------------------------------------------------
# training loops
# ----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    meta: dict
    losses: list
    checkpoint_path: Path | None = None
    checkpoint_hash: str | None = None


def _stream(seed: int, tag: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, tag, step)))


def _pick_batch(frames: list, config: TrainConfig, step: int, crop_multiple: int) -> list:
    rng = _stream(config.seed, _TAG_BATCH, step)
    n = len(frames)
    idx = rng.choice(n, size=config.batch_size, replace=config.batch_size > n)
    batch = []
    for i in idx:
        f = frames[int(i)]
        if config.crop_len is not None and config.crop_len < len(f):
            c = config.crop_len
            if c % crop_multiple != 0:
                raise ConfigError(f"crop_len {c} must be a multiple of {crop_multiple}")
            start = int(rng.integers(0, len(f) - c + 1))
            f = Frame(samples=f.samples[start:start + c], sample_rate=f.sample_rate)
        batch.append(f)
    return batch


def _noise_batch(batch: list, sigma: float, config: TrainConfig, step: int) -> list:
    if sigma == 0.0:
        return batch
    rng = _stream(config.seed, _TAG_NOISE, step)
    return [Frame(samples=f.samples + sigma * rng.standard_normal(len(f)),
                  sample_rate=f.sample_rate) for f in batch]


def _flow_step_loss(model: FlowModel, batch: list) -> float:
    """Accumulate gradients of the mean per-sample NLL over the batch."""
    total = 0.0
    b = len(batch)
    for f in batch:
        ll, x = model._log_density_graph(f.samples)
        n = f.samples.size
        loss_f = affine(ll, -1.0 / (n * b), 0.0)
        total += float(loss_f.data)
        loss_f.backward()
    return total


def _ar_step_loss(model: ARModel, batch: list) -> float:
    total = 0.0
    b = len(batch)
    for f in batch:
        ce = ar_ce_graph(model, mu_law_encode(f.samples))
        loss_f = affine(ce, 1.0 / b, 0.0)
        total += float(loss_f.data)
        loss_f.backward()
    return total


class _Telemetry:
    """Append-only (step, lr, loss, wall_ms) CSV."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self._fh = None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", newline="")
            csv.writer(self._fh).writerow(["step", "lr", "loss", "wall_ms"])

    def row(self, step: int, lr: float, loss: float, wall_ms: float) -> None:
        if self._fh:
            csv.writer(self._fh).writerow([step, repr(lr), repr(loss), f"{wall_ms:.3f}"])
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


def _run_loop(model, frames: list, config: TrainConfig, sigma: float,
              total_steps: int, telemetry: _Telemetry,
              converge: bool = False) -> list:
    try:
        return _run_loop_inner(model, frames, config, sigma, total_steps, telemetry, converge)
    finally:
        telemetry.close()


def _run_loop_inner(model, frames: list, config: TrainConfig, sigma: float,
                    total_steps: int, telemetry: _Telemetry,
                    converge: bool = False) -> list:
    params = model.parameters()
    state = AdamState()
    is_flow = isinstance(model, FlowModel)
    crop_multiple = model.length_multiple if is_flow else 1
    losses: list[float] = []
    window: list[float] = []
    prev_window_mean = None
    stall_count = 0

    for step in range(total_steps):
        t0 = time.perf_counter()
        batch = _noise_batch(_pick_batch(frames, config, step, crop_multiple),
                             sigma, config, step)
        if is_flow and not model.actnorm_initialized:
            flowprior.initialize_actnorm(model, [f.samples for f in batch])
        for _, p in params:
            p.zero_grad()
        try:
            loss = (_flow_step_loss if is_flow else _ar_step_loss)(model, batch)
        except NumericalError as e:
            raise NumericalError(
                f"training diverged at step {step}: {e}; "
                f"recent losses {['%.4g' % v for v in losses[-5:]]}") from e
        if not math.isfinite(loss):
            raise NumericalError(
                f"training diverged at step {step}: loss={loss}, "
                f"recent losses {['%.4g' % v for v in losses[-5:]]}")
        lr = lr_schedule(step, replace(config, total_steps=total_steps))
        adam_step(params, state, lr)
        losses.append(loss)
        telemetry.row(step, lr, loss, (time.perf_counter() - t0) * 1e3)
        if config.log_every and step % config.log_every == 0:
            log.info("step %d lr %.3g loss %.5g", step, lr, loss)

        if converge:
            window.append(loss)
            if len(window) == 200:
                cur = sum(window) / len(window)
                window.clear()
                if prev_window_mean is not None:
                    improved = (prev_window_mean - cur) / max(abs(prev_window_mean), 1e-12)
                    if improved < 1e-3:
                        stall_count += 1
                        if stall_count >= 2:
                            log.info("fine-tuning converged at step %d", step)
                            break
                    else:
                        stall_count = 0
                prev_window_mean = cur
    return losses


def _build_model(family: str, model_config, seed: int, sample_rate: int):
    rng = _stream(seed, _TAG_INIT, 0)
    if family == "flow":
        return FlowModel(model_config or FlowConfig.desk(), rng=rng, sample_rate=sample_rate)
    if family == "ar":
        return ARModel(model_config or ARConfig.desk(), rng=rng, sample_rate=sample_rate)
    raise ConfigError(f"unknown model family {family!r} (expected 'flow' or 'ar')")


def _checkpoint_name(family: str, source: str, sigma: float, digest: str) -> str:
    return f"{family}_{source}_sigma{sigma:g}_{digest[:8]}.ckpt"


def _finalize(model, meta: dict, losses: list, checkpoint_dir) -> TrainResult:
    meta = dict(meta)
    meta["final_loss"] = losses[-1]
    meta["steps_run"] = len(losses)
    result = TrainResult(model=model, meta=meta, losses=losses)
    if checkpoint_dir is not None:
        blob = serialize(model, meta)
        digest = content_hash(blob)
        path = Path(checkpoint_dir) / _checkpoint_name(
            meta["family"], meta["source"], meta["sigma"], digest)
        save_checkpoint(path, model, meta)
        result.checkpoint_path = path
        result.checkpoint_hash = digest
        meta["hash"] = digest
    return result


def train_prior(family: str, source_kind: SourceKind, dataset: ToyDataset,
                config: TrainConfig, model_config=None,
                checkpoint_dir: str | Path | None = None,
                telemetry_path: str | Path | None = None) -> TrainResult:
    """Train one noise-free prior on one source's frames; tagged sigma = 0."""
    frames = dataset.source_frames("train", source_kind)
    if not frames:
        raise ConfigError("dataset has no training frames")
    model = _build_model(family, model_config, config.seed, dataset.sample_rate)
    losses = _run_loop(model, frames, config, sigma=0.0,
                       total_steps=config.total_steps, telemetry=_Telemetry(telemetry_path))
    meta = {
        "family": family,
        "source": source_kind.label,
        "sigma": 0.0,
        "seed": config.seed,
        "learning_rate": config.learning_rate,
        "batch_size": config.batch_size,
        "total_steps": config.total_steps,
        "crop_len": config.crop_len,
        "frame_len": dataset.frame_len,
        "base_hash": None,
    }
    return _finalize(model, meta, losses, checkpoint_dir)


def finetune_noisy(base: TrainResult | tuple, sigma: float, steps: int,
                   config: TrainConfig, dataset: ToyDataset,
                   checkpoint_dir: str | Path | None = None,
                   telemetry_path: str | Path | None = None) -> TrainResult:
    """Continue training with fresh conditioning noise on every input frame.

    Approximates the convolution of the noise-free density with N(0, sigma^2).
    Runs until the 200-step moving-average loss improves by < 0.1% twice in a
    row, capped at ``steps``.
    """
    if sigma <= 0:
        raise ConfigError("finetune requires sigma > 0 (use train_prior for sigma = 0)")
    if isinstance(base, TrainResult):
        model, base_meta = base.model, base.meta
    else:
        model, base_meta = base
    if float(base_meta.get("sigma", 0.0)) != 0.0:
        raise ConfigError(
            f"fine-tuning starts from a noise-free checkpoint, got sigma={base_meta.get('sigma')}")
    model = copy.deepcopy(model)  # never mutate the caller's base model
    source = base_meta["source"]
    frames = dataset.source_frames("train", SourceKind.from_name(source))
    losses = _run_loop(model, frames, config, sigma=sigma, total_steps=steps,
                       telemetry=_Telemetry(telemetry_path), converge=True)
    meta = {
        "family": base_meta["family"],
        "source": source,
        "sigma": float(sigma),
        "seed": config.seed,
        "learning_rate": config.learning_rate,
        "batch_size": config.batch_size,
        "total_steps": steps,
        "crop_len": config.crop_len,
        "frame_len": dataset.frame_len,
        "base_hash": base_meta.get("hash"),
    }
    return _finalize(model, meta, losses, checkpoint_dir)
