"""Autoregressive categorical prior over mu-law classes.

A stack of dilated causal convolutions with gated activations, residual and
skip connections, and a 256-way softmax head per timestep. Strict causality
comes from the one-step input shift (the network consumes the previous
decoded amplitude) plus left-only padding in every convolution, so the logits
at position t depend on the classes strictly before t.

The categorical likelihood is exact but admits no gradient with respect to
the continuous input, so this family is evaluation/generation only; the
Langevin sampler rejects it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import NotDifferentiableError, ShapeError
from .signals import Frame, N_CLASSES, mu_law_decode_values, mu_law_encode


@dataclass(frozen=True)
class ARConfig:
    n_blocks: int = 3
    n_layers: int = 10
    kernel_size: int = 3
    width: int = 64

    @classmethod
    def desk(cls) -> "ARConfig":
        return cls()

    @classmethod
    def paper_toy(cls) -> "ARConfig":
        return cls(width=256)

    def to_dict(self) -> dict:
        return asdict(self)


def receptive_field(cfg: ARConfig) -> int:
    """1 + blocks * sum_l (kernel - 1) * 2^l over the per-block dilation ladder."""
    return 1 + cfg.n_blocks * (cfg.kernel_size - 1) * (2 ** cfg.n_layers - 1)


def _conv_param(c_out: int, c_in: int, k: int, rng: np.random.Generator | None) -> Tensor:
    shape = dc.conv_weight_shape(c_out, c_in, k)
    if rng is None:
        return Tensor(np.zeros(shape))
    return Tensor(rng.normal(0.0, 1.0 / math.sqrt(c_in * k), shape))


class ARModel:
    """Parameter container plus the evaluation half of the density-model surface."""

    supports_gradient = False
    family = "ar"

    def __init__(self, config: ARConfig | None = None,
                 rng: np.random.Generator | None = None,
                 sample_rate: int | None = None):
        self.config = config or ARConfig.desk()
        self.sample_rate = sample_rate
        cfg = self.config
        w, k = cfg.width, cfg.kernel_size
        self.front_w = _conv_param(w, 1, 1, rng)
        self.front_b = Tensor(np.zeros((w, 1)))
        self.filt_w, self.filt_b = [], []
        self.gate_w, self.gate_b = [], []
        self.res_w, self.res_b = [], []
        self.skip_w, self.skip_b = [], []
        for _ in range(cfg.n_blocks * cfg.n_layers):
            self.filt_w.append(_conv_param(w, w, k, rng))
            self.filt_b.append(Tensor(np.zeros((w, 1))))
            self.gate_w.append(_conv_param(w, w, k, rng))
            self.gate_b.append(Tensor(np.zeros((w, 1))))
            self.res_w.append(_conv_param(w, w, 1, rng))
            self.res_b.append(Tensor(np.zeros((w, 1))))
            self.skip_w.append(_conv_param(w, w, 1, rng))
            self.skip_b.append(Tensor(np.zeros((w, 1))))
        # zero-init head: a fresh model is exactly uniform over the 256 classes
        self.head_w = _conv_param(N_CLASSES, w, 1, None)
        self.head_b = Tensor(np.zeros((N_CLASSES, 1)))

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.config)

    def parameters(self) -> list:
        out = [("front.w", self.front_w), ("front.b", self.front_b)]
        for i in range(self.config.n_blocks * self.config.n_layers):
            out += [
                (f"l{i}.filt.w", self.filt_w[i]), (f"l{i}.filt.b", self.filt_b[i]),
                (f"l{i}.gate.w", self.gate_w[i]), (f"l{i}.gate.b", self.gate_b[i]),
                (f"l{i}.res.w", self.res_w[i]), (f"l{i}.res.b", self.res_b[i]),
                (f"l{i}.skip.w", self.skip_w[i]), (f"l{i}.skip.b", self.skip_b[i]),
            ]
        out += [("head.w", self.head_w), ("head.b", self.head_b)]
        return out

    def randomize_head(self, rng: np.random.Generator, scale: float = 0.1) -> None:
        self.head_w.data[...] = rng.normal(0.0, scale / math.sqrt(self.config.width),
                                           self.head_w.data.shape)
        self.head_b.data[...] = rng.normal(0.0, scale, self.head_b.data.shape)

    # ------------------------------------------------------------------
    def _logits_graph(self, classes: np.ndarray) -> Tensor:
        classes = _check_classes(classes)
        t = classes.size
        # one-step shift: position t consumes the decoded value of class t-1
        shifted = np.zeros(t)
        shifted[1:] = mu_law_decode_values(classes[:-1])
        h = dc.conv1d(Tensor(shifted.reshape(1, t)), self.front_w, self.front_b)
        skip_sum = None
        cfg = self.config
        for i in range(cfg.n_blocks * cfg.n_layers):
            d = 2 ** (i % cfg.n_layers)
            filt = dc.tanh(dc.conv1d(h, self.filt_w[i], self.filt_b[i], dilation=d))
            gate = dc.sigmoid(dc.conv1d(h, self.gate_w[i], self.gate_b[i], dilation=d))
            act = dc.mul(filt, gate)
            h = dc.add(h, dc.conv1d(act, self.res_w[i], self.res_b[i]))
            s = dc.conv1d(act, self.skip_w[i], self.skip_b[i])
            skip_sum = s if skip_sum is None else dc.add(skip_sum, s)
        return dc.conv1d(dc.tanh(skip_sum), self.head_w, self.head_b)

    # DensityModel surface (evaluation half) -----------------------------
    def log_density(self, frame) -> float:
        return ar_log_density(self, frame)

    def grad_log_density(self, frame):
        raise NotDifferentiableError(
            "the categorical mu-law likelihood has no gradient in the continuous "
            "input; autoregressive priors cannot drive Langevin separation")

    def log_density_and_grad(self, frame):
        raise NotDifferentiableError(
            "the categorical mu-law likelihood has no gradient in the continuous "
            "input; autoregressive priors cannot drive Langevin separation")

    def sample(self, rng: np.random.Generator, n_frames: int, frame_len: int) -> list:
        return [ar_generate(self, frame_len, rng) for _ in range(n_frames)]


def _check_classes(classes: np.ndarray) -> np.ndarray:
    c = np.asarray(classes)
    if c.ndim != 1 or c.size == 0:
        raise ShapeError(f"class sequence must be non-empty 1-D, got shape {c.shape}")
    if not np.issubdtype(c.dtype, np.integer):
        raise ShapeError("class sequence must be integer-valued")
    if c.min() < 0 or c.max() >= N_CLASSES:
        raise ShapeError(f"classes must lie in 0..{N_CLASSES - 1}")
    return c


# ----------------------------------------------------------------------
# module-level operations
# ----------------------------------------------------------------------

def ar_logits(model: ARModel, classes: np.ndarray) -> np.ndarray:
    """Per-step 256-way logits; position t sees classes strictly before t."""
    return model._logits_graph(classes).data.copy()


def ar_ce_graph(model: ARModel, classes: np.ndarray) -> Tensor:
    """Mean cross-entropy over timesteps as a differentiable scalar."""
    classes = _check_classes(classes)
    return dc.softmax_cross_entropy(model._logits_graph(classes), classes)


def ar_log_density(model: ARModel, frame) -> float:
    """Mean per-sample log-mass of the mu-law classes of ``frame`` (nats)."""
    samples = frame.samples if isinstance(frame, Frame) else np.asarray(frame, dtype=np.float64)
    classes = mu_law_encode(samples)
    return -float(ar_ce_graph(model, classes).data)


def ar_train_loss(model: ARModel, frames: list) -> Tensor:
    """Mean cross-entropy over a batch of frames (differentiable scalar)."""
    if not frames:
        raise ShapeError("empty batch")
    total = None
    for f in frames:
        samples = f.samples if isinstance(f, Frame) else np.asarray(f, dtype=np.float64)
        ce = ar_ce_graph(model, mu_law_encode(samples))
        total = ce if total is None else dc.add(total, ce)
    return dc.affine(total, 1.0 / len(frames), 0.0)


def ar_generate(model: ARModel, n_samples: int, rng: np.random.Generator,
                seed_frame: Frame | None = None,
                sample_rate: int | None = None) -> Frame:
    """Sequential categorical sampling, mu-law decoded.

    Each step re-runs the network over the trailing receptive field (no
    caching queues), so generation is O(n * rf) network columns and slow for
    large models -- inherent to the autoregressive factorization.
    """
    if n_samples <= 0:
        raise ShapeError("n_samples must be positive")
    rate = sample_rate or model.sample_rate or 16000
    rf = model.receptive_field
    history: list[int] = []
    if seed_frame is not None:
        history = [int(c) for c in mu_law_encode(seed_frame.samples)]
    generated: list[int] = []
    for _ in range(n_samples):
        ctx = history[-(rf - 1):] if rf > 1 else []
        cols = np.asarray(ctx + [0], dtype=np.int64)  # trailing slot is masked by causality
        logits = ar_logits(model, cols)[:, -1]
        m = logits.max()
        p = np.exp(logits - m)
        p /= p.sum()
        c = int(rng.choice(N_CLASSES, p=p))
        history.append(c)
        generated.append(c)
    return Frame(samples=mu_law_decode_values(np.asarray(generated, dtype=np.int64)),
                 sample_rate=rate)
