"""Coupling-flow density model over continuous frames.

Architecture: ``n_blocks`` blocks, each one squeeze (time -> channels, x2)
followed by ``n_flows`` flow steps; a flow step is activation normalization,
an affine coupling over even/odd channels, and an even/odd role flip. The
coupling conditioner is a stack of gated dilated convolutions reading the
even half and emitting (log s, t) for the odd half.

Forward direction is data -> latent with the odd half transformed as
``z_odd = (x_odd - t) / s``, accumulating ``log_det = -sum(log s)`` plus the
activation-normalization scale terms; the latent prior is standard normal.
The conditioner's scale output is bounded by ``clamp * tanh(raw / clamp)`` so
early training cannot overflow the exponential.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ShapeError
from .signals import Frame

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FlowConfig:
    n_blocks: int = 3
    n_flows: int = 4
    cond_layers: int = 6
    width: int = 16
    kernel_size: int = 3
    log_scale_clamp: float = 7.0

    @classmethod
    def desk(cls) -> "FlowConfig":
        return cls()

    @classmethod
    def paper_toy(cls) -> "FlowConfig":
        return cls(n_blocks=4, n_flows=6, cond_layers=10, width=32)

    def to_dict(self) -> dict:
        return asdict(self)


def _conv_param(c_out: int, c_in: int, k: int, rng: np.random.Generator | None,
                std_scale: float = 1.0) -> Tensor:
    shape = dc.conv_weight_shape(c_out, c_in, k)
    if rng is None:
        return Tensor(np.zeros(shape))
    std = std_scale / math.sqrt(c_in * k)
    return Tensor(rng.normal(0.0, std, shape))


class ActNorm:
    """Per-channel log-scale and bias; init standardizes the first batch."""

    def __init__(self, channels: int):
        self.channels = channels
        self.log_scale = Tensor(np.zeros((channels, 1)))
        self.bias = Tensor(np.zeros((channels, 1)))
        self.initialized = False

    def init_from(self, activations: np.ndarray) -> None:
        mean = activations.mean(axis=1, keepdims=True)
        std = activations.std(axis=1, keepdims=True) + 1e-6
        self.bias.data[...] = mean
        self.log_scale.data[...] = np.log(std)
        self.initialized = True

    def forward_t(self, x: Tensor) -> tuple:
        t_len = x.data.shape[1]
        y = dc.mul(dc.sub(x, self.bias), dc.exp(dc.affine(self.log_scale, -1.0, 0.0)))
        log_det = dc.affine(dc.tsum(self.log_scale), -float(t_len), 0.0)
        return y, log_det

    def inverse_np(self, z: np.ndarray) -> tuple:
        x = z * np.exp(self.log_scale.data) + self.bias.data
        log_det = float(z.shape[1] * self.log_scale.data.sum())
        return x, log_det

    def parameters(self, prefix: str) -> list:
        return [(f"{prefix}.log_scale", self.log_scale), (f"{prefix}.bias", self.bias)]

    def randomize(self, rng: np.random.Generator, scale: float) -> None:
        self.log_scale.data[...] = rng.normal(0.0, 0.3 * scale, self.log_scale.data.shape)
        self.bias.data[...] = rng.normal(0.0, 0.3 * scale, self.bias.data.shape)
        self.initialized = True


class Conditioner:
    """Gated dilated-convolution stack mapping the even half to (log_s, t).

    The two output heads are zero-initialized so a fresh coupling is the
    identity map.
    """

    def __init__(self, half_channels: int, width: int, n_layers: int, kernel: int,
                 rng: np.random.Generator | None):
        self.half_channels = half_channels
        self.width = width
        self.n_layers = n_layers
        self.kernel = kernel
        self.front_w = _conv_param(width, half_channels, 1, rng)
        self.front_b = Tensor(np.zeros((width, 1)))
        self.filt_w, self.filt_b = [], []
        self.gate_w, self.gate_b = [], []
        self.res_w, self.res_b = [], []
        self.skip_w, self.skip_b = [], []
        for _ in range(n_layers):
            self.filt_w.append(_conv_param(width, width, kernel, rng))
            self.filt_b.append(Tensor(np.zeros((width, 1))))
            self.gate_w.append(_conv_param(width, width, kernel, rng))
            self.gate_b.append(Tensor(np.zeros((width, 1))))
            self.res_w.append(_conv_param(width, width, 1, rng))
            self.res_b.append(Tensor(np.zeros((width, 1))))
            self.skip_w.append(_conv_param(width, width, 1, rng))
            self.skip_b.append(Tensor(np.zeros((width, 1))))
        self.head_s_w = _conv_param(half_channels, width, 1, None)
        self.head_s_b = Tensor(np.zeros((half_channels, 1)))
        self.head_t_w = _conv_param(half_channels, width, 1, None)
        self.head_t_b = Tensor(np.zeros((half_channels, 1)))

    def __call__(self, x: Tensor) -> tuple:
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
        # heads read the raw skip sum: off-distribution inputs are free to push
        # the scale far outside its in-class range, which the degenerate-input
        # diagnostics rely on
        raw_s = dc.conv1d(skip_sum, self.head_s_w, self.head_s_b)
        t = dc.conv1d(skip_sum, self.head_t_w, self.head_t_b)
        return raw_s, t

    def parameters(self, prefix: str) -> list:
        out = [(f"{prefix}.front.w", self.front_w), (f"{prefix}.front.b", self.front_b)]
        for i in range(self.n_layers):
            out += [
                (f"{prefix}.l{i}.filt.w", self.filt_w[i]), (f"{prefix}.l{i}.filt.b", self.filt_b[i]),
                (f"{prefix}.l{i}.gate.w", self.gate_w[i]), (f"{prefix}.l{i}.gate.b", self.gate_b[i]),
                (f"{prefix}.l{i}.res.w", self.res_w[i]), (f"{prefix}.l{i}.res.b", self.res_b[i]),
                (f"{prefix}.l{i}.skip.w", self.skip_w[i]), (f"{prefix}.l{i}.skip.b", self.skip_b[i]),
            ]
        out += [(f"{prefix}.head_s.w", self.head_s_w), (f"{prefix}.head_s.b", self.head_s_b),
                (f"{prefix}.head_t.w", self.head_t_w), (f"{prefix}.head_t.b", self.head_t_b)]
        return out

    def randomize(self, rng: np.random.Generator, scale: float) -> None:
        for name, p in self.parameters("c"):
            fan = self.width * self.kernel if ".w" in name else 1
            std = scale / math.sqrt(max(fan, 1))
            p.data[...] = rng.normal(0.0, std, p.data.shape)


class Coupling:
    """Affine coupling: the even channels condition an affine map of the odd ones."""

    def __init__(self, half_channels: int, cfg: FlowConfig, rng: np.random.Generator | None):
        self.cond = Conditioner(half_channels, cfg.width, cfg.cond_layers, cfg.kernel_size, rng)
        self.clamp = cfg.log_scale_clamp

    def _scale_translate(self, even: Tensor) -> tuple:
        raw_s, t = self.cond(even)
        log_s = dc.affine(dc.tanh(dc.affine(raw_s, 1.0 / self.clamp, 0.0)), self.clamp, 0.0)
        return log_s, t

    def forward_t(self, x: Tensor) -> tuple:
        xe = dc.even_channels(x)
        xo = dc.odd_channels(x)
        log_s, t = self._scale_translate(xe)
        zo = dc.mul(dc.sub(xo, t), dc.exp(dc.affine(log_s, -1.0, 0.0)))
        y = dc.interleave(xe, zo)
        log_det = dc.affine(dc.tsum(log_s), -1.0, 0.0)
        return y, log_det

    def inverse_np(self, z: np.ndarray) -> tuple:
        ze, zo = z[0::2], z[1::2]
        log_s_t, t_t = self._scale_translate(Tensor(ze))
        log_s, t = log_s_t.data, t_t.data
        xo = zo * np.exp(log_s) + t
        x = np.empty_like(z)
        x[0::2], x[1::2] = ze, xo
        return x, float(log_s.sum())

    def parameters(self, prefix: str) -> list:
        return self.cond.parameters(f"{prefix}.cond")

    def randomize(self, rng: np.random.Generator, scale: float) -> None:
        self.cond.randomize(rng, scale)


def _flip_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    out[0::2], out[1::2] = x[1::2], x[0::2]
    return out


class FlowStep:
    """ActNorm -> coupling -> even/odd flip (the flip is its own inverse)."""

    def __init__(self, channels: int, cfg: FlowConfig, rng: np.random.Generator | None):
        self.actnorm = ActNorm(channels)
        self.coupling = Coupling(channels // 2, cfg, rng)

    def forward_t(self, x: Tensor) -> tuple:
        y, ld_a = self.actnorm.forward_t(x)
        y, ld_c = self.coupling.forward_t(y)
        y = dc.interleave(dc.odd_channels(y), dc.even_channels(y))
        return y, dc.add(ld_a, ld_c)

    def inverse_np(self, z: np.ndarray) -> tuple:
        x = _flip_np(z)
        x, ld_c = self.coupling.inverse_np(x)
        x, ld_a = self.actnorm.inverse_np(x)
        return x, ld_c + ld_a

    def parameters(self, prefix: str) -> list:
        return (self.actnorm.parameters(f"{prefix}.actnorm")
                + self.coupling.parameters(f"{prefix}.coupling"))


class FlowModel:
    """Parameter container plus the DensityModel surface for the flow family."""

    supports_gradient = True
    family = "flow"

    def __init__(self, config: FlowConfig | None = None,
                 rng: np.random.Generator | None = None,
                 sample_rate: int | None = None):
        self.config = config or FlowConfig.desk()
        self.sample_rate = sample_rate
        self.blocks = []
        for b in range(self.config.n_blocks):
            channels = 2 ** (b + 1)
            self.blocks.append([FlowStep(channels, self.config, rng)
                                for _ in range(self.config.n_flows)])

    # ------------------------------------------------------------------
    @property
    def length_multiple(self) -> int:
        return 2 ** self.config.n_blocks

    def _check_length(self, n: int) -> None:
        m = self.length_multiple
        if n % m != 0 or n < m:
            raise ShapeError(f"frame length {n} must be a positive multiple of {m} "
                             f"({self.config.n_blocks} squeeze blocks)")

    def parameters(self) -> list:
        out = []
        for b, flows in enumerate(self.blocks):
            for f, step in enumerate(flows):
                out += step.parameters(f"b{b}.f{f}")
        return out

    def randomize(self, rng: np.random.Generator, scale: float = 0.5) -> None:
        """Randomize every parameter (heads included); for property tests."""
        for flows in self.blocks:
            for step in flows:
                step.actnorm.randomize(rng, scale)
                step.coupling.randomize(rng, scale)

    @property
    def actnorm_initialized(self) -> bool:
        return all(step.actnorm.initialized for flows in self.blocks for step in flows)

    def mark_actnorm_initialized(self, flag: bool = True) -> None:
        for flows in self.blocks:
            for step in flows:
                step.actnorm.initialized = flag

    # ------------------------------------------------------------------
    def forward_t(self, x: Tensor) -> tuple:
        self._check_length(x.data.shape[1] * x.data.shape[0])
        z = x
        log_det = Tensor(np.asarray(0.0))
        for flows in self.blocks:
            z = dc.squeeze(z)
            for step in flows:
                z, ld = step.forward_t(z)
                log_det = dc.add(log_det, ld)
        return z, log_det

    def _log_density_graph(self, samples: np.ndarray) -> tuple:
        x = Tensor(samples.reshape(1, -1))
        z, log_det = self.forward_t(x)
        n = samples.size
        quad = dc.affine(dc.tsum(dc.mul(z, z)), -0.5, -0.5 * n * LOG_2PI)
        return dc.add(quad, log_det), x

    # DensityModel surface ---------------------------------------------
    def log_density(self, frame) -> float:
        samples = frame.samples if isinstance(frame, Frame) else np.asarray(frame, dtype=np.float64)
        ll, _ = self._log_density_graph(samples)
        return float(ll.data) / samples.size

    def grad_log_density(self, frame) -> np.ndarray:
        return self.log_density_and_grad(frame)[1]

    def log_density_and_grad(self, frame) -> tuple:
        samples = frame.samples if isinstance(frame, Frame) else np.asarray(frame, dtype=np.float64)
        ll, x = self._log_density_graph(samples)
        total = float(ll.data)
        ll.backward()
        return total / samples.size, x.grad.reshape(-1).copy()

    def sample(self, rng: np.random.Generator, n_frames: int, frame_len: int) -> list:
        return flow_sample(self, rng, n_frames, frame_len)


# ----------------------------------------------------------------------
# module-level operations
# ----------------------------------------------------------------------

def _samples_of(frame) -> np.ndarray:
    return frame.samples if isinstance(frame, Frame) else np.asarray(frame, dtype=np.float64)


def flow_forward(model: FlowModel, frame) -> tuple:
    """Data -> latent; returns the latent (channels, time) and log|det J| in nats."""
    samples = _samples_of(frame)
    z, log_det = model.forward_t(Tensor(samples.reshape(1, -1)))
    return z.data.copy(), float(log_det.data)


def flow_inverse(model: FlowModel, latent: np.ndarray, return_log_det: bool = False):
    """Latent -> data; exact inverse of :func:`flow_forward`."""
    z = np.asarray(latent, dtype=np.float64)
    expected_c = model.length_multiple
    if z.ndim == 1:
        z = z.reshape(expected_c, -1)
    if z.ndim != 2 or z.shape[0] != expected_c:
        raise ShapeError(f"latent must have {expected_c} channels, got shape {z.shape}")
    log_det = 0.0
    x = z
    for flows in reversed(model.blocks):
        for step in reversed(flows):
            x, ld = step.inverse_np(x)
            log_det += ld
        # undo squeeze: (C, T) -> (C/2, 2T)
        c, t = x.shape
        x = x.reshape(c // 2, 2, t).transpose(0, 2, 1).reshape(c // 2, 2 * t)
    samples = x.reshape(-1)
    if return_log_det:
        return samples, log_det
    return samples


def log_density(model: FlowModel, frame) -> float:
    """Mean log-density in nats per sample (standard-normal latent + log-det)."""
    return model.log_density(frame)


def grad_log_density(model: FlowModel, frame) -> np.ndarray:
    """Gradient of the *total* log-density w.r.t. every input sample."""
    return model.grad_log_density(frame)


def flow_sample(model: FlowModel, rng: np.random.Generator, n_frames: int,
                frame_len: int = 2048) -> list:
    """Push standard-normal latents through the inverse map."""
    model._check_length(frame_len)
    c = model.length_multiple
    rate = model.sample_rate or 16000
    out = []
    for _ in range(n_frames):
        z = rng.standard_normal((c, frame_len // c))
        out.append(Frame(samples=flow_inverse(model, z), sample_rate=rate))
    return out


def initialize_actnorm(model: FlowModel, frames: list) -> None:
    """Data-dependent init from the first training batch, layer by layer."""
    xs = [Tensor(_samples_of(f).reshape(1, -1)) for f in frames]
    for flows in model.blocks:
        xs = [dc.squeeze(x) for x in xs]
        for step in flows:
            if not step.actnorm.initialized:
                step.actnorm.init_from(np.hstack([x.data for x in xs]))
            xs = [step.forward_t(x)[0] for x in xs]
