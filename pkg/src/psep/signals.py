"""Toy waveform synthesis, mixing, mu-law companding, noise, WAV and dataset I/O.

The four source families are fixed closed forms (phase-consistent, zero-mean,
amplitude-exact):

    sine      A * sin(2*pi*f*t + phi)
    sawtooth  A * (2 * frac(f*t + phi / 2*pi) - 1)
    square    A * sgn(sin(2*pi*f*t + phi)),  sgn(0) = +1
    triangle  A * (2/pi) * arcsin(sin(2*pi*f*t + phi))

The square convention never produces 0.0, which matters for the degenerate
input diagnostics downstream.
"""

from __future__ import annotations

import logging
import math
import struct
import wave
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import DataFormatError, ShapeError

log = logging.getLogger(__name__)

# uniform sampling ranges for source parameters
FREQ_RANGE_HZ = (27.0, 4186.0)
AMP_RANGE = (0.8, 1.0)

# mu-law companding: 256 classes
MU = 255
N_CLASSES = 256

DATASET_MAGIC = b"PSEP-DS1"

# seed-stream namespaces (keep stable: they define reproducibility)
_TAG_TRAIN_SPLIT = 1
_TAG_TEST_SPLIT = 2


class SourceKind(IntEnum):
    """The four toy sources; integer codes are stable for serialization."""

    SINE = 0
    SAWTOOTH = 1
    SQUARE = 2
    TRIANGLE = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_name(cls, name: str) -> "SourceKind":
        aliases = {"saw": "sawtooth", "tri": "triangle", "sin": "sine"}
        key = aliases.get(name.lower(), name.lower())
        try:
            return cls[key.upper()]
        except KeyError:
            raise ValueError(f"unknown source kind {name!r}") from None


@dataclass(frozen=True)
class Frame:
    """Fixed-length run of real-valued samples with a sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ShapeError(f"frame samples must be a non-empty 1-D array, got shape {arr.shape}")
        if self.sample_rate <= 0:
            raise ShapeError(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", arr)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class SourceParams:
    """Frequency / amplitude / phase of one synthesized source."""

    frequency: float
    amplitude: float
    phase: float


@dataclass(frozen=True)
class MixSpec:
    """Linear mixing weights; the toy default is equal weights 1/N."""

    weights: tuple

    def __post_init__(self):
        if len(self.weights) < 2:
            raise ShapeError("a mix needs at least two sources")

    @classmethod
    def equal(cls, n: int) -> "MixSpec":
        return cls(weights=tuple(1.0 / n for _ in range(n)))


@dataclass(frozen=True)
class MixRecord:
    """One dataset entry: the per-source frames and their linear mix."""

    sources: tuple
    mix: Frame


@dataclass
class ToyDataset:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    sample_rate: int = 16000
    frame_len: int = 16384
    seed: int = 0

    def source_frames(self, split: str, kind: SourceKind) -> list:
        records = self.train if split == "train" else self.test
        return [r.sources[int(kind)] for r in records]


# ----------------------------------------------------------------------
# synthesis
# ----------------------------------------------------------------------

def synth_waveform(kind: SourceKind, params: SourceParams, sample_rate: int,
                   length: int) -> Frame:
    """Deterministic closed-form synthesis of one source frame."""
    if length <= 0:
        raise ShapeError(f"length must be positive, got {length}")
    nyquist = sample_rate / 2.0
    if params.frequency > nyquist:
        raise ShapeError(
            f"frequency {params.frequency} Hz above Nyquist ({nyquist} Hz at {sample_rate} Hz)")
    t = np.arange(length, dtype=np.float64) / sample_rate
    f, a, phi = params.frequency, params.amplitude, params.phase
    arg = 2.0 * np.pi * f * t + phi
    if kind == SourceKind.SINE:
        samples = a * np.sin(arg)
    elif kind == SourceKind.SQUARE:
        s = np.sin(arg)
        # sgn(0) = +1: the square wave never takes the value 0.0
        samples = a * np.where(s >= 0.0, 1.0, -1.0)
    elif kind == SourceKind.SAWTOOTH:
        cycles = f * t + phi / (2.0 * np.pi)
        samples = a * (2.0 * (cycles - np.floor(cycles)) - 1.0)
    elif kind == SourceKind.TRIANGLE:
        samples = a * (2.0 / np.pi) * np.arcsin(np.sin(arg))
    else:
        raise ShapeError(f"unknown source kind {kind!r}")
    return Frame(samples=samples, sample_rate=sample_rate)


def sample_source_params(rng: np.random.Generator,
                         nyquist_hz: float | None = None) -> SourceParams:
    """Uniform draws of (frequency, amplitude, phase).

    With ``nyquist_hz`` set, frequencies are re-drawn until strictly below the
    Nyquist limit so reduced sample rates never alias the training data.
    """
    lo, hi = FREQ_RANGE_HZ
    freq = rng.uniform(lo, hi)
    if nyquist_hz is not None:
        if nyquist_hz <= lo:
            raise ShapeError(f"Nyquist {nyquist_hz} Hz leaves no admissible frequency above {lo} Hz")
        while freq >= nyquist_hz:
            freq = rng.uniform(lo, hi)
    amp = rng.uniform(*AMP_RANGE)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    return SourceParams(frequency=freq, amplitude=amp, phase=phase)


def mix(sources: list, spec: MixSpec) -> Frame:
    """Elementwise weighted sum of equal-shape frames."""
    if len(sources) != len(spec.weights):
        raise ShapeError(f"{len(sources)} sources but {len(spec.weights)} weights")
    first = sources[0]
    acc = np.zeros(len(first), dtype=np.float64)
    for frame, w in zip(sources, spec.weights):
        if len(frame) != len(first) or frame.sample_rate != first.sample_rate:
            raise ShapeError("all sources must share length and sample rate")
        acc += w * frame.samples
    return Frame(samples=acc, sample_rate=first.sample_rate)


def _record_rng(seed: int, split_tag: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, split_tag, index)))


def _make_record(rng: np.random.Generator, sample_rate: int, frame_len: int) -> MixRecord:
    nyq = sample_rate / 2.0
    sources = tuple(
        synth_waveform(kind, sample_source_params(rng, nyquist_hz=nyq), sample_rate, frame_len)
        for kind in SourceKind
    )
    return MixRecord(sources=sources, mix=mix(list(sources), MixSpec.equal(len(sources))))


def make_toy_dataset(n_train: int, n_test: int, sample_rate: int, frame_len: int,
                     seed: int) -> ToyDataset:
    """Synthesize the four-source toy dataset; a pure function of (seed, config).

    Each record derives its own RNG stream from (seed, split, index), so the
    construction order (or any future parallelization over mixes) cannot
    change the content.
    """
    if n_train <= 0 or n_test <= 0:
        raise ShapeError("dataset split sizes must be positive")
    ds = ToyDataset(sample_rate=sample_rate, frame_len=frame_len, seed=seed)
    for i in range(n_train):
        ds.train.append(_make_record(_record_rng(seed, _TAG_TRAIN_SPLIT, i), sample_rate, frame_len))
    for i in range(n_test):
        ds.test.append(_make_record(_record_rng(seed, _TAG_TEST_SPLIT, i), sample_rate, frame_len))
    return ds


# ----------------------------------------------------------------------
# mu-law companding
# ----------------------------------------------------------------------

def mu_law_encode(frame: Frame | np.ndarray) -> np.ndarray:
    """Compand samples in [-1, 1] to 256 classes.

    y = sign(x) * ln(1 + 255|x|) / ln(256), class = round((y + 1) / 2 * 255)
    with ties rounded away from zero. Out-of-range inputs are clamped and the
    clamp count is logged.
    """
    x = frame.samples if isinstance(frame, Frame) else np.asarray(frame, dtype=np.float64)
    clipped = np.clip(x, -1.0, 1.0)
    n_clamped = int(np.count_nonzero(clipped != x))
    if n_clamped:
        log.warning("mu_law_encode clamped %d of %d samples to [-1, 1]", n_clamped, x.size)
    y = np.sign(clipped) * np.log1p(MU * np.abs(clipped)) / math.log(1 + MU)
    scaled = (y + 1.0) / 2.0 * MU
    # scaled >= 0, so half-away-from-zero == half-up
    classes = np.floor(scaled + 0.5).astype(np.int64)
    return np.clip(classes, 0, MU)


def mu_law_decode(classes: np.ndarray, sample_rate: int = 16000) -> Frame:
    """Invert the companding; strictly increasing in the class index."""
    c = np.asarray(classes)
    if c.size == 0:
        raise ShapeError("cannot decode an empty class sequence")
    if c.min() < 0 or c.max() > MU:
        raise ShapeError(f"classes must lie in 0..{MU}")
    y = 2.0 * c.astype(np.float64) / MU - 1.0
    x = np.sign(y) * ((1 + MU) ** np.abs(y) - 1.0) / MU
    return Frame(samples=x, sample_rate=sample_rate)


def mu_law_decode_values(classes: np.ndarray) -> np.ndarray:
    """Decoded amplitudes only (no Frame wrapper)."""
    c = np.asarray(classes)
    y = 2.0 * c.astype(np.float64) / MU - 1.0
    return np.sign(y) * ((1 + MU) ** np.abs(y) - 1.0) / MU


# ----------------------------------------------------------------------
# conditioning noise
# ----------------------------------------------------------------------

def add_gaussian_noise(frame: Frame, sigma: float, rng: np.random.Generator) -> Frame:
    """x + N(0, sigma^2) per element; sigma = 0 returns the frame unchanged."""
    if sigma < 0:
        raise ShapeError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return frame
    noisy = frame.samples + sigma * rng.standard_normal(len(frame))
    return Frame(samples=noisy, sample_rate=frame.sample_rate)


# ----------------------------------------------------------------------
# WAV I/O (16-bit PCM mono)
# ----------------------------------------------------------------------

class WavFormatError(DataFormatError):
    """Unsupported or malformed WAV content."""


def read_wav(path: str | Path) -> Frame:
    """Read 16-bit PCM mono; samples are scaled to [-1, 1] by 1/32768."""
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n = wf.getnframes()
            if n_channels != 1:
                raise WavFormatError(f"{path}: expected mono, got {n_channels} channels")
            if width != 2:
                raise WavFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
            if n == 0:
                raise WavFormatError(f"{path}: empty WAV")
            raw = wf.readframes(n)
    except wave.Error as e:
        raise WavFormatError(f"{path}: {e}") from e
    ints = np.frombuffer(raw, dtype="<i2")
    return Frame(samples=ints.astype(np.float64) / 32768.0, sample_rate=rate)


def write_wav(frame: Frame, path: str | Path) -> None:
    """Write 16-bit PCM mono; the exact inverse of :func:`read_wav` up to quantization."""
    ints = np.clip(np.round(frame.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(frame.sample_rate)
        wf.writeframes(ints.tobytes())


# ----------------------------------------------------------------------
# dataset records on disk:
#   magic "PSEP-DS1", u32 sample_rate, u32 frame_len, u32 n_sources,
#   then f32 little-endian arrays [sources..., mix]
# ----------------------------------------------------------------------

def write_record(path: str | Path, sources: list, mix_frame: Frame) -> None:
    frame_len = len(mix_frame)
    for s in sources:
        if len(s) != frame_len or s.sample_rate != mix_frame.sample_rate:
            raise ShapeError("record sources must match the mix frame")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<III", mix_frame.sample_rate, frame_len, len(sources)))
        for s in sources:
            fh.write(s.samples.astype("<f4").tobytes())
        fh.write(mix_frame.samples.astype("<f4").tobytes())


def read_record(path: str | Path) -> MixRecord:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(DATASET_MAGIC) + 12 or blob[:8] != DATASET_MAGIC:
        raise DataFormatError(f"{path}: not a PSEP-DS1 record")
    rate, frame_len, n_sources = struct.unpack_from("<III", blob, 8)
    expect = 20 + 4 * frame_len * (n_sources + 1)
    if len(blob) != expect:
        raise DataFormatError(f"{path}: truncated record ({len(blob)} bytes, expected {expect})")
    arrays = np.frombuffer(blob, dtype="<f4", offset=20).astype(np.float64)
    arrays = arrays.reshape(n_sources + 1, frame_len)
    sources = tuple(Frame(samples=arrays[i].copy(), sample_rate=rate) for i in range(n_sources))
    mix_frame = Frame(samples=arrays[-1].copy(), sample_rate=rate)
    return MixRecord(sources=sources, mix=mix_frame)


def write_dataset(ds: ToyDataset, out_dir: str | Path) -> dict:
    """One directory per split, one record file per mix; returns counts."""
    out = Path(out_dir)
    for split, records in (("train", ds.train), ("test", ds.test)):
        d = out / split
        d.mkdir(parents=True, exist_ok=True)
        for i, rec in enumerate(records):
            write_record(d / f"rec_{i:05d}.psd", list(rec.sources), rec.mix)
    return {"train": len(ds.train), "test": len(ds.test)}


def read_dataset(root: str | Path) -> ToyDataset:
    root = Path(root)
    ds = ToyDataset()
    for split in ("train", "test"):
        d = root / split
        if not d.is_dir():
            raise DataFormatError(f"{root}: missing dataset split directory {split!r}")
        records = [read_record(p) for p in sorted(d.glob("rec_*.psd"))]
        if not records:
            raise DataFormatError(f"{d}: no records found")
        getattr(ds, split).extend(records)
    ds.sample_rate = ds.train[0].mix.sample_rate
    ds.frame_len = len(ds.train[0].mix)
    return ds
