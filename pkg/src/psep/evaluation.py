"""Cross-likelihood matrices, discrimination margins, degenerate-input tables.

Values are mean log-likelihood in nats per sample. The autoregressive family
reports discrete log-mass (of the mu-law classes), which is not directly
comparable to the flow's continuous density; emitted reports label the units
accordingly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, MissingArtifactError, ShapeError
from .signals import Frame

_TAG_EVAL_NOISE = 21
_TAG_EVAL_DRAW = 22

# rendering clamps only; computation and CSV keep full values
SENTINEL_MAGNITUDE = 1e15
NEG_SENTINEL = "-inf*"
POS_SENTINEL = "+inf*"
_SHADES = " .:-=+*#%@"


@dataclass(frozen=True)
class PriorHandle:
    """A density model plus the provenance the reports need."""

    model: object
    family: str
    source: str
    sigma: float
    checkpoint_hash: str | None = None

    @classmethod
    def from_checkpoint(cls, model, meta: dict) -> "PriorHandle":
        return cls(model=model, family=meta["family"], source=meta["source"],
                   sigma=float(meta.get("sigma", 0.0)), checkpoint_hash=meta.get("hash"))


@dataclass
class CrossLikelihoodMatrix:
    values: np.ndarray  # (K, K): row = data source, column = prior
    row_labels: list
    col_labels: list
    family: str
    cond_sigma: float
    data_sigma: float
    seed: int
    units: str
    checkpoint_hashes: list = field(default_factory=list)

    def entry(self, i: int, j: int) -> float:
        return float(self.values[i, j])


@dataclass(frozen=True)
class DiscriminationReport:
    """Per-prior margin = in-class mean LL minus best out-of-class mean LL."""

    margins: tuple
    dominant: tuple  # per prior: margin > 0
    all_dominant: bool
    labels: tuple


def _units_for(family: str) -> str:
    return "nats/sample (discrete mass)" if family == "ar" else "nats/sample"


def _validate_handles(handles: list, force: bool) -> tuple:
    if not handles:
        raise ConfigError("no priors given")
    families = {h.family for h in handles}
    sigmas = {float(h.sigma) for h in handles}
    if not force and (len(families) > 1 or len(sigmas) > 1):
        raise ConfigError(
            f"mixed prior families {sorted(families)} / sigma tags {sorted(sigmas)}; "
            "pass force=True to compare anyway")
    return sorted(families)[0], sorted(sigmas)[0]


def _noised(samples: np.ndarray, sigma: float, seed: int, idx: int) -> np.ndarray:
    if sigma == 0.0:
        return samples
    rng = np.random.default_rng(np.random.SeedSequence((seed, _TAG_EVAL_NOISE, idx)))
    return samples + sigma * rng.standard_normal(samples.size)


def cross_likelihood(handles: list, test_sets: list, data_noise: float = 0.0,
                     seed: int = 0, force: bool = False) -> CrossLikelihoodMatrix:
    """Entry (i, j): mean per-sample LL of source-i test frames under prior j.

    ``data_noise`` perturbs every evaluated frame with fresh N(0, sigma^2)
    noise derived from ``seed``; zero noise reproduces the clean matrix
    bitwise (the noise path is skipped entirely).
    """
    family, cond_sigma = _validate_handles(handles, force)
    k = len(handles)
    if len(test_sets) != k:
        raise ConfigError(f"{len(test_sets)} test sets for {k} priors")
    if any(len(ts) == 0 for ts in test_sets):
        raise ConfigError("empty test set")
    if data_noise < 0:
        raise ConfigError("data_noise must be >= 0")

    values = np.empty((k, k))
    for i, frames in enumerate(test_sets):
        noised = [_noised(f.samples if isinstance(f, Frame) else np.asarray(f, dtype=np.float64),
                          data_noise, seed, i * len(frames) + n)
                  for n, f in enumerate(frames)]
        for j, h in enumerate(handles):
            values[i, j] = float(np.mean([h.model.log_density(x) for x in noised]))
    return CrossLikelihoodMatrix(
        values=values,
        row_labels=[h.source for h in handles],
        col_labels=[h.source for h in handles],
        family=family,
        cond_sigma=cond_sigma,
        data_sigma=data_noise,
        seed=seed,
        units=_units_for(family),
        checkpoint_hashes=[h.checkpoint_hash for h in handles],
    )


def discrimination_report(matrix: CrossLikelihoodMatrix) -> DiscriminationReport:
    v = matrix.values
    if v.ndim != 2 or v.shape[0] != v.shape[1]:
        raise ShapeError(f"cross-likelihood matrix must be square, got {v.shape}")
    k = v.shape[0]
    margins, dominant = [], []
    for j in range(k):
        in_class = v[j, j]
        out_class = np.delete(v[:, j], j)
        margin = float(in_class - out_class.max()) if k > 1 else math.inf
        margins.append(margin)
        dominant.append(margin > 0)
    return DiscriminationReport(margins=tuple(margins), dominant=tuple(dominant),
                                all_dominant=all(dominant), labels=tuple(matrix.col_labels))


def row_diagonal_dominance(matrix: CrossLikelihoodMatrix) -> tuple:
    """Per data source: does its own prior give it the highest mean LL?"""
    v = matrix.values
    flags = []
    for i in range(v.shape[0]):
        others = np.delete(v[i], i)
        flags.append(bool(v[i, i] > others.max()) if others.size else True)
    return tuple(flags)


# ----------------------------------------------------------------------
# degenerate inputs (constant zero, wide Gaussian noise)
# ----------------------------------------------------------------------

@dataclass
class DegenerateTable:
    values: np.ndarray  # (n_rows, K)
    row_labels: list  # (input label, sigma tag)
    col_labels: list
    family: str
    seed: int
    noise_draws: int
    units: str
    checkpoint_hashes: dict = field(default_factory=dict)


NOISE_INPUT_VAR = 0.5  # N(0, 0.5): zero-centered, variance 0.5


def degenerate_input_table(handles_by_sigma: dict, frame_len: int,
                           sigma_tags: tuple = (0.0, 0.359),
                           noise_draws: int = 32, seed: int = 0) -> DegenerateTable:
    """Mean LL of a constant-zero frame and of wide Gaussian noise.

    ``handles_by_sigma`` maps each requested sigma tag to the per-source
    prior handles; the noise rows average over ``noise_draws`` fresh draws
    from N(0, 0.5) with a recorded seed.
    """
    if noise_draws < 1:
        raise ConfigError("noise_draws must be >= 1")
    missing = []
    for s in sigma_tags:
        if s not in handles_by_sigma:
            missing.append(f"sigma={s:g} (all sources)")
    if missing:
        raise MissingArtifactError("missing checkpoints: " + ", ".join(missing))
    families = {h.family for s in sigma_tags for h in handles_by_sigma[s]}
    if len(families) > 1:
        raise ConfigError(f"mixed families in degenerate table: {sorted(families)}")
    family = families.pop()
    col_labels = [h.source for h in handles_by_sigma[sigma_tags[0]]]
    for s in sigma_tags:
        if [h.source for h in handles_by_sigma[s]] != col_labels:
            raise ConfigError("per-sigma handle lists must cover the same sources in order")

    const_zero = np.zeros(frame_len)
    std = math.sqrt(NOISE_INPUT_VAR)
    draws = []
    for d in range(noise_draws):
        rng = np.random.default_rng(np.random.SeedSequence((seed, _TAG_EVAL_DRAW, d)))
        draws.append(std * rng.standard_normal(frame_len))

    rows, row_labels = [], []
    for input_label, inputs in (("0.0", [const_zero]), (f"N(0,{NOISE_INPUT_VAR:g})", draws)):
        for s in sigma_tags:
            row = [float(np.mean([h.model.log_density(x) for x in inputs]))
                   for h in handles_by_sigma[s]]
            rows.append(row)
            row_labels.append((input_label, s))
    hashes = {f"{h.source}@sigma{s:g}": h.checkpoint_hash
              for s in sigma_tags for h in handles_by_sigma[s]}
    return DegenerateTable(values=np.asarray(rows), row_labels=row_labels,
                           col_labels=col_labels, family=family, seed=seed,
                           noise_draws=noise_draws, units=_units_for(family),
                           checkpoint_hashes=hashes)


# ----------------------------------------------------------------------
# report emission
# ----------------------------------------------------------------------

def format_sigma(sigma: float) -> str:
    return f"{sigma:g}"


def _cell_token(v: float) -> str | None:
    """Sentinel token for rendering, or None when the value prints as a number."""
    if not math.isfinite(v) or abs(v) > SENTINEL_MAGNITUDE:
        return NEG_SENTINEL if v < 0 else POS_SENTINEL
    return None


def _render_grid(values: np.ndarray, row_labels: list, col_labels: list,
                 title: str) -> str:
    finite = values[np.isfinite(values) & (np.abs(values) <= SENTINEL_MAGNITUDE)]
    lo = float(finite.min()) if finite.size else 0.0
    hi = float(finite.max()) if finite.size else 1.0
    span = hi - lo
    width = 12
    lines = [title]
    lines.append(" " * 14 + "".join(f"{c:>{width}}" for c in col_labels))
    for i, rl in enumerate(row_labels):
        cells = []
        for v in values[i]:
            token = _cell_token(float(v))
            if token is not None:
                cells.append(f"{token:>{width}}")
                continue
            level = 0.5 if span == 0 else (float(v) - lo) / span
            shade = _SHADES[min(int(level * (len(_SHADES) - 1) + 0.5), len(_SHADES) - 1)]
            cells.append(f"{shade} {float(v):>+{width - 2}.3g}")
        lines.append(f"{rl:<14}" + "".join(cells))
    lines.append(f"(shading normalized over [{lo:+.4g}, {hi:+.4g}])")
    return "\n".join(lines) + "\n"


def _write_csv(path: Path, col_labels: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source"] + list(col_labels))
        for label, vals in rows:
            w.writerow([label] + [repr(float(v)) for v in vals])


def parse_values_csv(path: str | Path) -> tuple:
    """Read back an emitted CSV: (row labels, column labels, float matrix)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    cols = rows[0][1:]
    labels = [r[0] for r in rows[1:]]
    values = np.asarray([[float(v) for v in r[1:]] for r in rows[1:]])
    return labels, cols, values


def emit_matrix(matrix: CrossLikelihoodMatrix, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"xll_{matrix.family}_sigma{format_sigma(matrix.data_sigma)}_cond{format_sigma(matrix.cond_sigma)}"
    csv_path = out / f"{stem}.csv"
    _write_csv(csv_path, matrix.col_labels,
               list(zip(matrix.row_labels, matrix.values)))
    txt_path = out / f"{stem}.txt"
    title = (f"cross-likelihood [{matrix.units}] family={matrix.family} "
             f"data_sigma={format_sigma(matrix.data_sigma)} cond_sigma={format_sigma(matrix.cond_sigma)}")
    txt_path.write_text(_render_grid(matrix.values, matrix.row_labels, matrix.col_labels, title))
    report = discrimination_report(matrix)
    summary = {
        "kind": "cross_likelihood",
        "family": matrix.family,
        "units": matrix.units,
        "cond_sigma": matrix.cond_sigma,
        "data_sigma": matrix.data_sigma,
        "seed": matrix.seed,
        "row_labels": matrix.row_labels,
        "col_labels": matrix.col_labels,
        "values": matrix.values.tolist(),
        "checkpoint_hashes": matrix.checkpoint_hashes,
        "margins": list(report.margins),
        "column_dominant": list(report.dominant),
        "row_dominant": list(row_diagonal_dominance(matrix)),
    }
    json_path = out / f"{stem}.json"
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    return {"csv": csv_path, "txt": txt_path, "json": json_path}


def emit_table(table: DegenerateTable, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"degenerate_{table.family}"
    labels = [f"{inp} @ sigma{format_sigma(s)}" for inp, s in table.row_labels]
    csv_path = out / f"{stem}.csv"
    _write_csv(csv_path, table.col_labels, list(zip(labels, table.values)))
    txt_path = out / f"{stem}.txt"
    title = f"degenerate-input mean LL [{table.units}] family={table.family} (noise rows avg over {table.noise_draws} draws)"
    txt_path.write_text(_render_grid(table.values, labels, table.col_labels, title))
    summary = {
        "kind": "degenerate_inputs",
        "family": table.family,
        "units": table.units,
        "seed": table.seed,
        "noise_draws": table.noise_draws,
        "row_labels": labels,
        "col_labels": table.col_labels,
        "values": table.values.tolist(),
        "checkpoint_hashes": table.checkpoint_hashes,
    }
    json_path = out / f"{stem}.json"
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    return {"csv": csv_path, "txt": txt_path, "json": json_path}
