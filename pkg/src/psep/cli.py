"""Command-line entry point wiring datasets, training, evaluation and separation.

Runs are driven by an INI-style config (sections: data, model, train, sgld,
eval); unknown keys are rejected and every command writes its fully resolved
config next to its outputs. Exit codes: 0 success, 2 config error, 3 missing
artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .arprior import ARConfig
from .checkpoints import NOISE_LEVELS, load_checkpoint
from .errors import (ConfigError, MissingArtifactError, NotDifferentiableError,
                     NumericalError, PsepError)
from .evaluation import (PriorHandle, cross_likelihood, degenerate_input_table,
                         discrimination_report, emit_matrix, emit_table,
                         format_sigma, row_diagonal_dominance)
from .flowprior import FlowConfig
from .separation import (SgldConfig, SigmaStage, oracle_gaussian_priors,
                         separation_quality, sgld_separate, write_separation_bundle)
from .signals import (Frame, SourceKind, make_toy_dataset, read_dataset, read_record,
                      read_wav, write_dataset, write_record, write_wav)
from .training import TrainConfig, finetune_noisy, train_prior

log = logging.getLogger("psep")

# ----------------------------------------------------------------------
# config schema: section -> key -> (type, default); None default = optional
# ----------------------------------------------------------------------

_SCHEMA = {
    "data": {
        "dir": (str, "data"),
        "sample_rate": (int, 4000),
        "frame_len": (int, 2048),
        "n_train": (int, 500),
        "n_test": (int, 200),
        "seed": (int, 1234),
    },
    "model": {
        "profile": (str, "desk"),  # desk | paper-toy
        "family": (str, "flow"),
        "blocks": (int, None),
        "flows": (int, None),
        "layers": (int, None),
        "width": (int, None),
        "kernel": (int, None),
    },
    "train": {
        "learning_rate": (float, 1e-4),
        "schedule_gamma": (float, 0.6),
        "batch_size": (int, 4),
        "total_steps": (int, 1500),
        "finetune_steps": (int, 2000),
        "seed": (int, 7),
        "crop_len": (int, None),
        "checkpoint_dir": (str, "checkpoints"),
        "log_every": (int, 100),
    },
    "sgld": {
        "step_size": (float, 1e-5),
        "steps": (int, 2000),
        "mix_noise": (float, 0.1),
        "init_policy": (str, "from-mix"),
        "seed": (int, 0),
        "diag_stride": (int, 1),
        "anneal_steps": (int, 400),
    },
    "eval": {
        "n_frames": (int, 64),
        "noise_draws": (int, 32),
        "seed": (int, 0),
        "out_dir": (str, "reports"),
    },
}

PAPER_SCALE_DATA = {"sample_rate": 16000, "frame_len": 16384, "n_train": 5000, "n_test": 1500}


def resolve_config(path: str | None, paper_scale: bool = False) -> dict:
    """Parse + validate the INI config; returns {section: {key: value}} with defaults."""
    cfg = {sec: {k: d for k, (_t, d) in keys.items()} for sec, keys in _SCHEMA.items()}
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        read = parser.read(path)
        if not read:
            raise MissingArtifactError(f"config file not found: {path}")
        for sec in parser.sections():
            if sec not in _SCHEMA:
                raise ConfigError(f"unknown config section [{sec}]")
            for key, raw in parser[sec].items():
                if key not in _SCHEMA[sec]:
                    raise ConfigError(f"unknown config key [{sec}] {key}")
                typ, _default = _SCHEMA[sec][key]
                raw = raw.strip()
                if raw == "":
                    cfg[sec][key] = None
                    continue
                try:
                    cfg[sec][key] = typ(raw)
                except ValueError as e:
                    raise ConfigError(f"bad value for [{sec}] {key}: {raw!r}") from e
    if paper_scale:
        cfg["data"].update(PAPER_SCALE_DATA)
        cfg["model"]["profile"] = "paper-toy"
    return cfg


def write_resolved_config(cfg: dict, out_dir: Path, command: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    parser = configparser.ConfigParser()
    for sec, keys in cfg.items():
        parser[sec] = {k: ("" if v is None else str(v)) for k, v in keys.items()}
    path = out_dir / f"{command}.resolved.cfg"
    with open(path, "w") as fh:
        parser.write(fh)
    return path


def _model_config(cfg: dict, family: str):
    m = cfg["model"]
    if family == "flow":
        base = FlowConfig.paper_toy() if m["profile"] == "paper-toy" else FlowConfig.desk()
        return FlowConfig(
            n_blocks=m["blocks"] or base.n_blocks,
            n_flows=m["flows"] or base.n_flows,
            cond_layers=m["layers"] or base.cond_layers,
            width=m["width"] or base.width,
            kernel_size=m["kernel"] or base.kernel_size,
        )
    if family == "ar":
        base = ARConfig.paper_toy() if m["profile"] == "paper-toy" else ARConfig.desk()
        return ARConfig(
            n_blocks=m["blocks"] or base.n_blocks,
            n_layers=m["layers"] or base.n_layers,
            kernel_size=m["kernel"] or base.kernel_size,
            width=m["width"] or base.width,
        )
    raise ConfigError(f"unknown family {family!r} (expected 'flow' or 'ar')")


def _train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        learning_rate=t["learning_rate"], schedule_gamma=t["schedule_gamma"],
        batch_size=t["batch_size"], total_steps=t["total_steps"], seed=t["seed"],
        crop_len=t["crop_len"], log_every=t["log_every"])


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PSEP_THREADS", "1")))
    except ValueError:
        return 1


# ----------------------------------------------------------------------
# checkpoint discovery
# ----------------------------------------------------------------------

def find_checkpoint(ckpt_dir: Path, family: str, source: str, sigma: float) -> Path:
    pattern = f"{family}_{source}_sigma{format_sigma(sigma)}_*.ckpt"
    matches = sorted(ckpt_dir.glob(pattern))
    if not matches:
        raise MissingArtifactError(
            f"no checkpoint matching {pattern} in {ckpt_dir} "
            f"(expected tag family={family} source={source} sigma={format_sigma(sigma)})")
    if len(matches) > 1:
        names = ", ".join(p.name for p in matches)
        raise MissingArtifactError(
            f"ambiguous checkpoints for {family}/{source}/sigma{format_sigma(sigma)}: {names}")
    return matches[0]


def load_prior_handles(ckpt_dir: Path, family: str, sigma: float) -> list:
    """The four per-source priors for one (family, sigma) tag, in source order."""
    handles, missing = [], []
    for kind in SourceKind:
        try:
            path = find_checkpoint(ckpt_dir, family, kind.label, sigma)
        except MissingArtifactError as e:
            missing.append(str(e))
            continue
        model, meta = load_checkpoint(path)
        handles.append(PriorHandle.from_checkpoint(model, meta))
    if missing:
        raise MissingArtifactError("; ".join(missing))
    return handles


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------

def cmd_gen_data(args, cfg: dict) -> int:
    data = cfg["data"]
    out_dir = args.workdir / (args.out or data["dir"])
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        raise ConfigError(f"{out_dir} already contains files (use --force to replace)")
    print(f"gen-data: {data['n_train']} train / {data['n_test']} test mixes at "
          f"{data['sample_rate']} Hz, frame {data['frame_len']}, seed {data['seed']}")
    if args.dry_run:
        print("dry run: nothing written")
        return 0
    ds = make_toy_dataset(data["n_train"], data["n_test"], data["sample_rate"],
                          data["frame_len"], data["seed"])
    tmp = out_dir.with_name(out_dir.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    try:
        counts = write_dataset(ds, tmp)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out_dir.exists():
        shutil.rmtree(out_dir)
    tmp.rename(out_dir)
    write_resolved_config(cfg, out_dir, "gen-data")
    print(f"wrote {counts['train']} train / {counts['test']} test records -> {out_dir}")
    return 0


def _train_one(family: str, kind: SourceKind, cfg: dict, args) -> str:
    dataset = read_dataset(args.workdir / cfg["data"]["dir"])
    ckpt_dir = args.workdir / cfg["train"]["checkpoint_dir"]
    tcfg = _train_config(cfg)
    telemetry = ckpt_dir / f"telemetry_{family}_{kind.label}_sigma0.csv"
    result = train_prior(family, kind, dataset, tcfg,
                         model_config=_model_config(cfg, family),
                         checkpoint_dir=ckpt_dir, telemetry_path=telemetry)
    return (f"trained {family}/{kind.label}: {result.meta['steps_run']} steps, "
            f"final loss {result.meta['final_loss']:.4f} -> {result.checkpoint_path.name}")


def cmd_train(args, cfg: dict) -> int:
    family = args.family or cfg["model"]["family"]
    jobs = []
    if args.all:
        jobs = [(fam, kind) for fam in ("flow", "ar") for kind in SourceKind]
    else:
        if not args.source:
            raise ConfigError("train needs --source (or --all)")
        jobs = [(family, SourceKind.from_name(args.source))]
    ckpt_dir = args.workdir / cfg["train"]["checkpoint_dir"]
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(cfg, ckpt_dir, "train")
    n_threads = min(_threads(), len(jobs))
    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            for line in pool.map(lambda j: _train_one(j[0], j[1], cfg, args), jobs):
                print(line)
    else:
        for fam, kind in jobs:
            print(_train_one(fam, kind, cfg, args))
    return 0


def cmd_finetune(args, cfg: dict) -> int:
    sigma = args.sigma
    if sigma is None:
        raise ConfigError("finetune needs --sigma")
    allowed = [s for s in NOISE_LEVELS if s > 0]
    if not args.any_sigma and not any(abs(sigma - s) < 1e-12 for s in allowed):
        raise ConfigError(
            f"sigma {sigma:g} is not in the canonical ladder {allowed}; pass --any-sigma to override")
    family = args.family or cfg["model"]["family"]
    kinds = list(SourceKind) if args.all else [SourceKind.from_name(args.source or "")] \
        if args.source else None
    if kinds is None:
        raise ConfigError("finetune needs --source (or --all)")
    dataset = read_dataset(args.workdir / cfg["data"]["dir"])
    ckpt_dir = args.workdir / cfg["train"]["checkpoint_dir"]
    tcfg = _train_config(cfg)
    write_resolved_config(cfg, ckpt_dir, "finetune")
    for kind in kinds:
        base_path = find_checkpoint(ckpt_dir, family, kind.label, 0.0)
        model, meta = load_checkpoint(base_path)
        telemetry = ckpt_dir / f"telemetry_{family}_{kind.label}_sigma{format_sigma(sigma)}.csv"
        result = finetune_noisy((model, meta), sigma, cfg["train"]["finetune_steps"],
                                tcfg, dataset, checkpoint_dir=ckpt_dir,
                                telemetry_path=telemetry)
        print(f"fine-tuned {family}/{kind.label} at sigma={format_sigma(sigma)} "
              f"(base {meta['hash'][:8]}): {result.meta['steps_run']} steps, "
              f"final loss {result.meta['final_loss']:.4f} -> {result.checkpoint_path.name}")
    return 0


def cmd_eval_matrix(args, cfg: dict) -> int:
    family = args.family or cfg["model"]["family"]
    cond = args.cond if args.cond is not None else 0.0
    data_noise = args.data_noise if args.data_noise is not None else 0.0
    ckpt_dir = args.workdir / cfg["train"]["checkpoint_dir"]
    handles = load_prior_handles(ckpt_dir, family, cond)
    dataset = read_dataset(args.workdir / cfg["data"]["dir"])
    n = cfg["eval"]["n_frames"]
    test_sets = [dataset.source_frames("test", kind)[:n] for kind in SourceKind]
    matrix = cross_likelihood(handles, test_sets, data_noise=data_noise,
                              seed=cfg["eval"]["seed"], force=args.force_mixed)
    out_dir = args.workdir / cfg["eval"]["out_dir"]
    paths = emit_matrix(matrix, out_dir)
    write_resolved_config(cfg, out_dir, "eval-matrix")
    print(Path(paths["txt"]).read_text())
    report = discrimination_report(matrix)
    rows = row_diagonal_dominance(matrix)
    print(f"column margins: {[round(m, 3) for m in report.margins]}")
    print(f"diagonal dominance: per-prior {list(report.dominant)}, per-source {list(rows)}, "
          f"all={report.all_dominant and all(rows)}")
    print(f"reports -> {paths['csv']}")
    return 0


def cmd_eval_degenerate(args, cfg: dict) -> int:
    family = args.family or cfg["model"]["family"]
    sigmas = tuple(float(s) for s in args.sigmas.split(",")) if args.sigmas else (0.0, 0.359)
    ckpt_dir = args.workdir / cfg["train"]["checkpoint_dir"]
    handles_by_sigma = {s: load_prior_handles(ckpt_dir, family, s) for s in sigmas}
    frame_len = cfg["data"]["frame_len"]
    table = degenerate_input_table(handles_by_sigma, frame_len, sigma_tags=sigmas,
                                   noise_draws=cfg["eval"]["noise_draws"],
                                   seed=cfg["eval"]["seed"])
    out_dir = args.workdir / cfg["eval"]["out_dir"]
    paths = emit_table(table, out_dir)
    write_resolved_config(cfg, out_dir, "eval-degenerate")
    print(Path(paths["txt"]).read_text())
    print(f"reports -> {paths['csv']}")
    return 0


def _load_mix(path: Path) -> tuple:
    """Returns (mix frame, ground-truth sources or None)."""
    if path.suffix.lower() == ".wav":
        return read_wav(path), None
    rec = read_record(path)
    return rec.mix, list(rec.sources) if rec.sources else None


def cmd_separate(args, cfg: dict) -> int:
    if (args.family or cfg["model"]["family"]) == "ar":
        raise NotDifferentiableError(
            "autoregressive priors cannot drive Langevin separation: the "
            "categorical mu-law likelihood has no gradient in the continuous "
            "input; use the flow family (or --oracle-gaussian)")
    mix, truth = _load_mix(args.workdir / args.mix)
    s = cfg["sgld"]
    n_sources = len(SourceKind)
    schedule = None
    ckpt_hashes = {}
    if args.oracle_gaussian:
        priors = oracle_gaussian_priors(n_sources, mix.sample_rate)
        if args.anneal:
            schedule = tuple(SigmaStage(sig, s["anneal_steps"]) for sig in (0.359, 0.129, 0.077))
            priors = {st.sigma: priors for st in schedule}
    else:
        ckpt_dir = args.workdir / cfg["train"]["checkpoint_dir"]
        if args.anneal:
            levels = [sig for sig in sorted(NOISE_LEVELS, reverse=True) if sig > 0]
            priors, stages = {}, []
            for sig in levels:
                try:
                    hs = load_prior_handles(ckpt_dir, "flow", sig)
                except MissingArtifactError:
                    continue
                priors[sig] = [h.model for h in hs]
                ckpt_hashes[format_sigma(sig)] = [h.checkpoint_hash for h in hs]
                stages.append(SigmaStage(sig, s["anneal_steps"]))
            if not stages:
                raise MissingArtifactError(
                    f"--anneal needs noise-conditioned flow checkpoints in {ckpt_dir} "
                    f"(none found for sigmas {levels})")
            schedule = tuple(stages)
        else:
            hs = load_prior_handles(ckpt_dir, "flow", 0.0)
            priors = [h.model for h in hs]
            ckpt_hashes["0"] = [h.checkpoint_hash for h in hs]

    sconf = SgldConfig(step_size=s["step_size"], steps=s["steps"], mix_noise=s["mix_noise"],
                       n_sources=n_sources, init_policy=s["init_policy"], seed=s["seed"],
                       diag_stride=s["diag_stride"], sigma_schedule=schedule)
    result = sgld_separate(mix, priors, sconf)
    out_dir = args.workdir / (args.out or "separation")
    provenance = {"seed": s["seed"], "mix": str(args.mix), "checkpoints": ckpt_hashes,
                  "oracle_gaussian": bool(args.oracle_gaussian)}
    paths = write_separation_bundle(out_dir, result, mix, provenance)
    write_resolved_config(cfg, out_dir, "separate")
    print(f"separated {args.mix}: final residual {result.residual_trace[-1]:.4g} "
          f"over {len(result.diag_steps)} recorded steps")
    if truth is not None:
        q = separation_quality(result.estimates, truth)
        print(f"SNR dB (identity): {[round(v, 2) for v in q.snr_db]}")
        print(f"SNR dB (best perm {q.best_permutation}): {[round(v, 2) for v in q.snr_db_permuted]}")
    print(f"bundle -> {paths['record']}")
    return 0


def cmd_sample(args, cfg: dict) -> int:
    family = args.family or cfg["model"]["family"]
    source = SourceKind.from_name(args.source or "")
    sigma = args.sigma if args.sigma is not None else 0.0
    ckpt_dir = args.workdir / cfg["train"]["checkpoint_dir"]
    path = find_checkpoint(ckpt_dir, family, source.label, sigma)
    model, meta = load_checkpoint(path)
    frame_len = args.frame_len or cfg["data"]["frame_len"]
    rng = np.random.default_rng(np.random.SeedSequence((cfg["eval"]["seed"], 31)))
    frames = model.sample(rng, args.n, frame_len)
    out_dir = args.workdir / (args.out or "samples")
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        stem = f"{family}_{source.label}_sigma{format_sigma(sigma)}_{i:03d}"
        write_wav(f, out_dir / f"{stem}.wav")
        write_record(out_dir / f"{stem}.psd", [], f)
    write_resolved_config(cfg, out_dir, "sample")
    print(f"sampled {args.n} frame(s) of {frame_len} from {path.name} -> {out_dir}")
    return 0


# ----------------------------------------------------------------------
# argument parsing / entry point
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psep",
                                description="Generative signal priors and Langevin separation")
    p.add_argument("--workdir", type=Path, default=Path("."), help="base for all relative paths")
    p.add_argument("--config", type=str, default=None, help="INI config file")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesize the toy dataset")
    g.add_argument("--out", type=str, default=None)
    g.add_argument("--paper-scale", action="store_true",
                   help="5000/1500 mixes at 16 kHz, frame 16384")
    g.add_argument("--force", action="store_true")
    g.add_argument("--dry-run", action="store_true")

    t = sub.add_parser("train", help="train noise-free priors")
    t.add_argument("--family", choices=["flow", "ar"], default=None)
    t.add_argument("--source", type=str, default=None)
    t.add_argument("--all", action="store_true", help="both families x all four sources")
    t.add_argument("--paper-scale", action="store_true")

    f = sub.add_parser("finetune", help="noise-conditioned fine-tuning")
    f.add_argument("--sigma", type=float, default=None)
    f.add_argument("--family", choices=["flow", "ar"], default=None)
    f.add_argument("--source", type=str, default=None)
    f.add_argument("--all", action="store_true", help="all four sources")
    f.add_argument("--any-sigma", action="store_true")

    em = sub.add_parser("eval-matrix", help="cross-likelihood matrix")
    em.add_argument("--family", choices=["flow", "ar"], default=None)
    em.add_argument("--cond", type=float, default=None, help="conditioning sigma tag")
    em.add_argument("--data-noise", type=float, default=None, help="test-data noise sigma")
    em.add_argument("--force-mixed", action="store_true")

    ed = sub.add_parser("eval-degenerate", help="constant/noise input likelihood table")
    ed.add_argument("--family", choices=["flow", "ar"], default=None)
    ed.add_argument("--sigmas", type=str, default=None, help="comma-separated sigma tags")

    se = sub.add_parser("separate", help="Langevin source separation")
    se.add_argument("--mix", type=str, required=True, help="a .psd record or .wav file")
    se.add_argument("--family", choices=["flow", "ar"], default=None)
    se.add_argument("--oracle-gaussian", action="store_true",
                    help="standard-normal priors instead of checkpoints")
    se.add_argument("--anneal", action="store_true",
                    help="run the decreasing-sigma schedule over conditioned checkpoints")
    se.add_argument("--out", type=str, default=None)

    sa = sub.add_parser("sample", help="generate frames from a trained prior")
    sa.add_argument("--family", choices=["flow", "ar"], default=None)
    sa.add_argument("--source", type=str, required=True)
    sa.add_argument("--sigma", type=float, default=None)
    sa.add_argument("-n", type=int, default=1)
    sa.add_argument("--frame-len", type=int, default=None)
    sa.add_argument("--out", type=str, default=None)
    return p


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval-matrix": cmd_eval_matrix,
    "eval-degenerate": cmd_eval_degenerate,
    "separate": cmd_separate,
    "sample": cmd_sample,
}


def main(argv: list | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, paper_scale=getattr(args, "paper_scale", False))
        return _COMMANDS[args.command](args, cfg)
    except (ConfigError, NotDifferentiableError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except MissingArtifactError as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4
    except PsepError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
