import json
import os
from pathlib import Path

import numpy as np
import pytest

from psep.cli import main, resolve_config
from psep.errors import ConfigError
from psep.signals import read_record, read_wav

TINY_CFG = """
[data]
sample_rate = 1000
frame_len = 256
n_train = 10
n_test = 6
seed = 5

[model]
family = flow
blocks = 2
flows = 2
layers = 2
width = 6

[train]
learning_rate = 2e-3
total_steps = {steps}
finetune_steps = {ft_steps}
batch_size = 2
seed = 3
log_every = 0

[sgld]
step_size = 0.005
steps = {sgld_steps}
mix_noise = 0.1
seed = 9
diag_stride = 1

[eval]
n_frames = 4
noise_draws = 4
seed = 2
"""


@pytest.fixture()
def work(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(TINY_CFG.format(steps=20, ft_steps=15, sgld_steps=120))
    return tmp_path, cfg


def run(work, *args):
    tmp_path, cfg = work
    return main(["--workdir", str(tmp_path), "--config", str(cfg), *args])


# ----------------------------------------------------------------------
# config handling
# ----------------------------------------------------------------------

def test_unknown_key_rejected(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[train]\nlerning_rate = 1\n")
    assert main(["--workdir", str(tmp_path), "--config", str(bad), "gen-data"]) == 2


def test_unknown_section_rejected(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[optimizer]\nlr = 1\n")
    with pytest.raises(ConfigError):
        resolve_config(str(bad))


def test_missing_config_file_is_exit_3(tmp_path):
    assert main(["--workdir", str(tmp_path), "--config", "/nope/none.cfg", "gen-data"]) == 3


def test_paper_scale_profile_values():
    cfg = resolve_config(None, paper_scale=True)
    assert cfg["data"]["sample_rate"] == 16000
    assert cfg["data"]["frame_len"] == 16384
    assert cfg["data"]["n_train"] == 5000
    assert cfg["data"]["n_test"] == 1500
    assert cfg["model"]["profile"] == "paper-toy"


def test_defaults_are_desk_scale():
    cfg = resolve_config(None)
    assert cfg["data"]["sample_rate"] == 4000
    assert cfg["data"]["frame_len"] == 2048
    assert cfg["data"]["n_train"] == 500
    assert cfg["data"]["n_test"] == 200
    assert cfg["train"]["learning_rate"] == 1e-4
    assert cfg["train"]["schedule_gamma"] == 0.6


# ----------------------------------------------------------------------
# gen-data
# ----------------------------------------------------------------------

def test_gen_data_counts_and_reproducibility(work, capsys):
    tmp_path, cfg = work
    assert run(work, "gen-data", "--out", "d1") == 0
    out = capsys.readouterr().out
    assert "10 train / 6 test" in out
    assert run(work, "gen-data", "--out", "d2") == 0
    a = sorted((tmp_path / "d1" / "train").glob("*.psd"))
    b = sorted((tmp_path / "d2" / "train").glob("*.psd"))
    assert len(a) == 10
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()
    assert (tmp_path / "d1" / "gen-data.resolved.cfg").exists()


def test_gen_data_refuses_nonempty_without_force(work):
    assert run(work, "gen-data", "--out", "d") == 0
    assert run(work, "gen-data", "--out", "d") == 2
    assert run(work, "gen-data", "--out", "d", "--force") == 0


def test_gen_data_paper_scale_dry_run(work, capsys):
    assert run(work, "gen-data", "--out", "p", "--paper-scale", "--dry-run") == 0
    out = capsys.readouterr().out
    assert "5000 train / 1500 test" in out
    assert "16000 Hz" in out and "16384" in out
    assert not (work[0] / "p").exists()


# ----------------------------------------------------------------------
# train / finetune
# ----------------------------------------------------------------------

@pytest.fixture()
def trained(work):
    tmp_path, cfg = work
    assert run(work, "gen-data") == 0
    for source in ("sine", "sawtooth", "square", "triangle"):
        assert run(work, "train", "--family", "flow", "--source", source) == 0
    return tmp_path


def test_train_writes_tagged_checkpoint(work, capsys):
    assert run(work, "gen-data") == 0
    assert run(work, "train", "--family", "flow", "--source", "sine") == 0
    out = capsys.readouterr().out
    ckpts = list((work[0] / "checkpoints").glob("flow_sine_sigma0_*.ckpt"))
    assert len(ckpts) == 1
    assert "trained flow/sine" in out


def test_train_requires_source_or_all(work):
    assert run(work, "gen-data") == 0
    assert run(work, "train", "--family", "flow") == 2


def test_train_all_produces_eight_checkpoints(work):
    tmp_path, cfg = work
    cfg.write_text(TINY_CFG.format(steps=6, ft_steps=5, sgld_steps=20))
    assert run(work, "gen-data") == 0
    assert run(work, "train", "--all") == 0
    ckpts = list((tmp_path / "checkpoints").glob("*.ckpt"))
    assert len(ckpts) == 8
    families = {p.name.split("_")[0] for p in ckpts}
    assert families == {"flow", "ar"}


def test_train_all_with_thread_fanout(work, monkeypatch):
    tmp_path, cfg = work
    cfg.write_text(TINY_CFG.format(steps=5, ft_steps=5, sgld_steps=20))
    monkeypatch.setenv("PSEP_THREADS", "2")
    assert run(work, "gen-data") == 0
    assert run(work, "train", "--all") == 0
    assert len(list((tmp_path / "checkpoints").glob("*.ckpt"))) == 8


def test_train_determinism_bitwise(work):
    tmp_path, cfg = work
    assert run(work, "gen-data") == 0
    assert run(work, "train", "--family", "flow", "--source", "square") == 0
    first = next((tmp_path / "checkpoints").glob("flow_square_sigma0_*.ckpt"))
    blob = first.read_bytes()
    first.unlink()
    assert run(work, "train", "--family", "flow", "--source", "square") == 0
    second = next((tmp_path / "checkpoints").glob("flow_square_sigma0_*.ckpt"))
    assert second.read_bytes() == blob


def test_finetune_sigma_ladder_and_tags(work, capsys):
    assert run(work, "gen-data") == 0
    assert run(work, "train", "--family", "flow", "--source", "sine") == 0
    # off-ladder sigma rejected without --any-sigma
    assert run(work, "finetune", "--sigma", "0.2", "--source", "sine") == 2
    assert run(work, "finetune", "--sigma", "0.359", "--source", "sine") == 0
    out = capsys.readouterr().out
    assert "sigma=0.359" in out
    ckpts = list((work[0] / "checkpoints").glob("flow_sine_sigma0.359_*.ckpt"))
    assert len(ckpts) == 1
    # base hash recorded
    from psep.checkpoints import load_checkpoint

    _, meta = load_checkpoint(ckpts[0])
    base = next((work[0] / "checkpoints").glob("flow_sine_sigma0_*.ckpt"))
    assert meta["base_hash"] == base.name.split("_")[-1].split(".")[0] or meta["base_hash"]
    assert meta["base_hash"].startswith(base.name.split("_")[3].split(".")[0])


def test_finetune_any_sigma_flag(work):
    assert run(work, "gen-data") == 0
    assert run(work, "train", "--family", "flow", "--source", "sine") == 0
    assert run(work, "finetune", "--sigma", "0.2", "--source", "sine", "--any-sigma") == 0
    assert len(list((work[0] / "checkpoints").glob("flow_sine_sigma0.2_*.ckpt"))) == 1


def test_finetune_missing_base_is_exit_3(work):
    assert run(work, "gen-data") == 0
    assert run(work, "finetune", "--sigma", "0.359", "--source", "sine") == 3


# ----------------------------------------------------------------------
# evaluation commands
# ----------------------------------------------------------------------

def test_eval_matrix_pipeline(trained, work, capsys):
    assert run(work, "eval-matrix", "--family", "flow") == 0
    out = capsys.readouterr().out
    assert "diagonal dominance" in out
    reports = work[0] / "reports"
    assert (reports / "xll_flow_sigma0_cond0.csv").exists()
    assert (reports / "xll_flow_sigma0_cond0.txt").exists()
    assert (reports / "eval-matrix.resolved.cfg").exists()


def test_eval_matrix_missing_checkpoints_exit_3(work, capsys):
    assert run(work, "gen-data") == 0
    assert run(work, "eval-matrix", "--family", "flow") == 3
    err = capsys.readouterr().err
    assert "sine" in err  # missing tags enumerated


def test_eval_matrix_noise_naming(trained, work):
    assert run(work, "finetune", "--sigma", "0.077", "--all") == 0
    assert run(work, "eval-matrix", "--data-noise", "0.077", "--cond", "0.077") == 0
    assert (work[0] / "reports" / "xll_flow_sigma0.077_cond0.077.csv").exists()


def test_eval_degenerate_layout(trained, work, capsys):
    assert run(work, "finetune", "--sigma", "0.359", "--all") == 0
    assert run(work, "eval-degenerate") == 0
    out = capsys.readouterr().out
    assert "degenerate" in out
    labels, cols, values = _parse(work[0] / "reports" / "degenerate_flow.csv")
    assert len(labels) == 4  # 2 inputs x 2 sigma tags
    assert len(cols) == 4  # 4 priors
    assert values.shape == (4, 4)


def _parse(path):
    from psep.evaluation import parse_values_csv

    return parse_values_csv(path)


# ----------------------------------------------------------------------
# separation / sampling
# ----------------------------------------------------------------------

def test_separate_oracle_gaussian_matches_posterior(trained, work, capsys):
    tmp_path = work[0]
    mix_path = "data/test/rec_00000.psd"
    assert run(work, "separate", "--mix", mix_path, "--oracle-gaussian", "--out", "sep") == 0
    out = capsys.readouterr().out
    assert "SNR dB" in out
    rec = read_record(tmp_path / "sep" / "estimates.psd")
    assert len(rec.sources) == 4

    # the SGLD estimate approaches the analytic posterior mean for the
    # standard-normal oracle priors
    from psep.separation import gaussian_posterior_oracle

    truth_rec = read_record(tmp_path / mix_path)
    means, _ = gaussian_posterior_oracle(truth_rec.mix, np.zeros(4), np.ones(4),
                                         [0.25] * 4, 0.1)
    est = np.stack([s.samples for s in rec.sources])
    # estimates stay in the posterior's neighbourhood (Langevin noise included)
    rms = np.sqrt(np.mean((est - means) ** 2))
    assert rms < 1.0


def test_separate_rejects_ar_family(work, capsys):
    assert run(work, "gen-data") == 0
    assert run(work, "separate", "--mix", "data/test/rec_00000.psd", "--family", "ar") == 2
    err = capsys.readouterr().err
    assert "gradient" in err


def test_separate_anneal_records_stage_boundaries(work):
    tmp_path, cfg = work
    assert run(work, "gen-data") == 0
    assert run(work, "separate", "--mix", "data/test/rec_00001.psd",
               "--oracle-gaussian", "--anneal", "--out", "sep2") == 0
    diag = (tmp_path / "sep2" / "diagnostics.csv").read_text()
    assert "0.359" in diag and "0.077" in diag
    summary = json.loads((tmp_path / "sep2" / "summary.json").read_text())
    assert [b[1] for b in summary["stage_boundaries"]] == [0.359, 0.129, 0.077]


def test_separate_determinism(work):
    tmp_path, cfg = work
    assert run(work, "gen-data") == 0
    assert run(work, "separate", "--mix", "data/test/rec_00002.psd",
               "--oracle-gaussian", "--out", "s1") == 0
    assert run(work, "separate", "--mix", "data/test/rec_00002.psd",
               "--oracle-gaussian", "--out", "s2") == 0
    assert ((tmp_path / "s1" / "estimates.psd").read_bytes()
            == (tmp_path / "s2" / "estimates.psd").read_bytes())
    assert ((tmp_path / "s1" / "diagnostics.csv").read_bytes()
            == (tmp_path / "s2" / "diagnostics.csv").read_bytes())


def test_separate_numerical_failure_exit_4(work, tmp_path):
    bad_cfg = work[0] / "bad.cfg"
    bad_cfg.write_text(TINY_CFG.format(steps=5, ft_steps=5, sgld_steps=200).replace(
        "step_size = 0.005", "step_size = 1e9"))
    assert main(["--workdir", str(work[0]), "--config", str(bad_cfg), "gen-data"]) == 0
    code = main(["--workdir", str(work[0]), "--config", str(bad_cfg),
                 "separate", "--mix", "data/test/rec_00000.psd", "--oracle-gaussian"])
    assert code == 4


def test_sample_writes_wav_and_records(work):
    tmp_path, cfg = work
    assert run(work, "gen-data") == 0
    assert run(work, "train", "--family", "flow", "--source", "sine") == 0
    assert run(work, "sample", "--family", "flow", "--source", "sine",
               "-n", "2", "--frame-len", "64") == 0
    wavs = sorted((tmp_path / "samples").glob("*.wav"))
    recs = sorted((tmp_path / "samples").glob("*.psd"))
    assert len(wavs) == 2 and len(recs) == 2
    frame = read_wav(wavs[0])
    assert frame.sample_rate == 1000
    assert len(frame) == 64


def test_sample_from_ar_checkpoint(work):
    tmp_path, cfg = work
    cfg.write_text(TINY_CFG.format(steps=5, ft_steps=5, sgld_steps=20))
    assert run(work, "gen-data") == 0
    assert run(work, "train", "--family", "ar", "--source", "square") == 0
    assert run(work, "sample", "--family", "ar", "--source", "square",
               "-n", "1", "--frame-len", "32") == 0
    assert len(list((tmp_path / "samples").glob("ar_square_*.wav"))) == 1
