import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedmix.cli import main
from fedmix.config import ConfigError, ExperimentConfig
from fedmix.simulation import Simulation

SMALL = dict(C=3, d=4, n=240, S=4, clients_per_round=4, K=2, hidden=(6,), rounds=3, B=16, lr_client=0.1, gamma=0.8)


def write_cfg(tmp_path, name="cfg.ini", **kw):
    cfg = ExperimentConfig(**{**SMALL, **kw})
    path = tmp_path / name
    path.write_text(cfg.to_text())
    return path


def run(tmp_path, out="out", jobs=1, **kw):
    cfg = write_cfg(tmp_path, f"{out}.ini", **kw)
    code = main(["run", "--config", str(cfg), "--output", str(tmp_path / out), "--jobs", str(jobs)])
    return code, tmp_path / out


def test_smoke_single_round(tmp_path, capsys):
    code, out = run(tmp_path, rounds=1, S=1, clients_per_round=1, K=1, n=60)
    assert code == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[0].startswith("round,algo,K,local_acc")
    assert (out / "checkpoint" / "manifest.json").exists()
    assert (out / "checkpoint" / "experts" / "expert_0.fmx").exists()
    printed = capsys.readouterr().out.splitlines()
    assert printed[-1] == lines[-1]


def test_module_entry_point(tmp_path):
    cfg = write_cfg(tmp_path, rounds=1)
    proc = subprocess.run(
        [sys.executable, "-m", "fedmix", "partition", "--config", str(cfg), "--output", str(tmp_path / "p")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "p" / "shards.csv").read_text().startswith("shard,split,side,y,x0")


@pytest.mark.parametrize("algorithm", ["fedmix", "fedavg", "biased_fedavg", "local_global"])
def test_deterministic_across_runs_and_jobs(tmp_path, algorithm):
    outs = [run(tmp_path, out=f"o{i}", jobs=j, algorithm=algorithm)[1] for i, j in enumerate((1, 1, 2))]
    files = ["metrics.csv", "checkpoint/experts/expert_0.fmx", "checkpoint/manifest.json"]
    if algorithm == "fedmix":
        files += ["phi_snapshots.csv", "checkpoint/phi.csv"]
    for f in files:
        blobs = [(o / f).read_bytes() for o in outs]
        assert blobs[0] == blobs[1] == blobs[2], f


def test_missing_required_field_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.ini"
    cfg.write_text("[experiment]\nseed = 1\n")
    assert main(["run", "--config", str(cfg)]) == 2
    assert "config_version" in capsys.readouterr().err


@pytest.mark.parametrize(
    "text, name",
    [
        ("[experiment]\nconfig_version = 1\n[training]\nK = 0\n", "K"),
        ("[experiment]\nconfig_version = 1\n[training]\nlearning_rate = 3\n", "learning_rate"),
        ("[experiment]\nconfig_version = 1\n[dataset]\nn = many\n", "n"),
        ("[experiment]\nconfig_version = 2\n", "config_version"),
    ],
)
def test_invalid_field_named(tmp_path, capsys, text, name):
    cfg = tmp_path / "bad.ini"
    cfg.write_text(text)
    assert main(["partition", "--config", str(cfg)]) == 2
    assert capsys.readouterr().err.startswith(f"error: {name}:")


def test_missing_config_file_exit_2(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.ini")]) == 2


def test_bad_jobs_exit_2(tmp_path):
    assert main(["run", "--config", str(write_cfg(tmp_path)), "--jobs", "0"]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3(tmp_path, capsys):
    code, _ = run(tmp_path, lr_client=1e200, rounds=2)
    assert code == 3
    err = capsys.readouterr().err
    assert "diverged in round 1" in err and "shard" in err


def test_eval_reproduces_final_metrics(tmp_path, capsys):
    code, out = run(tmp_path, rounds=4)
    assert code == 0
    capsys.readouterr()
    last = (out / "metrics.csv").read_text().splitlines()[-1].split(",")
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--output", str(out / "ev")]) == 0
    got = dict(line.split("=") for line in capsys.readouterr().out.split())
    assert abs(float(got["local_acc"]) - float(last[3])) <= 1e-12
    assert abs(float(got["global_acc"]) - float(last[4])) <= 1e-12
    assert (out / "ev" / "eval.csv").read_text().startswith("metric,value")
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--finetune-epochs", "0"]) == 0
    again = dict(line.split("=") for line in capsys.readouterr().out.split())
    assert again == got


def test_eval_finetune_and_new_client(tmp_path, capsys):
    _, out = run(tmp_path, rounds=2)
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--finetune-epochs", "1"]) == 0
    got = dict(line.split("=") for line in capsys.readouterr().out.split())
    assert 0.0 <= float(got["local_acc"]) <= 1.0
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--new-client", "0", "--gate-epochs", "2"]) == 0
    got = dict(line.split("=") for line in capsys.readouterr().out.split())
    assert 0.0 <= float(got["new_client_acc"]) <= 1.0
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--new-client", "99"]) == 2


def test_eval_rejects_mismatched_checkpoint(tmp_path):
    _, out = run(tmp_path, rounds=1)
    other = write_cfg(tmp_path, "other.ini", rounds=1, hidden=(7,))
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--config", str(other)]) == 2
    other = write_cfg(tmp_path, "other2.ini", rounds=1, K=3)
    assert main(["eval", "--checkpoint", str(out / "checkpoint"), "--config", str(other)]) == 2
    (out / "checkpoint" / "experts" / "expert_0.fmx").write_bytes(b"FMX1\x00")
    assert main(["eval", "--checkpoint", str(out / "checkpoint")]) == 2


def test_checkpoint_resume_matches_uninterrupted(tmp_path):
    cfg = ExperimentConfig(**{**SMALL, "rounds": 4})
    full = Simulation(cfg)
    full.run()
    half = Simulation(ExperimentConfig(**{**SMALL, "rounds": 2}))
    half.run()
    half.save_checkpoint(tmp_path / "ck")
    resumed = Simulation.from_checkpoint(tmp_path / "ck", cfg)
    resumed.run()
    for a, b in zip(full.server.bank.experts, resumed.server.bank.experts):
        assert a.flat.tobytes() == b.flat.tobytes()
    assert full.server.phi.phi.tobytes() == resumed.server.phi.phi.tobytes()
    assert full.bytes_up == resumed.bytes_up


def test_audit_privacy(tmp_path, capsys):
    cfg = write_cfg(tmp_path, algorithm="fedavg", K=1)
    assert main(["audit-privacy", "--config", str(cfg), "--output", str(tmp_path / "a")]) == 0
    lines = (tmp_path / "a" / "privacy_audit.csv").read_text().splitlines()
    assert lines[0] == "shard,class,true_p,recon_p,mode,l1"
    assert len(lines) == 1 + 4 * 3 * 2
    printed = capsys.readouterr().out
    assert "single_full_batch mean_l1=" in printed and "multi_step mean_l1=" in printed


def test_partition_permutation_side_info(tmp_path):
    cfg = write_cfg(tmp_path, scheme="label_permutation", n_permutations=2)
    assert main(["partition", "--config", str(cfg), "--output", str(tmp_path / "p")]) == 0
    rows = (tmp_path / "p" / "shards.csv").read_text().splitlines()
    assert len(rows) == 1 + 240


def test_verbose_logs_progress(tmp_path, caplog):
    cfg = write_cfg(tmp_path, rounds=1)
    with caplog.at_level("INFO", logger="fedmix"):
        assert main(["-v", "run", "--config", str(cfg), "--output", str(tmp_path / "v")]) == 0
    assert any(r.getMessage().startswith("round 1 ") for r in caplog.records)


configs = st.builds(
    ExperimentConfig,
    seed=st.integers(0, 2**31),
    rounds=st.integers(1, 500),
    algorithm=st.sampled_from(["fedmix", "fedavg", "biased_fedavg", "local_global"]),
    C=st.integers(2, 10),
    spread=st.floats(0, 10, allow_nan=False),
    scheme=st.sampled_from(["dirichlet_label", "transform_skew", "label_permutation"]),
    alpha=st.floats(1e-3, 1e3),
    label_alpha=st.none() | st.floats(1e-3, 1e3),
    K=st.integers(1, 16),
    hidden=st.lists(st.integers(1, 64), max_size=3).map(tuple),
    beta_entropy=st.floats(1e-6, 10),
    gamma=st.floats(0, 1),
    eta=st.floats(0, 1),
    lr_client=st.floats(0, 1),
    entropy_reg=st.booleans(),
    side_info_mode=st.sampled_from(["label", "transform"]),
)


@settings(max_examples=60, deadline=None)
@given(configs)
def test_config_text_roundtrip(cfg):
    text = cfg.to_text()
    back = ExperimentConfig.from_text(text)
    assert back == cfg and back.to_text() == text and back.digest() == cfg.digest()


def test_missing_optional_keys_take_defaults():
    cfg = ExperimentConfig.from_text("[experiment]\nconfig_version = 1\n")
    assert cfg == ExperimentConfig()
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_text("[training]\nK = 3\n")
    assert info.value.field == "config_version"
