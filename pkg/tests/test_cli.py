import json
import shutil
from pathlib import Path

import pytest

from pbkl import experiment as ex
from pbkl.cli import main
from pbkl.env import DatasetManifest
from pbkl.errors import ConfigError

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.ini"

TINY_INI = """
[run]
seeds = 0
[data]
n_success = 3
n_failure = 3
[policy]
d_model = 8
n_heads = 2
n_encoder_layers = 1
n_decoder_layers = 1
dim_feedforward = 16
n_memory_tokens = 2
chunk_length = 4
epochs = 2
batch_size = 3
[selection]
subset_size = 1
random_subsets = 1
[eval]
n_rollouts = 2
"""


@pytest.fixture
def tiny(tmp_path):
    cfg = tmp_path / "tiny.ini"
    cfg.write_text(TINY_INI)
    return cfg, tmp_path / "out"


def run(cfg, out, *args):
    return main([*args, "--config", str(cfg), "--out", str(out)])


def last_error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("pbkl: error: command=")
    return err[0]


def test_defaults_and_roundtrip():
    cfg = ex.ExperimentConfig.defaults()
    assert cfg.policy_config().chunk_length == 20 and cfg["run"]["seeds"] == (0, 1, 2, 3, 4)
    again = ex.ExperimentConfig.from_text(cfg.to_ini())
    assert again.to_ini() == cfg.to_ini() and again.digest() == cfg.digest()


def test_unknown_keys_and_sections_rejected():
    with pytest.raises(ConfigError, match="d_modle"):
        ex.ExperimentConfig.from_text("[policy]\nd_modle = 8\n")
    with pytest.raises(ConfigError, match="unknown section"):
        ex.ExperimentConfig.from_text("[polcy]\nd_model = 8\n")
    with pytest.raises(ConfigError):
        ex.ExperimentConfig.from_text("[policy]\nepochs = many\n")
    with pytest.raises(ConfigError):
        ex.ExperimentConfig.from_text("[data]\nfailure_mix = miss:1, fall:1\n")
    with pytest.raises(ConfigError):
        ex.ExperimentConfig.from_text("[run]\nconditions = act-ds, bogus\n")


def test_typed_values_and_mix():
    cfg = ex.ExperimentConfig.from_text(
        "[policy]\nuse_pb = no\nalpha_pb = 0.5\n[data]\nfailure_mix = miss:3, wander:1\n[run]\nseeds = 4, 2\n")
    pc = cfg.policy_config()
    assert pc.use_pb is False and pc.alpha_pb == 0.5
    assert cfg.failure_mix() == {"miss": 0.75, "wander": 0.25}
    assert cfg["run"]["seeds"] == (4, 2)


def test_out_dir_not_part_of_hash():
    a = ex.ExperimentConfig.defaults()
    b = ex.ExperimentConfig.defaults()
    b.override("run", "out", "elsewhere")
    assert a.digest() == b.digest()
    b.override("policy", "lr", 1e-3)
    assert a.digest() != b.digest()


def test_missing_upstream_says_what_to_run(tiny, capsys):
    cfg, out = tiny
    assert run(cfg, out, "train") == 3
    assert "run gen-data first" in last_error(capsys)
    assert run(cfg, out, "gen-data") == 0
    assert run(cfg, out, "score-failures") == 3
    assert "run train first" in last_error(capsys)
    assert run(cfg, out, "select") == 3
    assert "run score-failures first" in last_error(capsys)


def test_bad_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[policy]\nlearning_rate = 1\n")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "type=ConfigError" in last_error(capsys)
    assert main(["gen-data", "--config", str(tmp_path / "none.ini")]) == 2
    last_error(capsys)
    assert main([]) == 2


def test_stage_by_stage_pipeline(tiny, capsys):
    cfg, out = tiny
    for cmd in ("gen-data", "train", "score-failures", "select", "retrain", "eval", "report"):
        assert run(cfg, out, cmd) == 0, capsys.readouterr().err
    assert (out / "report" / "success_rates.csv").exists()
    assert run(cfg, out, "--verify") == 0
    for d in ("data", "train/prop-full", "scores", "plans", "manifests", "retrain/kl_low-1", "eval", "report"):
        assert (out / d / "config.ini").read_text() == (out / "data" / "config.ini").read_text()
    # the report is a pure function of what is on disk
    before = (out / "report" / "success_rates.csv").read_bytes()
    assert run(cfg, out, "report") == 0
    assert (out / "report" / "success_rates.csv").read_bytes() == before


def test_strategy_and_subset_flags(tiny):
    cfg, out = tiny
    for cmd in ("gen-data", "train", "score-failures"):
        assert run(cfg, out, cmd) == 0
    assert run(cfg, out, "select", "--strategy", "kl_high", "--subset-size", "2") == 0
    assert sorted(p.name for p in (out / "manifests").glob("*-2.json")) == ["kl_high-2.json"]
    man = DatasetManifest.load(out / "manifests" / "kl_high-2.json")
    assert len(man.failure_ids) == 2 and man.provenance["plan"]["strategy"] == "kl_high"
    assert run(cfg, out, "--seeds", "0,3", "retrain", "--strategy", "kl_high", "--subset-size", "2") == 0
    assert (out / "retrain" / "kl_high-2" / "seed3" / "checkpoint.npz").exists()


def test_verify_detects_dangling_and_modified(tiny, capsys):
    cfg, out = tiny
    assert run(cfg, out, "gen-data") == 0
    index = json.loads((out / "index.json").read_text())
    assert {e["path"] for e in index["artifacts"]} >= {"data/demos.jsonl", "data/full.json"}
    (out / "data" / "success.json").unlink()
    (out / "data" / "full.json").write_text((out / "data" / "full.json").read_text() + " ")
    capsys.readouterr()
    assert run(cfg, out, "--verify") == 3
    lines = capsys.readouterr().out.splitlines()
    assert "dangling: data/success.json" in lines and "modified: data/full.json" in lines


def test_missing_demo_file_leaves_no_checkpoint(tiny, capsys):
    cfg, out = tiny
    assert run(cfg, out, "gen-data") == 0
    (out / "data" / "demos.jsonl").unlink()
    assert run(cfg, out, "train") == 3
    last_error(capsys)
    assert not (out / "train").exists() or not any((out / "train").rglob("checkpoint.npz"))


def test_corrupt_manifest_rolls_back(tiny, capsys):
    cfg, out = tiny
    for cmd in ("gen-data", "train", "score-failures", "select"):
        assert run(cfg, out, cmd) == 0
    mp = out / "manifests" / "kl_low-1.json"
    man = json.loads(mp.read_text())
    man["failure_ids"] = ["f999"]
    mp.write_text(json.dumps(man))
    assert run(cfg, out, "retrain") == 3
    assert "f999" in last_error(capsys)
    assert not (out / "retrain" / "kl_low-1").exists()
    assert not list((out / "retrain").glob("*.partial"))


def test_select_fifty_failures_gives_sixty_ids(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[data]\nn_success = 50\nn_failure = 50\n")
    out = tmp_path / "o"
    assert run(cfg, out, "gen-data") == 0
    store = ex.ArtifactStore(out, ex.ExperimentConfig.load(cfg))
    from pbkl.selection import FailureScore, rank_scores, write_scores_csv
    full = DatasetManifest.load(out / "data" / "full.json")
    (out / "scores").mkdir()
    write_scores_csv(out / "scores" / "scores.csv",
                     rank_scores([FailureScore(f, {0: i / 7}, i / 7) for i, f in enumerate(full.failure_ids)]))
    mans = ex.select(store, "kl_low")
    assert len(mans) == 1 and len(mans[0].demo_ids) == 60


def test_smoke_run_all_reproducible(tmp_path):
    out = tmp_path / "smoke"
    assert main(["run-all", "--config", str(SMOKE), "--out", str(out)]) == 0
    names = sorted(p.name for p in (out / "report").iterdir())
    assert names == ["config.ini", "embedding_pca.csv", "embedding_pca.svg", "kl_ranking.csv", "kl_ranking.svg",
                     "mode_means.csv", "pb_pca.csv", "pb_pca.svg", "success_rates.csv"]
    first = {p.name: p.read_bytes() for p in (out / "report").iterdir()}
    shutil.rmtree(out / "report")
    assert main(["run-all", "--config", str(SMOKE), "--out", str(out)]) == 0
    assert {p.name: p.read_bytes() for p in (out / "report").iterdir()} == first


def test_parallel_training_matches_serial(tmp_path):
    outs = []
    for jobs in (1, 2):
        cfg = tmp_path / f"j{jobs}.ini"
        cfg.write_text(TINY_INI.replace("seeds = 0", f"seeds = 0, 1\njobs = {jobs}")
                       .replace("[run]", "[run]\nconditions = prop-full"))
        out = tmp_path / f"o{jobs}"
        assert run(cfg, out, "gen-data") == 0 and run(cfg, out, "train") == 0
        outs.append(out)
    for s in (0, 1):
        a = (outs[0] / "train" / "prop-full" / f"seed{s}" / "checkpoint.npz").read_bytes()
        b = (outs[1] / "train" / "prop-full" / f"seed{s}" / "checkpoint.npz").read_bytes()
        assert a == b
