import itertools
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pbkl.attention import FAILURE, SUCCESS, PBTable
from pbkl.env import DatasetManifest, generate_dataset, save_demos
from pbkl.errors import ConfigError, IntegrityError, MissingPBError
from pbkl.model import Checkpoint, Policy, PolicyConfig
from pbkl.selection import (
    FailureScore, SelectionPlan, build_plan, mid_window, mode_means, rank_scores, read_scores_csv,
    reconstruct_manifest, score_all, score_failure, scores_digest, window_starts, write_scores_csv,
)

MICRO = PolicyConfig(d_model=8, n_heads=2, n_encoder_layers=1, n_decoder_layers=2, dim_feedforward=16,
                     n_memory_tokens=2, chunk_length=4, alpha_pb=1.0, seed=2)


@pytest.fixture(scope="module")
def micro():
    """3 successes, 2 failures, random PBs on an untrained tiny policy."""
    demos, man = generate_dataset(3, 2, rng_seed=9)
    table = PBTable(man.demo_ids, [d.label for d in demos], MICRO.chunk_length, MICRO.d_pb)
    table.param.data[:] = np.random.default_rng(4).normal(size=table.param.data.shape)
    ck = Checkpoint(Policy(MICRO), table, 0)
    return {d.demo_id: d for d in demos}, man, ck


def brute_k(failure, ck, success_ids):
    """Sum over successes, mean over windows, then the attention divergence by explicit loops."""
    pol, table = ck.policy, ck.pb_table
    L = pol.config.chunk_length
    total = 0.0
    for s in success_ids:
        per_t = []
        for t in range(0, len(failure.observations), L):
            o = failure.observations[t:t + 1]
            a = pol.attention_maps(o, table.array(failure.demo_id)[None])
            b = pol.attention_maps(o, table.array(s)[None])
            layers = []
            for pa, pb in zip(a, b):
                heads = []
                for h in range(pa.shape[1]):
                    rows = []
                    for i in range(pa.shape[2]):
                        p, q = pa[0, h, i], pb[0, h, i]
                        p, q = p / p.sum(), q / q.sum()
                        d = 0.0
                        for j in range(len(p)):
                            d += 0.5 * (p[j] * np.log((p[j] + 1e-8) / (q[j] + 1e-8))
                                        + q[j] * np.log((q[j] + 1e-8) / (p[j] + 1e-8)))
                        rows.append(d)
                    heads.append(np.mean(rows))
                layers.append(np.mean(heads))
            per_t.append(np.mean(layers))
        total += np.mean(per_t)
    return total


def test_windows():
    assert window_starts(60, 20) == [0, 20, 40]
    assert window_starts(5, 4) == [0, 4]


def test_k_matches_brute_force(micro):
    demos, man, ck = micro
    for f in man.failure_ids:
        got = score_failure(demos[f], ck)
        assert abs(got - brute_k(demos[f], ck, man.success_ids)) <= 1e-8
        assert got >= -1e-6


def test_k_zero_for_identical_pb(micro):
    demos, man, ck = micro
    table = PBTable(["s000", "f000"], [SUCCESS, FAILURE], 4, 5)
    table.param.data[:] = 0.7
    assert score_failure(demos["f000"], Checkpoint(ck.policy, table, 0)) == 0.0


def test_k_doubles_when_successes_duplicate(micro):
    demos, man, ck = micro
    f = demos["f001"]
    once = score_failure(f, ck, man.success_ids)
    twice = score_failure(f, ck, man.success_ids + man.success_ids)
    assert twice == 2 * once


def test_score_failure_errors(micro):
    demos, man, ck = micro
    other = generate_dataset(0, 1, rng_seed=99)[0][0]
    other.demo_id = "f999"
    with pytest.raises(MissingPBError):
        score_failure(other, ck)
    with pytest.raises(ConfigError):
        score_failure(demos["f000"], ck, success_ids=[])
    with pytest.raises(ConfigError):
        score_failure(demos["s000"], ck)
    with pytest.raises(ConfigError):
        score_failure(demos["f000"], Checkpoint(ck.policy, None, 0))


def test_score_all_single_seed_and_missing(micro):
    demos, man, ck = micro
    fails = [demos[i] for i in man.failure_ids]
    scores = score_all(fails, {0: ck})
    for s in scores:
        assert s.mean == s.per_seed[0]
    with pytest.raises(IntegrityError, match="seed 3"):
        score_all(fails, {0: ck}, seeds=[0, 3])


def test_score_all_mean_across_seeds(micro):
    demos, man, ck = micro
    t2 = PBTable(ck.pb_table.demo_ids, ck.pb_table.labels, 4, 5)
    t2.param.data[:] = np.random.default_rng(8).normal(size=t2.param.data.shape)
    cks = {0: ck, 1: Checkpoint(ck.policy, t2, 1)}
    fails = [demos[i] for i in man.failure_ids]
    for s in score_all(fails, cks):
        assert abs(s.mean - np.mean(list(s.per_seed.values()))) <= 1e-9


def fake_scores(values, modes=None):
    modes = modes or [""] * len(values)
    return [FailureScore(f"f{i:03d}", {0: v}, v, 0, m) for i, (v, m) in enumerate(zip(values, modes))]


def test_rank_examples():
    ranked = rank_scores(fake_scores([3.0, 1.0, 2.0]))
    assert {s.demo_id: s.rank for s in ranked} == {"f000": 3, "f001": 1, "f002": 2}
    tie = rank_scores([FailureScore("f_b", {}, 1.0), FailureScore("f_a", {}, 1.0)])
    assert [s.demo_id for s in tie] == ["f_a", "f_b"]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from([0.0, 0.5, 1.0, 2.0, 3.5]), min_size=2, max_size=12), st.randoms())
def test_rank_permutation_invariant(values, rnd):
    base = {s.demo_id: s.rank for s in rank_scores(fake_scores(values))}
    shuffled = fake_scores(values)
    rnd.shuffle(shuffled)
    assert {s.demo_id: s.rank for s in rank_scores(shuffled)} == base


def ranked50():
    vals = np.random.default_rng(0).permutation(50).astype(float)
    return rank_scores(fake_scores(list(vals)))


def ranks_of(plan, scores):
    by = {s.demo_id: s.rank for s in scores}
    return sorted(by[i] for i in plan.selected)


def test_plans_on_fifty():
    sc = ranked50()
    assert ranks_of(build_plan(sc, "kl_low", 10), sc) == list(range(1, 11))
    assert ranks_of(build_plan(sc, "kl_mid", 10), sc) == list(range(21, 31))
    assert ranks_of(build_plan(sc, "kl_high", 10), sc) == list(range(41, 51))
    assert mid_window(50, 10) == list(range(21, 31))
    assert mid_window(7, 2) == [4, 5]


def test_random_plans_partition_and_repeat():
    sc = ranked50()
    blocks = [build_plan(sc, "random", 10, rng_seed=7, subset_index=i) for i in range(5)]
    ids = list(itertools.chain.from_iterable(b.selected for b in blocks))
    assert sorted(ids) == sorted(s.demo_id for s in sc)
    again = build_plan(sc, "random", 10, rng_seed=7, subset_index=2)
    assert again.to_json() == blocks[2].to_json()
    with pytest.raises(ConfigError):
        build_plan(sc, "random", 10)
    with pytest.raises(ConfigError):
        build_plan(sc, "random", 10, rng_seed=7, subset_index=5)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 30), st.data())
def test_low_high_disjoint(n_fail, data):
    n = data.draw(st.integers(0, n_fail // 2))
    sc = rank_scores(fake_scores([float(v) for v in data.draw(st.permutations(range(n_fail)))]))
    lo, hi = build_plan(sc, "kl_low", n), build_plan(sc, "kl_high", n)
    assert not set(lo.selected) & set(hi.selected)
    assert build_plan(sc, "kl_mid", n).to_json() == build_plan(sc, "kl_mid", n).to_json()


def test_plan_errors_and_empty(caplog):
    sc = ranked50()
    with pytest.raises(ConfigError):
        build_plan(sc, "kl_median", 10)
    with pytest.raises(ConfigError):
        build_plan(sc, "kl_low", 51)
    with caplog.at_level(logging.WARNING):
        plan = build_plan(sc, "kl_low", 0)
    assert plan.selected == [] and "subset_size 0" in caplog.text


def test_plan_roundtrip(tmp_path):
    plan = build_plan(ranked50(), "random", 5, rng_seed=1, subset_index=3, scores_sha256="ab")
    plan.save(tmp_path / "p.json")
    assert SelectionPlan.load(tmp_path / "p.json") == plan


@pytest.fixture(scope="module")
def full_set(tmp_path_factory):
    demos, man = generate_dataset(50, 50, rng_seed=0)
    path = tmp_path_factory.mktemp("d") / "demos.jsonl"
    save_demos(path, demos)
    man.dataset = str(path)
    return {d.demo_id: d for d in demos}, man


def test_reconstruct_manifest(full_set):
    demos, man = full_set
    base = man.success_only()
    sc = rank_scores([FailureScore(f, {0: float(i)}, float(i)) for i, f in enumerate(man.failure_ids)])
    plan = build_plan(sc, "kl_low", 10, scores_sha256="h1")
    m = reconstruct_manifest(base, plan)
    assert len(m.demo_ids) == 60 and m.failure_ids == plan.selected
    assert all(demos[i].label == FAILURE for i in m.failure_ids)
    assert m.provenance["scores_sha256"] == "h1" and m.provenance["plan"]["strategy"] == "kl_low"
    empty = reconstruct_manifest(base, build_plan(sc, "kl_low", 0), demos)
    assert empty.demo_ids == base.demo_ids


def test_reconstruct_errors(full_set, tmp_path):
    demos, man = full_set
    base = man.success_only()
    with pytest.raises(IntegrityError):
        reconstruct_manifest(base, SelectionPlan("kl_low", 1, ["s000"]), demos)
    with pytest.raises(IntegrityError):
        reconstruct_manifest(base, SelectionPlan("kl_low", 1, ["f777"]), demos)
    gone = DatasetManifest("x", str(tmp_path / "nope.jsonl"), ["s000"], [])
    with pytest.raises(IntegrityError):
        reconstruct_manifest(gone, SelectionPlan("kl_low", 0, []))


def test_scores_file_roundtrip_and_hash(tmp_path):
    sc = rank_scores([FailureScore("f001", {0: 0.1, 1: 0.3}, 0.2, 0, "miss"),
                      FailureScore("f000", {0: 1 / 3, 1: 2.0}, (1 / 3 + 2.0) / 2, 0, "wander")])
    p = write_scores_csv(tmp_path / "s.csv", sc)
    assert p.read_text().splitlines()[0] == "demo_id,K_seed_0,K_seed_1,mean,rank,failure_mode"
    assert read_scores_csv(p) == sc
    h1 = scores_digest(p)
    write_scores_csv(tmp_path / "s2.csv", sc)
    assert scores_digest(tmp_path / "s2.csv") == h1
    sc[0].per_seed[0] = 0.11
    write_scores_csv(tmp_path / "s3.csv", sc)
    assert scores_digest(tmp_path / "s3.csv") != h1
    assert mode_means(sc) == {"miss": 0.2, "wander": (1 / 3 + 2.0) / 2}
