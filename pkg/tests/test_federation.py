import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _cases import brute_force_assignment, elementwise_weighted_mean, permuted_copy, random_paramset
from fedspeech.federation import (AggregationError, AssignmentError, ClientShard, ClientUpdate, FederationError, LoopbackTransport,
                                  PartitionError, RoundConfig, fedavg_aggregate, fedma_aggregate, fedma_match_layer,
                                  local_train, partition_dataset, partition_subjects, run_federated_training,
                                  solve_assignment, write_history)
from fedspeech.federation.partition import dirichlet_proportions
from fedspeech.models import FULL_FINETUNE, clone_model, set_transfer_mode
from fedspeech.nn.checkpoint import save_checkpoint
from fedspeech.nn.network import predict_logits
from fedspeech.nn.params import Param, ParamSet
from fedspeech.training import EarlyStopping, TrainConfig, evaluate_loss


def _scalar(v):
    return ParamSet([Param("w", "dense", np.array([[v]], np.float64))])


# -- FedAvg --------------------------------------------------------------

def test_fedavg_hand_example():
    out = fedavg_aggregate([ClientUpdate(0, _scalar(2.0), 1), ClientUpdate(1, _scalar(4.0), 3)])
    assert out["w"][0, 0] == 3.5


def test_fedavg_identical_clients_exact(rng):
    ps = random_paramset(rng)
    out = fedavg_aggregate([ClientUpdate(k, ps.copy(), n) for k, n in enumerate([3, 7, 1, 9])])
    assert out.equal(ps)


def test_fedavg_matches_oracle_and_scaling(rng):
    for _ in range(10):
        sets = [random_paramset(rng) for _ in range(4)]
        sizes = rng.integers(1, 50, 4).tolist()
        out = fedavg_aggregate([ClientUpdate(k, s, n) for k, (s, n) in enumerate(zip(sets, sizes))])
        ref = elementwise_weighted_mean(sets, sizes)
        for name in out.names():
            np.testing.assert_allclose(out[name], ref[name], atol=1e-6)
        scaled = fedavg_aggregate([ClientUpdate(k, s, 5 * n) for k, (s, n) in enumerate(zip(sets, sizes))])
        for name in out.names():
            np.testing.assert_allclose(scaled[name], out[name], atol=1e-7)


def test_fedavg_linearity(rng):
    sets = [ParamSet([Param("w", "dense", rng.normal(size=(3, 3)))]) for _ in range(3)]
    sizes = [2, 5, 1]
    base = fedavg_aggregate([ClientUpdate(k, s, n) for k, (s, n) in enumerate(zip(sets, sizes))])
    scaled_sets = [ParamSet([Param("w", "dense", 2.5 * s["w"])]) for s in sets]
    scaled = fedavg_aggregate([ClientUpdate(k, s, n) for k, (s, n) in enumerate(zip(scaled_sets, sizes))])
    np.testing.assert_allclose(scaled["w"], 2.5 * base["w"], rtol=1e-12)


def test_fedavg_errors(rng):
    a = random_paramset(rng)
    b = random_paramset(rng, shapes=((4, 3), (4,), (3, 4), (2,)))
    with pytest.raises(AggregationError, match="client 1.*t2"):
        fedavg_aggregate([ClientUpdate(0, a, 1), ClientUpdate(1, b, 1)])
    with pytest.raises(AggregationError):
        fedavg_aggregate([])
    with pytest.raises(AggregationError):
        ClientUpdate(0, a, 0)


# -- assignment ----------------------------------------------------------

def test_assignment_examples():
    perm, cost = solve_assignment([[0, 1], [1, 0]])
    assert perm.tolist() == [0, 1] and cost == 0
    perm, cost = solve_assignment([[1, 2], [2, 1]])
    assert perm.tolist() == [0, 1] and cost == 2
    perm, cost = solve_assignment(np.ones((4, 4)))
    assert perm.tolist() == [0, 1, 2, 3]


def test_assignment_brute_force_6x6(rng):
    for _ in range(20):
        c = rng.normal(size=(6, 6))
        perm, cost = solve_assignment(c)
        ref, ref_cost = brute_force_assignment(c)
        assert cost == pytest.approx(ref_cost, abs=1e-9)
        assert perm.tolist() == ref.tolist()


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 5).flatmap(lambda n: st.lists(st.lists(st.integers(0, 3), min_size=n, max_size=n),
                                                    min_size=n, max_size=n)))
def test_assignment_ties_take_lexicographic_minimum(cost):
    perm, total = solve_assignment(cost)
    ref, ref_total = brute_force_assignment(cost)
    assert total == ref_total and perm.tolist() == ref.tolist()


def test_assignment_errors():
    with pytest.raises(AssignmentError):
        solve_assignment(np.zeros((2, 3)))
    with pytest.raises(AssignmentError):
        solve_assignment([[0, np.inf], [1, 0]])


# -- FedMA ---------------------------------------------------------------

def test_match_layer_recovers_shuffles(rng):
    base = rng.normal(size=(7, 5))
    shuffles = [np.arange(7)] + [rng.permutation(7) for _ in range(3)]
    rows = [base[s] for s in shuffles]
    merged, perms = fedma_match_layer(rows, [10, 3, 3, 3])
    np.testing.assert_allclose(merged, base, atol=1e-12)
    for s, p in zip(shuffles, perms):
        np.testing.assert_array_equal(s[p], np.arange(7))


def test_match_layer_single_and_identical(rng):
    m = rng.normal(size=(4, 3))
    merged, perms = fedma_match_layer([m], [5])
    assert perms[0].tolist() == [0, 1, 2, 3] and (merged == m).all()
    merged, perms = fedma_match_layer([m, m.copy()], [2, 2])
    assert all(p.tolist() == [0, 1, 2, 3] for p in perms) and (merged == m).all()
    with pytest.raises(AggregationError):
        fedma_match_layer([m, m[:3]], [1, 1])


def test_fedma_merges_permuted_copies(models, rng):
    model = clone_model(models["mnv2-lite"])
    set_transfer_mode(model, FULL_FINETUNE)
    updates = [ClientUpdate(0, model.params.copy(), 40)]
    for k in range(1, 4):
        updates.append(ClientUpdate(k, permuted_copy(model, rng)[0], 20 + k))
    merged = fedma_aggregate(updates, model.match_units)
    x = rng.normal(size=(8, 1, 224, 224)).astype(np.float32)
    ref = predict_logits(model, x)
    out = predict_logits(model.with_params(merged), x)
    assert np.abs(out - ref).max() < 1e-4


def test_fedma_identity_cases(models):
    model = models["rn18-lite"]
    one = fedma_aggregate([ClientUpdate(0, model.params.copy(), 3)], model.match_units)
    assert one.equal(model.params)
    same = fedma_aggregate([ClientUpdate(k, model.params.copy(), 3 + k) for k in range(3)], model.match_units)
    for name in model.params.names():
        np.testing.assert_allclose(same[name], model.params[name], atol=1e-7)


# -- partitioning --------------------------------------------------------

def _labels(n0, n1):
    return {**{f"A{i:02d}": 0 for i in range(n0)}, **{f"B{i:02d}": 1 for i in range(n1)}}


def test_iid_partition_five_plus_five():
    labels = _labels(25, 25)
    shards = partition_subjects(labels, RoundConfig(), seed=4)
    assert len(shards) == 5
    for s in shards:
        assert sum(labels[x] for x in s) == 5 and len(s) == 10
    assert sorted(itertools.chain(*shards)) == sorted(labels)


def test_dirichlet_large_alpha_is_near_uniform():
    props = dirichlet_proportions(1e6, 5, 2, np.random.default_rng(0))
    assert np.abs(props - 0.2).max() < 0.02


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 30), st.integers(5, 30), st.floats(0.3, 100.0), st.integers(0, 1000))
def test_dirichlet_partition_laws(n0, n1, alpha, seed):
    labels = _labels(n0, n1)
    try:
        shards = partition_subjects(labels, RoundConfig(partition="dirichlet", alpha=alpha), seed)
    except PartitionError:
        return
    assert all(shards)
    flat = list(itertools.chain(*shards))
    assert sorted(flat) == sorted(labels) and len(set(flat)) == len(flat)


def test_pigeonhole():
    with pytest.raises(PartitionError):
        partition_subjects(_labels(2, 2), RoundConfig(), seed=0)
    with pytest.raises(ValueError):
        RoundConfig(n_clients=1)
    with pytest.raises(ValueError):
        RoundConfig(partition="dirichlet", alpha=0.0)


def test_frame_partition_has_no_straddling(small_embedded):
    x, y, subjects = small_embedded
    labels = {s: int(l) for s, l in zip(subjects, y)}
    shards = partition_dataset(x, y, subjects, labels, RoundConfig(), seed=1)
    owner = {}
    for sh in shards:
        for i in sh.frame_index:
            assert subjects[i] in sh.subjects
        for s in sh.subjects:
            assert owner.setdefault(s, sh.client_id) == sh.client_id
    assert sum(sh.n_k for sh in shards) == len(x)


# -- local training and rounds -------------------------------------------

def _shards(small_embedded, seed=1):
    x, y, subjects = small_embedded
    labels = {s: int(l) for s, l in zip(subjects, y)}
    return partition_dataset(x, y, subjects, labels, RoundConfig(), seed)


def test_local_train_identity_and_determinism(models, small_embedded):
    model = models["mnv2-lite"]
    shard = _shards(small_embedded)[0]
    zero = local_train(shard, model.params, model, TrainConfig(), 0, seed=3)
    assert zero.params.equal(model.params) and zero.n_k == shard.n_k
    a = local_train(shard, model.params, model, TrainConfig(), 2, seed=3)
    b = local_train(shard, model.params, model, TrainConfig(), 2, seed=3)
    assert a.params.equal(b.params) and not a.params.equal(model.params)


def test_local_train_descends(models, small_embedded):
    model = models["mnv2-lite"]
    shards = _shards(small_embedded)
    passed = 0
    for seed in range(10):
        shard = shards[seed % 5]
        before = evaluate_loss(model, shard.x, shard.y, head_only=True)
        upd = local_train(shard, model.params, model, TrainConfig(base_lr=1e-4), 1, seed=seed)
        passed += evaluate_loss(model.with_params(upd.params), shard.x, shard.y, head_only=True) <= before
    assert passed >= 9


def test_local_train_divergence_names_client(models, small_embedded):
    model = models["mnv2-lite"]
    shard = _shards(small_embedded)[2]
    poisoned = ClientShard(shard.client_id, shard.subjects, np.full_like(shard.x, np.nan), shard.y, shard.frame_index)
    with pytest.raises(FederationError, match="round 4, client 2"):
        local_train(poisoned, model.params, model, TrainConfig(), 1, seed=0, round_index=4)


def test_zero_rounds_returns_initial(models, small_embedded):
    model = models["mnv2-lite"]
    res = run_federated_training(_shards(small_embedded), model, RoundConfig(total_rounds=0))
    assert res.params.equal(model.params) and res.history == []


def test_rounds_deterministic_and_logged(models, small_embedded, tmp_path):
    model = models["mnv2-lite"]
    x, y, _ = small_embedded
    cfg = RoundConfig(total_rounds=3, aggregator="fedma")
    a = run_federated_training(_shards(small_embedded), model, cfg, seed=5, val=(x[:40], y[:40]))
    b = run_federated_training(_shards(small_embedded), model, cfg, seed=5, val=(x[:40], y[:40]))
    assert a.params.equal(b.params)
    assert [r.val_loss for r in a.history] == [r.val_loss for r in b.history]
    assert [len(r.clients) for r in a.history] == [5, 5, 5]
    assert a.train_time_s == a.history[-1].cumulative_time_s > 0
    write_history(tmp_path / "h.jsonl", a.history)
    assert len((tmp_path / "h.jsonl").read_text().splitlines()) == 3


def test_round_early_stopping_restores_best(models, small_embedded):
    model = models["mnv2-lite"]
    x, y, _ = small_embedded
    res = run_federated_training(_shards(small_embedded), model, RoundConfig(total_rounds=6), seed=0,
                                 val=(x, y), stopping=EarlyStopping(patience=1, min_delta=10.0))
    assert res.early_stopped and len(res.history) == 2 and res.best_round == 0


def test_loopback_transport_byte_identical(models, small_embedded):
    model = models["mnv2-lite"]
    with LoopbackTransport() as t:
        got = t.transfer(model.params)
        assert save_checkpoint(got) == save_checkpoint(model.params)
        cfg = RoundConfig(total_rounds=2)
        wire = run_federated_training(_shards(small_embedded), model, cfg, seed=2, transport=t)
        assert t.bytes_sent > 0
    local = run_federated_training(_shards(small_embedded), model, cfg, seed=2)
    assert save_checkpoint(wire.params) == save_checkpoint(local.params)
