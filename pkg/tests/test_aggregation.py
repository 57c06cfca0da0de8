import numpy as np
import pytest
from hypothesis import given, strategies as st

from analytic_fl.aggregation import (AggregateState, aggregate_pair,
                                     aggregate_sum_form, fold, joint_oracle,
                                     local_train, local_train_exact, predict,
                                     read_update, restore, restored_update,
                                     train_client, tree_fold, write_update)
from analytic_fl.data import (EmbeddingDataset, PartitionSpec, gen_dummy, one_hot,
                              partition, subset)
from analytic_fl.errors import ContractError, FormatError, RankError
from analytic_fl.linalg import pinv


def rel(A, B):
    return np.linalg.norm(A - B) / np.linalg.norm(B)


def random_clients(rng, sizes, d, C, gamma):
    out = []
    for n in sizes:
        X = rng.standard_normal((n, d))
        Y = one_hot(rng.integers(0, C, n), C)
        out.append((X, Y, local_train(X, Y, gamma)))
    return out


# --- local training ---------------------------------------------------------

def test_local_train_diagonal():
    u = local_train(2 * np.eye(2), np.eye(2), 1.0)
    np.testing.assert_allclose(u.W_r, 0.4 * np.eye(2), atol=1e-15)
    np.testing.assert_array_equal(u.C_r, 5 * np.eye(2))
    assert u.n == 2 and u.gamma == 1.0


def test_local_train_empty_client():
    u = local_train(np.zeros((0, 4)), np.zeros((0, 3)), 0.7)
    np.testing.assert_array_equal(u.W_r, np.zeros((4, 3)))
    np.testing.assert_array_equal(u.C_r, 0.7 * np.eye(4))
    assert u.n == 0


def test_local_train_normal_equations(rng):
    X, Y = rng.standard_normal((50, 8)), rng.standard_normal((50, 3))
    u = local_train(X, Y, 0.5)
    assert np.abs((X.T @ X + 0.5 * np.eye(8)) @ u.W_r - X.T @ Y).max() <= 1e-10


def test_local_train_rank_error(rng):
    X = rng.standard_normal((3, 5))
    with pytest.raises(RankError, match="gamma > 0"):
        local_train(X, np.ones((3, 2)), 0.0)
    u = local_train(X, np.ones((3, 2)), 0.0, allow_rank_deficient=True)
    np.testing.assert_allclose(u.W_r, pinv(X) @ np.ones((3, 2)), atol=1e-12)


def test_local_train_contract_errors():
    with pytest.raises(ContractError):
        local_train(np.eye(3), np.eye(2), 1.0)
    with pytest.raises(ContractError):
        local_train(np.eye(2), np.eye(2), -1.0)


def test_local_train_exact(rng):
    Y = rng.standard_normal((4, 3))
    np.testing.assert_allclose(local_train_exact(np.eye(4), Y), Y, atol=1e-15)
    X = rng.standard_normal((30, 6))
    np.testing.assert_allclose(local_train_exact(X, Y[:1].repeat(30, 0)),
                               local_train(X, Y[:1].repeat(30, 0), 0.0).W_r, atol=1e-10)


def test_local_train_exact_rank_deficient(rng):
    X = rng.standard_normal((20, 3)) @ rng.standard_normal((3, 7))
    Y = rng.standard_normal((20, 2))
    W = local_train_exact(X, Y)
    assert np.abs(X.T @ (Y - X @ W)).max() <= 1e-9
    # minimum norm: no component in the null space of X
    _, s, Vt = np.linalg.svd(X)
    null = Vt[np.sum(s > 1e-10 * s[0]):]
    assert np.abs(null @ W).max() <= 1e-10


# --- pairwise aggregation ---------------------------------------------------

def test_single_client_round_trip(rng):
    X, Y = rng.standard_normal((40, 5)), one_hot(rng.integers(0, 3, 40), 3)
    u = local_train(X, Y, 1.0)
    state = aggregate_pair(AggregateState.empty(5, 3, 1.0), u)
    np.testing.assert_array_equal(state.W_agg_r, u.W_r)
    assert state.k == 1
    np.testing.assert_allclose(restore(state), local_train_exact(X, Y), atol=1e-10)


def test_two_halves_gamma_zero_match_joint(rng):
    X, Y = rng.standard_normal((60, 8)), one_hot(rng.integers(0, 4, 60), 4)
    u = local_train(X[:30], Y[:30], 0.0)
    v = local_train(X[30:], Y[30:], 0.0)
    state = fold([u, v])
    assert rel(state.W_agg_r, pinv(X) @ Y) <= 1e-9


def test_zero_sample_client_is_noop(rng):
    clients = random_clients(rng, [30, 25], 6, 3, 1.0)
    ups = [c[2] for c in clients]
    empty = local_train(np.zeros((0, 6)), np.zeros((0, 3)), 1.0)
    before = restore(fold(ups))
    after_state = fold(ups + [empty])
    assert after_state.k == 3
    assert np.abs(restore(after_state) - before).max() <= 1e-12


def test_aggregate_pair_contracts(rng):
    u = local_train(rng.standard_normal((10, 3)), np.ones((10, 2)), 1.0)
    with pytest.raises(ContractError, match="gamma"):
        aggregate_pair(AggregateState.empty(3, 2, 0.5), u)
    with pytest.raises(ContractError, match="shape"):
        aggregate_pair(AggregateState.empty(4, 2, 1.0), u)


def test_aggregate_pair_singular_gamma_zero(rng):
    full = local_train(rng.standard_normal((10, 4)), np.ones((10, 2)), 0.0)
    thin = local_train(rng.standard_normal((2, 4)), np.ones((2, 2)), 0.0,
                       allow_rank_deficient=True)
    with pytest.raises(RankError):
        fold([full, thin])
    state = fold([full, thin], allow_singular=True)
    assert np.all(np.isfinite(state.W_agg_r))


def test_inputs_not_mutated(rng):
    ups = [c[2] for c in random_clients(rng, [12, 9], 4, 2, 0.5)]
    copies = [(u.W_r.copy(), u.C_r.copy()) for u in ups]
    restore(fold(ups))
    for u, (W, C) in zip(ups, copies):
        assert np.array_equal(u.W_r, W) and np.array_equal(u.C_r, C)


# --- sum form ---------------------------------------------------------------

def test_sum_form_single(rng):
    (_, _, u), = random_clients(rng, [20], 4, 3, 1.0)
    s = aggregate_sum_form([u])
    np.testing.assert_array_equal(s.W_agg_r, u.W_r)
    np.testing.assert_array_equal(s.C_agg_r, u.C_r)
    assert s.k == 1


def test_sum_form_matches_fold(rng):
    ups = [c[2] for c in random_clients(rng, rng.integers(0, 40, 10), 8, 5, 1.0)]
    a, b = fold(ups), aggregate_sum_form(ups)
    assert np.abs(a.W_agg_r - b.W_agg_r).max() <= 1e-10
    assert np.abs(a.C_agg_r - b.C_agg_r).max() <= 1e-10


def test_sum_form_permutation(rng):
    ups = [c[2] for c in random_clients(rng, rng.integers(1, 30, 10), 6, 3, 0.3)]
    perm = rng.permutation(10)
    a = aggregate_sum_form(ups)
    b = aggregate_sum_form([ups[i] for i in perm])
    assert np.abs(a.W_agg_r - b.W_agg_r).max() <= 1e-10


def test_sum_form_errors(rng):
    with pytest.raises(ContractError):
        aggregate_sum_form([])
    u = local_train(np.eye(2), np.eye(2), 1.0)
    v = local_train(np.eye(2), np.eye(2), 2.0)
    with pytest.raises(ContractError):
        aggregate_sum_form([u, v])


# --- restore ----------------------------------------------------------------

def test_restore_gamma_zero_identity(rng):
    ups = [c[2] for c in random_clients(rng, [20, 20], 5, 2, 0.0)]
    state = fold(ups)
    np.testing.assert_array_equal(restore(state), state.W_agg_r)


def test_restore_errors(rng):
    with pytest.raises(ContractError):
        restore(AggregateState.empty(3, 2, 1.0))
    # pooled data with 2 rows in 4 dimensions: restore cannot succeed
    ups = [local_train(rng.standard_normal((1, 4)), np.ones((1, 2)), 1.0) for _ in range(2)]
    with pytest.raises(RankError, match="singular"):
        restore(fold(ups))


def test_restore_dummy_k100():
    ds = gen_dummy(10000, 512, 10, 1)
    parts = [subset(ds, idx) for idx in partition(ds, PartitionSpec("iid", 100, 2)).assignment]
    state = fold([train_client(p, 1.0) for p in parts])
    assert np.abs(joint_oracle(ds, 0.0) - restore(state)).sum() <= 1e-8


# --- invariance properties --------------------------------------------------

@st.composite
def partitioned_problem(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    d = draw(st.integers(1, 10))
    C = draw(st.integers(1, 5))
    N = C * draw(st.integers(max(2, (d + C) // C + 1), 40))
    K = draw(st.integers(1, 25))
    kind = draw(st.sampled_from(["iid", "dirichlet", "sharding"]))
    alpha = draw(st.sampled_from([0.005, 0.1, 1.0]))
    shards = draw(st.integers(1, 3))
    if kind == "sharding" and shards * K > N:
        kind = "iid"
    gamma = draw(st.sampled_from([0.01, 0.5, 1.0, 10.0]))
    ds = gen_dummy(N, d, C, seed)
    spec = PartitionSpec(kind, K, seed + 1, alpha=alpha, shards=shards)
    return ds, spec, gamma


@given(partitioned_problem())
def test_partition_invariance(problem):
    ds, spec, gamma = problem
    parts = [subset(ds, idx) for idx in partition(ds, spec).assignment]
    ups = [train_client(p, gamma) for p in parts]
    W = restore(fold(ups))
    assert rel(W, joint_oracle(ds, 0.0)) <= 1e-8
    assert np.abs(fold(ups).W_agg_r - aggregate_sum_form(ups).W_agg_r).max() <= 1e-10


def test_order_invariance(rng):
    ds = gen_dummy(600, 12, 6, 4)
    parts = [subset(ds, idx) for idx in
             partition(ds, PartitionSpec("dirichlet", 40, 5, alpha=0.1)).assignment]
    ups = [train_client(p, 1.0) for p in parts]
    ref = restore(fold(ups))
    for _ in range(10):
        assert rel(restore(fold(ups, rng.permutation(len(ups)))), ref) <= 1e-9
    assert rel(restore(tree_fold(ups)), ref) <= 1e-9


def test_gamma_invariance_after_restore():
    ds = gen_dummy(800, 16, 8, 9)
    parts = [subset(ds, idx) for idx in partition(ds, PartitionSpec("iid", 100, 1)).assignment]
    results = [restore(fold([train_client(p, g) for p in parts])) for g in (0.1, 1, 10, 100)]
    for W in results[1:]:
        assert rel(W, results[0]) <= 1e-8


def test_rank_deficiency_without_regularization():
    ds = gen_dummy(400, 20, 4, 2)
    parts = [subset(ds, idx) for idx in partition(ds, PartitionSpec("iid", 40, 3)).assignment]
    with pytest.raises(RankError):
        fold([train_client(p, 0.0) for p in parts])
    ups = [train_client(p, 0.0, allow_rank_deficient=True) for p in parts]
    W = fold(ups, allow_singular=True).W_agg_r
    assert np.abs(W - joint_oracle(ds, 0.0)).sum() > 1e-2


def test_prediction_invariance_across_partitions():
    ds = gen_dummy(1000, 10, 5, 8, separation=0.5)
    ref = predict(joint_oracle(ds, 0.0), ds.X)
    for spec in (PartitionSpec("iid", 50, 0), PartitionSpec("dirichlet", 50, 0, alpha=0.01),
                 PartitionSpec("sharding", 50, 0, shards=2)):
        parts = [subset(ds, idx) for idx in partition(ds, spec).assignment]
        W = restore(fold([train_client(p, 1.0) for p in parts]))
        np.testing.assert_array_equal(predict(W, ds.X), ref)


# --- joint oracle and predict -------------------------------------------------

def test_joint_oracle_variants(rng):
    X = rng.standard_normal((30, 4))
    ds = EmbeddingDataset(X, rng.integers(0, 3, 30), 3)
    np.testing.assert_array_equal(joint_oracle(ds, 0.5), local_train(X, ds.Y, 0.5).W_r)
    np.testing.assert_allclose(joint_oracle(ds, 0.0), pinv(X) @ ds.Y, atol=1e-14)
    low = EmbeddingDataset(X[:, :2] @ rng.standard_normal((2, 4)), ds.labels, 3)
    np.testing.assert_allclose(joint_oracle(low, 0.0), pinv(low.X) @ low.Y, atol=1e-12)


def test_predict_trivial():
    assert predict(np.eye(2), [[0.0, 1.0]]).tolist() == [1]
    assert predict(np.zeros((3, 4)), np.ones((5, 3))).tolist() == [0] * 5
    with pytest.raises(ContractError):
        predict(np.eye(2), np.ones((1, 3)))


def test_predict_scan_oracle(rng):
    W = rng.standard_normal((6, 4))
    X = rng.standard_normal((50, 6))
    X[0] = 0.0  # all-tie row
    S = X @ W
    expected = []
    for row in S:
        best = 0
        for j in range(1, len(row)):
            if row[j] > row[best]:
                best = j
        expected.append(best)
    assert predict(W, X).tolist() == expected


# --- AFLU files -------------------------------------------------------------

def test_aflu_round_trip(tmp_path, rng):
    u = local_train(rng.standard_normal((9, 3)), one_hot(rng.integers(0, 2, 9), 2), 0.25)
    write_update(u, tmp_path / "u.aflu")
    v = read_update(tmp_path / "u.aflu")
    assert np.array_equal(u.W_r, v.W_r) and np.array_equal(u.C_r, v.C_r)
    assert (v.gamma, v.n) == (0.25, 9)
    raw = (tmp_path / "u.aflu").read_bytes()
    assert raw[:4] == b"AFLU" and len(raw) == 4 + 2 + 8 + 8 + 8 + 8 + 8 * (6 + 9)


def test_aflu_errors(tmp_path, rng):
    u = local_train(np.eye(2), np.eye(2), 1.0)
    write_update(u, tmp_path / "u.aflu")
    raw = (tmp_path / "u.aflu").read_bytes()
    (tmp_path / "bad").write_bytes(b"AFLE" + raw[4:])
    with pytest.raises(FormatError):
        read_update(tmp_path / "bad")
    (tmp_path / "bad").write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        read_update(tmp_path / "bad")


def test_restored_update_is_aggregable(rng):
    ds = gen_dummy(200, 5, 4, 3)
    parts = [subset(ds, idx) for idx in partition(ds, PartitionSpec("iid", 4, 0)).assignment]
    state = fold([train_client(p, 2.0) for p in parts])
    packed = restored_update(state)
    assert packed.gamma == 0.0 and packed.n == 200
    np.testing.assert_allclose(packed.C_r, ds.X.T @ ds.X, rtol=1e-12)
    more = gen_dummy(40, 5, 4, 9)
    combined = fold([packed, train_client(more, 0.0)])
    pooled = EmbeddingDataset(np.vstack([ds.X, more.X]),
                              np.concatenate([ds.labels, more.labels]), 4)
    assert rel(combined.W_agg_r, joint_oracle(pooled, 0.0)) <= 1e-9
