import math

import numpy as np
import pytest

import oracles
from conftest import make_matrix, manual_index
from nbqos.dataset import QosMatrix, compute_stats
from nbqos.errors import TrainingDivergedError
from nbqos.nbmodel import (
    NbVariant,
    NeighborhoodModel,
    NeighborhoodParams,
    TrainConfig,
    baseline_component,
    objective_value,
    predict,
    predict_many,
    sgd_directions,
    sgd_step,
    train,
)
from nbqos.similarity import build_index

VARIANTS = ["nbmodel1", "nbmodel2", "nbmodel3"]


def all_pairs(m):
    uu, ii = np.meshgrid(np.arange(m.num_users), np.arange(m.num_services), indexing="ij")
    return uu.ravel(), ii.ravel()


def random_params(variant, train, index, seed):
    p = NeighborhoodParams.zeros(variant, compute_stats(train), index)
    rng = np.random.default_rng(seed)
    for a in p.arrays():
        a[:] = rng.uniform(-0.5, 0.5, a.shape)
    p.w_nb[p.neighbor_ids < 0] = 0.0
    return p


def theta_of(p):
    return {
        "b_u": dict(enumerate(p.b_u.tolist())),
        "b_i": dict(enumerate(p.b_i.tolist())),
        "w_u": dict(enumerate(p.w_u.tolist())),
        "w_i": dict(enumerate(p.w_i.tolist())),
        "w_uv": dict(p.w_uv),
    }


def lists_of(index):
    return {u: [v for v, _ in index.neighbors(u)] for u in range(index.size)}


@pytest.fixture
def m5x5():
    # 12 observed entries
    cells = {
        (0, 0): 1.2, (0, 1): 0.8, (0, 3): 2.5,
        (1, 0): 1.6, (1, 2): 3.1, (1, 3): 2.2,
        (2, 1): 0.4, (2, 2): 2.7, (2, 4): 1.9,
        (3, 0): 0.9, (3, 4): 1.1,
        (4, 2): 3.3,
    }
    return QosMatrix.from_dict(5, 5, cells)


@pytest.fixture
def m5x5_lists():
    return {0: [1, 3], 1: [0, 2, 4], 2: [1, 4], 3: [0], 4: [1, 2]}


class TestBaseline:
    def _params(self, variant):
        st = compute_stats(QosMatrix.from_dict(1, 1, {(0, 0): 2.0}))
        return NeighborhoodParams.zeros(variant, st, build_index(
            QosMatrix.from_dict(1, 1, {(0, 0): 2.0}), "user", 0))

    def test_worked_example(self):
        p = self._params("nbmodel1")
        p.b_u[0], p.b_i[0] = 1.0, -0.5
        assert baseline_component(p, 0, 0) == 2.5

    def test_zero_offsets(self):
        assert baseline_component(self._params("nbmodel1"), 0, 0) == 2.0
        assert baseline_component(self._params("nbmodel3"), 0, 0) == 2.0
        assert baseline_component(self._params("nbmodel2"), 0, 0) == 0.0

    def test_feature_weighted(self, fixture_10x10):
        st = compute_stats(fixture_10x10)
        p = NeighborhoodParams.zeros("nbmodel2", st, build_index(fixture_10x10, "user", 0))
        p.w_u[3], p.w_i[4] = 0.5, 0.25
        want = 0.5 * st.user_mean(3) + 0.25 * st.service_mean(4)
        assert baseline_component(p, 3, 4) == pytest.approx(want, rel=1e-15)

    def test_cold_ids_use_global_mean(self):
        train = QosMatrix.from_dict(2, 2, {(0, 0): 1.0, (0, 1): 3.0})
        st = compute_stats(train)
        p = NeighborhoodParams.zeros("nbmodel2", st, build_index(train, "user", 0))
        p.w_u[1] = 1.0
        assert baseline_component(p, 1, 0) == st.global_mean


class TestPredict:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_k_zero_is_baseline(self, fixture_10x10, variant):
        idx = build_index(fixture_10x10, "user", 0)
        p = random_params(variant, fixture_10x10, idx, 1)
        p.clamp_max = None
        for u, i in zip(*all_pairs(fixture_10x10)):
            assert predict(p, u, i, fixture_10x10) == baseline_component(p, u, i)

    def test_one_neighbour_example(self):
        # mu_1 + mu_0 - mu < 0, so the residual baseline clamps to 0 and
        # r_vi - bt_vi = 2; with w_uv = 0.5 and b_ui = 1 the rule gives 2
        train = QosMatrix.from_dict(2, 3, {(1, 0): 2.0, (0, 1): 10.0, (0, 2): 10.0})
        st = compute_stats(train)
        assert st.user_mean(1) + st.service_mean(0) - st.global_mean < 0
        p = NeighborhoodParams.zeros("nbmodel1", st, manual_index(2, {0: [1]}))
        p.b_u[0] = 1.0 - st.global_mean
        p.w_nb[0, 0] = 0.5
        assert predict(p, 0, 0, train) == pytest.approx(2.0, rel=1e-14)

    def test_empty_neighbour_set(self, m5x5, m5x5_lists):
        idx = manual_index(5, {3: [0]})
        p = random_params("nbmodel3", m5x5, idx, 3)
        p.clamp_max = None
        # user 0 did not observe service 2
        assert predict(p, 3, 2, m5x5) == baseline_component(p, 3, 2)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_matches_oracle(self, m5x5, m5x5_lists, variant):
        idx = manual_index(5, m5x5_lists)
        p = random_params(variant, m5x5, idx, 4)
        p.clamp_max = None
        orc = oracles.NbOracle(m5x5.entries, m5x5_lists, variant)
        th = theta_of(p)
        for u, i in zip(*all_pairs(m5x5)):
            assert predict(p, u, i, m5x5) == pytest.approx(orc.predict(th, u, i), rel=1e-12, abs=1e-13)

    def test_clamped(self, m5x5):
        p = NeighborhoodParams.zeros("nbmodel1", compute_stats(m5x5), manual_index(5, {}))
        p.b_u[0] = 100.0
        p.b_u[1] = -100.0
        assert predict(p, 0, 0, m5x5) == 20.0
        assert predict(p, 1, 0, m5x5) == 0.0
        p.clamp_max = None
        assert predict(p, 0, 0, m5x5) > 100

    def test_zero_epochs_predicts_mean(self, fixture_10x10):
        p = train(fixture_10x10, "nbmodel1", TrainConfig(epochs=0), build_index(fixture_10x10, "user", 5))
        mu = compute_stats(fixture_10x10).global_mean
        assert set(predict_many(p, *all_pairs(fixture_10x10), fixture_10x10)) == {mu}

    def test_index_mismatch(self, fixture_10x10):
        p = train(fixture_10x10, "nbmodel1", TrainConfig(epochs=1), build_index(fixture_10x10, "user", 3))
        with pytest.raises(ValueError):
            predict(p, 0, 0, fixture_10x10, build_index(fixture_10x10, "user", 5))

    def test_full_k_equals_unpruned_rule(self):
        # all similarities positive: every user is a neighbour of every other
        rng = np.random.default_rng(8)
        a = rng.uniform(1, 2, 6)
        c = rng.uniform(1, 3, 7)
        dense = a[:, None] * 0.5 + c + rng.normal(0, 0.01, (6, 7))
        dense[rng.random((6, 7)) < 0.2] = -1
        m = QosMatrix.from_dense(dense)
        idx = build_index(m, "user", 10)
        assert all(len(idx.neighbors(u)) == 5 for u in range(6))
        p = random_params("nbmodel3", m, idx, 9)
        p.clamp_max = None
        everyone = {u: [v for v in range(6) if v != u] for u in range(6)}
        orc = oracles.NbOracle(m.entries, everyone, "nbmodel3")
        # w_uv keyed by pair, so the list order does not matter
        th = theta_of(p)
        for u, i in zip(*all_pairs(m)):
            assert predict(p, u, i, m) == pytest.approx(orc.predict(th, u, i), rel=1e-12)


class TestUpdates:
    def test_zero_error_no_change(self):
        train_m = QosMatrix.from_dict(2, 2, {(0, 0): 2.0, (1, 1): 2.0})
        p = NeighborhoodParams.zeros("nbmodel1", compute_stats(train_m), manual_index(2, {0: [1]}))
        before = [a.copy() for a in p.arrays()]
        sgd_step(p, train_m, TrainConfig(), 0, 0)
        for a, b in zip(before, p.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_single_step_by_hand(self, m5x5, m5x5_lists):
        cfg = TrainConfig(lambda1=0.01, lambda2=0.02, lambda3=0.03, gamma1=0.1, gamma2=0.2)
        idx = manual_index(5, m5x5_lists)
        p = random_params("nbmodel3", m5x5, idx, 5)
        old = {k: a.copy() for k, a in zip(("b_u", "b_i", "w_u", "w_i", "w_nb"), p.arrays())}
        u, i = 1, 0
        orc = oracles.NbOracle(m5x5.entries, m5x5_lists, "nbmodel3")
        e = m5x5.entries[(u, i)] - orc.predict(theta_of(p), u, i)
        st = compute_stats(m5x5)
        sgd_step(p, m5x5, cfg, u, i)
        assert p.b_u[u] == pytest.approx(old["b_u"][u] + 0.1 * (e - 0.02 * old["b_u"][u]), rel=1e-12)
        assert p.b_i[i] == pytest.approx(old["b_i"][i] + 0.1 * (e - 0.02 * old["b_i"][i]), rel=1e-12)
        assert p.w_u[u] == pytest.approx(
            old["w_u"][u] + 0.1 * (e * st.user_mean(u) - 0.03 * old["w_u"][u]), rel=1e-12
        )
        assert p.w_i[i] == pytest.approx(
            old["w_i"][i] + 0.1 * (e * st.service_mean(i) - 0.03 * old["w_i"][i]), rel=1e-12
        )
        members = orc.members(u, i)
        assert members == [0, 4] or members == [0]
        for s, v in enumerate(m5x5_lists[u]):
            if v in members:
                r = m5x5.entries[(v, i)] - orc.residual_base(v, i)
                want = old["w_nb"][u, s] + 0.2 * (
                    e * r / math.sqrt(len(members)) - 0.01 * old["w_nb"][u, s]
                )
            else:
                want = old["w_nb"][u, s]
            assert p.w_nb[u, s] == pytest.approx(want, rel=1e-12)
        # other users untouched
        np.testing.assert_array_equal(np.delete(p.b_u, u), np.delete(old["b_u"], u))

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_inapplicable_updates_skipped(self, m5x5, m5x5_lists, variant):
        p = NeighborhoodParams.zeros(variant, compute_stats(m5x5), manual_index(5, m5x5_lists))
        for (u, i) in m5x5.entries:
            sgd_step(p, m5x5, TrainConfig(gamma1=0.05), u, i)
        uses_bias = NbVariant(variant).uses_bias
        uses_feat = NbVariant(variant).uses_features
        assert np.any(p.b_u != 0) == uses_bias
        assert np.any(p.w_u != 0) == uses_feat
        assert set(sgd_directions(p, m5x5, TrainConfig(), 0, 0)) == (
            {"w_uv"} | ({"b_u", "b_i"} if uses_bias else set()) | ({"w_u", "w_i"} if uses_feat else set())
        )


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


@pytest.mark.parametrize("variant", VARIANTS)
def test_directions_match_finite_differences(m5x5, m5x5_lists, variant):
    cfg = TrainConfig(lambda1=0.05, lambda2=0.07, lambda3=0.09)
    idx = manual_index(5, m5x5_lists)
    p = random_params(variant, m5x5, idx, 11)
    orc = oracles.NbOracle(m5x5.entries, m5x5_lists, variant, (0.05, 0.07, 0.09))
    th = theta_of(p)
    for (u, i) in m5x5.entries:
        d = sgd_directions(p, m5x5, cfg, u, i)
        f = lambda t: orc.case_objective(t, u, i)  # noqa: E731
        for group, key in (("b_u", u), ("b_i", i), ("w_u", u), ("w_i", i)):
            if group in d:
                g = oracles.central_difference(f, th, group, key)
                assert rel_err(d[group], -0.5 * g) < 1e-4
        for v, dv in d["w_uv"].items():
            g = oracles.central_difference(f, th, "w_uv", (u, v))
            assert rel_err(dv, -0.5 * g) < 1e-4


@pytest.mark.parametrize("variant", VARIANTS)
def test_objective_matches_oracle(m5x5, m5x5_lists, variant):
    cfg = TrainConfig(lambda1=0.05, lambda2=0.07, lambda3=0.09)
    p = random_params(variant, m5x5, manual_index(5, m5x5_lists), 12)
    orc = oracles.NbOracle(m5x5.entries, m5x5_lists, variant, (0.05, 0.07, 0.09))
    assert objective_value(p, m5x5, cfg) == pytest.approx(orc.objective(theta_of(p)), rel=1e-12)


class TestObjective:
    def test_zero_params_nbmodel1(self, fixture_10x10):
        p = NeighborhoodParams.zeros("nbmodel1", compute_stats(fixture_10x10), build_index(fixture_10x10, "user", 4))
        mu = compute_stats(fixture_10x10).global_mean
        want = math.fsum((r - mu) ** 2 for r in fixture_10x10.entries.values())
        assert objective_value(p, fixture_10x10) == pytest.approx(want, rel=1e-12)

    def test_perfect_fit_is_regularization(self):
        m = QosMatrix.from_dict(1, 1, {(0, 0): 3.0})
        p = NeighborhoodParams.zeros("nbmodel1", compute_stats(m), build_index(m, "user", 0))
        p.b_u[0], p.b_i[0] = 0.5, -0.5
        cfg = TrainConfig(lambda2=0.1)
        assert objective_value(p, m, cfg) == pytest.approx(0.1 * 0.5)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_non_increasing_over_epochs(self, fixture_10x10, variant):
        cfg = TrainConfig(gamma1=0.01, gamma2=0.01, epochs=5, early_stop_tol=-1.0)
        idx = build_index(fixture_10x10, "user", 5)
        values = []
        train(
            fixture_10x10, variant, cfg, idx,
            callback=lambda e, p: values.append(objective_value(p, fixture_10x10, cfg)),
        )
        start = objective_value(
            NeighborhoodParams.zeros(variant, compute_stats(fixture_10x10), idx), fixture_10x10, cfg
        )
        assert len(values) == 5
        seq = [start] + values
        assert all(b <= a for a, b in zip(seq, seq[1:]))


class TestTraining:
    def test_deterministic(self, fixture_20x30):
        cfg = TrainConfig(gamma1=0.01, gamma2=0.01, epochs=10, shuffle_seed=3)
        idx = build_index(fixture_20x30, "user", 8)
        a = train(fixture_20x30, "nbmodel3", cfg, idx)
        b = train(fixture_20x30, "nbmodel3", cfg, idx)
        for x, y in zip(a.arrays(), b.arrays()):
            np.testing.assert_array_equal(x, y)

    def test_seed_changes_order(self, fixture_20x30):
        idx = build_index(fixture_20x30, "user", 8)
        a = train(fixture_20x30, "nbmodel1", TrainConfig(epochs=3, shuffle_seed=1), idx)
        b = train(fixture_20x30, "nbmodel1", TrainConfig(epochs=3, shuffle_seed=2), idx)
        assert not np.array_equal(a.b_u, b.b_u)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_finite_over_100_epochs(self, fixture_20x30, variant):
        cfg = TrainConfig(early_stop_tol=-1.0)
        p = train(fixture_20x30, variant, cfg)
        assert len(p.history) == 100
        assert p.all_finite()

    def test_w_uv_confined_to_neighbours(self, fixture_20x30):
        idx = build_index(fixture_20x30, "user", 4)
        p = train(fixture_20x30, "nbmodel1", TrainConfig(epochs=5), idx)
        for (u, v) in p.w_uv:
            assert v in {x for x, _ in idx.neighbors(u)}

    def test_divergence_names_epoch(self, fixture_20x30):
        cfg = TrainConfig(gamma1=50.0, gamma2=50.0, decay=1.0, epochs=50, early_stop_tol=-1e300)
        with pytest.raises(TrainingDivergedError, match="epoch"):
            train(fixture_20x30, "nbmodel3", cfg)

    def test_early_stop(self, fixture_20x30):
        p = train(fixture_20x30, "nbmodel1", TrainConfig(early_stop_tol=10.0))
        assert len(p.history) == 1

    def test_frozen_after_training(self, fixture_10x10):
        p = train(fixture_10x10, "nbmodel1", TrainConfig(epochs=1))
        with pytest.raises(ValueError):
            p.b_u[0] = 1.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(gamma1=0.0)
        with pytest.raises(ValueError):
            TrainConfig(decay=1.5)
        with pytest.raises(ValueError):
            TrainConfig(lambda3=-1)


class TestModelFile:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_roundtrip_bit_exact(self, tmp_path, fixture_20x30, variant):
        cfg = TrainConfig(gamma1=0.01, gamma2=0.01, epochs=8)
        m = NeighborhoodModel.fit(fixture_20x30, variant, cfg, k=6)
        m.save(tmp_path / "m.txt")
        back = NeighborhoodModel.load(tmp_path / "m.txt")
        assert back.k == 6 and back.params.variant == variant
        for x, y in zip(m.params.arrays(), back.params.arrays()):
            np.testing.assert_array_equal(x, y)
        np.testing.assert_array_equal(back.index.topk_ids, m.index.topk_ids)
        us, is_ = all_pairs(fixture_20x30)
        np.testing.assert_array_equal(m.predict_many(us, is_), back.predict_many(us, is_))

    def test_unclamped_roundtrip(self, tmp_path, fixture_10x10):
        m = NeighborhoodModel.fit(fixture_10x10, "nbmodel2", TrainConfig(epochs=2), k=3, clamp_max=None)
        m.save(tmp_path / "m.txt")
        assert NeighborhoodModel.load(tmp_path / "m.txt").params.clamp_max is None


def test_random_instance_against_oracle():
    m = make_matrix(8, 9, 0.6, seed=21)
    idx = build_index(m, "user", 3)
    p = train(m, "nbmodel3", TrainConfig(gamma1=0.02, gamma2=0.02, epochs=4), idx)
    orc = oracles.NbOracle(m.entries, lists_of(idx), "nbmodel3")
    th = theta_of(p)
    for u, i in zip(*all_pairs(m)):
        want = min(max(orc.predict(th, u, i), 0.0), 20.0)
        assert predict(p, u, i, m) == pytest.approx(want, rel=1e-12, abs=1e-13)
