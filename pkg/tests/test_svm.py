from collections import defaultdict

import numpy as np
import pytest
from scipy.optimize import minimize

from xraynet import svm as S
from xraynet.data import FeatureSet

LONG = S.SvmConfig(max_epochs=1000, tolerance=0.0, patience=10 ** 6)


def dual_oracle(X, y, C):
    """Exact soft-margin solution through the dual QP (independent of the primal solver)."""
    Z = X * y[:, None]
    K = Z @ Z.T
    m = len(y)
    res = minimize(lambda a: 0.5 * a @ K @ a - a.sum(), np.zeros(m), jac=lambda a: K @ a - 1,
                   bounds=[(0, C)] * m, method="SLSQP",
                   constraints=[{"type": "eq", "fun": lambda a: a @ y, "jac": lambda a: y}],
                   options={"maxiter": 1000, "ftol": 1e-14})
    a = res.x
    w = a @ Z
    free = (a > 1e-6) & (a < C - 1e-6)
    b = float(np.mean(y[free] - X[free] @ w))
    return w, b


def objective(X, y, w, b, C):
    return 0.5 * w @ w + C * np.maximum(0, 1 - y * (X @ w + b)).sum()


def noisy_problem(seed=0, m=60, d=5):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((m, d))
    y = np.sign(X[:, 0] + 0.5 * X[:, 1] + 0.3 * rng.standard_normal(m))
    return X, y


def blobs(seed=0, per=30, pad=6):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 4.0], [4.0, -2.0], [-4.0, -2.0]])
    X = np.concatenate([c + 0.7 * rng.standard_normal((per, 2)) for c in centers])
    return np.hstack([X, np.zeros((len(X), pad))]), np.repeat(np.arange(3), per), np.hstack([centers, np.zeros((3, pad))])


# ---------------------------------------------------------------- binary solver

@pytest.mark.parametrize("C", [1.0, 10.0])
def test_two_point_max_margin(C):
    X = np.array([[2.0, 0.0], [-2.0, 0.0]])
    r = S.train_binary(X, np.array([1.0, -1.0]), C)
    np.testing.assert_allclose(r.w, [0.5, 0.0], atol=0.01)
    assert abs(r.b) < 0.01
    assert abs(r.objective - 0.125) / 0.125 < 0.02


def test_matches_dual_oracle():
    X, y = noisy_problem()
    w, b = dual_oracle(X, y, 1.0)
    r = S.train_binary(X, y, 1.0, LONG)
    assert r.objective >= objective(X, y, w, b, 1.0) - 1e-9
    assert (r.objective - objective(X, y, w, b, 1.0)) / r.objective < 1e-3
    assert np.linalg.norm(r.w - w) / np.linalg.norm(w) < 0.02


def test_duplicated_data_half_C_same_solution():
    X, y = noisy_problem(1)
    a = S.train_binary(X, y, 1.0, LONG)
    b = S.train_binary(np.repeat(X, 2, axis=0), np.repeat(y, 2), 0.5, LONG)
    assert np.linalg.norm(a.w - b.w) / np.linalg.norm(a.w) < 0.02
    assert abs(a.b - b.b) < 0.02
    # the two objectives are the same function, so their values agree too
    assert abs(a.objective - b.objective) / a.objective < 1e-3


def test_separable_zero_hinge():
    rng = np.random.default_rng(2)
    X = rng.standard_normal((80, 4))
    u = np.array([1.0, -1.0, 0.5, 0.0])
    y = np.where(X @ u > 0, 1.0, -1.0)
    X = X + 0.3 * y[:, None] * u / 1.5
    r = S.train_binary(X, y, 100.0, S.SvmConfig(max_epochs=2000, tolerance=1e-9, patience=20))
    assert np.maximum(0, 1 - y * (X @ r.w + r.b)).sum() < 1e-3


def test_objective_history_non_increasing():
    X, y = noisy_problem(3)
    r = S.train_binary(X, y, 4.0, S.SvmConfig(max_epochs=300, tolerance=0.0, patience=10 ** 6))
    h = np.array(r.history)
    assert len(h) == r.epochs + 1
    assert np.all(np.diff(h) <= 1e-9)
    assert abs(h[-1] - objective(X, y, r.w, r.b, 4.0)) < 1e-9 * max(1, h[-1])


def test_binary_errors():
    with pytest.raises(S.SvmError, match="both labels"):
        S.train_binary(np.ones((3, 2)), np.ones(3), 1.0)
    with pytest.raises(S.SvmError):
        S.train_binary(np.ones((3, 2)), np.array([1, 0, -1]), 1.0)


def test_config_validation():
    with pytest.raises(S.SvmError):
        S.SvmConfig(grid=(1.0, 0.5))
    with pytest.raises(S.SvmError):
        S.SvmConfig(grid=())
    with pytest.raises(S.SvmError):
        S.SvmConfig(C=0)
    assert S.default_grid() == [2.0 ** e for e in range(-10, 11, 2)]


# ---------------------------------------------------------------- one-vs-rest

def test_two_class_ovr_agrees_with_binary_sign():
    X, y = noisy_problem(4)
    ids = (y < 0).astype(int)  # class 0 is the +1 side
    fs = FeatureSet(X, ids)
    ovr = S.train_ovr(fs, 1.0, LONG)
    binary = S.train_binary(X, y, 1.0, LONG)
    rng = np.random.default_rng(5)
    probe = np.concatenate([X, rng.standard_normal((200, 5)) * 2])
    from_sign = np.where(probe @ binary.w + binary.b > 0, 0, 1)
    # the class-0 problem is the binary problem; class 1 is its mirror image
    np.testing.assert_allclose(ovr.W[0], binary.w, atol=1e-12)
    np.testing.assert_allclose(ovr.W[1], -ovr.W[0], atol=1e-9)
    np.testing.assert_array_equal(S.predict(ovr, probe), from_sign)


def test_three_blobs_separated():
    X, ids, centers = blobs()
    fs = FeatureSet(X, ids)
    m = S.train_ovr(fs, 1.0)
    assert S.accuracy(m, fs) == 1.0
    assert S.predict(m, centers).tolist() == [0, 1, 2]
    assert [S.predict(m, c) for c in centers] == [0, 1, 2]


def test_permuted_training_order():
    X, ids, _ = blobs(1)
    perm = np.random.default_rng(6).permutation(len(ids))
    a = S.train_ovr(FeatureSet(X, ids), 1.0)
    b = S.train_ovr(FeatureSet(X[perm], ids[perm]), 1.0)
    fs = FeatureSet(X, ids)
    assert abs(S.accuracy(a, fs) - S.accuracy(b, fs)) <= 0.02


def test_ovr_deterministic():
    X, ids, _ = blobs(2)
    a, b = S.train_ovr(FeatureSet(X, ids), 1.0), S.train_ovr(FeatureSet(X, ids), 1.0)
    np.testing.assert_array_equal(a.W, b.W)
    np.testing.assert_array_equal(a.b, b.b)


def test_ovr_missing_class():
    with pytest.raises(S.SvmError, match=r"\[1\]"):
        S.train_ovr(FeatureSet(np.ones((4, 2)), [0, 0, 2, 2]), 1.0)
    with pytest.raises(S.SvmError):
        S.train_ovr(FeatureSet(np.ones((4, 2)), [0, 0, 0, 0]), 1.0)


# ---------------------------------------------------------------- predict

def test_predict_tie_break_and_bias():
    m = S.MulticlassSvm(np.zeros((4, 3)), np.zeros(4), 1.0)
    assert S.predict(m, np.ones(3)) == 0
    m = S.MulticlassSvm(np.zeros((4, 3)), np.array([0, 0, 0, 10.0]), 1.0)
    assert S.predict(m, np.ones(3)) == 3


def test_predict_scale_invariant():
    rng = np.random.default_rng(7)
    m = S.MulticlassSvm(rng.standard_normal((5, 6)), rng.standard_normal(5), 1.0)
    X = rng.standard_normal((300, 6))
    for s in (1e-3, 0.5, 7.0, 1e4):
        scaled = S.MulticlassSvm(m.W * s, m.b * s, 1.0)
        np.testing.assert_array_equal(S.predict(scaled, X), S.predict(m, X))


def test_predict_dimension_mismatch():
    m = S.MulticlassSvm(np.zeros((2, 3)), np.zeros(2), 1.0)
    with pytest.raises(S.SvmError, match="dimension"):
        S.predict(m, np.ones(4))


# ---------------------------------------------------------------- cross-validation

def test_folds_partition_and_stratified():
    ids = np.repeat(np.arange(4), [10, 13, 7, 22])
    folds = S.stratified_folds(ids, 5, seed=3)
    assert set(folds.tolist()) == set(range(5))
    for c in range(4):
        per = np.bincount(folds[ids == c], minlength=5)
        assert per.max() - per.min() <= 1
    with pytest.raises(S.SvmError, match="fewer than 5"):
        S.stratified_folds(np.repeat([0, 1], [4, 10]), 5)


def test_grid_single_element():
    X, ids, _ = blobs(3)
    best, table = S.grid_search_cv(FeatureSet(X, ids), [0.25], 5, 0)
    assert best == 0.25 and len(table) == 5
    assert {f for _, f, _ in table} == set(range(5))
    assert all(acc == 1.0 for _, _, acc in table)


def test_grid_ties_go_to_smallest_C():
    X, ids, _ = blobs(4)
    best, table = S.grid_search_cv(FeatureSet(X, ids), [0.5, 2.0, 8.0], 5, 0)
    assert {acc for _, _, acc in table} == {1.0}
    assert best == 0.5


def test_grid_selects_mid_C_on_underfit_fixture():
    # imbalanced classes: a heavily regularized w is near zero and the biases send everything to
    # the majority class, while any adequately fitted separator is perfect
    rng = np.random.default_rng(1)
    X = np.concatenate([rng.standard_normal((70, 3)) * 0.4 + [3, 0, 0],
                        rng.standard_normal((30, 3)) * 0.4 + [-3, 0, 0]])
    fs = FeatureSet(X, np.repeat([0, 1], [70, 30]))
    grid = [2.0 ** -10, 1.0, 2.0 ** 10]
    best, table = S.grid_search_cv(fs, grid, 5, 0)
    means = defaultdict(list)
    for C, _, acc in table:
        means[C].append(acc)
    means = {C: np.mean(v) for C, v in means.items()}
    assert means[1.0] - means[2.0 ** -10] > 0.05
    assert means[1.0] == max(means.values())
    assert best == 1.0


def test_cv_table_and_model_io(tmp_path):
    X, ids, _ = blobs(5)
    fs = FeatureSet(X, ids)
    _, table = S.grid_search_cv(fs, [1.0], 5, 0)
    S.write_cv_table(tmp_path / "cv.csv", table)
    lines = (tmp_path / "cv.csv").read_text().splitlines()
    assert lines[0] == "C,fold,accuracy" and len(lines) == 6
    m = S.train_ovr(fs, 1.0, classes=["a", "b", "c"])
    S.save_svm(m, tmp_path / "svm.model")
    back = S.load_svm(tmp_path / "svm.model")
    np.testing.assert_array_equal(back.W, m.W)
    np.testing.assert_array_equal(back.b, m.b)
    assert back.classes == ["a", "b", "c"] and back.trained_C == 1.0


def test_l2_normalize_option():
    X, ids, _ = blobs(6)
    m = S.train_ovr(FeatureSet(X * 100, ids), 1.0, S.SvmConfig(l2_normalize=True))
    assert m.l2_normalize
    assert S.accuracy(m, FeatureSet(X, ids)) == S.accuracy(m, FeatureSet(X * 100, ids))
