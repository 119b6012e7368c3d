"""Network forward/backward math, the SCG optimizer, and evaluation."""

import json
import math

import numpy as np
import pytest

from chemtriage.corpus import PatientSet, synth_matrix
from chemtriage.mlp import (
    MlpModel,
    ScgMlpClassifier,
    TrainConfig,
    TrainHistory,
    TrainingDivergedError,
    evaluate_accuracy,
    forward,
    init_model,
    loss_and_gradient,
    model_from_dict,
    model_to_dict,
    one_hot,
    scg_train,
)
from chemtriage.reduction import AllFeaturesReducer, reducer_fingerprint


def finite_difference_gradient(model, X, Y, step=1e-5):
    """Central finite differences of the loss over every parameter."""

    def loss_at(W1, b1, W2, b2):
        Z1 = X @ W1.T + b1
        A1 = np.tanh(Z1)
        Z2 = A1 @ W2.T + b2
        shifted = Z2 - Z2.max(axis=1, keepdims=True)
        P = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        return -(Y * np.log(np.maximum(P, 1e-12))).sum() / X.shape[0]

    arrays = {
        "W1": model.W1.copy(),
        "b1": model.b1.copy(),
        "W2": model.W2.copy(),
        "b2": model.b2.copy(),
    }
    grads = {}
    for name, arr in arrays.items():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            up = loss_at(**arrays)
            arr[idx] = orig - step
            down = loss_at(**arrays)
            arr[idx] = orig
            g[idx] = (up - down) / (2 * step)
            it.iternext()
        grads[name] = g
    return grads


def xor_data():
    X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    y = np.array([0, 1, 1, 0])
    return X, y


class TestInit:
    def test_shapes(self):
        m = init_model(79, 40, 311, seed=0)
        assert m.W1.shape == (40, 79)
        assert m.b1.shape == (40,)
        assert m.W2.shape == (311, 40)
        assert m.b2.shape == (311,)

    def test_deterministic(self):
        a = init_model(5, 3, 4, seed=7)
        b = init_model(5, 3, 4, seed=7)
        assert a.W1.tobytes() == b.W1.tobytes()
        assert a.W2.tobytes() == b.W2.tobytes()

    def test_weight_range_and_zero_biases(self):
        m = init_model(16, 8, 4, seed=1)
        assert np.abs(m.W1).max() < 1 / math.sqrt(16)
        assert np.abs(m.W2).max() < 1 / math.sqrt(8)
        assert not m.b1.any() and not m.b2.any()

    def test_zero_dimension_rejected(self):
        with pytest.raises(ValueError):
            init_model(0, 3, 2, seed=0)


class TestForward:
    def test_zero_model_is_uniform(self):
        m = MlpModel(3, 2, 4, np.zeros((2, 3)), np.zeros(2), np.zeros((4, 2)), np.zeros(4))
        probs = forward(m, np.array([1.0, 0.0, 1.0]))
        assert np.allclose(probs, 0.25)

    def test_outputs_normalized(self):
        m = init_model(6, 5, 7, seed=3)
        X = np.random.default_rng(0).normal(size=(10, 6))
        probs = forward(m, X)
        assert (probs > 0).all()
        assert np.abs(probs.sum(axis=1) - 1.0).max() < 1e-9

    def test_hand_computed_2_2_2(self):
        W1 = np.array([[0.5, -0.25], [0.1, 0.3]])
        b1 = np.array([0.05, -0.1])
        W2 = np.array([[0.2, -0.4], [-0.3, 0.6]])
        b2 = np.array([0.01, -0.02])
        m = MlpModel(2, 2, 2, W1, b1, W2, b2)
        x = np.array([1.0, 0.5])

        h0 = math.tanh(0.5 * 1.0 - 0.25 * 0.5 + 0.05)
        h1 = math.tanh(0.1 * 1.0 + 0.3 * 0.5 - 0.1)
        z0 = 0.2 * h0 - 0.4 * h1 + 0.01
        z1 = -0.3 * h0 + 0.6 * h1 - 0.02
        e0, e1 = math.exp(z0), math.exp(z1)
        expected = np.array([e0, e1]) / (e0 + e1)
        assert np.abs(forward(m, x) - expected).max() < 1e-12

    def test_softmax_shift_invariance(self):
        m = init_model(4, 3, 5, seed=9)
        x = np.random.default_rng(1).normal(size=4)
        shifted = MlpModel(
            4, 3, 5, m.W1, m.b1, m.W2, m.b2 + 123.0, init_seed=m.init_seed
        )
        assert np.abs(forward(m, x) - forward(shifted, x)).max() < 1e-12

    def test_rejects_bad_input(self):
        m = init_model(3, 2, 2, seed=0)
        with pytest.raises(ValueError, match="features"):
            forward(m, np.zeros(4))
        with pytest.raises(ValueError, match="finite"):
            forward(m, np.array([1.0, np.nan, 0.0]))


class TestLossAndGradient:
    def test_uniform_prediction_loss_is_log_c(self):
        m = MlpModel(3, 2, 5, np.zeros((2, 3)), np.zeros(2), np.zeros((5, 2)), np.zeros(5))
        X = np.random.default_rng(2).integers(0, 2, size=(8, 3)).astype(float)
        Y = one_hot(np.random.default_rng(3).integers(0, 5, size=8), 5)
        loss, _ = loss_and_gradient(m, X, Y)
        assert loss == pytest.approx(math.log(5))

    def test_near_perfect_prediction_loss_near_zero(self):
        W2 = np.array([[40.0], [-40.0]])
        m = MlpModel(1, 1, 2, np.array([[20.0]]), np.zeros(1), W2, np.zeros(2))
        X = np.array([[1.0], [-1.0]])
        Y = one_hot(np.array([0, 1]), 2)
        loss, _ = loss_and_gradient(m, X, Y)
        assert loss < 1e-9

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        m = init_model(3, 4, 3, seed=11)
        X = rng.normal(size=(6, 3))
        Y = one_hot(rng.integers(0, 3, size=6), 3)
        loss, grad = loss_and_gradient(m, X, Y)
        fd = finite_difference_gradient(m, X, Y)
        for name in ("W1", "b1", "W2", "b2"):
            analytic = getattr(grad, name)
            scale = max(1.0, np.abs(fd[name]).max())
            assert np.abs(analytic - fd[name]).max() / scale < 1e-5

    def test_shape_mismatch(self):
        m = init_model(3, 2, 2, seed=0)
        with pytest.raises(ValueError, match="X must be"):
            loss_and_gradient(m, np.zeros((4, 5)), one_hot(np.zeros(4, dtype=int), 2))

    def test_rejects_non_one_hot_targets(self):
        m = init_model(2, 2, 2, seed=0)
        bad = np.array([[0.5, 0.5], [1.0, 0.0]])
        with pytest.raises(ValueError, match="one-hot"):
            loss_and_gradient(m, np.zeros((2, 2)), bad)


class TestScgTrain:
    def test_xor_converges(self):
        X, y = xor_data()
        Y = one_hot(y, 2)
        m = init_model(2, 4, 2, seed=0)
        trained, history = scg_train(m, X, Y, TrainConfig(max_epochs=500))
        assert min(history.losses) < 1e-2
        assert (forward(trained, X).argmax(axis=1) == y).all()

    def test_linearly_separable_blobs_reach_full_accuracy(self):
        rng = np.random.default_rng(5)
        a = rng.normal(loc=(-2.0, 0.0), scale=0.4, size=(20, 2))
        b = rng.normal(loc=(2.0, 0.0), scale=0.4, size=(20, 2))
        X = np.vstack([a, b])
        y = np.array([0] * 20 + [1] * 20)
        trained, _ = scg_train(
            init_model(2, 3, 2, seed=1), X, one_hot(y, 2), TrainConfig(max_epochs=200)
        )
        assert (forward(trained, X).argmax(axis=1) == y).mean() == 1.0

    def test_single_epoch_contract(self):
        X, y = xor_data()
        with pytest.raises(ValueError):
            TrainConfig(max_epochs=0)
        _, history = scg_train(
            init_model(2, 4, 2, seed=0), X, one_hot(y, 2), TrainConfig(max_epochs=1)
        )
        assert history.epochs == 1
        assert history.stop_reason == "max_epochs"

    def test_best_so_far_loss_nonincreasing(self):
        X, y = xor_data()
        for seed in range(5):
            _, history = scg_train(
                init_model(2, 4, 2, seed=seed), X, one_hot(y, 2), TrainConfig(max_epochs=80)
            )
            best = np.minimum.accumulate(history.losses)
            assert (np.diff(best) <= 0).all()
            assert history.losses[-1] <= history.losses[0]

    def test_retrain_bit_identical(self):
        X, y = xor_data()
        m = init_model(2, 4, 2, seed=3)
        t1, h1 = scg_train(m, X, one_hot(y, 2), TrainConfig(max_epochs=60))
        t2, h2 = scg_train(m, X, one_hot(y, 2), TrainConfig(max_epochs=60))
        assert t1.W1.tobytes() == t2.W1.tobytes()
        assert t1.W2.tobytes() == t2.W2.tobytes()
        assert h1.losses == h2.losses

    def test_goal_loss_stop(self):
        X, y = xor_data()
        _, history = scg_train(
            init_model(2, 4, 2, seed=0),
            X,
            one_hot(y, 2),
            TrainConfig(max_epochs=500, goal_loss=0.05),
        )
        assert history.stop_reason == "goal"
        assert history.losses[-1] <= 0.05

    def test_divergence_carries_history(self):
        # saturated hidden units push one logit past the float ceiling,
        # so the shifted softmax yields inf - inf = NaN
        big = 1e308
        m = MlpModel(
            2, 2, 2,
            np.array([[50.0, 50.0], [50.0, 50.0]]),
            np.zeros(2),
            np.array([[big, big], [-big, -big]]),
            np.zeros(2),
        )
        X, y = xor_data()
        with np.errstate(invalid="ignore", over="ignore"), pytest.raises(
            TrainingDivergedError
        ) as info:
            scg_train(m, X, one_hot(y, 2), TrainConfig(max_epochs=10))
        assert isinstance(info.value.history, TrainHistory)

    def test_preserves_model_metadata(self):
        X, y = xor_data()
        m = init_model(2, 4, 2, seed=3, reducer_ref="abc123", class_names=("u", "v"))
        trained, _ = scg_train(m, X, one_hot(y, 2), TrainConfig(max_epochs=5))
        assert trained.reducer_ref == "abc123"
        assert trained.class_names == ("u", "v")


class TestEvaluateAccuracy:
    def make_pset(self, matrix):
        return PatientSet(
            features=matrix.values,
            labels=np.arange(matrix.n_chemicals),
            class_names=matrix.chemical_names,
            perturb_rate=0.0,
            seed=0,
        )

    def perfect_model(self, n):
        # identity features -> strongly diagonal logits
        return MlpModel(
            n, n, n, 20.0 * np.eye(n), np.zeros(n), 20.0 * np.eye(n), np.zeros(n)
        )

    def test_perfect_model_scores_one(self):
        values = np.eye(4, dtype=int)
        m = synth_matrix(4, 4, seed=0)
        matrix = type(m)(m.chemical_names, m.symptom_names, values)
        reducer = AllFeaturesReducer().fit(matrix)
        assert evaluate_accuracy(self.perfect_model(4), reducer, self.make_pset(matrix)) == 1.0

    def test_permuted_labels_score_zero(self):
        values = np.eye(4, dtype=int)
        m = synth_matrix(4, 4, seed=0)
        matrix = type(m)(m.chemical_names, m.symptom_names, values)
        reducer = AllFeaturesReducer().fit(matrix)
        pset = PatientSet(
            features=values,
            labels=np.array([1, 2, 3, 0]),
            class_names=matrix.chemical_names,
            perturb_rate=0.0,
            seed=0,
        )
        assert evaluate_accuracy(self.perfect_model(4), reducer, pset) == 0.0

    def test_hand_counted_fraction(self):
        # constant predictor always says class 0; 7 of 10 labels are 0
        model = MlpModel(
            2, 1, 2,
            np.zeros((1, 2)), np.zeros(1),
            np.array([[5.0], [-5.0]]), np.array([1.0, 0.0]),
        )
        features = np.zeros((10, 2), dtype=int)
        labels = np.array([0] * 7 + [1] * 3)
        pset = PatientSet(
            features=features,
            labels=labels,
            class_names=("a", "b"),
            perturb_rate=0.0,
            seed=0,
        )
        reducer = AllFeaturesReducer().fit(np.zeros((2, 2)))
        assert evaluate_accuracy(model, reducer, pset) == pytest.approx(0.7)

    def test_reducer_fingerprint_enforced(self):
        m = synth_matrix(5, 4, seed=1)
        reducer = AllFeaturesReducer().fit(m)
        model = init_model(4, 2, 5, seed=0, reducer_ref="not-this-reducer")
        with pytest.raises(ValueError, match="does not match"):
            evaluate_accuracy(model, reducer, self.make_pset(m))
        ok = init_model(4, 2, 5, seed=0, reducer_ref=reducer_fingerprint(reducer))
        evaluate_accuracy(ok, reducer, self.make_pset(m))

    def test_argmax_tie_breaks_low_index(self):
        m = MlpModel(1, 1, 3, np.zeros((1, 1)), np.zeros(1), np.zeros((3, 1)), np.zeros(3))
        probs = forward(m, np.array([[1.0]]))
        assert probs.argmax(axis=1)[0] == 0


class TestSerialization:
    def test_round_trip(self):
        m = init_model(3, 2, 4, seed=5, reducer_ref="r1", class_names=("a", "b", "c", "d"))
        doc = json.loads(json.dumps(model_to_dict(m)))
        again = model_from_dict(doc)
        assert again.W1.tobytes() == m.W1.tobytes()
        assert again.b2.tobytes() == m.b2.tobytes()
        assert again.reducer_ref == "r1"
        assert again.class_names == ("a", "b", "c", "d")

    def test_unknown_version_rejected(self):
        doc = model_to_dict(init_model(2, 2, 2, seed=0))
        doc["format_version"] = 99
        with pytest.raises(ValueError, match="format_version"):
            model_from_dict(doc)


class TestSklearnFrontEnd:
    def test_fit_predict_blobs(self):
        rng = np.random.default_rng(6)
        a = rng.normal(loc=(-2.0, -2.0), scale=0.3, size=(15, 2))
        b = rng.normal(loc=(2.0, 2.0), scale=0.3, size=(15, 2))
        X = np.vstack([a, b])
        y = np.array([0] * 15 + [1] * 15)
        clf = ScgMlpClassifier(hidden_dim=3, max_epochs=150, seed=2).fit(X, y)
        assert clf.score(X, y) == 1.0
        probs = clf.predict_proba(X)
        assert probs.shape == (30, 2)

    def test_absent_classes_stay_predictable(self):
        X = np.array([[0.0], [1.0]])
        y = np.array([0, 2])
        clf = ScgMlpClassifier(hidden_dim=2, n_classes=4, max_epochs=20, seed=0).fit(X, y)
        assert clf.predict_proba(X).shape == (2, 4)
        assert list(clf.classes_) == [0, 1, 2, 3]

    def test_get_params_clone_compatible(self):
        from sklearn.base import clone

        clf = ScgMlpClassifier(hidden_dim=7, max_epochs=12, seed=9)
        other = clone(clf)
        assert other.get_params() == clf.get_params()
