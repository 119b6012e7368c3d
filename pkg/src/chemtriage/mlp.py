"""Single-hidden-layer pattern classifier trained by scaled conjugate
gradient (Moller 1993).

Architecture: tanh hidden layer, softmax output, cross-entropy loss.
Training is full-batch and deterministic given (initial model, data,
config); the optimizer never takes a step that increases the loss, so
the best-so-far training loss is nonincreasing.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

__all__ = [
    "MlpModel",
    "TrainConfig",
    "TrainHistory",
    "TrainingDivergedError",
    "init_model",
    "forward",
    "loss_and_gradient",
    "one_hot",
    "scg_train",
    "evaluate_accuracy",
    "ScgMlpClassifier",
    "model_to_dict",
    "model_from_dict",
]

MODEL_FORMAT_VERSION = 1
_LOG_CLAMP = 1e-12


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss turns non-finite; carries the
    history accumulated so far in ``.history``."""

    def __init__(self, message: str, history: "TrainHistory"):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True, eq=False)
class MlpModel:
    """Weights and topology of a single-hidden-layer classifier."""

    input_dim: int
    hidden_dim: int
    output_dim: int
    W1: np.ndarray  # (hidden, input)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (output, hidden)
    b2: np.ndarray  # (output,)
    reducer_ref: str | None = None
    init_seed: int = 0
    class_names: tuple[str, ...] | None = None

    def __post_init__(self):
        shapes = {
            "W1": (self.hidden_dim, self.input_dim),
            "b1": (self.hidden_dim,),
            "W2": (self.output_dim, self.hidden_dim),
            "b2": (self.output_dim,),
        }
        for name, want in shapes.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != want:
                raise ValueError(f"{name} has shape {arr.shape}, expected {want}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} contains non-finite values")
            object.__setattr__(self, name, arr)

    @property
    def n_parameters(self) -> int:
        return (
            self.W1.size + self.b1.size + self.W2.size + self.b2.size
        )


@dataclass(frozen=True)
class TrainConfig:
    """Stopping rules and scaled-conjugate-gradient constants.

    ``sigma`` scales the finite step used to probe curvature along the
    search direction; ``lambda_init`` seeds the Levenberg-Marquardt
    trust-region scale. Defaults follow the published algorithm.
    """

    max_epochs: int = 1000
    min_gradient_norm: float = 1e-6
    goal_loss: float = 0.0
    sigma: float = 5e-5
    lambda_init: float = 5e-7
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.sigma <= 0.0:
            raise ValueError("sigma must be positive")
        if self.lambda_init < 0.0:
            raise ValueError("lambda_init must be nonnegative")


@dataclass(frozen=True)
class TrainHistory:
    losses: tuple[float, ...]
    stop_reason: str  # max_epochs | gradient | goal

    @property
    def epochs(self) -> int:
        return len(self.losses)


def init_model(
    input_dim: int,
    hidden_dim: int,
    output_dim: int,
    seed: int,
    reducer_ref: str | None = None,
    class_names: tuple[str, ...] | None = None,
) -> MlpModel:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    for name, dim in (
        ("input_dim", input_dim),
        ("hidden_dim", hidden_dim),
        ("output_dim", output_dim),
    ):
        if dim < 1:
            raise ValueError(f"{name} must be >= 1, got {dim}")
    rng = np.random.default_rng(seed)
    lim1 = 1.0 / np.sqrt(input_dim)
    lim2 = 1.0 / np.sqrt(hidden_dim)
    return MlpModel(
        input_dim=input_dim,
        hidden_dim=hidden_dim,
        output_dim=output_dim,
        W1=rng.uniform(-lim1, lim1, size=(hidden_dim, input_dim)),
        b1=np.zeros(hidden_dim),
        W2=rng.uniform(-lim2, lim2, size=(output_dim, hidden_dim)),
        b2=np.zeros(output_dim),
        reducer_ref=reducer_ref,
        init_seed=seed,
        class_names=class_names,
    )


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Class probabilities for one feature row or a stack of rows."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr.reshape(1, -1)
    if arr.shape[1] != model.input_dim:
        raise ValueError(
            f"input has {arr.shape[1]} features, model expects {model.input_dim}"
        )
    if not np.isfinite(arr).all():
        raise ValueError("input contains non-finite values")
    hidden = np.tanh(arr @ model.W1.T + model.b1)
    probs = _softmax(hidden @ model.W2.T + model.b2)
    return probs[0] if single else probs


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must fall in [0, {n_classes})")
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _check_training_data(model: MlpModel, X: np.ndarray, Y: np.ndarray):
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ValueError(
            f"X must be (n, {model.input_dim}), got {X.shape}"
        )
    if Y.shape != (X.shape[0], model.output_dim):
        raise ValueError(
            f"Y must be ({X.shape[0]}, {model.output_dim}), got {Y.shape}"
        )
    if X.shape[0] < 1:
        raise ValueError("need at least one sample")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    row_sums = Y.sum(axis=1)
    if not (np.isin(Y, (0.0, 1.0)).all() and np.allclose(row_sums, 1.0)):
        raise ValueError("Y rows must be one-hot")
    return X, Y


@dataclass(frozen=True)
class Gradient:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray


def loss_and_gradient(
    model: MlpModel, X: np.ndarray, Y: np.ndarray
) -> tuple[float, Gradient]:
    """Mean cross-entropy over the batch and its exact full gradient."""
    X, Y = _check_training_data(model, X, Y)
    loss, grad_vec = _loss_and_grad_flat(_pack(model), model, X, Y)
    W1, b1, W2, b2 = _unpack(grad_vec, model)
    return loss, Gradient(W1=W1, b1=b1, W2=W2, b2=b2)


# ---------------------------------------------------------------------------
# Flat-vector plumbing for the optimizer


def _pack(model: MlpModel) -> np.ndarray:
    return np.concatenate(
        [model.W1.ravel(), model.b1, model.W2.ravel(), model.b2]
    )


def _unpack(vec: np.ndarray, model: MlpModel):
    i, h, o = model.input_dim, model.hidden_dim, model.output_dim
    off = 0
    W1 = vec[off : off + h * i].reshape(h, i)
    off += h * i
    b1 = vec[off : off + h]
    off += h
    W2 = vec[off : off + o * h].reshape(o, h)
    off += o * h
    b2 = vec[off : off + o]
    return W1, b1, W2, b2


def _loss_and_grad_flat(
    vec: np.ndarray, model: MlpModel, X: np.ndarray, Y: np.ndarray
) -> tuple[float, np.ndarray]:
    W1, b1, W2, b2 = _unpack(vec, model)
    n = X.shape[0]

    A1 = np.tanh(X @ W1.T + b1)
    P = _softmax(A1 @ W2.T + b2)
    loss = float(-(Y * np.log(np.maximum(P, _LOG_CLAMP))).sum() / n)

    dZ2 = (P - Y) / n
    gW2 = dZ2.T @ A1
    gb2 = dZ2.sum(axis=0)
    dZ1 = (dZ2 @ W2) * (1.0 - A1**2)
    gW1 = dZ1.T @ X
    gb1 = dZ1.sum(axis=0)
    grad = np.concatenate([gW1.ravel(), gb1, gW2.ravel(), gb2])
    return loss, grad


def scg_train(
    model: MlpModel,
    X: np.ndarray,
    Y: np.ndarray,
    config: TrainConfig = TrainConfig(),
) -> tuple[MlpModel, TrainHistory]:
    """Full-batch scaled conjugate gradient training.

    Each epoch is one SCG iteration: curvature along the current search
    direction is probed with a one-sided gradient difference at step
    sigma/|p|, the Levenberg-Marquardt scale is raised when the
    comparison parameter falls below 0.25 and quartered above 0.75, the
    direction restarts to steepest descent every n_parameters
    iterations, and weights move only on iterations that reduce the
    loss. Stops at max_epochs, when the gradient norm drops below
    ``min_gradient_norm``, or when the loss reaches ``goal_loss``.
    """
    X, Y = _check_training_data(model, X, Y)
    n_params = model.n_parameters

    def evaluate(w: np.ndarray) -> tuple[float, np.ndarray]:
        return _loss_and_grad_flat(w, model, X, Y)

    w = _pack(model)
    losses: list[float] = []

    def diverged(msg: str):
        return TrainingDivergedError(
            msg, TrainHistory(losses=tuple(losses), stop_reason="diverged")
        )

    loss, grad = evaluate(w)
    if not np.isfinite(loss):
        raise diverged("initial loss is not finite")

    r = -grad
    p = r.copy()
    lam = config.lambda_init
    lam_bar = 0.0
    success = True
    delta = 0.0
    stop_reason = "max_epochs"

    for k in range(1, config.max_epochs + 1):
        p_sq = float(p @ p)
        if p_sq == 0.0:
            stop_reason = "gradient"
            break

        if success:
            sigma_k = config.sigma / np.sqrt(p_sq)
            _, grad_probe = evaluate(w + sigma_k * p)
            s = (grad_probe - grad) / sigma_k
            delta = float(p @ s)

        delta = delta + (lam - lam_bar) * p_sq
        if delta <= 0.0:  # force positive definiteness
            lam_bar = 2.0 * (lam - delta / p_sq)
            delta = -delta + lam * p_sq
            lam = lam_bar

        mu = float(p @ r)
        if mu == 0.0:  # direction orthogonal to the gradient: restart
            p = r.copy()
            success = True
            losses.append(loss)
            if float(r @ r) ** 0.5 < config.min_gradient_norm:
                stop_reason = "gradient"
                break
            continue
        alpha = mu / delta

        cand = w + alpha * p
        loss_cand, grad_cand = evaluate(cand)
        if not np.isfinite(loss_cand):
            losses.append(loss_cand)
            raise diverged(f"loss became non-finite at epoch {k}")
        comparison = 2.0 * delta * (loss - loss_cand) / mu**2

        if comparison >= 0.0:
            w = cand
            loss = loss_cand
            grad = grad_cand
            r_new = -grad
            lam_bar = 0.0
            success = True
            if k % n_params == 0:
                p = r_new.copy()
            else:
                beta = float(r_new @ r_new - r_new @ r) / mu
                p = r_new + beta * p
            r = r_new
            if comparison >= 0.75:
                lam = 0.25 * lam
        else:
            lam_bar = lam
            success = False

        if comparison < 0.25:
            lam = lam + delta * (1.0 - comparison) / p_sq

        losses.append(loss)
        if loss <= config.goal_loss:
            stop_reason = "goal"
            break
        if float(r @ r) ** 0.5 < config.min_gradient_norm:
            stop_reason = "gradient"
            break

    W1, b1, W2, b2 = (a.copy() for a in _unpack(w, model))
    trained = replace(model, W1=W1, b1=b1, W2=W2, b2=b2)
    return trained, TrainHistory(losses=tuple(losses), stop_reason=stop_reason)


def evaluate_accuracy(model: MlpModel, reducer, p) -> float:
    """Fraction of patient rows whose argmax prediction matches the label.

    Rows pass through the reducer first; argmax ties resolve to the
    lowest class index. When the model records the reducer it was
    trained with, a mismatched reducer is rejected.
    """
    from chemtriage.reduction import reducer_fingerprint

    if model.reducer_ref is not None:
        actual = reducer_fingerprint(reducer)
        if actual != model.reducer_ref:
            raise ValueError(
                f"reducer {actual} does not match the model's expected "
                f"reducer {model.reducer_ref}"
            )
    reduced = reducer.transform(p.features.astype(np.float64))
    probs = forward(model, reduced)
    predictions = probs.argmax(axis=1)
    return float((predictions == p.labels).mean())


# ---------------------------------------------------------------------------
# Serialization


def model_to_dict(model: MlpModel) -> dict:
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "input_dim": model.input_dim,
        "hidden_dim": model.hidden_dim,
        "output_dim": model.output_dim,
        "W1": [float(x) for x in model.W1.ravel()],
        "b1": [float(x) for x in model.b1],
        "W2": [float(x) for x in model.W2.ravel()],
        "b2": [float(x) for x in model.b2],
        "reducer_ref": model.reducer_ref,
        "init_seed": model.init_seed,
        "class_names": list(model.class_names) if model.class_names else None,
    }


def model_from_dict(doc: dict) -> MlpModel:
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ValueError(
            f"unsupported model format_version {version!r}; "
            f"this build reads version {MODEL_FORMAT_VERSION}"
        )
    i, h, o = int(doc["input_dim"]), int(doc["hidden_dim"]), int(doc["output_dim"])
    names = doc.get("class_names")
    return MlpModel(
        input_dim=i,
        hidden_dim=h,
        output_dim=o,
        W1=np.asarray(doc["W1"], dtype=np.float64).reshape(h, i),
        b1=np.asarray(doc["b1"], dtype=np.float64),
        W2=np.asarray(doc["W2"], dtype=np.float64).reshape(o, h),
        b2=np.asarray(doc["b2"], dtype=np.float64),
        reducer_ref=doc.get("reducer_ref"),
        init_seed=int(doc.get("init_seed", 0)),
        class_names=tuple(names) if names else None,
    )


class ScgMlpClassifier(BaseEstimator, ClassifierMixin):
    """sklearn-style front end over the SCG-trained network.

    Labels are class indices. ``n_classes`` fixes the output width even
    when some classes are absent from the training rows (they remain
    predictable targets); left to None it is inferred as max(y) + 1.
    """

    def __init__(
        self,
        hidden_dim: int = 40,
        n_classes: int | None = None,
        max_epochs: int = 1000,
        min_gradient_norm: float = 1e-6,
        goal_loss: float = 0.0,
        sigma: float = 5e-5,
        lambda_init: float = 5e-7,
        seed: int = 0,
    ):
        self.hidden_dim = hidden_dim
        self.n_classes = n_classes
        self.max_epochs = max_epochs
        self.min_gradient_norm = min_gradient_norm
        self.goal_loss = goal_loss
        self.sigma = sigma
        self.lambda_init = lambda_init
        self.seed = seed

    def _config(self) -> TrainConfig:
        return TrainConfig(
            max_epochs=self.max_epochs,
            min_gradient_norm=self.min_gradient_norm,
            goal_loss=self.goal_loss,
            sigma=self.sigma,
            lambda_init=self.lambda_init,
            seed=self.seed,
        )

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 2:
            raise ValueError("X must be 2-dimensional")
        if y.shape != (X.shape[0],):
            raise ValueError("y must be one label per row of X")
        n_classes = self.n_classes if self.n_classes is not None else int(y.max()) + 1
        model = init_model(X.shape[1], self.hidden_dim, n_classes, seed=self.seed)
        self.model_, self.history_ = scg_train(
            model, X, one_hot(y, n_classes), self._config()
        )
        self.classes_ = np.arange(n_classes)
        return self

    def predict_proba(self, X) -> np.ndarray:
        return forward(self.model_, np.asarray(X, dtype=np.float64))

    def predict(self, X) -> np.ndarray:
        probs = self.predict_proba(np.atleast_2d(np.asarray(X, dtype=np.float64)))
        return probs.argmax(axis=1)
