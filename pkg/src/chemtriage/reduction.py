"""Dimension-reduction transformers for binary symptom profiles.

Four techniques reduce the symptom columns to k features: alphabetical
first-k / random-k selection, highest-variance selection, greedy
least-correlated selection, and PCA via singular value decomposition.
All are sklearn-style estimators (fit/transform/get_params) so they
compose with pipelines; fitted reducers are immutable in practice and
serialize to a small JSON document.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from chemtriage.corpus import SymptomMatrix

__all__ = [
    "covariance_matrix",
    "pearson_matrix",
    "AllFeaturesReducer",
    "AlphabeticalSelector",
    "RandomSubsetSelector",
    "VarianceSelector",
    "CorrelationSelector",
    "PcaReducer",
    "fit_reducer",
    "reducer_to_dict",
    "reducer_from_dict",
    "reducer_fingerprint",
    "TECHNIQUES",
]


def _as_float_matrix(X, min_rows: int = 1) -> tuple[np.ndarray, tuple[str, ...] | None]:
    """Accept a SymptomMatrix or a plain 2-D array; return (float array, names)."""
    if isinstance(X, SymptomMatrix):
        return X.values.astype(np.float64), X.symptom_names
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("matrix entries must be finite")
    if arr.shape[0] < min_rows:
        raise ValueError(f"need at least {min_rows} rows, got {arr.shape[0]}")
    return arr, None


def covariance_matrix(m) -> np.ndarray:
    """Sample covariance of the symptom columns (N-1 denominator).

    C[a, b] = sum_i (A_i - mean_A)(B_i - mean_B) / (N - 1). The diagonal
    is the per-column sample variance.
    """
    X, _ = _as_float_matrix(m)
    n = X.shape[0]
    if n < 2:
        raise ValueError("covariance needs at least 2 rows")
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    return (cov + cov.T) / 2.0  # exact symmetry


def pearson_matrix(m) -> np.ndarray:
    """Pearson correlation of the symptom columns.

    Entries involving a zero-variance column are NaN (undefined), never
    silently zero. Raises if every column is constant.
    """
    cov = covariance_matrix(m)
    var = np.diag(cov).copy()
    dead = var <= 0.0
    if dead.all():
        raise ValueError("all columns are constant; correlation is undefined")
    scale = np.sqrt(var)
    scale[dead] = np.nan
    r = np.clip(cov / np.outer(scale, scale), -1.0, 1.0)  # NaN passes through
    np.fill_diagonal(r, np.where(dead, np.nan, 1.0))
    return r


class _BaseReducer(BaseEstimator, TransformerMixin):
    """Shared transform/validation logic for the fitted reducers."""

    kind: str = ""

    def _store_input(self, X) -> np.ndarray:
        arr, names = _as_float_matrix(X)
        self.n_features_in_ = arr.shape[1]
        self.symptom_names_ = names
        return arr

    def _validate_k(self, k: int, p: int) -> None:
        if not 1 <= k <= p:
            raise ValueError(f"k must be in [1, {p}], got {k}")

    def _check_rows(self, rows) -> np.ndarray:
        check_is_fitted(self)
        arr = np.asarray(rows, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2 or arr.shape[1] != self.n_features_in_:
            raise ValueError(
                f"rows have {arr.shape[-1] if arr.ndim else 0} columns, "
                f"reducer was fitted on {self.n_features_in_}"
            )
        return arr

    @property
    def output_dim(self) -> int:
        check_is_fitted(self)
        return self.k_


class _SubsetReducer(_BaseReducer):
    """Reducers that keep a subset of the original columns."""

    def transform(self, X) -> np.ndarray:
        arr = self._check_rows(X)
        return arr[:, self.selected_columns_]


class AllFeaturesReducer(_SubsetReducer):
    """Identity selection: keep every column (the sweep baseline)."""

    kind = "all_features"

    def fit(self, X, y=None):
        arr = self._store_input(X)
        self.selected_columns_ = np.arange(arr.shape[1])
        self.k_ = arr.shape[1]
        return self


class AlphabeticalSelector(_SubsetReducer):
    """Keep the first k symptoms in case-insensitive alphabetical order."""

    kind = "first_k"

    def __init__(self, k: int = 40):
        self.k = k

    def fit(self, X, y=None):
        arr = self._store_input(X)
        if self.symptom_names_ is None:
            raise ValueError(
                "alphabetical selection needs symptom names; fit on a SymptomMatrix"
            )
        self._validate_k(self.k, arr.shape[1])
        order = sorted(
            range(arr.shape[1]),
            key=lambda j: (self.symptom_names_[j].lower(), self.symptom_names_[j]),
        )
        self.selected_columns_ = np.sort(np.array(order[: self.k]))
        self.k_ = self.k
        return self


class RandomSubsetSelector(_SubsetReducer):
    """Keep a uniform random k-subset of columns, fixed by the seed."""

    kind = "random_k"

    def __init__(self, k: int = 40, seed: int = 0):
        self.k = k
        self.seed = seed

    def fit(self, X, y=None):
        arr = self._store_input(X)
        self._validate_k(self.k, arr.shape[1])
        rng = np.random.default_rng(self.seed)
        cols = rng.choice(arr.shape[1], size=self.k, replace=False)
        self.selected_columns_ = np.sort(cols)
        self.k_ = self.k
        return self


class VarianceSelector(_SubsetReducer):
    """Keep the k columns with the largest sample variance.

    Ties break toward the lower column index; the selection is invariant
    to row order.
    """

    kind = "variance"

    def __init__(self, k: int = 40):
        self.k = k

    def fit(self, X, y=None):
        arr = self._store_input(X)
        self._validate_k(self.k, arr.shape[1])
        if arr.shape[0] < 2:
            raise ValueError("variance selection needs at least 2 rows")
        variances = np.diag(covariance_matrix(arr))
        order = np.argsort(-variances, kind="stable")
        self.variances_ = variances
        self.selected_columns_ = np.sort(order[: self.k])
        self.k_ = self.k
        return self


class CorrelationSelector(_SubsetReducer):
    """Greedy elimination of the most-correlated columns until k remain.

    Zero-variance columns (undefined correlations) are eliminated first.
    Then, repeatedly, the surviving pair with maximal |r| is found and
    the member with the larger mean |r| against the other survivors is
    dropped (ties drop the higher index). ``max_surviving_abs_r_``
    records the largest surviving pairwise |r| so callers can compare it
    with a target threshold such as the 0.4555 cutoff.
    """

    kind = "correlation"

    def __init__(self, k: int = 40, threshold: float | None = None):
        self.k = k
        self.threshold = threshold

    def fit(self, X, y=None):
        arr = self._store_input(X)
        p = arr.shape[1]
        self._validate_k(self.k, p)
        if arr.shape[0] < 2:
            raise ValueError("correlation selection needs at least 2 rows")

        variances = np.diag(covariance_matrix(arr))
        if (variances > 0).sum() == 0 and self.k < p:
            raise ValueError("all columns are constant; correlation is undefined")

        surviving = list(range(p))
        dropped_zero_variance: list[int] = []
        # undefined correlations go first, highest index first
        while len(surviving) > self.k:
            dead = [j for j in surviving if variances[j] <= 0.0]
            if not dead:
                break
            victim = max(dead)
            surviving.remove(victim)
            dropped_zero_variance.append(victim)

        if len(surviving) > self.k:
            r = np.abs(pearson_matrix(arr[:, surviving]))
            np.fill_diagonal(r, 0.0)
            iu = np.triu_indices(len(surviving), k=1)
            alive = np.ones(len(surviving), dtype=bool)
            while alive.sum() > self.k:
                masked = r.copy()
                masked[~alive, :] = -1.0
                masked[:, ~alive] = -1.0
                best = int(np.argmax(masked[iu]))  # ties: first pair in row-major order
                a, b = int(iu[0][best]), int(iu[1][best])
                others_a = alive.copy()
                others_a[a] = False
                others_b = alive.copy()
                others_b[b] = False
                mean_a = r[a, others_a].mean()
                mean_b = r[b, others_b].mean()
                if mean_a > mean_b:
                    victim = a
                elif mean_b > mean_a:
                    victim = b
                else:
                    victim = max(a, b)
                alive[victim] = False
            kept = [surviving[i] for i in np.where(alive)[0]]
            sub_r = r[np.ix_(np.where(alive)[0], np.where(alive)[0])]
            max_r = float(sub_r.max()) if len(kept) > 1 else 0.0
        else:
            kept = surviving
            if len(kept) > 1 and (variances[kept] > 0).all():
                sub = np.abs(pearson_matrix(arr[:, kept]))
                np.fill_diagonal(sub, 0.0)
                max_r = float(sub.max())
            else:
                max_r = float("nan") if len(kept) > 1 else 0.0

        self.dropped_zero_variance_ = tuple(dropped_zero_variance)
        self.max_surviving_abs_r_ = max_r
        self.selected_columns_ = np.sort(np.array(kept, dtype=int))
        self.k_ = self.k
        return self


class PcaReducer(_BaseReducer):
    """Centered linear projection onto the top-k right singular vectors.

    The fit computes a thin SVD of the (optionally column-mean-centered)
    matrix. Sign convention: each projection column's largest-magnitude
    entry is positive, so projections reproduce across runs and
    platforms. ``variance_explained_`` covers every component
    (singular value squared over their total), not just the kept k.
    """

    kind = "pca"

    def __init__(self, k: int = 40, center: bool = True):
        self.k = k
        self.center = center

    def fit(self, X, y=None):
        arr = self._store_input(X)
        n, p = arr.shape
        limit = min(n - 1, p) if self.center else min(n, p)
        if not 1 <= self.k <= limit:
            raise ValueError(f"k must be in [1, {limit}] for this matrix, got {self.k}")

        means = arr.mean(axis=0) if self.center else np.zeros(p)
        centered = arr - means
        u, s, vt = np.linalg.svd(centered, full_matrices=False)
        v = vt.T

        # fixed sign convention, applied to every component
        flip = np.sign(v[np.argmax(np.abs(v), axis=0), np.arange(v.shape[1])])
        flip[flip == 0] = 1.0
        v = v * flip

        total = float((s**2).sum())
        if total <= 0.0:
            raise ValueError("matrix has no variance; PCA is undefined")
        explained = s**2 / total

        tol = max(n, p) * np.finfo(np.float64).eps * float(s[0])
        self.column_means_ = means
        self.projection_ = v[:, : self.k]
        self.singular_values_ = s
        self.variance_explained_ = explained
        self.cumulative_explained_ = np.cumsum(explained)
        self.null_variance_components_ = tuple(
            int(j) for j in range(self.k) if s[j] <= tol
        )
        self.k_ = self.k
        return self

    def transform(self, X) -> np.ndarray:
        arr = self._check_rows(X)
        return (arr - self.column_means_) @ self.projection_


TECHNIQUES = ("all", "first", "random", "variance", "correlation", "pca")

_KIND_BY_TECHNIQUE = {
    "all": "all_features",
    "first": "first_k",
    "random": "random_k",
    "variance": "variance",
    "correlation": "correlation",
    "pca": "pca",
}


def fit_reducer(
    technique: str,
    m,
    k: int = 40,
    seed: int | None = None,
    threshold: float | None = None,
    center: bool = True,
):
    """Fit the reducer for a named technique on a corpus matrix."""
    if technique == "all":
        reducer = AllFeaturesReducer()
    elif technique == "first":
        reducer = AlphabeticalSelector(k=k)
    elif technique == "random":
        if seed is None:
            raise ValueError("random selection requires a seed")
        reducer = RandomSubsetSelector(k=k, seed=seed)
    elif technique == "variance":
        reducer = VarianceSelector(k=k)
    elif technique == "correlation":
        reducer = CorrelationSelector(k=k, threshold=threshold)
    elif technique == "pca":
        reducer = PcaReducer(k=k, center=center)
    else:
        raise ValueError(
            f"unknown technique {technique!r}; expected one of {TECHNIQUES}"
        )
    return reducer.fit(m)


# ---------------------------------------------------------------------------
# Serialization


def reducer_to_dict(reducer) -> dict:
    check_is_fitted(reducer)
    doc: dict = {
        "kind": reducer.kind,
        "k": int(reducer.k_),
        "seed": getattr(reducer, "seed", None),
        "threshold": getattr(reducer, "threshold", None),
        "symptom_names": (
            list(reducer.symptom_names_) if reducer.symptom_names_ else None
        ),
    }
    if isinstance(reducer, _SubsetReducer):
        doc["selected_columns"] = [int(c) for c in reducer.selected_columns_]
    else:
        doc["projection"] = [float(x) for x in reducer.projection_.ravel()]
        doc["column_means"] = [float(x) for x in reducer.column_means_]
    return doc


def reducer_from_dict(doc: dict):
    kind = doc.get("kind")
    k = int(doc["k"])
    names = doc.get("symptom_names")

    if kind == "pca":
        means = np.asarray(doc["column_means"], dtype=np.float64)
        p = means.shape[0]
        reducer = PcaReducer(k=k, center=bool(np.any(means != 0.0)))
        reducer.projection_ = np.asarray(
            doc["projection"], dtype=np.float64
        ).reshape(p, k)
        reducer.column_means_ = means
        reducer.n_features_in_ = p
    else:
        classes = {
            "all_features": AllFeaturesReducer,
            "first_k": AlphabeticalSelector,
            "random_k": RandomSubsetSelector,
            "variance": VarianceSelector,
            "correlation": CorrelationSelector,
        }
        if kind not in classes:
            raise ValueError(f"unknown reducer kind {kind!r}")
        cls = classes[kind]
        if kind == "all_features":
            reducer = cls()
        elif kind == "random_k":
            reducer = cls(k=k, seed=doc.get("seed") or 0)
        elif kind == "correlation":
            reducer = cls(k=k, threshold=doc.get("threshold"))
        else:
            reducer = cls(k=k)
        cols = np.asarray(doc["selected_columns"], dtype=int)
        if len(cols) != k:
            raise ValueError("selected_columns length does not match k")
        reducer.selected_columns_ = cols
        if names is None:
            raise ValueError("reducer document is missing symptom_names")
        reducer.n_features_in_ = len(names)

    reducer.k_ = k
    reducer.symptom_names_ = tuple(names) if names else None
    if names is not None and kind == "pca":
        reducer.n_features_in_ = len(names)
    return reducer


def reducer_fingerprint(reducer) -> str:
    """Stable identifier of a fitted reducer, for model/reducer pairing."""
    text = json.dumps(reducer_to_dict(reducer), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]
