"""Benchmark harness: hidden-size sweeps across reduction techniques,
replication curves, and the aggregate tables / plot data they feed.

Every model in the grid gets its own seed derived by a stable hash of
(base_seed, technique, hidden_size, replicate), so any single cell can
be reproduced in isolation and the whole report is a pure function of
(matrix, spec).
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from chemtriage.corpus import (
    PatientSet,
    SymptomMatrix,
    deduplicate_profiles,
    generate_patient_set,
    replicate_rows,
    split_train_test,
)
from chemtriage.mlp import (
    TrainConfig,
    TrainingDivergedError,
    forward,
    init_model,
    one_hot,
    scg_train,
)
from chemtriage.reduction import TECHNIQUES, fit_reducer

__all__ = [
    "SweepSpec",
    "CellResult",
    "ReplicationPoint",
    "SweepReport",
    "Table",
    "derive_seed",
    "rate_series",
    "replication_curve",
    "run_sweep",
    "summarize_tables",
    "emit_plot_data",
    "write_plot_csv",
    "report_to_json",
    "report_from_json",
]

log = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = 1

SERIES_TRAIN = "train"
SERIES_CLEAN = "clean"


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from a tuple of printable parts."""
    text = "/".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")


def rate_series(rate: float) -> str:
    return f"rate_{rate:g}"


@dataclass(frozen=True)
class SweepSpec:
    """What to sweep: techniques x hidden sizes x replicates, plus how
    the corpus is replicated, split, and perturbed."""

    techniques: tuple[str, ...] = ("all", "first", "variance", "correlation", "pca")
    hidden_sizes: tuple[int, ...] = tuple(range(10, 101, 10))
    models_per_size: int = 10
    replication_factor: int = 5
    train_fraction: float = 0.7
    perturb_rates: tuple[float, ...] = (0.05, 0.10, 0.15)
    copies_per_chemical: int = 100
    k: int = 40
    base_seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    replication_factors: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "techniques", tuple(self.techniques))
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        object.__setattr__(self, "perturb_rates", tuple(float(r) for r in self.perturb_rates))
        if self.replication_factors is not None:
            object.__setattr__(
                self, "replication_factors", tuple(int(f) for f in self.replication_factors)
            )
        if not self.techniques:
            raise ValueError("techniques must be nonempty")
        for t in self.techniques:
            if t not in TECHNIQUES:
                raise ValueError(f"unknown technique {t!r}; expected one of {TECHNIQUES}")
        if len(set(self.techniques)) != len(self.techniques):
            raise ValueError("techniques must be distinct")
        if not self.hidden_sizes:
            raise ValueError("hidden_sizes must be nonempty")
        if any(b <= a for a, b in zip(self.hidden_sizes, self.hidden_sizes[1:])):
            raise ValueError("hidden_sizes must be strictly ascending")
        if any(h < 1 for h in self.hidden_sizes):
            raise ValueError("hidden sizes must be >= 1")
        if self.models_per_size < 1:
            raise ValueError("models_per_size must be >= 1")
        if self.replication_factor < 1:
            raise ValueError("replication_factor must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be strictly between 0 and 1")
        if any(not 0.0 <= r <= 1.0 for r in self.perturb_rates):
            raise ValueError("perturb rates must lie in [0, 1]")
        if self.copies_per_chemical < 1:
            raise ValueError("copies_per_chemical must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @property
    def series_names(self) -> tuple[str, ...]:
        return (SERIES_TRAIN, SERIES_CLEAN) + tuple(
            rate_series(r) for r in self.perturb_rates
        )

    @property
    def plot_series(self) -> tuple[str, ...]:
        """Series shown in accuracy plots: clean test plus each rate."""
        return (SERIES_CLEAN,) + tuple(rate_series(r) for r in self.perturb_rates)


@dataclass(frozen=True)
class CellResult:
    """One trained model's accuracies, or its failure record."""

    technique: str
    hidden_size: int
    replicate: int
    seed: int
    metrics: dict | None  # series name -> accuracy
    final_loss: float | None
    epochs: int | None
    stop_reason: str | None
    diverged: bool = False
    error: str | None = None


@dataclass(frozen=True)
class ReplicationPoint:
    factor: int
    accuracies: tuple[float, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))


@dataclass(frozen=True)
class ReplicationCurve:
    hidden_size: int
    models: int
    points: tuple[ReplicationPoint, ...]


@dataclass(frozen=True)
class SweepReport:
    spec: SweepSpec
    n_classes: int
    cells: tuple[CellResult, ...]
    per_size: dict  # (technique, hidden_size) -> {"n": int, series: (mean, std)}
    per_technique: dict  # technique -> {series: (mean, std over sizes)}
    best_hidden: dict  # technique -> hidden size
    replication: ReplicationCurve | None = None

    @classmethod
    def build(cls, spec, n_classes, cells, replication=None) -> "SweepReport":
        per_size: dict = {}
        for tech in spec.techniques:
            for size in spec.hidden_sizes:
                ok = [
                    c
                    for c in cells
                    if c.technique == tech and c.hidden_size == size and not c.diverged
                ]
                if not ok:
                    continue
                entry: dict = {"n": len(ok)}
                for series in spec.series_names:
                    vals = np.array([c.metrics[series] for c in ok])
                    entry[series] = (float(vals.mean()), float(vals.std()))
                per_size[(tech, size)] = entry

        per_technique: dict = {}
        best_hidden: dict = {}
        for tech in spec.techniques:
            sizes = [s for s in spec.hidden_sizes if (tech, s) in per_size]
            if not sizes:
                continue
            agg: dict = {}
            for series in spec.series_names:
                means = np.array([per_size[(tech, s)][series][0] for s in sizes])
                agg[series] = (float(means.mean()), float(means.std()))
            per_technique[tech] = agg
            best_hidden[tech] = max(
                sizes, key=lambda s: (per_size[(tech, s)][SERIES_CLEAN][0], -s)
            )

        return cls(
            spec=spec,
            n_classes=n_classes,
            cells=tuple(cells),
            per_size=per_size,
            per_technique=per_technique,
            best_hidden=best_hidden,
            replication=replication,
        )


# ---------------------------------------------------------------------------
# Execution


def _train_and_score(
    hidden_size: int,
    seed: int,
    X_train: np.ndarray,
    y_train: np.ndarray,
    eval_sets: dict,
    n_classes: int,
    train_config: TrainConfig,
) -> tuple[dict, float, int, str]:
    model = init_model(X_train.shape[1], hidden_size, n_classes, seed=seed)
    trained, history = scg_train(
        model, X_train, one_hot(y_train, n_classes), train_config
    )
    metrics = {
        SERIES_TRAIN: float(
            (forward(trained, X_train).argmax(axis=1) == y_train).mean()
        )
    }
    for series, (X_eval, y_eval) in eval_sets.items():
        metrics[series] = float(
            (forward(trained, X_eval).argmax(axis=1) == y_eval).mean()
        )
    final_loss = history.losses[-1] if history.losses else float("nan")
    return metrics, final_loss, history.epochs, history.stop_reason


def replication_curve(
    m: SymptomMatrix,
    factors,
    hidden_size: int = 40,
    models: int = 10,
    train_fraction: float = 0.7,
    train: TrainConfig = TrainConfig(),
    base_seed: int = 0,
) -> ReplicationCurve:
    """Mean clean-test accuracy as a function of the replication factor.

    All symptom columns are used; each factor gets its own 70/30 split
    of the factor-replicated corpus and ``models`` independently seeded
    models.
    """
    factors = tuple(int(f) for f in factors)
    if any(f < 1 for f in factors):
        raise ValueError("replication factors must be >= 1")
    matrix, _ = deduplicate_profiles(m)
    n_classes = matrix.n_chemicals

    points = []
    for factor in factors:
        replicated = replicate_rows(matrix, factor)
        train_set, test_set = split_train_test(
            replicated, train_fraction, derive_seed(base_seed, "replication_split", factor)
        )
        X_train = train_set.features.astype(np.float64)
        X_test = test_set.features.astype(np.float64)
        accuracies = []
        for rep in range(models):
            seed = derive_seed(base_seed, "replication", factor, rep)
            try:
                metrics, *_ = _train_and_score(
                    hidden_size,
                    seed,
                    X_train,
                    train_set.labels,
                    {SERIES_CLEAN: (X_test, test_set.labels)},
                    n_classes,
                    train,
                )
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(
                    f"training diverged at factor {factor}, seed {seed}: {exc}",
                    exc.history,
                ) from exc
            accuracies.append(metrics[SERIES_CLEAN])
        points.append(ReplicationPoint(factor=factor, accuracies=tuple(accuracies)))
    return ReplicationCurve(hidden_size=hidden_size, models=models, points=tuple(points))


def run_sweep(m: SymptomMatrix, spec: SweepSpec, workers: int = 1) -> SweepReport:
    """Train the full (technique x hidden size x replicate) grid.

    The input corpus is deduplicated, replicated, and split once; each
    technique's reducer is fitted once on the deduplicated matrix and
    reused everywhere, including on the perturbed test sets (perturbation
    happens in the original symptom space). Divergent cells are recorded
    and excluded from aggregates; the sweep continues.
    """
    if spec.k > m.n_symptoms:
        raise ValueError(
            f"k={spec.k} exceeds the corpus symptom count {m.n_symptoms}"
        )
    matrix, _ = deduplicate_profiles(m)
    n_classes = matrix.n_chemicals

    replicated = replicate_rows(matrix, spec.replication_factor)
    train_set, test_set = split_train_test(
        replicated, spec.train_fraction, derive_seed(spec.base_seed, "split")
    )
    perturbed: dict[str, PatientSet] = {
        rate_series(rate): generate_patient_set(
            matrix,
            spec.copies_per_chemical,
            rate,
            derive_seed(spec.base_seed, "perturb", rate),
        )
        for rate in spec.perturb_rates
    }

    cells: list[CellResult] = []
    for tech in spec.techniques:
        log.info(
            "sweep technique %s: %d sizes x %d replicates",
            tech, len(spec.hidden_sizes), spec.models_per_size,
        )
        reducer = fit_reducer(
            tech,
            matrix,
            k=spec.k,
            seed=derive_seed(spec.base_seed, "reducer", tech),
        )
        X_train = reducer.transform(train_set.features)
        eval_sets = {
            SERIES_CLEAN: (reducer.transform(test_set.features), test_set.labels)
        }
        for series, pset in perturbed.items():
            eval_sets[series] = (reducer.transform(pset.features), pset.labels)

        def run_cell(job: tuple[int, int]) -> CellResult:
            size, rep = job
            seed = derive_seed(spec.base_seed, tech, size, rep)
            try:
                metrics, final_loss, epochs, stop_reason = _train_and_score(
                    size, seed, X_train, train_set.labels, eval_sets, n_classes, spec.train
                )
            except TrainingDivergedError as exc:
                return CellResult(
                    technique=tech,
                    hidden_size=size,
                    replicate=rep,
                    seed=seed,
                    metrics=None,
                    final_loss=None,
                    epochs=exc.history.epochs,
                    stop_reason=None,
                    diverged=True,
                    error=str(exc),
                )
            return CellResult(
                technique=tech,
                hidden_size=size,
                replicate=rep,
                seed=seed,
                metrics=metrics,
                final_loss=final_loss,
                epochs=epochs,
                stop_reason=stop_reason,
            )

        jobs = [
            (size, rep)
            for size in spec.hidden_sizes
            for rep in range(spec.models_per_size)
        ]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                cells.extend(pool.map(run_cell, jobs))
        else:
            cells.extend(run_cell(job) for job in jobs)

    replication = None
    if spec.replication_factors:
        replication = replication_curve(
            matrix,
            spec.replication_factors,
            hidden_size=spec.hidden_sizes[0],
            models=spec.models_per_size,
            train_fraction=spec.train_fraction,
            train=spec.train,
            base_seed=spec.base_seed,
        )

    return SweepReport.build(spec, n_classes, cells, replication)


# ---------------------------------------------------------------------------
# Tables and plot data


@dataclass(frozen=True)
class Table:
    header: tuple[str, ...]
    rows: tuple[tuple, ...]

    def to_csv(self) -> str:
        lines = [",".join(self.header)]
        lines.extend(",".join(str(v) for v in row) for row in self.rows)
        return "\n".join(lines) + "\n"


def _pct(v: float) -> str:
    return f"{100.0 * v:.1f}"


def summarize_tables(report: SweepReport) -> tuple[Table, Table]:
    """Per-technique overall averages, and averages at each technique's
    best-performing hidden size (analogous to the paper-style summary)."""
    spec = report.spec
    if not report.cells:
        raise ValueError("report has no cells to summarize")
    for tech in spec.techniques:
        if tech not in report.per_technique:
            raise ValueError(
                f"technique {tech!r} has no usable cells (all diverged)"
            )

    rate_headers = tuple(f"{100 * r:g}%" for r in spec.perturb_rates)
    overall_rows = []
    best_rows = []
    for tech in spec.techniques:
        agg = report.per_technique[tech]
        overall_rows.append(
            (tech, _pct(agg[SERIES_CLEAN][0]))
            + tuple(_pct(agg[rate_series(r)][0]) for r in spec.perturb_rates)
        )
        best = report.best_hidden[tech]
        size_agg = report.per_size[(tech, best)]
        best_rows.append(
            (tech, best, _pct(size_agg[SERIES_CLEAN][0]))
            + tuple(_pct(size_agg[rate_series(r)][0]) for r in spec.perturb_rates)
        )

    overall = Table(
        header=("technique", "training") + rate_headers,
        rows=tuple(overall_rows),
    )
    best_table = Table(
        header=("technique", "best_hidden", "training") + rate_headers,
        rows=tuple(best_rows),
    )
    return overall, best_table


PLOT_HEADER = ("technique", "hidden_size", "series", "mean", "std")
PLOT_VIEWS = ("fig4", "fig8", "fig9", "fig10")


def emit_plot_data(report: SweepReport, which: str, techniques=None) -> list[tuple]:
    """Long-format plot rows (technique, hidden_size, series, mean, std).

    fig8 and fig9 carry the per-hidden-size curves (grouped by technique
    and by test set respectively when plotted); fig10 carries the
    per-technique overall averages; fig4 carries the replication curve
    when the report includes one.
    """
    if which not in PLOT_VIEWS:
        raise ValueError(f"unknown plot view {which!r}; expected one of {PLOT_VIEWS}")
    spec = report.spec
    if techniques is None:
        techniques = spec.techniques
    else:
        techniques = tuple(techniques)
        if not techniques:
            raise ValueError("technique filter must not be empty")
        unknown = [t for t in techniques if t not in spec.techniques]
        if unknown:
            raise ValueError(f"techniques not present in report: {unknown}")

    if which == "fig4":
        if report.replication is None:
            raise ValueError("report does not include a replication curve")
        return [
            ("all", report.replication.hidden_size, f"factor_{pt.factor}", pt.mean, pt.std)
            for pt in report.replication.points
        ]

    rows: list[tuple] = []
    if which in ("fig8", "fig9"):
        for tech in techniques:
            for size in spec.hidden_sizes:
                entry = report.per_size.get((tech, size))
                if entry is None:
                    continue
                for series in spec.plot_series:
                    mean, std = entry[series]
                    rows.append((tech, size, series, mean, std))
    else:  # fig10
        for tech in techniques:
            agg = report.per_technique.get(tech)
            if agg is None:
                continue
            for series in spec.plot_series:
                mean, std = agg[series]
                rows.append((tech, "overall", series, mean, std))
    return rows


def write_plot_csv(rows, dest) -> None:
    dest.write(",".join(PLOT_HEADER) + "\n")
    for tech, size, series, mean, std in rows:
        dest.write(f"{tech},{size},{series},{mean!r},{std!r}\n")


# ---------------------------------------------------------------------------
# Serialization


def _spec_to_dict(spec: SweepSpec) -> dict:
    return {
        "techniques": list(spec.techniques),
        "hidden_sizes": list(spec.hidden_sizes),
        "models_per_size": spec.models_per_size,
        "replication_factor": spec.replication_factor,
        "train_fraction": spec.train_fraction,
        "perturb_rates": list(spec.perturb_rates),
        "copies_per_chemical": spec.copies_per_chemical,
        "k": spec.k,
        "base_seed": spec.base_seed,
        "train": {
            "max_epochs": spec.train.max_epochs,
            "min_gradient_norm": spec.train.min_gradient_norm,
            "goal_loss": spec.train.goal_loss,
            "sigma": spec.train.sigma,
            "lambda_init": spec.train.lambda_init,
            "seed": spec.train.seed,
        },
        "replication_factors": (
            list(spec.replication_factors) if spec.replication_factors else None
        ),
    }


def _spec_from_dict(doc: dict) -> SweepSpec:
    train = TrainConfig(**doc["train"])
    return SweepSpec(
        techniques=tuple(doc["techniques"]),
        hidden_sizes=tuple(doc["hidden_sizes"]),
        models_per_size=doc["models_per_size"],
        replication_factor=doc["replication_factor"],
        train_fraction=doc["train_fraction"],
        perturb_rates=tuple(doc["perturb_rates"]),
        copies_per_chemical=doc["copies_per_chemical"],
        k=doc["k"],
        base_seed=doc["base_seed"],
        train=train,
        replication_factors=(
            tuple(doc["replication_factors"]) if doc.get("replication_factors") else None
        ),
    )


def report_to_json(report: SweepReport) -> str:
    spec = report.spec
    cells = [
        {
            "technique": c.technique,
            "hidden_size": c.hidden_size,
            "replicate": c.replicate,
            "seed": c.seed,
            "metrics": c.metrics,
            "final_loss": c.final_loss,
            "epochs": c.epochs,
            "stop_reason": c.stop_reason,
            "diverged": c.diverged,
            "error": c.error,
        }
        for c in report.cells
    ]
    aggregates = {
        "per_size": [
            {
                "technique": tech,
                "hidden_size": size,
                "n": entry["n"],
                "series": {
                    s: {"mean": entry[s][0], "std": entry[s][1]}
                    for s in spec.series_names
                },
            }
            for (tech, size), entry in sorted(
                report.per_size.items(),
                key=lambda kv: (spec.techniques.index(kv[0][0]), kv[0][1]),
            )
        ],
        "per_technique": [
            {
                "technique": tech,
                "series": {
                    s: {"mean": agg[s][0], "std": agg[s][1]}
                    for s in spec.series_names
                },
            }
            for tech, agg in sorted(
                report.per_technique.items(),
                key=lambda kv: spec.techniques.index(kv[0]),
            )
        ],
        "best_hidden": [
            {"technique": tech, "hidden_size": report.best_hidden[tech]}
            for tech in spec.techniques
            if tech in report.best_hidden
        ],
    }
    replication = None
    if report.replication is not None:
        replication = {
            "hidden_size": report.replication.hidden_size,
            "models": report.replication.models,
            "points": [
                {
                    "factor": pt.factor,
                    "mean": pt.mean,
                    "std": pt.std,
                    "accuracies": list(pt.accuracies),
                }
                for pt in report.replication.points
            ],
        }
    doc = {
        "format_version": REPORT_FORMAT_VERSION,
        "spec": _spec_to_dict(spec),
        "n_classes": report.n_classes,
        "cells": cells,
        "aggregates": aggregates,
        "replication": replication,
    }
    return json.dumps(doc, indent=2) + "\n"


def report_from_json(text: str) -> SweepReport:
    doc = json.loads(text)
    version = doc.get("format_version")
    if version != REPORT_FORMAT_VERSION:
        raise ValueError(
            f"unsupported report format_version {version!r}; "
            f"this build reads version {REPORT_FORMAT_VERSION}"
        )
    spec = _spec_from_dict(doc["spec"])
    cells = [
        CellResult(
            technique=c["technique"],
            hidden_size=c["hidden_size"],
            replicate=c["replicate"],
            seed=c["seed"],
            metrics=c["metrics"],
            final_loss=c["final_loss"],
            epochs=c["epochs"],
            stop_reason=c["stop_reason"],
            diverged=c["diverged"],
            error=c.get("error"),
        )
        for c in doc["cells"]
    ]
    replication = None
    if doc.get("replication"):
        rep = doc["replication"]
        replication = ReplicationCurve(
            hidden_size=rep["hidden_size"],
            models=rep["models"],
            points=tuple(
                ReplicationPoint(factor=pt["factor"], accuracies=tuple(pt["accuracies"]))
                for pt in rep["points"]
            ),
        )
    return SweepReport.build(spec, doc["n_classes"], cells, replication)
