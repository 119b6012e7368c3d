"""Binary chemical-by-symptom data model.

A corpus is a named binary matrix: one row per chemical, one column per
sign/symptom (SSx), cell 1 when the chemical presents that symptom.
This module owns ingestion (CSV), deduplication of identical profiles,
replication, train/test splitting, perturbed simulated-patient
generation, and synthesis of stand-in corpora.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

__all__ = [
    "SymptomMatrix",
    "PatientSet",
    "DedupSummary",
    "FlipDensity",
    "ParseError",
    "GenerationError",
    "parse_symptom_csv",
    "write_symptom_csv",
    "deduplicate_profiles",
    "replicate_rows",
    "split_train_test",
    "generate_patient_set",
    "flip_density_summary",
    "synth_matrix",
    "write_patient_csv",
    "read_patient_csv",
    "dedup_summary_to_json",
    "dedup_summary_from_json",
]


class ParseError(ValueError):
    """Malformed symptom-table text (ragged row, non-binary cell, ...)."""


class GenerationError(RuntimeError):
    """Synthetic corpus generation could not satisfy its postconditions."""


def _as_binary_matrix(values, what: str) -> np.ndarray:
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError(f"{what} must be 2-dimensional, got shape {arr.shape}")
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{what} entries must all be 0 or 1")
    out = arr.astype(np.int8)
    out.setflags(write=False)
    return out


def _check_distinct(names: Sequence[str], what: str) -> None:
    if len(set(names)) != len(names):
        seen: set[str] = set()
        dupes = sorted({n for n in names if n in seen or seen.add(n)})
        raise ValueError(f"duplicate {what}: {dupes}")


@dataclass(frozen=True, eq=False)
class SymptomMatrix:
    """Named binary matrix of chemicals (rows) by symptoms (columns)."""

    chemical_names: tuple[str, ...]
    symptom_names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "chemical_names", tuple(self.chemical_names))
        object.__setattr__(self, "symptom_names", tuple(self.symptom_names))
        values = _as_binary_matrix(self.values, "symptom matrix")
        if values.shape != (len(self.chemical_names), len(self.symptom_names)):
            raise ValueError(
                f"matrix shape {values.shape} does not match "
                f"{len(self.chemical_names)} chemicals x {len(self.symptom_names)} symptoms"
            )
        _check_distinct(self.chemical_names, "chemical names")
        _check_distinct(self.symptom_names, "symptom names")
        object.__setattr__(self, "values", values)

    @property
    def n_chemicals(self) -> int:
        return len(self.chemical_names)

    @property
    def n_symptoms(self) -> int:
        return len(self.symptom_names)


@dataclass(frozen=True, eq=False)
class PatientSet:
    """Labeled feature rows derived from a SymptomMatrix.

    Features stay in the original binary symptom space; ``labels[i]``
    indexes ``class_names`` (the reference chemical list). ``perturb_rate``
    is the per-bit flip probability the rows were generated with.
    """

    features: np.ndarray
    labels: np.ndarray
    class_names: tuple[str, ...]
    perturb_rate: float
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        features = _as_binary_matrix(self.features, "patient features")
        labels = np.asarray(self.labels, dtype=np.int64)
        labels.setflags(write=False)
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise ValueError("labels must be one per feature row")
        n_classes = len(self.class_names)
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ValueError(f"labels must fall in [0, {n_classes})")
        if not 0.0 <= self.perturb_rate <= 1.0:
            raise ValueError("perturb_rate must be in [0, 1]")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


@dataclass(frozen=True)
class DedupSummary:
    """Which rows survived deduplication and who they stand for.

    ``kept`` lists retained original row indices in order; ``clusters``
    maps each retained index to every original chemical name sharing its
    profile (the representative first).
    """

    kept: tuple[int, ...]
    clusters: dict[int, tuple[str, ...]]


@dataclass(frozen=True)
class FlipDensity:
    """Per-row flipped-bit counts against source profiles, plus their
    normalized histogram over 0..n_symptoms flips."""

    counts: np.ndarray
    histogram: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.counts.mean()) if self.counts.size else 0.0


# ---------------------------------------------------------------------------
# CSV ingestion / serialization


def _open_text(source: str | IO[str]) -> IO[str]:
    if isinstance(source, str):
        return io.StringIO(source)
    return source


def parse_symptom_csv(source: str | IO[str]) -> SymptomMatrix:
    """Parse a chemical-by-symptom table from CSV text.

    Expected layout: header whose first cell is empty (or a caption) and
    whose remaining cells are symptom names; each data row is a chemical
    name followed by 0/1 cells.
    """
    reader = csv.reader(_open_text(source))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty input: no header row") from None
    if len(header) < 2:
        raise ParseError("header must contain at least one symptom name")
    symptom_names = [h.strip() for h in header[1:]]
    n_symptoms = len(symptom_names)

    chemical_names: list[str] = []
    rows: list[list[int]] = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != n_symptoms + 1:
            raise ParseError(
                f"line {lineno}: expected {n_symptoms + 1} cells, got {len(row)}"
            )
        name = row[0].strip()
        cells = []
        for j, cell in enumerate(row[1:]):
            text = cell.strip()
            if text == "0":
                cells.append(0)
            elif text == "1":
                cells.append(1)
            else:
                raise ParseError(
                    f"line {lineno}, chemical {name!r}, column "
                    f"{symptom_names[j]!r}: non-binary cell {cell!r}"
                )
        chemical_names.append(name)
        rows.append(cells)

    values = np.array(rows, dtype=np.int8).reshape(len(rows), n_symptoms)
    return SymptomMatrix(tuple(chemical_names), tuple(symptom_names), values)


def write_symptom_csv(m: SymptomMatrix, dest: IO[str]) -> None:
    """Write ``m`` in the same dialect ``parse_symptom_csv`` reads."""
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow([""] + list(m.symptom_names))
    for name, row in zip(m.chemical_names, m.values):
        writer.writerow([name] + [int(v) for v in row])


def symptom_csv_text(m: SymptomMatrix) -> str:
    buf = io.StringIO()
    write_symptom_csv(m, buf)
    return buf.getvalue()


def write_patient_csv(
    p: PatientSet, symptom_names: Sequence[str], dest: IO[str]
) -> None:
    """Patient rows as CSV: leading source_chemical, then the symptom
    columns, then a trailing integer label."""
    if len(symptom_names) != p.features.shape[1]:
        raise ValueError("symptom_names length must match feature columns")
    writer = csv.writer(dest, lineterminator="\n")
    writer.writerow(["source_chemical"] + list(symptom_names) + ["label"])
    for row, label in zip(p.features, p.labels):
        writer.writerow(
            [p.class_names[label]] + [int(v) for v in row] + [int(label)]
        )


def read_patient_csv(
    source: str | IO[str], perturb_rate: float = 0.0, seed: int = 0
) -> tuple[PatientSet, tuple[str, ...]]:
    """Read a patient-set CSV back; returns (patient set, symptom names).

    The flip rate is not recorded in the CSV itself, so the caller may
    supply the known ``perturb_rate`` (defaults to 0).
    """
    reader = csv.reader(_open_text(source))
    try:
        header = next(reader)
    except StopIteration:
        raise ParseError("empty input: no header row") from None
    if len(header) < 3 or header[0] != "source_chemical" or header[-1] != "label":
        raise ParseError(
            "patient CSV must have a leading source_chemical column and a "
            "trailing label column"
        )
    symptom_names = tuple(h.strip() for h in header[1:-1])
    n = len(symptom_names)

    names_by_label: dict[int, str] = {}
    features: list[list[int]] = []
    labels: list[int] = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != n + 2:
            raise ParseError(f"line {lineno}: expected {n + 2} cells, got {len(row)}")
        try:
            label = int(row[-1])
        except ValueError:
            raise ParseError(f"line {lineno}: non-integer label {row[-1]!r}") from None
        cells = []
        for j, cell in enumerate(row[1:-1]):
            text = cell.strip()
            if text not in ("0", "1"):
                raise ParseError(
                    f"line {lineno}, column {symptom_names[j]!r}: "
                    f"non-binary cell {cell!r}"
                )
            cells.append(int(text))
        name = row[0]
        if names_by_label.setdefault(label, name) != name:
            raise ParseError(
                f"line {lineno}: label {label} maps to both "
                f"{names_by_label[label]!r} and {name!r}"
            )
        features.append(cells)
        labels.append(label)

    n_classes = max(labels, default=-1) + 1
    class_names = tuple(
        names_by_label.get(i, f"class_{i}") for i in range(n_classes)
    )
    pset = PatientSet(
        features=np.array(features, dtype=np.int8).reshape(len(features), n),
        labels=np.array(labels, dtype=np.int64),
        class_names=class_names,
        perturb_rate=perturb_rate,
        seed=seed,
    )
    return pset, symptom_names


def dedup_summary_to_json(s: DedupSummary) -> str:
    payload = {
        "kept": list(s.kept),
        "clusters": {str(i): list(names) for i, names in s.clusters.items()},
    }
    return json.dumps(payload, indent=2) + "\n"


def dedup_summary_from_json(text: str) -> DedupSummary:
    payload = json.loads(text)
    return DedupSummary(
        kept=tuple(int(i) for i in payload["kept"]),
        clusters={
            int(i): tuple(names) for i, names in payload["clusters"].items()
        },
    )


# ---------------------------------------------------------------------------
# Corpus operations


def deduplicate_profiles(m: SymptomMatrix) -> tuple[SymptomMatrix, DedupSummary]:
    """Collapse chemicals with identical symptom profiles.

    The retained representative of each cluster is its first occurrence
    in row order; output row order follows the retained originals.
    """
    first_index: dict[bytes, int] = {}
    clusters: dict[int, list[str]] = {}
    for i, row in enumerate(m.values):
        key = row.tobytes()
        rep = first_index.setdefault(key, i)
        clusters.setdefault(rep, []).append(m.chemical_names[i])

    kept = sorted(first_index.values())
    reduced = SymptomMatrix(
        chemical_names=tuple(m.chemical_names[i] for i in kept),
        symptom_names=m.symptom_names,
        values=m.values[kept],
    )
    summary = DedupSummary(
        kept=tuple(kept),
        clusters={i: tuple(clusters[i]) for i in kept},
    )
    return reduced, summary


def replicate_rows(m: SymptomMatrix, factor: int) -> PatientSet:
    """Stack ``factor`` identical copies of every chemical profile.

    Copies are contiguous per chemical; labels index the chemical list.
    """
    if factor < 1:
        raise ValueError("replication factor must be >= 1")
    features = np.repeat(m.values, factor, axis=0)
    labels = np.repeat(np.arange(m.n_chemicals, dtype=np.int64), factor)
    return PatientSet(
        features=features,
        labels=labels,
        class_names=m.chemical_names,
        perturb_rate=0.0,
        seed=0,
    )


def split_train_test(
    p: PatientSet, train_fraction: float, seed: int
) -> tuple[PatientSet, PatientSet]:
    """Uniform random split: floor(n * train_fraction) rows to train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be strictly between 0 and 1")
    n = p.n_rows
    if n == 0:
        raise ValueError("cannot split an empty patient set")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = int(np.floor(n * train_fraction))

    def take(idx: np.ndarray) -> PatientSet:
        return PatientSet(
            features=p.features[idx],
            labels=p.labels[idx],
            class_names=p.class_names,
            perturb_rate=p.perturb_rate,
            seed=seed,
        )

    return take(order[:n_train]), take(order[n_train:])


def generate_patient_set(
    m: SymptomMatrix, copies: int, rate: float, seed: int
) -> PatientSet:
    """Simulated patients: ``copies`` per chemical, each bit flipped
    independently with probability ``rate``."""
    if copies < 1:
        raise ValueError("copies must be >= 1")
    if not 0.0 <= rate <= 1.0:
        raise ValueError("perturbation rate must be in [0, 1]")
    rng = np.random.default_rng(seed)
    features = np.repeat(m.values, copies, axis=0)
    labels = np.repeat(np.arange(m.n_chemicals, dtype=np.int64), copies)
    flips = rng.random(features.shape) < rate
    features = np.where(flips, 1 - features, features).astype(np.int8)
    return PatientSet(
        features=features,
        labels=labels,
        class_names=m.chemical_names,
        perturb_rate=rate,
        seed=seed,
    )


def flip_density_summary(p: PatientSet, reference: SymptomMatrix) -> FlipDensity:
    """Hamming distance of each patient row to its source profile, with
    the normalized histogram over possible flip counts."""
    if p.features.shape[1] != reference.n_symptoms:
        raise ValueError(
            f"patient rows have {p.features.shape[1]} columns, reference has "
            f"{reference.n_symptoms}"
        )
    if p.n_classes != reference.n_chemicals:
        raise ValueError("patient labels do not index the reference chemicals")
    source = reference.values[p.labels]
    counts = (p.features != source).sum(axis=1)
    histogram = np.bincount(counts, minlength=reference.n_symptoms + 1)
    histogram = histogram / max(counts.size, 1)
    return FlipDensity(counts=counts, histogram=histogram)


def synth_matrix(
    n_chemicals: int,
    n_symptoms: int,
    symptom_marginals: Sequence[float] | None = None,
    seed: int = 0,
    max_retries_per_row: int = 10_000,
) -> SymptomMatrix:
    """Synthesize a corpus with pairwise-distinct rows.

    Each cell is Bernoulli with its column's marginal; colliding rows are
    redrawn (bounded retries). When no marginals are given they are drawn
    once from Uniform(0.1, 0.6) under the seed, giving a realistic spread
    of symptom frequencies.
    """
    if n_chemicals < 1:
        raise ValueError("n_chemicals must be >= 1")
    if n_symptoms < 1:
        raise ValueError("n_symptoms must be >= 1")
    rng = np.random.default_rng(seed)
    if symptom_marginals is None:
        marginals = rng.uniform(0.1, 0.6, size=n_symptoms)
    else:
        marginals = np.asarray(symptom_marginals, dtype=float)
        if marginals.shape != (n_symptoms,):
            raise ValueError("symptom_marginals length must equal n_symptoms")
        if ((marginals <= 0.0) | (marginals >= 1.0)).any():
            raise ValueError("symptom_marginals must lie strictly in (0, 1)")

    seen: set[bytes] = set()
    rows = np.empty((n_chemicals, n_symptoms), dtype=np.int8)
    for i in range(n_chemicals):
        for _ in range(max_retries_per_row):
            row = (rng.random(n_symptoms) < marginals).astype(np.int8)
            key = row.tobytes()
            if key not in seen:
                seen.add(key)
                rows[i] = row
                break
        else:
            raise GenerationError(
                f"could not draw a distinct profile for row {i} within "
                f"{max_retries_per_row} retries"
            )

    width = len(str(n_chemicals - 1))
    sym_width = len(str(n_symptoms - 1))
    return SymptomMatrix(
        chemical_names=tuple(f"chem_{i:0{width}d}" for i in range(n_chemicals)),
        symptom_names=tuple(f"sx_{j:0{sym_width}d}" for j in range(n_symptoms)),
        values=rows,
    )
