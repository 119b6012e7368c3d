"""Chemical exposure classification from binary sign/symptom profiles.

Pipeline pieces: a binary chemical-by-symptom corpus (`corpus`), four
dimension-reduction transformers (`reduction`), a single-hidden-layer
classifier trained by scaled conjugate gradient (`mlp`), a benchmarking
harness sweeping hidden sizes and perturbation rates (`sweep`), and a
command-line front end (`cli`).
"""

from chemtriage.corpus import (
    DedupSummary,
    PatientSet,
    SymptomMatrix,
    deduplicate_profiles,
    generate_patient_set,
    parse_symptom_csv,
    replicate_rows,
    split_train_test,
    synth_matrix,
)
from chemtriage.mlp import MlpModel, ScgMlpClassifier, TrainConfig, scg_train
from chemtriage.reduction import (
    AlphabeticalSelector,
    CorrelationSelector,
    PcaReducer,
    RandomSubsetSelector,
    VarianceSelector,
    covariance_matrix,
    fit_reducer,
    pearson_matrix,
)
from chemtriage.sweep import SweepSpec, run_sweep, summarize_tables

__version__ = "0.1.0"

__all__ = [
    "SymptomMatrix",
    "PatientSet",
    "DedupSummary",
    "parse_symptom_csv",
    "deduplicate_profiles",
    "replicate_rows",
    "split_train_test",
    "generate_patient_set",
    "synth_matrix",
    "covariance_matrix",
    "pearson_matrix",
    "AlphabeticalSelector",
    "RandomSubsetSelector",
    "VarianceSelector",
    "CorrelationSelector",
    "PcaReducer",
    "fit_reducer",
    "MlpModel",
    "TrainConfig",
    "scg_train",
    "ScgMlpClassifier",
    "SweepSpec",
    "run_sweep",
    "summarize_tables",
    "__version__",
]
