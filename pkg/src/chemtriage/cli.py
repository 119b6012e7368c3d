"""Command-line front end.

Subcommands: synth, dedup, testsets, reduce, train, sweep, report,
predict. All randomness is controlled by --seed; sweep runs are driven
by a flat key = value config file with flags taking precedence. Every
output directory gets a manifest recording the resolved options and the
hash of each artifact.

Exit codes: 0 success, 1 validation/usage error, 2 runtime or training
error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from chemtriage import __version__
from chemtriage.corpus import (
    ParseError,
    deduplicate_profiles,
    dedup_summary_to_json,
    generate_patient_set,
    parse_symptom_csv,
    read_patient_csv,
    replicate_rows,
    split_train_test,
    symptom_csv_text,
    synth_matrix,
    write_patient_csv,
)
from chemtriage.mlp import (
    TrainConfig,
    TrainingDivergedError,
    evaluate_accuracy,
    forward,
    init_model,
    model_from_dict,
    model_to_dict,
    one_hot,
    scg_train,
)
from chemtriage.reduction import (
    TECHNIQUES,
    fit_reducer,
    reducer_fingerprint,
    reducer_from_dict,
    reducer_to_dict,
)
from chemtriage.sweep import (
    SweepSpec,
    emit_plot_data,
    report_from_json,
    report_to_json,
    run_sweep,
    summarize_tables,
    write_plot_csv,
)

log = logging.getLogger("chemtriage")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports bad usage on stderr without exiting the
    process with its default status."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="chemtriage", description=__doc__)
    parser.add_argument("--verbose", "-v", action="count", default=0)
    sub = parser.add_subparsers(dest="command")

    def add(name: str, **kwargs) -> argparse.ArgumentParser:
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--out", required=True, help="output directory")
        return p

    p = add("synth", help="write a synthetic chemical-by-symptom CSV")
    p.add_argument("--synth", required=True, metavar="N,P", help="n_chemicals,n_symptoms")
    p.add_argument("--marginals", help="file with one column marginal per line")
    p.add_argument("--seed", type=int)

    p = add("dedup", help="collapse duplicate profiles")
    p.add_argument("--input", required=True)

    p = add("testsets", help="write clean and perturbed patient sets")
    p.add_argument("--input", required=True)
    p.add_argument("--copies", type=int, default=100)
    p.add_argument("--rates", default="0.05,0.10,0.15")
    p.add_argument("--seed", type=int)

    p = add("reduce", help="fit a dimension reducer")
    p.add_argument("--input", required=True)
    p.add_argument("--technique", required=True, choices=TECHNIQUES)
    p.add_argument("--k", type=int, default=40)
    p.add_argument("--threshold", type=float)
    p.add_argument("--seed", type=int)

    p = add("train", help="train one classifier")
    p.add_argument("--input", required=True)
    p.add_argument("--technique", default="all", choices=TECHNIQUES)
    p.add_argument("--k", type=int, default=40)
    p.add_argument("--hidden", default="40", help="hidden layer size")
    p.add_argument("--factor", type=int, default=5)
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--max-epochs", type=int, default=1000)
    p.add_argument("--seed", type=int)

    p = add("sweep", help="run the full benchmark grid")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--input")
    p.add_argument("--synth", metavar="N,P")
    p.add_argument("--marginals")
    p.add_argument("--techniques")
    p.add_argument("--k", type=int)
    p.add_argument("--hidden", help="sizes as a:b:step or a comma list")
    p.add_argument("--models-per-size", type=int)
    p.add_argument("--factor", type=int)
    p.add_argument("--train-fraction", type=float)
    p.add_argument("--rates")
    p.add_argument("--copies", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--replication-factors")
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)

    p = add("report", help="re-derive tables and plot data from a report")
    p.add_argument("--report", required=True)

    p = add("predict", help="rank chemicals for feature rows")
    p.add_argument("--model", required=True)
    p.add_argument("--reducer", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--top", type=int, default=10)

    return parser


# ---------------------------------------------------------------------------
# Small helpers


def _parse_int_pair(text: str, what: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"{what} must look like N,P, got {text!r}")
    return int(parts[0]), int(parts[1])


def _parse_rates(text: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in text.split(",") if tok.strip())


def _parse_hidden(text: str) -> tuple[int, ...]:
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"hidden range must be a:b:step, got {text!r}")
        a, b, step = (int(x) for x in parts)
        if step < 1:
            raise ValueError("hidden range step must be >= 1")
        return tuple(range(a, b + 1, step))
    return tuple(int(tok) for tok in text.split(",") if tok.strip())


def _read_marginals(path: str) -> tuple[float, ...]:
    values = []
    for lineno, line in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        if not line.strip():
            continue
        try:
            values.append(float(line))
        except ValueError:
            raise ValueError(
                f"{path}:{lineno}: expected one fraction per line, got {line!r}"
            ) from None
    return tuple(values)


def _load_matrix(path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_symptom_csv(fh)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class _OutDir:
    """Collects written artifacts so the manifest can hash them."""

    def __init__(self, path: str):
        self.root = Path(path)
        self.root.mkdir(parents=True, exist_ok=True)
        self.artifacts: dict[str, str] = {}

    def write(self, name: str, text: str) -> Path:
        target = self.root / name
        target.write_text(text, encoding="utf-8", newline="")
        self.artifacts[name] = _sha256(text)
        log.info("wrote %s", target)
        return target

    def finish(self, command: str, config: dict) -> None:
        manifest = {
            "command": command,
            "version": __version__,
            "config": config,
            "artifacts": dict(sorted(self.artifacts.items())),
        }
        text = json.dumps(manifest, indent=2) + "\n"
        (self.root / "manifest.json").write_text(text, encoding="utf-8", newline="")
        log.info("wrote %s", self.root / "manifest.json")


def _require_seed(seed) -> int:
    if seed is None:
        raise ValueError("--seed is required for this subcommand")
    return int(seed)


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_synth(args) -> int:
    seed = _require_seed(args.seed)
    n, p = _parse_int_pair(args.synth, "--synth")
    marginals = _read_marginals(args.marginals) if args.marginals else None
    matrix = synth_matrix(n, p, symptom_marginals=marginals, seed=seed)
    out = _OutDir(args.out)
    out.write("matrix.csv", symptom_csv_text(matrix))
    out.finish("synth", {"synth": args.synth, "marginals": args.marginals, "seed": seed})
    return 0


def _cmd_dedup(args) -> int:
    matrix = _load_matrix(args.input)
    reduced, summary = deduplicate_profiles(matrix)
    out = _OutDir(args.out)
    out.write("deduped.csv", symptom_csv_text(reduced))
    out.write("dedup_summary.json", dedup_summary_to_json(summary))
    out.finish("dedup", {"input": args.input})
    log.info("deduplicated %d -> %d profiles", matrix.n_chemicals, reduced.n_chemicals)
    return 0


def _patient_csv_text(pset, symptom_names) -> str:
    buf = io.StringIO()
    write_patient_csv(pset, symptom_names, buf)
    return buf.getvalue()


def _cmd_testsets(args) -> int:
    seed = _require_seed(args.seed)
    matrix = _load_matrix(args.input)
    rates = _parse_rates(args.rates)
    out = _OutDir(args.out)
    clean = generate_patient_set(matrix, args.copies, 0.0, seed)
    out.write("patients_rate0.csv", _patient_csv_text(clean, matrix.symptom_names))
    for rate in rates:
        pset = generate_patient_set(matrix, args.copies, rate, seed)
        out.write(
            f"patients_rate{rate:g}.csv",
            _patient_csv_text(pset, matrix.symptom_names),
        )
    out.finish(
        "testsets",
        {"input": args.input, "copies": args.copies, "rates": list(rates), "seed": seed},
    )
    return 0


def _variance_explained_csv(reducer) -> str:
    lines = ["component,variance_explained,cumulative"]
    for j, (v, c) in enumerate(
        zip(reducer.variance_explained_, reducer.cumulative_explained_), start=1
    ):
        lines.append(f"{j},{float(v)!r},{float(c)!r}")
    return "\n".join(lines) + "\n"


def _cmd_reduce(args) -> int:
    matrix = _load_matrix(args.input)
    if args.technique == "random":
        _require_seed(args.seed)
    reducer = fit_reducer(
        args.technique, matrix, k=args.k, seed=args.seed, threshold=args.threshold
    )
    out = _OutDir(args.out)
    out.write(
        "reducer.json", json.dumps(reducer_to_dict(reducer), indent=2) + "\n"
    )
    if args.technique == "pca":
        out.write("variance_explained.csv", _variance_explained_csv(reducer))
    out.finish(
        "reduce",
        {
            "input": args.input,
            "technique": args.technique,
            "k": args.k,
            "threshold": args.threshold,
            "seed": args.seed,
        },
    )
    return 0


def _history_csv(history) -> str:
    lines = ["epoch,loss"]
    lines.extend(f"{i},{loss!r}" for i, loss in enumerate(history.losses, start=1))
    return "\n".join(lines) + "\n"


def _cmd_train(args) -> int:
    seed = _require_seed(args.seed)
    hidden_sizes = _parse_hidden(args.hidden)
    if len(hidden_sizes) != 1:
        raise ValueError("train takes a single --hidden size")
    hidden = hidden_sizes[0]

    matrix = _load_matrix(args.input)
    matrix, _ = deduplicate_profiles(matrix)
    reducer = fit_reducer(args.technique, matrix, k=args.k, seed=seed)
    fingerprint = reducer_fingerprint(reducer)

    replicated = replicate_rows(matrix, args.factor)
    train_set, test_set = split_train_test(replicated, args.train_fraction, seed)
    X_train = reducer.transform(train_set.features)
    model = init_model(
        X_train.shape[1],
        hidden,
        matrix.n_chemicals,
        seed=seed,
        reducer_ref=fingerprint,
        class_names=matrix.chemical_names,
    )
    config = TrainConfig(max_epochs=args.max_epochs, seed=seed)
    trained, history = scg_train(
        model, X_train, one_hot(train_set.labels, matrix.n_chemicals), config
    )
    train_acc = evaluate_accuracy(trained, reducer, train_set)
    test_acc = evaluate_accuracy(trained, reducer, test_set)
    log.info(
        "trained H=%d: train accuracy %.4f, test accuracy %.4f (%s after %d epochs)",
        hidden, train_acc, test_acc, history.stop_reason, history.epochs,
    )

    out = _OutDir(args.out)
    out.write("model.json", json.dumps(model_to_dict(trained), indent=2) + "\n")
    out.write("reducer.json", json.dumps(reducer_to_dict(reducer), indent=2) + "\n")
    out.write("history.csv", _history_csv(history))
    out.finish(
        "train",
        {
            "input": args.input,
            "technique": args.technique,
            "k": args.k,
            "hidden": hidden,
            "factor": args.factor,
            "train_fraction": args.train_fraction,
            "max_epochs": args.max_epochs,
            "seed": seed,
            "stop_reason": history.stop_reason,
            "epochs": history.epochs,
            "train_accuracy": train_acc,
            "test_accuracy": test_acc,
        },
    )
    return 0


_CONFIG_KEYS = {
    "input": str,
    "synth": str,
    "marginals": str,
    "techniques": str,
    "k": int,
    "hidden": str,
    "models_per_size": int,
    "factor": int,
    "train_fraction": float,
    "rates": str,
    "copies": int,
    "max_epochs": int,
    "min_gradient_norm": float,
    "goal_loss": float,
    "sigma": float,
    "lambda_init": float,
    "replication_factors": str,
    "workers": int,
    "seed": int,
}


def _read_config_file(path: str) -> dict:
    values: dict = {}
    for lineno, raw in enumerate(
        Path(path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _CONFIG_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = _CONFIG_KEYS[key](value)
        except ValueError:
            raise ValueError(
                f"{path}:{lineno}: bad value {value!r} for {key}"
            ) from None
    return values


def _resolve_sweep_config(args) -> dict:
    config = _read_config_file(args.config) if args.config else {}
    overrides = {
        "input": args.input,
        "synth": args.synth,
        "marginals": args.marginals,
        "techniques": args.techniques,
        "k": args.k,
        "hidden": args.hidden,
        "models_per_size": args.models_per_size,
        "factor": args.factor,
        "train_fraction": args.train_fraction,
        "rates": args.rates,
        "copies": args.copies,
        "max_epochs": args.max_epochs,
        "replication_factors": args.replication_factors,
        "workers": args.workers,
        "seed": args.seed,
    }
    for key, value in overrides.items():
        if value is not None:
            config[key] = value
    return config


def _cmd_sweep(args) -> int:
    config = _resolve_sweep_config(args)
    seed = _require_seed(config.get("seed"))
    has_input = bool(config.get("input"))
    has_synth = bool(config.get("synth"))
    if has_input == has_synth:
        raise ValueError("exactly one of input or synth must be configured")

    if has_input:
        matrix = _load_matrix(config["input"])
    else:
        n, p = _parse_int_pair(config["synth"], "synth")
        marginals = (
            _read_marginals(config["marginals"]) if config.get("marginals") else None
        )
        matrix = synth_matrix(n, p, symptom_marginals=marginals, seed=seed)

    train = TrainConfig(
        max_epochs=config.get("max_epochs", 1000),
        min_gradient_norm=config.get("min_gradient_norm", 1e-6),
        goal_loss=config.get("goal_loss", 0.0),
        sigma=config.get("sigma", 5e-5),
        lambda_init=config.get("lambda_init", 5e-7),
        seed=seed,
    )
    spec = SweepSpec(
        techniques=tuple(
            t.strip() for t in config.get("techniques", "all,first,variance,correlation,pca").split(",")
        ),
        hidden_sizes=_parse_hidden(config.get("hidden", "10:100:10")),
        models_per_size=config.get("models_per_size", 10),
        replication_factor=config.get("factor", 5),
        train_fraction=config.get("train_fraction", 0.7),
        perturb_rates=_parse_rates(config.get("rates", "0.05,0.10,0.15")),
        copies_per_chemical=config.get("copies", 100),
        k=config.get("k", 40),
        base_seed=seed,
        train=train,
        replication_factors=(
            tuple(int(f) for f in str(config["replication_factors"]).split(","))
            if config.get("replication_factors")
            else None
        ),
    )
    workers = config.get("workers", 1)
    log.info(
        "sweep: %d techniques x %d sizes x %d models",
        len(spec.techniques), len(spec.hidden_sizes), spec.models_per_size,
    )
    report = run_sweep(matrix, spec, workers=workers)

    out = _OutDir(args.out)
    if has_synth:
        out.write("matrix.csv", symptom_csv_text(matrix))
    _write_report_products(out, report)
    manifest_config = {k: v for k, v in sorted(config.items()) if k != "workers"}
    out.finish("sweep", manifest_config)
    return 0


def _write_report_products(out: _OutDir, report) -> None:
    out.write("report.json", report_to_json(report))
    overall, best = summarize_tables(report)
    out.write("table1_overall.csv", overall.to_csv())
    out.write("table2_best_hidden.csv", best.to_csv())
    views = ["fig8", "fig9", "fig10"] + (["fig4"] if report.replication else [])
    for view in views:
        buf = io.StringIO()
        write_plot_csv(emit_plot_data(report, view), buf)
        out.write(f"{view}.csv", buf.getvalue())


def _cmd_report(args) -> int:
    text = Path(args.report).read_text(encoding="utf-8")
    report = report_from_json(text)
    out = _OutDir(args.out)
    _write_report_products(out, report)
    out.finish("report", {"report": args.report})
    return 0


def _cmd_predict(args) -> int:
    model = model_from_dict(json.loads(Path(args.model).read_text(encoding="utf-8")))
    reducer = reducer_from_dict(
        json.loads(Path(args.reducer).read_text(encoding="utf-8"))
    )
    if model.reducer_ref is not None:
        actual = reducer_fingerprint(reducer)
        if actual != model.reducer_ref:
            raise ValueError(
                f"reducer {actual} does not match the model's expected "
                f"reducer {model.reducer_ref}"
            )

    with open(args.input, encoding="utf-8") as fh:
        first = fh.readline()
        fh.seek(0)
        header = next(csv.reader([first]), [])
        if header and header[0] == "source_chemical" and header[-1] == "label":
            pset, _ = read_patient_csv(fh)
            features = pset.features
        else:
            features = parse_symptom_csv(fh).values

    probs = forward(model, reducer.transform(features.astype(np.float64)))
    probs = np.atleast_2d(probs)
    top = min(args.top, probs.shape[1]) if args.top > 0 else probs.shape[1]
    names = model.class_names or tuple(
        f"class_{i}" for i in range(model.output_dim)
    )

    lines = ["row,rank,class_index,chemical,probability"]
    for i, row in enumerate(probs):
        order = np.argsort(-row, kind="stable")[:top]
        for rank, j in enumerate(order, start=1):
            lines.append(f"{i},{rank},{j},{names[j]},{float(row[j])!r}")
    out = _OutDir(args.out)
    out.write("predictions.csv", "\n".join(lines) + "\n")
    out.finish(
        "predict",
        {"model": args.model, "reducer": args.reducer, "input": args.input, "top": top},
    )
    return 0


_HANDLERS = {
    "synth": _cmd_synth,
    "dedup": _cmd_dedup,
    "testsets": _cmd_testsets,
    "reduce": _cmd_reduce,
    "train": _cmd_train,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
    "predict": _cmd_predict,
}


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
    )
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("error: a subcommand is required", file=sys.stderr)
        return 1

    try:
        return _HANDLERS[args.command](args)
    except TrainingDivergedError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
