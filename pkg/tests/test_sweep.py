"""Sweep orchestration: determinism, aggregation, tables, plot data."""

import numpy as np
import pytest

import chemtriage.sweep as sweep_mod
from chemtriage.corpus import synth_matrix
from chemtriage.mlp import TrainConfig, TrainHistory, TrainingDivergedError
from chemtriage.sweep import (
    CellResult,
    SweepReport,
    SweepSpec,
    derive_seed,
    emit_plot_data,
    rate_series,
    replication_curve,
    report_from_json,
    report_to_json,
    run_sweep,
    summarize_tables,
)


def tiny_spec(**overrides):
    defaults = dict(
        techniques=("all", "variance"),
        hidden_sizes=(5, 8),
        models_per_size=2,
        replication_factor=2,
        train_fraction=0.7,
        perturb_rates=(0.1, 0.2),
        copies_per_chemical=3,
        k=6,
        base_seed=123,
        train=TrainConfig(max_epochs=30, goal_loss=1e-3),
    )
    defaults.update(overrides)
    return SweepSpec(**defaults)


@pytest.fixture(scope="module")
def tiny_corpus():
    return synth_matrix(25, 12, seed=99)


@pytest.fixture(scope="module")
def tiny_report(tiny_corpus):
    return run_sweep(tiny_corpus, tiny_spec())


def make_cell(technique, size, replicate, clean, rates=(0.1, 0.2), offset=0.1):
    metrics = {"train": min(1.0, clean + 0.01), "clean": clean}
    for i, r in enumerate(rates):
        metrics[rate_series(r)] = max(0.0, clean - offset * (i + 1))
    return CellResult(
        technique=technique,
        hidden_size=size,
        replicate=replicate,
        seed=derive_seed("test", technique, size, replicate),
        metrics=metrics,
        final_loss=0.01,
        epochs=5,
        stop_reason="goal",
    )


class TestSpecValidation:
    def test_defaults_are_valid(self):
        spec = SweepSpec()
        assert spec.hidden_sizes == tuple(range(10, 101, 10))
        assert spec.models_per_size == 10
        # default grid plans 100 models per technique
        assert len(spec.hidden_sizes) * spec.models_per_size == 100
        assert spec.perturb_rates == (0.05, 0.10, 0.15)
        assert spec.replication_factor == 5
        assert spec.copies_per_chemical == 100
        assert spec.k == 40

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError, match="ascending"):
            tiny_spec(hidden_sizes=(8, 5))
        with pytest.raises(ValueError, match="nonempty"):
            tiny_spec(hidden_sizes=())
        with pytest.raises(ValueError, match="unknown technique"):
            tiny_spec(techniques=("all", "umap"))
        with pytest.raises(ValueError, match="rates"):
            tiny_spec(perturb_rates=(0.1, 1.5))
        with pytest.raises(ValueError, match="models_per_size"):
            tiny_spec(models_per_size=0)


class TestRunSweep:
    def test_cell_grid_complete(self, tiny_report):
        spec = tiny_report.spec
        assert len(tiny_report.cells) == 2 * 2 * 2
        for tech in spec.techniques:
            for size in spec.hidden_sizes:
                cells = [
                    c
                    for c in tiny_report.cells
                    if c.technique == tech and c.hidden_size == size
                ]
                assert len(cells) == spec.models_per_size

    def test_accuracies_in_unit_interval(self, tiny_report):
        for cell in tiny_report.cells:
            for value in cell.metrics.values():
                assert 0.0 <= value <= 1.0

    def test_aggregates_clear_chance_floor(self, tiny_report):
        chance = 1.0 / tiny_report.n_classes
        n_eval = tiny_report.n_classes * tiny_report.spec.copies_per_chemical
        sigma = np.sqrt(chance * (1 - chance) / n_eval)
        for entry in tiny_report.per_size.values():
            for series in tiny_report.spec.series_names:
                assert entry[series][0] >= chance - 3 * sigma

    def test_deterministic_reports(self, tiny_corpus, tiny_report):
        again = run_sweep(tiny_corpus, tiny_spec())
        assert report_to_json(again) == report_to_json(tiny_report)

    def test_workers_do_not_change_results(self, tiny_corpus, tiny_report):
        threaded = run_sweep(tiny_corpus, tiny_spec(), workers=2)
        assert report_to_json(threaded) == report_to_json(tiny_report)

    def test_k_larger_than_corpus_rejected(self, tiny_corpus):
        with pytest.raises(ValueError, match="exceeds"):
            run_sweep(tiny_corpus, tiny_spec(k=13))

    def test_divergent_cells_flagged_and_skipped(self, tiny_corpus, monkeypatch):
        real = sweep_mod.scg_train

        def flaky(model, X, Y, config):
            if model.hidden_dim == 5:
                raise TrainingDivergedError(
                    "boom", TrainHistory(losses=(1.0,), stop_reason="diverged")
                )
            return real(model, X, Y, config)

        monkeypatch.setattr(sweep_mod, "scg_train", flaky)
        report = run_sweep(tiny_corpus, tiny_spec())
        bad = [c for c in report.cells if c.hidden_size == 5]
        good = [c for c in report.cells if c.hidden_size == 8]
        assert all(c.diverged and c.metrics is None for c in bad)
        assert all(not c.diverged for c in good)
        # the divergent size contributes nothing to aggregates
        assert ("all", 5) not in report.per_size
        assert report.best_hidden["all"] == 8


class TestAggregation:
    def test_single_cell_report_echoes_cell(self):
        spec = tiny_spec(
            techniques=("variance",), hidden_sizes=(8,), models_per_size=1
        )
        cell = make_cell("variance", 8, 0, clean=0.9)
        report = SweepReport.build(spec, n_classes=25, cells=[cell])
        assert report.per_size[("variance", 8)]["clean"] == (0.9, 0.0)
        assert report.per_technique["variance"]["clean"] == (0.9, 0.0)
        assert report.best_hidden["variance"] == 8
        overall, best = summarize_tables(report)
        assert overall.rows == (("variance", "90.0", "80.0", "70.0"),)
        assert best.rows == (("variance", 8, "90.0", "80.0", "70.0"),)

    def test_best_hidden_picks_highest_clean_mean(self):
        spec = tiny_spec(techniques=("all",), hidden_sizes=(5, 8), models_per_size=1)
        cells = [make_cell("all", 5, 0, 0.90), make_cell("all", 8, 0, 0.95)]
        report = SweepReport.build(spec, 25, cells)
        assert report.best_hidden["all"] == 8

    def test_best_hidden_tie_prefers_smaller_size(self):
        spec = tiny_spec(techniques=("all",), hidden_sizes=(5, 8), models_per_size=1)
        cells = [make_cell("all", 5, 0, 0.95), make_cell("all", 8, 0, 0.95)]
        report = SweepReport.build(spec, 25, cells)
        assert report.best_hidden["all"] == 5

    def test_overall_mean_is_mean_of_per_size_means(self, tiny_report):
        # brute-force re-aggregation from the raw cells
        spec = tiny_report.spec
        for tech in spec.techniques:
            for series in spec.series_names:
                size_means = []
                for size in spec.hidden_sizes:
                    vals = [
                        c.metrics[series]
                        for c in tiny_report.cells
                        if c.technique == tech
                        and c.hidden_size == size
                        and not c.diverged
                    ]
                    assert (
                        abs(np.mean(vals) - tiny_report.per_size[(tech, size)][series][0])
                        < 1e-12
                    )
                    size_means.append(np.mean(vals))
                assert (
                    abs(np.mean(size_means) - tiny_report.per_technique[tech][series][0])
                    < 1e-12
                )

    def test_all_cells_divergent_for_technique_raises(self):
        spec = tiny_spec(techniques=("all",), hidden_sizes=(5,), models_per_size=1)
        dead = CellResult(
            technique="all",
            hidden_size=5,
            replicate=0,
            seed=1,
            metrics=None,
            final_loss=None,
            epochs=0,
            stop_reason=None,
            diverged=True,
            error="boom",
        )
        report = SweepReport.build(spec, 25, [dead])
        with pytest.raises(ValueError, match="'all'"):
            summarize_tables(report)

    def test_empty_report_rejected(self):
        report = SweepReport.build(tiny_spec(), 25, [])
        with pytest.raises(ValueError, match="no cells"):
            summarize_tables(report)


class TestTables:
    def test_overall_table_shape(self, tiny_report):
        overall, best = summarize_tables(tiny_report)
        assert overall.header == ("technique", "training", "10%", "20%")
        assert [r[0] for r in overall.rows] == ["all", "variance"]
        assert best.header == ("technique", "best_hidden", "training", "10%", "20%")
        csv_text = overall.to_csv()
        assert csv_text.splitlines()[0] == "technique,training,10%,20%"


class TestPlotData:
    def test_fig8_row_count(self, tiny_report):
        rows = emit_plot_data(tiny_report, "fig8")
        spec = tiny_report.spec
        expected = len(spec.techniques) * len(spec.hidden_sizes) * (
            1 + len(spec.perturb_rates)
        )
        assert len(rows) == expected

    def test_single_cell_fig9_one_row_per_series(self):
        spec = tiny_spec(techniques=("all",), hidden_sizes=(5,), models_per_size=1)
        report = SweepReport.build(spec, 25, [make_cell("all", 5, 0, 0.9)])
        rows = emit_plot_data(report, "fig9")
        assert len(rows) == 1 + len(spec.perturb_rates)
        assert {r[2] for r in rows} == {"clean", "rate_0.1", "rate_0.2"}

    def test_fig10_aggregates_over_sizes(self, tiny_report):
        rows = emit_plot_data(tiny_report, "fig10")
        spec = tiny_report.spec
        assert len(rows) == len(spec.techniques) * (1 + len(spec.perturb_rates))
        assert all(r[1] == "overall" for r in rows)

    def test_fig4_requires_replication(self, tiny_report):
        with pytest.raises(ValueError, match="replication"):
            emit_plot_data(tiny_report, "fig4")

    def test_fig4_from_embedded_curve(self, tiny_corpus):
        spec = tiny_spec(
            techniques=("all",),
            hidden_sizes=(5,),
            models_per_size=1,
            replication_factors=(1, 2),
        )
        report = run_sweep(tiny_corpus, spec)
        rows = emit_plot_data(report, "fig4")
        assert [r[2] for r in rows] == ["factor_1", "factor_2"]

    def test_unknown_view(self, tiny_report):
        with pytest.raises(ValueError, match="unknown plot view"):
            emit_plot_data(tiny_report, "fig99")

    def test_empty_filter_rejected(self, tiny_report):
        with pytest.raises(ValueError, match="empty"):
            emit_plot_data(tiny_report, "fig8", techniques=())

    def test_unknown_filter_rejected(self, tiny_report):
        with pytest.raises(ValueError, match="not present"):
            emit_plot_data(tiny_report, "fig8", techniques=("pca",))

    def test_ordering_stable(self, tiny_report):
        rows = emit_plot_data(tiny_report, "fig8")
        assert rows == emit_plot_data(tiny_report, "fig8")
        techniques = [r[0] for r in rows]
        assert techniques == sorted(
            techniques, key=lambda t: tiny_report.spec.techniques.index(t)
        )


class TestReplicationCurve:
    def test_factor_means_nondecreasing_within_noise(self):
        m = synth_matrix(30, 12, seed=4)
        curve = replication_curve(
            m,
            factors=(1, 2, 3),
            hidden_size=6,
            models=3,
            train=TrainConfig(max_epochs=40, goal_loss=1e-3),
            base_seed=5,
        )
        means = [pt.mean for pt in curve.points]
        assert all(b >= a - 0.02 for a, b in zip(means, means[1:]))
        assert len(curve.points[0].accuracies) == 3

    def test_bad_factor(self):
        with pytest.raises(ValueError):
            replication_curve(synth_matrix(5, 4, seed=0), factors=(0,))


class TestSerialization:
    def test_round_trip_is_stable(self, tiny_report):
        text = report_to_json(tiny_report)
        again = report_from_json(text)
        assert report_to_json(again) == text
        assert again.best_hidden == tiny_report.best_hidden
        assert again.per_size == tiny_report.per_size

    def test_unknown_version_rejected(self, tiny_report):
        import json

        doc = json.loads(report_to_json(tiny_report))
        doc["format_version"] = 9
        with pytest.raises(ValueError, match="format_version"):
            report_from_json(json.dumps(doc))
