import csv
import json
import os

import numpy as np
import pytest

from modsplit import bench, composer, data, models


class TestFixture:
    def test_split_protocol(self):
        fx = bench.desk_fixture(0, n_classes=4, per_class=300)
        total = 4 * 300
        assert len(fx.train) == total * 2 // 3
        assert len(fx.valid) + len(fx.test) + len(fx.module_eval) == total // 3
        assert len(fx.module_eval) == pytest.approx(len(fx.test) / 4, abs=2)
        assert fx.train.split_tag == "train"
        assert fx.module_eval.split_tag == "module_eval"

    def test_fixture_deterministic(self):
        a = bench.desk_fixture(5, per_class=100)
        b = bench.desk_fixture(5, per_class=100)
        assert np.array_equal(a.test.images, b.test.images)


class TestConfig:
    def test_empty_seeds_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="seeds"):
            bench.ExperimentConfig(scenario="rq1_modularize", out_dir=str(tmp_path),
                                   seeds=())

    def test_unknown_scenario_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="scenario"):
            bench.ExperimentConfig(scenario="rq9", out_dir=str(tmp_path))

    def test_bad_weak_variant_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="weak_variant"):
            bench.ExperimentConfig(scenario="rq2_patch", out_dir=str(tmp_path),
                                   weak_variant="tiny")


class TestPredictionLogs:
    def test_accuracy_recomputes_from_log(self, tmp_path):
        labels = np.array([0, 1, 2, 1])
        preds = np.array([0, 1, 0, 1])
        path = bench._log_predictions(str(tmp_path), "probe", labels, preds)
        assert bench.accuracy_from_log(path) == 0.75


class TestNewTaskCompose:
    def _pool(self, modules):
        return {m.class_id: m for m in modules}

    def test_degenerate_pair_rejected(self, desk_modules, desk_data):
        pool = self._pool(desk_modules)
        with pytest.raises(ValueError, match="degenerate"):
            bench.new_task_compose((pool, pool), [(2, 2)],
                                   ((desk_data.train, desk_data.test),
                                    (desk_data.train, desk_data.test)),
                                   bench.desk_train_config(0))

    def test_missing_module_rejected(self, desk_modules, desk_data):
        pool = self._pool(desk_modules)
        partial = {0: pool[0]}
        with pytest.raises(ValueError, match="no module"):
            bench.new_task_compose((partial, pool), [(1, 2)],
                                   ((desk_data.train, desk_data.test),
                                    (desk_data.train, desk_data.test)),
                                   bench.desk_train_config(0))

    def test_cross_task_pair_reports_gap(self, desk_modules, desk_data):
        pool = self._pool(desk_modules)
        cfg = bench.desk_train_config(0)
        cfg.epochs = 8
        rows = bench.new_task_compose((pool, pool), [(0, 2), (1, 3)],
                                      ((desk_data.train, desk_data.test),
                                       (desk_data.train, desk_data.test)),
                                      cfg)
        assert len(rows) == 2
        for row in rows:
            assert 0 <= row["cm_acc"] <= 1
            assert 0 <= row["rtm_acc"] <= 1
            assert row["gap"] == pytest.approx(row["rtm_acc"] - row["cm_acc"])

    def test_nine_cross_task_pairs_mean_gap_within_6_points(self, desk_tm, desk_data,
                                                            desk_modules):
        # genuinely cross-task: a second synthetic task with its own TM and modules
        from _cache import ALL_DEPS, cached
        from modsplit import grad, models

        def build():
            fx_b = bench.desk_fixture(1007)
            tm_b = models.train(models.build_model(models.desk_plain(), seed=1007),
                                fx_b.train, fx_b.valid, bench.desk_train_config(1007))
            res = grad.split(tm_b, fx_b.train, fx_b.valid,
                             bench.desk_grad_config(1007, epochs=20))
            pool_a = {m.class_id: m for m in desk_modules}
            pool_b = {m.class_id: m for m in res.to_modules(tm_b)}
            pairs = [(a, b) for a in (0, 1, 2) for b in (0, 1, 2)]
            cfg = bench.desk_train_config(5)
            cfg.epochs = 10
            return bench.new_task_compose(
                (pool_a, pool_b), pairs,
                ((desk_data.train, desk_data.test), (fx_b.train, fx_b.test)), cfg)
        rows = cached("newtask_gap", "taskB1007-9pairs", ALL_DEPS, build)
        mean_gap = float(np.mean([r["gap"] for r in rows]))
        assert 100 * mean_gap <= 6.0


@pytest.fixture(scope="module")
def rq1_tiny(tmp_path_factory):
    out = tmp_path_factory.mktemp("rq1")
    cfg = bench.ExperimentConfig(
        scenario="rq1_modularize", out_dir=str(out), seeds=(0,),
        per_class=300, train_epochs=14, grad_epochs=10, ga_generations=3,
    )
    return cfg, bench.run(cfg)


class TestRq1:
    def test_report_written(self, rq1_tiny):
        cfg, report = rq1_tiny
        assert os.path.exists(report.summary_path)
        text = open(report.summary_path).read()
        assert "| metric |" in text
        assert "reference" in text.lower()

    def test_table_columns(self, rq1_tiny):
        cfg, report = rq1_tiny
        with open(report.tables["rq1_modularization"]) as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 1
        for col in ("tm_acc", "grad_cm_acc", "grad_loss", "grad_retained",
                    "ga_cm_acc", "ga_loss", "ga_retained"):
            assert col in rows[0]

    def test_plots_written(self, rq1_tiny):
        _, report = rq1_tiny
        assert len(report.plots) == 2
        for p in report.plots:
            assert p.endswith(".svg") and os.path.exists(p)

    def test_raw_prediction_logs_back_reported_numbers(self, rq1_tiny):
        cfg, report = rq1_tiny
        with open(report.tables["rq1_modularization"]) as f:
            row = next(csv.DictReader(f))
        log = os.path.join(cfg.out_dir, "raw", "rq1_grad_cm_seed0.csv")
        assert bench.accuracy_from_log(log) == pytest.approx(float(row["grad_cm_acc"]))

    def test_config_echoed(self, rq1_tiny):
        cfg, _ = rq1_tiny
        with open(os.path.join(cfg.out_dir, "config.json")) as f:
            saved = json.load(f)
        assert saved["scenario"] == "rq1_modularize"
        assert tuple(saved["seeds"]) == (0,)


class TestFailureHandling:
    def test_partial_report_on_failure(self, tmp_path, monkeypatch):
        cfg = bench.ExperimentConfig(scenario="rq5_overhead", out_dir=str(tmp_path),
                                     seeds=(0,), per_class=120, train_epochs=1,
                                     grad_epochs=1)
        def boom(*a, **k):
            raise RuntimeError("stage exploded")
        monkeypatch.setattr(bench, "_rq5", boom)
        monkeypatch.setitem(bench._SCENARIOS, "rq5_overhead", boom)
        with pytest.raises(RuntimeError, match="stage exploded"):
            bench.run(cfg)
        text = open(os.path.join(str(tmp_path), "report.md")).read()
        assert "FAILED" in text and "stage exploded" in text
