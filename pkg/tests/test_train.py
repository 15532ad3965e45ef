"""Training loop behavior, CV driver, grid search, and artifact writers."""

import json
from dataclasses import replace

import numpy as np
import pytest

from ibanet import data as D
from ibanet import train as tr
from ibanet.errors import ConfigError, DivergenceError
from ibanet.tensor import Tensor


def tiny_dataset(n_per_class=30, n_classes=2, width=16, seed=0):
    """Trivially separable: class c is a constant level c plus small noise."""
    rng = np.random.default_rng(seed)
    xs, ys, subjects = [], [], []
    for c in range(n_classes):
        for i in range(n_per_class):
            xs.append(
                np.full((1, width), float(2 * c))
                + 0.05 * rng.standard_normal((1, width))
            )
            ys.append(c)
            subjects.append(f"s{i % 3}")
    return D.Dataset(
        X=np.stack(xs),
        y=np.array(ys, dtype=np.int64),
        subjects=np.array(subjects, dtype=object),
        label_names=[f"c{i}" for i in range(n_classes)],
        base_rate_hz=8.0,
    )


def tiny_config(**overrides):
    base = dict(
        epochs=3,
        batch_size=32,
        lr=3e-3,
        weight_decay=0.0,
        tau=0.4,
        k=0.3,
        factors=(1, 2),
        seed=0,
        variant="iba_net",
        enc_channels=(2, 3),
        kernel=3,
    )
    base.update(overrides)
    return tr.TrainConfig(**base)


class TestLossResolution:
    def test_auto_picks_by_variant(self):
        assert tr.resolved_loss_kind(tiny_config()) == "cb_focal"
        assert (
            tr.resolved_loss_kind(tiny_config(variant="fusion:addition"))
            == "cb_focal"
        )
        assert (
            tr.resolved_loss_kind(tiny_config(variant="single_rate:25"))
            == "cross_entropy"
        )

    def test_explicit_kind_wins(self):
        cfg = tiny_config(variant="single_rate:25", loss_kind="cb_focal")
        assert tr.resolved_loss_kind(cfg) == "cb_focal"


class TestEffectiveFactors:
    def test_multi_rate_uses_config_factors(self):
        mode, factors = tr.effective_factors(tiny_config(), base_rate_hz=100.0)
        assert mode == "soft_weighted"
        assert factors == (1, 2)

    def test_single_rate_derives_factor(self):
        for rate, expected in ((50.0, 2), (25.0, 4), (12.5, 8)):
            cfg = tiny_config(variant=f"single_rate:{rate}")
            mode, factors = tr.effective_factors(cfg, base_rate_hz=100.0)
            assert mode == "single"
            assert factors == (expected,)

    def test_non_divisor_rate_rejected(self):
        cfg = tiny_config(variant="single_rate:33")
        with pytest.raises(ConfigError):
            tr.effective_factors(cfg, base_rate_hz=100.0)


class TestClassCounts:
    def test_counts_from_train_split(self):
        train = tiny_dataset(n_per_class=5)
        val = tiny_dataset(n_per_class=2)
        counts, warnings = tr._training_class_counts(train, val)
        np.testing.assert_array_equal(counts, [5, 5])
        assert warnings == []

    def test_absent_train_class_clamps_and_warns(self):
        full = tiny_dataset(n_per_class=4)
        train = full.subset(np.flatnonzero(full.y == 0))
        counts, warnings = tr._training_class_counts(train, full)
        np.testing.assert_array_equal(counts, [4, 1])
        assert len(warnings) == 1
        assert "c1" in warnings[0]

    def test_absent_everywhere_clamps_silently(self):
        full = tiny_dataset(n_per_class=4)
        only0 = full.subset(np.flatnonzero(full.y == 0))
        counts, warnings = tr._training_class_counts(only0, only0)
        np.testing.assert_array_equal(counts, [4, 1])
        assert warnings == []


class TestTrainLoop:
    def test_learns_separable_data(self):
        ds = tiny_dataset()
        folds = D.split(ds, D.SplitPlan("stratified", k=3, seed=0))
        result = tr.run_fold(tiny_config(epochs=10, lr=3e-2), ds, folds[0])
        assert result.test_report.accuracy >= 95.0
        assert result.best_val_accuracy >= 95.0

    def test_restored_model_reproduces_best_val_accuracy(self):
        ds = tiny_dataset()
        folds = D.split(ds, D.SplitPlan("stratified", k=3, seed=0))
        fold = folds[0]
        cfg = replace(tiny_config(epochs=4), fold_salt=fold.fold_id)
        model, record, factors = tr.train(
            cfg, ds.subset(fold.train_idx), ds.subset(fold.val_idx)
        )
        val_acc = tr.accuracy(model, ds.subset(fold.val_idx), cfg, factors)
        assert val_acc == pytest.approx(record.best_val_accuracy)

    def test_zero_lr_keeps_initial_parameters(self):
        ds = tiny_dataset()
        folds = D.split(ds, D.SplitPlan("stratified", k=3, seed=0))
        fold = folds[0]
        cfg = replace(tiny_config(lr=0.0, epochs=2), fold_salt=fold.fold_id)
        model, record, _ = tr.train(
            cfg, ds.subset(fold.train_idx), ds.subset(fold.val_idx)
        )
        fresh, _ = tr.build_model(cfg, ds.n_classes, ds.base_rate_hz)
        for got, want in zip(model.state_copy(), fresh.state_copy()):
            np.testing.assert_array_equal(got, want)

    def test_constant_val_accuracy_keeps_first_epoch(self):
        # strictly-greater checkpointing: ties never displace the incumbent
        ds = tiny_dataset()
        folds = D.split(ds, D.SplitPlan("stratified", k=3, seed=0))
        cfg = replace(tiny_config(lr=0.0, epochs=3), fold_salt=0)
        _, record, _ = tr.train(
            cfg, ds.subset(folds[0].train_idx), ds.subset(folds[0].val_idx)
        )
        assert record.best_epoch == 0
        accs = [h["val_accuracy"] for h in record.history]
        assert len(set(accs)) == 1

    def test_history_follows_lr_schedule(self):
        ds = tiny_dataset()
        folds = D.split(ds, D.SplitPlan("stratified", k=3, seed=0))
        cfg = replace(
            tiny_config(epochs=4, lr=1e-2, lr_drop_every=2, lr_drop_factor=0.5),
            fold_salt=0,
        )
        _, record, _ = tr.train(
            cfg, ds.subset(folds[0].train_idx), ds.subset(folds[0].val_idx)
        )
        lrs = [h["lr"] for h in record.history]
        np.testing.assert_allclose(lrs, [1e-2, 1e-2, 5e-3, 5e-3])

    def test_nan_input_raises_divergence_with_location(self):
        ds = tiny_dataset()
        folds = D.split(ds, D.SplitPlan("stratified", k=3, seed=0))
        ds.X[folds[0].train_idx, 0, 0] = np.nan
        with pytest.raises(DivergenceError) as exc:
            tr.run_fold(tiny_config(), ds, folds[0])
        assert exc.value.epoch == 0
        assert isinstance(exc.value.batch, int)

    def test_single_rate_variant_trains(self):
        ds = tiny_dataset()
        folds = D.split(ds, D.SplitPlan("stratified", k=3, seed=0))
        cfg = tiny_config(variant="single_rate:4", epochs=10, lr=3e-2)
        result = tr.run_fold(cfg, ds, folds[0])
        assert result.test_report.accuracy >= 90.0
        assert result.router_class_rates is None


class TestFoldDeterminism:
    def test_same_config_same_result_bytes(self):
        ds = tiny_dataset()
        folds = D.split(ds, D.SplitPlan("stratified", k=3, seed=0))
        a = tr.run_fold(tiny_config(), ds, folds[0])
        b = tr.run_fold(tiny_config(), ds, folds[0])
        assert a.history == b.history
        np.testing.assert_array_equal(a.confusion, b.confusion)
        np.testing.assert_array_equal(
            a.angle_report.angles, b.angle_report.angles
        )

    def test_fold_salt_differentiates_folds(self):
        ds = tiny_dataset()
        folds = D.split(ds, D.SplitPlan("stratified", k=3, seed=0))
        r0 = tr.run_fold(tiny_config(), ds, folds[0])
        r1 = tr.run_fold(tiny_config(), ds, folds[1])
        assert r0.history != r1.history


class TestCrossValidation:
    def test_serial_runs_all_folds_sorted(self):
        ds = tiny_dataset()
        cv = tr.run_cross_validation(
            tiny_config(), ds, D.SplitPlan("stratified", k=3, seed=0)
        )
        assert [f.fold_id for f in cv.folds] == [0, 1, 2]

    def test_aggregate_is_unweighted_fold_mean(self):
        ds = tiny_dataset()
        cv = tr.run_cross_validation(
            tiny_config(), ds, D.SplitPlan("stratified", k=3, seed=0)
        )
        accs = [f.test_report.accuracy for f in cv.folds]
        assert cv.aggregate.accuracy == pytest.approx(np.mean(accs))

    def test_parallel_matches_serial_bitwise(self):
        ds = tiny_dataset()
        plan = D.SplitPlan("stratified", k=3, seed=0)
        serial = tr.run_cross_validation(tiny_config(), ds, plan, jobs=1)
        parallel = tr.run_cross_validation(tiny_config(), ds, plan, jobs=2)
        for a, b in zip(serial.folds, parallel.folds):
            assert a.fold_id == b.fold_id
            assert a.history == b.history
            np.testing.assert_array_equal(a.confusion, b.confusion)


class TestGridSearch:
    def test_row_census_and_selection(self):
        ds = tiny_dataset()
        plan = D.SplitPlan("stratified", k=3, seed=0)
        grid = tr.grid_search(
            tiny_config(), ds, plan, taus=(0.4, 0.8), ks=(0.1, 0.3), cell_epochs=1
        )
        assert len(grid.rows) == 4
        best_row = max(grid.rows, key=lambda r: r["val_accuracy"])
        assert any(
            r["tau"] == grid.best_tau and r["k"] == grid.best_k
            and r["val_accuracy"] == best_row["val_accuracy"]
            for r in grid.rows
        )

    def test_tie_breaks_to_smallest_tau_then_k(self):
        # constant inputs force a constant prediction, so balanced classes pin
        # every cell at exactly 50 percent and the tie rule decides alone
        ds = tiny_dataset()
        ds.X[:] = 0.0
        plan = D.SplitPlan("stratified", k=3, seed=0)
        grid = tr.grid_search(
            tiny_config(lr=0.0), ds, plan,
            taus=(0.8, 0.4), ks=(0.3, 0.1), cell_epochs=1,
        )
        assert len({r["val_accuracy"] for r in grid.rows}) == 1
        assert grid.best_tau == 0.4
        assert grid.best_k == 0.1

    def test_empty_grid_rejected(self):
        ds = tiny_dataset()
        plan = D.SplitPlan("stratified", k=3, seed=0)
        with pytest.raises(ConfigError):
            tr.grid_search(tiny_config(), ds, plan, taus=(), ks=(0.1,))


class TestAblation:
    def test_soft_weighted_ablation_equals_standard_run(self):
        ds = tiny_dataset()
        plan = D.SplitPlan("stratified", k=3, seed=0)
        standard = tr.run_cross_validation(tiny_config(), ds, plan)
        ablated = tr.fusion_ablation(tiny_config(), ds, plan, "soft_weighted")
        for a, b in zip(standard.folds, ablated.folds):
            assert a.history == b.history
            np.testing.assert_array_equal(a.confusion, b.confusion)

    def test_other_modes_reach_the_model(self):
        # averaging has no learned router, so its folds report no rate usage
        ds = tiny_dataset()
        plan = D.SplitPlan("stratified", k=3, seed=0)
        standard = tr.run_cross_validation(tiny_config(epochs=2), ds, plan)
        swapped = tr.fusion_ablation(tiny_config(epochs=2), ds, plan, "averaging")
        assert all(f.router_class_rates is not None for f in standard.folds)
        assert all(f.router_class_rates is None for f in swapped.folds)


@pytest.fixture(scope="module")
def cv_result():
    ds = tiny_dataset()
    return (
        tr.run_cross_validation(
            tiny_config(epochs=2), ds, D.SplitPlan("stratified", k=3, seed=0)
        ),
        ds,
    )


class TestArtifactWriters:
    def test_metrics_json_structure(self, cv_result, tmp_path):
        cv, _ = cv_result
        path = tmp_path / "metrics.json"
        tr.write_metrics_json(path, cv)
        payload = json.loads(path.read_text())
        assert set(payload) == {"aggregate", "folds"}
        assert len(payload["folds"]) == 3
        fold0 = payload["folds"][0]
        assert fold0["fold"] == 0
        assert "macro_recall" in fold0["metrics"]
        assert "spread" in fold0["angles"]
        assert path.read_text().endswith("\n")

    def test_confusion_csv_total_row_sums_folds(self, cv_result, tmp_path):
        cv, ds = cv_result
        path = tmp_path / "confusion.csv"
        tr.write_confusion_csv(path, cv, ds.label_names)
        lines = path.read_text().splitlines()
        assert lines[0] == "fold,true_class,c0,c1"
        # 3 folds x 2 classes + 2 total rows + header
        assert len(lines) == 1 + 3 * 2 + 2
        total_c0 = lines[-2].split(",")
        assert total_c0[0] == "total"
        summed = sum(f.confusion for f in cv.folds)
        assert [int(v) for v in total_c0[2:]] == summed[0].tolist()

    def test_history_csv_one_line_per_epoch(self, cv_result, tmp_path):
        cv, _ = cv_result
        path = tmp_path / "history.csv"
        tr.write_history_csv(path, cv)
        lines = path.read_text().splitlines()
        assert lines[0] == "fold,epoch,lr,train_accuracy,val_accuracy"
        assert len(lines) == 1 + 3 * 2

    def test_angles_csv_upper_triangle_only(self, cv_result, tmp_path):
        cv, ds = cv_result
        path = tmp_path / "angles.csv"
        tr.write_angles_csv(path, cv, ds.label_names)
        lines = path.read_text().splitlines()
        assert len(lines) == 1 + 3 * 1  # M=2: one pair per fold
        assert lines[1].startswith("0,c0,c1,")

    def test_router_rates_csv_has_per_class_rows(self, cv_result, tmp_path):
        cv, ds = cv_result
        path = tmp_path / "router_rates.csv"
        tr.write_router_rates_csv(path, cv, ds.label_names)
        lines = path.read_text().splitlines()
        assert lines[0] == "fold,class,rate_0,rate_1"
        assert len(lines) == 1 + 3 * 2
        rates = [float(v) for v in lines[1].split(",")[2:]]
        assert sum(rates) == pytest.approx(1.0, abs=1e-9)

    def test_writers_are_byte_deterministic(self, cv_result, tmp_path):
        _, ds = cv_result
        plan = D.SplitPlan("stratified", k=3, seed=0)
        for i, out in enumerate((tmp_path / "a", tmp_path / "b")):
            out.mkdir()
            cv = tr.run_cross_validation(tiny_config(epochs=2), ds, plan)
            tr.write_run_artifacts(out, cv, ds.label_names)
        for name in (
            "metrics.json",
            "confusion.csv",
            "history.csv",
            "angles.csv",
            "router_rates.csv",
        ):
            a = (tmp_path / "a" / name).read_bytes()
            b = (tmp_path / "b" / name).read_bytes()
            assert a == b, f"{name} differs between identical runs"

    def test_grid_csv_format(self, tmp_path):
        grid = tr.GridResult(
            rows=[
                {
                    "tau": 0.4,
                    "k": 0.1,
                    "val_accuracy": 91.5,
                    "test_accuracy": 90.0,
                    "test_macro_recall": 88.0,
                    "test_macro_f1": 87.5,
                }
            ],
            best_tau=0.4,
            best_k=0.1,
        )
        path = tmp_path / "grid.csv"
        tr.write_grid_csv(path, grid)
        lines = path.read_text().splitlines()
        assert lines[0].startswith("tau,k,val_accuracy")
        assert lines[1] == "0.4,0.1,91.5,90.0,88.0,87.5"

    def test_fc_weights_csv(self, tmp_path):
        w = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
        path = tmp_path / "fc.csv"
        tr.write_fc_weights_csv(path, w, ["c0", "c1"])
        lines = path.read_text().splitlines()
        assert lines[0] == "dim,c0,c1"
        assert lines[2] == "1,3.0,4.0"
