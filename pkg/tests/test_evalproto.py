import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fixtures import small_generated
from ktbench import dataio, evalproto
from ktbench.evalproto import (HyperParams, MetricsReport, ProtocolError, RunManifest, Setup, build_grid,
                               grid_search_fold0, make_fold_plan, run_cv)
from ktbench.metrics import MetricError, auc
from ktbench.models import Kind, ModelVariant, zero_params
from ktbench.training import TrainConfig, TrainingDivergence, TrainResult, evaluate_auc

DKT = ModelVariant(Kind.DKT)


def pair_count_auc(scores, labels) -> float:
    """O(n^2) oracle: P(pos > neg) + 0.5 P(pos == neg) over all pairs."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    pos, neg = s[y == 1], s[y == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def check_partition(plan, subjects):
    folds = [set(f) for f in plan.folds]
    test = set(plan.test_subjects)
    train = set().union(*folds)
    assert len(folds) == 5
    assert not (test & train)
    assert sum(len(f) for f in folds) == len(train)
    assert train | test == set(subjects)
    assert len(test) == round(0.2 * len(subjects))
    sizes = [len(f) for f in plan.folds]
    assert max(sizes) - min(sizes) <= 1 and sizes == sorted(sizes, reverse=True)


class TestFoldPlan:
    def test_hundred(self):
        subjects = [f"s{i:03d}" for i in range(100)]
        plan = make_fold_plan(subjects, 0, 1)
        assert len(plan.test_subjects) == 20
        assert [len(f) for f in plan.folds] == [16] * 5
        check_partition(plan, subjects)

    def test_eighty_three(self):
        subjects = [f"s{i:03d}" for i in range(83)]
        plan = make_fold_plan(subjects, 4, 5)
        assert len(plan.test_subjects) == 17
        # round-robin over 66 training subjects: fold k holds positions k, k+5, ...
        assert [len(f) for f in plan.folds] == [len(range(k, 66, 5)) for k in range(5)] == [14, 13, 13, 13, 13]
        check_partition(plan, subjects)

    def test_deterministic(self):
        subjects = [str(i) for i in range(50)]
        assert make_fold_plan(subjects, 3, 4).digest() == make_fold_plan(list(reversed(subjects)), 3, 4).digest()

    def test_seeds_are_independent(self):
        subjects = [str(i) for i in range(50)]
        a, b = make_fold_plan(subjects, 3, 4), make_fold_plan(subjects, 3, 9)
        assert a.test_subjects == b.test_subjects and a.folds != b.folds

    def test_too_few(self):
        with pytest.raises(ProtocolError):
            make_fold_plan([str(i) for i in range(9)], 0, 0)

    @settings(max_examples=100)
    @given(st.integers(10, 400), st.integers(0, 2**31), st.integers(0, 2**31))
    def test_partition_axioms(self, n, split_seed, fold_seed):
        subjects = [f"u{i}" for i in range(n)]
        check_partition(make_fold_plan(subjects, split_seed, fold_seed), subjects)


class TestAuc:
    def test_perfect(self):
        assert auc([0.9, 0.1], [1, 0]) == 1.0

    def test_all_tied(self):
        assert auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5

    def test_inverted(self):
        assert auc([0.1, 0.9], [1, 0]) == 0.0

    def test_single_class(self):
        with pytest.raises(MetricError):
            auc([0.2, 0.4], [1, 1])

    def test_two_hundred_random(self):
        rng = np.random.default_rng(0)
        s, y = rng.random(200), rng.integers(0, 2, 200)
        assert auc(s, y) == pair_count_auc(s, y)

    @given(st.lists(st.tuples(st.integers(0, 40), st.integers(0, 1)), min_size=2, max_size=120))
    def test_rank_invariance(self, pairs):
        s = np.array([p[0] for p in pairs], dtype=float)
        y = np.array([p[1] for p in pairs])
        if y.min() == y.max():
            return
        base = auc(s, y)
        assert auc(np.exp(s / 10.0), y) == base
        assert auc(s ** 3 + 2.0, y) == base
        assert auc(s, y) == pair_count_auc(s, y)


class TestGrid:
    def test_dkt_grid(self):
        grid = build_grid(Kind.DKT)
        assert [g.learning_rate for g in grid] == [5e-5, 1e-4, 5e-4]

    def test_code_grid_order(self):
        grid = build_grid(Kind.CODEDKT)
        assert len(grid) == 75
        assert grid[0] == HyperParams(5e-5, 50, 0.1) and grid[1] == HyperParams(1e-4, 50, 0.1)
        assert grid[-1] == HyperParams(5e-4, 350, 0.5)


@pytest.fixture(scope="module")
def setup(tmp_path_factory):
    files = small_generated(tmp_path_factory.mktemp("proto"), n_students=30)
    corpus = dataio.build_sequences(dataio.parse_main_table(files["main_table"]), 50)
    return Setup(DKT, corpus, hidden=4, base=TrainConfig(max_epochs=2))


def constant_train(scores=None, calls=None, diverge=()):
    """Stub trainer: zero parameters (every prediction 0.5); optional scripted validation AUC."""
    def fn(variant, dims, train_seqs, val_seqs, cfg):
        idx = len(calls) if calls is not None else 0
        if calls is not None:
            calls.append(cfg.learning_rate)
        if idx in diverge:
            raise TrainingDivergence(1, "stub")
        params = zero_params(variant, dims)
        val = scores[idx] if scores is not None else evaluate_auc(params, variant, dims, val_seqs)
        return TrainResult(params=params, best_epoch=1, train_loss=[0.7], val_auc=[val])
    return fn


class TestGridSearch:
    def test_singleton(self, setup):
        plan = make_fold_plan(setup.corpus.subjects(), 0, 1)
        res = grid_search_fold0([HyperParams(1e-4)], plan, setup, train_fn=constant_train(scores=[0.1]))
        assert res.theta_star == HyperParams(1e-4) and res.best_index == 0

    def test_dkt_three_trainings(self, setup):
        plan = make_fold_plan(setup.corpus.subjects(), 0, 1)
        calls = []
        grid_search_fold0(build_grid(Kind.DKT), plan, setup, train_fn=constant_train(scores=[0.5, 0.6, 0.4], calls=calls))
        assert calls == [5e-5, 1e-4, 5e-4]

    def test_tie_goes_to_earliest(self, setup):
        plan = make_fold_plan(setup.corpus.subjects(), 0, 1)
        res = grid_search_fold0(build_grid(Kind.DKT), plan, setup,
                                train_fn=constant_train(scores=[0.5, 0.7, 0.7], calls=[]))
        assert res.best_index == 1

    def test_diverged_point_skipped(self, setup):
        plan = make_fold_plan(setup.corpus.subjects(), 0, 1)
        res = grid_search_fold0(build_grid(Kind.DKT), plan, setup,
                                train_fn=constant_train(scores=[0.9, 0.6, 0.7], calls=[], diverge={0}))
        assert res.best_index == 2
        assert res.points[0]["status"] == "diverged"

    def test_all_diverged(self, setup):
        plan = make_fold_plan(setup.corpus.subjects(), 0, 1)
        with pytest.raises(ProtocolError):
            grid_search_fold0(build_grid(Kind.DKT), plan, setup,
                              train_fn=constant_train(scores=[0.5] * 3, calls=[], diverge={0, 1, 2}))

    def test_validates_on_fold0_only(self, setup):
        plan = make_fold_plan(setup.corpus.subjects(), 0, 1)
        seen = []

        def fn(variant, dims, tr, va, cfg):
            seen.append(({s.subject_id for s in tr}, {s.subject_id for s in va}))
            return constant_train(scores=[0.5])(variant, dims, tr, va, cfg)

        grid_search_fold0([HyperParams(1e-4)], plan, setup, train_fn=fn)
        assert seen[0][1] == set(plan.folds[0])
        assert seen[0][0] == set(plan.training_folds(0))


class TestRunCv:
    def test_constant_model(self, setup):
        plan = make_fold_plan(setup.corpus.subjects(), 0, 1)
        rep = run_cv(HyperParams(1e-4), plan, setup, train_fn=constant_train())
        assert rep.fold_auc == [0.5] * 5 and rep.std == 0.0 and rep.test_auc == [0.5] * 5

    def test_theta_fixed_across_folds(self, setup):
        plan = make_fold_plan(setup.corpus.subjects(), 0, 1)
        theta = HyperParams(5e-4, 16, 0.2)
        rep = run_cv(theta, plan, setup, train_fn=constant_train())
        assert rep.fold_theta == [theta.to_dict()] * 5

    def test_failed_fold_flagged(self, setup):
        plan = make_fold_plan(setup.corpus.subjects(), 0, 1)
        rep = run_cv(HyperParams(1e-4), plan, setup,
                     train_fn=constant_train(scores=[0.6, 0.7, 0.8, 0.9, 0.5], calls=[], diverge={2}))
        assert rep.failed_folds == [2] and rep.fold_auc[2] is None
        assert rep.mean == pytest.approx((0.6 + 0.7 + 0.9 + 0.5) / 4, abs=1e-15)
        assert rep.to_dict()["incomplete"] is True

    def test_real_training(self, setup):
        plan = make_fold_plan(setup.corpus.subjects(), 0, 1)
        rep = run_cv(HyperParams(5e-3), plan, setup)
        assert all(0.0 <= a <= 1.0 for a in rep.fold_auc)
        assert len(rep.fold_epochs) == 5


def _manifest(L=50, align=True, assignment="A1"):
    return RunManifest(assignment_id=assignment, variant=DKT.to_dict(), L_max=L, align=align,
                       theta_star=HyperParams(1e-4).to_dict(), theta_provenance="explicit",
                       seeds={"split": 0, "fold": 1, "init": 2, "shuffle": 3}, corpus_hash="abc",
                       truncation="earliest", fold_plan_hash="def", train_config={}, hidden=4,
                       fold_theta=[HyperParams(1e-4).to_dict()] * 5)


def _metrics(values):
    return MetricsReport(list(values), [3] * len(values), [0.6] * len(values), [HyperParams(1e-4).to_dict()] * 5)


class TestReport:
    def test_three_stable_files(self, tmp_path):
        paths = evalproto.emit_report(_manifest(), _metrics([0.6, 0.62, 0.64, 0.66, 0.68]), tmp_path)
        assert [p.name for p in paths] == ["manifest.json", "folds.csv", "summary.csv"]

    def test_reemit_bytewise(self, tmp_path):
        m, r = _manifest(), _metrics([0.6, 0.62, 0.64, 0.66, 0.68])
        first = [p.read_bytes() for p in evalproto.emit_report(m, r, tmp_path / "a")]
        second = [p.read_bytes() for p in evalproto.emit_report(m, r, tmp_path / "a")]
        assert first == second

    def test_mean_std_recompute(self):
        vals = [0.6, 0.62, 0.64, 0.66, 0.71]
        r = _metrics(vals)
        mean = sum(vals) / 5
        std = math.sqrt(sum((v - mean) ** 2 for v in vals) / 4)
        assert abs(r.mean - mean) <= 1e-12 and abs(r.std - std) <= 1e-12

    def test_manifest_round_trip(self):
        m = _manifest()
        assert RunManifest.from_dict(m.to_dict()) == m

    def test_summary_layout(self):
        header, rows = evalproto.summary_rows([(_manifest(assignment="A1"), _metrics([0.6] * 5)),
                                               (_manifest(assignment="A2"), _metrics([0.7] * 5))])
        assert header == ["Model", "Setting", "A1", "A2"]
        assert rows == [["DKT", "L=50 align=on", "0.6000±0.0000", "0.7000±0.0000"]]

    def test_delta_two_settings(self):
        base = [(_manifest(50), _metrics([0.60, 0.62, 0.64, 0.66, 0.68]))]
        other = [(_manifest(100), _metrics([0.61, 0.63, 0.65, 0.67, 0.70]))]
        header, rows = evalproto.delta_rows(base, other)
        assert header == ["Model", "Setting", "A1"]
        assert len(rows) == 2
        assert rows[0][:2] == ["DKT", "L=100 align=on"]
        assert rows[1] == ["DKT", "Δ", f"{other[0][1].mean - base[0][1].mean:+.4f}"]
        assert rows[1][2] == "+0.0120"

    def test_delta_on_test_auc(self):
        base = [(_manifest(50), MetricsReport([0.6] * 5, [3] * 5, [0.70, 0.72, 0.74, 0.70, 0.74], []))]
        other = [(_manifest(100), MetricsReport([0.6] * 5, [3] * 5, [0.68] * 5, []))]
        header, rows = evalproto.delta_rows(base, other, metric="test")
        assert rows == [["DKT", "L=100 align=on", "0.6800"], ["DKT", "Δ", "-0.0400"]]
        assert evalproto.delta_rows(base, other)[1][1][2] == "+0.0000"
        with pytest.raises(ValueError):
            evalproto.delta_rows(base, other, metric="train")

    def test_unwritable(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(ProtocolError):
            evalproto.emit_report(_manifest(), _metrics([0.5] * 5), blocker / "sub")
