import csv
import io
import random

import pytest

from ktbench import dataio, probes, synthgen
from ktbench.synthgen import ConfigError, GeneratorConfig, expected_correct_rate, generate_corpus


def truth_rows(gen):
    return list(csv.DictReader(io.StringIO(gen.ground_truth.decode())))


def monte_carlo_rate(cfg: GeneratorConfig, runs_per_problem: int, seed: int = 12345) -> float:
    """Independent simulation of the attempt-until-success BKT process with the stdlib RNG."""
    probs = cfg.resolved()
    rnd = random.Random(seed)
    correct = attempts = 0
    for j in range(cfg.n_problems):
        for _ in range(runs_per_problem):
            known = rnd.random() < probs["p_init"][j]
            for _ in range(cfg.max_attempts_per_problem):
                attempts += 1
                hit = rnd.random() < ((1 - probs["p_slip"][j]) if known else probs["p_guess"][j])
                correct += hit
                if not known and rnd.random() < probs["p_learn"][j]:
                    known = True
                if hit:
                    break
    return correct / attempts


class TestGenerator:
    def test_deterministic_bytes(self):
        cfg = GeneratorConfig(n_students=30, n_problems=4, seed=9)
        a, b = generate_corpus(cfg), generate_corpus(cfg)
        assert (a.main_table, a.path_contexts, a.embeddings, a.ground_truth) == \
               (b.main_table, b.path_contexts, b.embeddings, b.ground_truth)

    def test_seed_changes_output(self):
        a = generate_corpus(GeneratorConfig(n_students=30, n_problems=4, seed=1))
        b = generate_corpus(GeneratorConfig(n_students=30, n_problems=4, seed=2))
        assert a.main_table != b.main_table

    def test_mastery_monotone(self):
        rows = truth_rows(generate_corpus(GeneratorConfig(n_students=60, n_problems=5, seed=4)))
        by_pair = {}
        for r in rows:
            by_pair.setdefault((r["SubjectID"], r["ProblemID"]), []).append(r)
        for seq in by_pair.values():
            seq.sort(key=lambda r: int(r["Attempt"]))
            trace = []
            for r in seq:
                trace += [int(r["mastered_before"]), int(r["mastered_after"])]
            assert trace == sorted(trace)
            for a, b in zip(seq, seq[1:]):
                assert a["mastered_after"] == b["mastered_before"]

    def test_parses_and_aligns_cleanly(self, tmp_path):
        files = generate_corpus(GeneratorConfig(n_students=50, n_problems=6, seed=5, shuffle_rows=True)).write(tmp_path)
        recs = dataio.parse_main_table(files["main_table"])
        corpus = dataio.build_sequences(recs, 100)
        corpus = dataio.attach_code_features(corpus, path_context_file=files["path_contexts"])
        dense = dataio.attach_code_features(dataio.build_sequences(recs, 100), embedding_file=files["embeddings"])
        assert len(corpus) == 50 and dense.meta["d_ext"] == 8
        assert corpus.meta["missing_code_refs"] == 0

    def test_timestamps_strictly_increase_per_student(self, tmp_path):
        files = generate_corpus(GeneratorConfig(n_students=20, n_problems=5, seed=6)).write(tmp_path)
        recs = dataio.parse_main_table(files["main_table"])
        for s in {r.subject_id for r in recs}:
            ts = [r.server_timestamp for r in recs if r.subject_id == s]
            assert all(b > a for a, b in zip(ts, ts[1:]))

    def test_attempts_stop_at_first_success(self, tmp_path):
        files = generate_corpus(GeneratorConfig(n_students=40, n_problems=4, seed=8)).write(tmp_path)
        recs = dataio.parse_main_table(files["main_table"])
        pairs = {}
        for r in recs:
            pairs.setdefault((r.subject_id, r.problem_id), []).append(r.correct)
        for outcomes in pairs.values():
            assert sum(outcomes) <= 1
            assert outcomes[-1] == 1 or len(outcomes) == 8

    @pytest.mark.parametrize("shuffle,expect_violations", [(True, True), (False, False)])
    def test_shuffle_rows_audit(self, tmp_path, shuffle, expect_violations):
        files = generate_corpus(GeneratorConfig(n_students=30, n_problems=4, seed=2, shuffle_rows=shuffle)).write(tmp_path)
        report = probes.timestamp_audit(dataio.parse_main_table(files["main_table"]))
        assert (report.total_violations > 0) == expect_violations


class TestExpectedRate:
    def test_closed_form_matches_independent_monte_carlo(self):
        cfg = GeneratorConfig(n_problems=5)
        assert abs(monte_carlo_rate(cfg, 20_000) - expected_correct_rate(cfg)) <= 0.02 * expected_correct_rate(cfg)

    def test_generated_corpus_converges(self):
        cfg = GeneratorConfig(n_students=2000, n_problems=5, seed=11)
        recs = list(csv.DictReader(io.StringIO(generate_corpus(cfg).main_table.decode())))
        assert len(recs) >= 10_000
        rate = sum(float(r["Score"]) for r in recs) / len(recs)
        expected = expected_correct_rate(cfg)
        assert abs(rate - expected) <= 0.02 * expected

    def test_single_attempt_cap(self):
        cfg = GeneratorConfig(n_problems=1, p_init=0.3, p_guess=0.2, p_slip=0.1, max_attempts_per_problem=1)
        assert expected_correct_rate(cfg) == pytest.approx(0.3 * 0.9 + 0.7 * 0.2, abs=1e-15)


class TestValidation:
    @pytest.mark.parametrize("kwargs", [
        {"p_guess": 0.6, "p_slip": 0.5},
        {"p_guess": 1.2},
        {"p_init": [0.1, 0.2]},
        {"feature_signal": 1.5},
        {"n_students": 0},
        {"max_attempts_per_problem": 0},
        {"timestamp_gap_ms": (0, 10)},
        {"n_tokens": 3},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            synthgen.generate_corpus(GeneratorConfig(n_problems=3, **kwargs))
