import numpy as np
import pytest

from mos.inference import (CYCLE, FIXED_POINT, CachedLogits, cosine_logits, ensemble_predict,
                           infer_task_id, predict_with_adapter, self_refine, write_diagnostics,
                           DIAGNOSTIC_FIELDS)
from mos.numerics import make_rng
from mos.stream import ClassTaskMap
from mos.training import PrototypeBank


def one_hot_logits(routes, task_map):
    """Adapter ``t`` predicts the first class of task ``routes[t]``."""
    def logits_for(t):
        out = np.zeros(task_map.num_classes)
        out[task_map.offsets[routes[t]]] = 1.0
        return out
    return logits_for


def bank_from(protos):
    bank = PrototypeBank()
    for a, mat in enumerate(protos):
        for c, p in enumerate(mat):
            bank.set(a, c, p)
    return bank


class TestCosineClassifier:
    def test_self_similarity(self):
        p = np.array([[3.0, 4.0], [1.0, 0.0]])
        assert predict_with_adapter(p[0], 0, bank_from([p]), 2)[0] == pytest.approx(1.0)

    def test_orthogonal(self):
        bank = bank_from([np.eye(3)])
        np.testing.assert_allclose(predict_with_adapter(np.array([0.0, 2.0, 0.0]), 0, bank, 3), [0, 1, 0])

    def test_matches_brute_force_ncm(self):
        rng = make_rng(1)
        protos = rng.standard_normal((5, 6))
        bank = bank_from([protos])
        for _ in range(200):
            q = rng.standard_normal(6)
            sims = [float(q @ p) / (np.linalg.norm(q) * np.linalg.norm(p)) for p in protos]
            assert int(np.argmax(predict_with_adapter(q, 0, bank, 5))) == int(np.argmax(sims))

    def test_zero_embedding(self):
        assert np.array_equal(cosine_logits(np.zeros(3), np.eye(3)), np.zeros(3))

    def test_batch_shape(self):
        assert cosine_logits(np.ones((4, 3)), np.eye(3)).shape == (4, 3)


class TestTaskLookup:
    def test_floor_rule(self):
        tm = ClassTaskMap([10] * 10)
        assert infer_task_id(np.eye(100)[17], tm) == 1
        assert infer_task_id(np.eye(100)[0], tm) == 0
        assert infer_task_id(np.eye(100)[99], tm) == 9

    def test_base_task_layout(self):
        tm = ClassTaskMap([100, 50, 50])
        assert infer_task_id(np.eye(200)[120], tm) == 1
        assert infer_task_id(np.eye(200)[99], tm) == 0

    def test_ties_go_to_lowest_class(self):
        assert infer_task_id(np.ones(4), ClassTaskMap([2, 2])) == 0

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            infer_task_id(np.ones(5), ClassTaskMap([2, 2]))


class TestSelfRefine:
    tm = ClassTaskMap([2, 2, 2])

    def test_immediate_fixed_point(self):
        j, tr = self_refine(one_hot_logits([0, 2, 1], self.tm), self.tm)
        assert (j, tr.reason, tr.iterations, tr.evaluations) == (0, FIXED_POINT, 0, 1)

    def test_single_refinement(self):
        j, tr = self_refine(one_hot_logits([1, 1, 0], self.tm), self.tm)
        assert (j, tr.reason, tr.iterations) == (1, FIXED_POINT, 1)
        assert tr.visited == [1, 1]

    def test_two_cycle(self):
        routes = [1, 2, 1]
        results = [self_refine(one_hot_logits(routes, self.tm), self.tm) for _ in range(3)]
        assert all(j == 1 and tr.reason == CYCLE for j, tr in results)
        assert results[0][1].visited == [1, 2, 1]

    def test_evaluation_budget_and_consistency(self):
        rng = make_rng(0)
        for _ in range(300):
            B = int(rng.integers(2, 9))
            tm = ClassTaskMap(rng.integers(1, 4, B))
            table = rng.standard_normal((B, tm.num_classes))
            calls = []

            def logits_for(t):
                calls.append(t)
                return table[t]

            j, tr = self_refine(logits_for, tm)
            assert len(calls) <= B and len(set(calls)) == len(calls)
            if tr.reason == FIXED_POINT:
                assert infer_task_id(table[j], tm) == j

    def test_scale_invariance(self):
        rng = make_rng(3)
        tm = ClassTaskMap([3, 3, 3, 3])
        protos = [rng.standard_normal((12, 5)) for _ in range(4)]
        embs = [rng.standard_normal(5) for _ in range(4)]
        for scale in (1.0, 7.5):
            logits = CachedLogits(lambda t: scale * embs[t], bank_from(protos), 12)
            j, tr = self_refine(logits, tm)
            if scale == 1.0:
                ref = (j, tr.visited)
            assert (j, tr.visited) == ref
            assert logits.calls == tr.evaluations <= 4

    def test_max_iter(self):
        tm = ClassTaskMap([1] * 5)
        j, tr = self_refine(one_hot_logits([1, 2, 3, 4, 4], tm), tm, max_iter=2)
        assert tr.reason == "max_iter" and tr.iterations == 2 and j == 3
        with pytest.raises(ValueError):
            self_refine(one_hot_logits([0], ClassTaskMap([1])), ClassTaskMap([1]), max_iter=0)


class TestEnsemble:
    def test_single_task_matches_direct_prediction(self):
        tm = ClassTaskMap([3])
        logits = np.array([0.1, 0.7, 0.2])
        pred = ensemble_predict(lambda t: logits, tm)
        assert pred.label == 1 and pred.task == 0

    def test_two_stage_sum(self):
        # A_0 votes class 2 (task 1), so the second stage uses A_1
        tm = ClassTaskMap([2, 1])
        table = {0: np.array([0.9, 0.1, 1.0]), 1: np.array([0.2, 0.8, -1.0])}
        pred = ensemble_predict(lambda t: table[t], tm)
        assert pred.task == 1
        assert pred.label == 0

    def test_diagnostics_csv(self, tmp_path):
        row = dict(zip(DIAGNOSTIC_FIELDS, [0, 1, 2, 0, 0, 0, 0, FIXED_POINT, 2, 2]))
        write_diagnostics([row], tmp_path / "d.csv")
        write_diagnostics([row], tmp_path / "d.csv", append=True)
        lines = (tmp_path / "d.csv").read_text().splitlines()
        assert lines[0] == ",".join(DIAGNOSTIC_FIELDS) and len(lines) == 3
