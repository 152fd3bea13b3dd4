from __future__ import annotations

import pytest

from ship import corpus as cp
from ship import judge as jd


def _task(family, params=()):
    for t in cp.enumerate_tasks(cp.CorpusConfig()):
        if t.family == family and (not params or t.params == params):
            return t
    raise AssertionError(f"no {family} task")


class TestJudgeDeduction:
    def test_exact_match(self):
        assert jd.judge_deduction("cba", "cba")

    def test_whitespace_normalized(self):
        assert jd.judge_deduction(" cba ", "cba")

    def test_token_list_vs_string(self):
        assert jd.judge_deduction(["c", "b", "a"], "cba")

    def test_mismatch(self):
        assert not jd.judge_deduction("cab", "cba")

    def test_length_mismatch(self):
        assert not jd.judge_deduction("cb", "cba")

    def test_idempotent(self):
        args = (["a", "b"], ("a", "b"))
        assert jd.judge_deduction(*args) == jd.judge_deduction(*args)


class TestJudgeInduction:
    def test_true_instruction_accepted(self):
        task = _task(cp.REVERSE)
        k = cp.render_instruction(task, 0).tokens
        assert jd.judge_induction(k, task)

    def test_paraphrase_template_accepted(self):
        task = _task(cp.REVERSE)
        k = cp.render_instruction(task, 2).tokens
        assert jd.judge_induction(k, task)

    def test_gibberish_rejected(self):
        assert not jd.judge_induction("wibble wobble", _task(cp.REVERSE))

    def test_wrong_family_rejected(self):
        task = _task(cp.REVERSE)
        other = _task(cp.SORT)
        assert not jd.judge_induction(cp.render_instruction(other, 0).tokens, task)

    def test_wrong_parameter_rejected(self):
        shifts = [t for t in cp.enumerate_tasks(cp.CorpusConfig())
                  if t.family == cp.SHIFT]
        k = cp.render_instruction(shifts[0], 0).tokens
        assert not jd.judge_induction(k, shifts[1])

    def test_probe_floor_enforced(self):
        task = _task(cp.REVERSE)
        with pytest.raises(ValueError, match="probes"):
            jd.judge_induction("reverse", task, probes=10)

    def test_never_true_across_distinct_programs(self):
        # every enumerated pair is behaviorally distinct, so cross-judging
        # any task's instruction against any other task must reject
        tasks = cp.enumerate_tasks(cp.CorpusConfig())
        for truth in tasks:
            k0 = cp.render_instruction(truth, 0).tokens
            assert jd.judge_induction(k0, truth)
        for truth in tasks[::7]:
            for other in tasks[::5]:
                if other.task_id == truth.task_id:
                    continue
                k = cp.render_instruction(other, 0).tokens
                assert not jd.judge_induction(k, truth)

    def test_detail_strings(self):
        task = _task(cp.REVERSE)
        ok = jd.induction_detail(cp.render_instruction(task, 0).tokens, task)
        assert "REVERSE" in ok and "probes=" in ok
        bad = jd.induction_detail("wibble", task)
        assert bad.startswith("parse=fail")


def _rec(kind, split, method, verdict, task="t"):
    return jd.EvalRecord(kind, task, split, method, "p", verdict, "")


class TestAggregate:
    def test_percentage(self):
        rows = jd.aggregate([_rec("deduction", "seen", "deduce", v)
                             for v in (True, True, True, False, False)])
        assert len(rows) == 1
        assert rows[0].correct == 3 and rows[0].total == 5
        assert rows[0].accuracy == pytest.approx(60.0)

    def test_empty_input(self):
        assert jd.aggregate([]) == []

    def test_grouping_and_order(self):
        recs = [
            _rec("induction", "unseen", "indirect", True),
            _rec("deduction", "seen", "zero-z", False),
            _rec("deduction", "seen", "deduce", True),
            _rec("deduction", "unseen", "deduce", True),
        ]
        rows = jd.aggregate(recs)
        keys = [(r.kind, r.split_tag, r.method) for r in rows]
        assert keys == sorted(keys)
        assert len(rows) == 4

    def test_permutation_invariant(self):
        recs = [_rec("deduction", "seen", "deduce", i % 3 == 0, task=f"t{i}")
                for i in range(10)]
        assert jd.aggregate(recs) == jd.aggregate(recs[::-1])


class TestTables:
    def test_csv_shape(self):
        rows = jd.aggregate([_rec("deduction", "seen", "deduce", True)])
        csv = jd.table_csv(rows)
        lines = csv.strip().split("\n")
        assert lines[0] == "kind,split,method,correct,total,accuracy"
        assert lines[1] == "deduction,seen,deduce,1,1,100.00"

    def test_text_alignment(self):
        rows = jd.aggregate([
            _rec("deduction", "seen", "deduce", True),
            _rec("induction", "unseen", "indirect-n5", False),
        ])
        text = jd.table_text(rows)
        lines = text.strip().split("\n")
        assert len({line.index("correct") if "correct" in line else -1
                    for line in lines[:1]}) == 1
        assert all(len(line) > 10 for line in lines)

    def test_empty_table_text(self):
        assert "kind" in jd.table_text([])

    def test_jsonl_roundtrip(self):
        recs = [_rec("reasoning", "seen", "sft", True, task="a"),
                _rec("reasoning", "seen", "refined", False, task="b")]
        assert jd.load_records_jsonl(jd.records_jsonl(recs)) == recs
