"""Scoring predictions without a human in the loop.

Deduction and reasoning predictions are judged by whitespace-normalized
exact match. Induced instructions are judged behaviorally: the text must
parse under the corpus grammar and the parsed program must agree with the
true program on a deterministic probe set. Aggregation rolls records up
into accuracy tables by evaluation kind, split, and method.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from collections import OrderedDict

from . import corpus as cp

MIN_PROBES = 50


@dataclass(frozen=True)
class EvalRecord:
    kind: str  # deduction | induction | reasoning
    task_id: str
    split_tag: str  # seen | unseen
    method: str  # e.g. deduce, zero-z, indirect, direct-z, sft, refined, context
    prediction: str
    verdict: bool
    detail: str


def _as_text(value) -> str:
    if isinstance(value, str):
        return value
    return " ".join(str(t) for t in value)


def normalize_output(value) -> str:
    """Canonical form of a predicted or gold output: whitespace removed."""
    return "".join(_as_text(value).split())


def judge_deduction(predicted, expected) -> bool:
    return normalize_output(predicted) == normalize_output(expected)


def judge_induction(induced_tokens, truth: cp.TaskProgram,
                    probes: int = MIN_PROBES) -> bool:
    """True iff the induced text parses and the parsed program matches the
    true program on every probe input."""
    if probes < MIN_PROBES:
        raise ValueError(f"probes {probes} < required minimum {MIN_PROBES}")
    tokens = induced_tokens.split() if isinstance(induced_tokens, str) else list(induced_tokens)
    parsed = cp.parse_instruction(tokens, truth.alphabet_size)
    if isinstance(parsed, cp.ParseFailure):
        return False
    inputs = cp.probes_for_task(truth.task_id, probes, truth.alphabet_size)
    return all(cp.execute(parsed, x) == cp.execute(truth, x) for x in inputs)


def induction_detail(induced_tokens, truth: cp.TaskProgram,
                     probes: int = MIN_PROBES) -> str:
    tokens = induced_tokens.split() if isinstance(induced_tokens, str) else list(induced_tokens)
    parsed = cp.parse_instruction(tokens, truth.alphabet_size)
    if isinstance(parsed, cp.ParseFailure):
        return f"parse=fail({parsed.reason})"
    return f"parse={parsed.family} probes={probes}"


@dataclass(frozen=True)
class AccuracyRow:
    kind: str
    split_tag: str
    method: str
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return 100.0 * self.correct / self.total


def aggregate(records) -> list:
    """Accuracy per (kind, split_tag, method), sorted; empty input -> []."""
    groups = OrderedDict()
    for r in records:
        key = (r.kind, r.split_tag, r.method)
        correct, total = groups.get(key, (0, 0))
        groups[key] = (correct + bool(r.verdict), total + 1)
    rows = [AccuracyRow(k, s, m, c, t) for (k, s, m), (c, t) in groups.items()]
    rows.sort(key=lambda r: (r.kind, r.split_tag, r.method))
    return rows


def table_csv(rows) -> str:
    lines = ["kind,split,method,correct,total,accuracy"]
    for r in rows:
        lines.append(f"{r.kind},{r.split_tag},{r.method},{r.correct},{r.total},"
                     f"{r.accuracy:.2f}")
    return "\n".join(lines) + "\n"


def table_text(rows) -> str:
    """Aligned plain-text accuracy table."""
    header = ("kind", "split", "method", "correct", "total", "accuracy")
    body = [(r.kind, r.split_tag, r.method, str(r.correct), str(r.total),
             f"{r.accuracy:6.2f}") for r in rows]
    widths = [max(len(col) for col in cols) for cols in zip(header, *body)] if body \
        else [len(h) for h in header]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header)]
    lines.extend(fmt.format(*row) for row in body)
    return "\n".join(lines) + "\n"


def records_jsonl(records) -> str:
    return "".join(json.dumps(asdict(r), sort_keys=True) + "\n" for r in records)


def load_records_jsonl(text: str) -> list:
    return [EvalRecord(**json.loads(line)) for line in text.splitlines() if line.strip()]
