"""Synthetic string-transformation tasks with natural-language instructions.

A task is a (family, params) program over a lowercase alphabet. Every task
renders to several paraphrased instruction strings under a small unambiguous
grammar, and every rendered instruction parses back to exactly the program
that produced it. Instances are (x, y) pairs with y = execute(program, x).
"""

from __future__ import annotations

import functools
import hashlib
import string
from dataclasses import dataclass, field

import numpy as np

MIN_LEN = 3
MAX_LEN = 8
TEST_PER_TASK = 5

REVERSE = "REVERSE"
SHIFT = "SHIFT"
MAP = "MAP"
DUPLICATE = "DUPLICATE"
DROP_FIRST = "DROP_FIRST"
SORT = "SORT"
SWAP_CASE = "SWAP_CASE"
TAKE_LAST = "TAKE_LAST"

ALL_FAMILIES = (REVERSE, SHIFT, MAP, DUPLICATE, DROP_FIRST, SORT, SWAP_CASE, TAKE_LAST)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class TaskProgram:
    family: str
    params: tuple
    alphabet_size: int

    @property
    def task_id(self) -> str:
        param_str = " ".join(str(p) for p in self.params)
        digest = hashlib.sha256(f"{self.family}|{param_str}|{self.alphabet_size}".encode()).hexdigest()
        return f"{self.family.lower()}-{digest[:10]}"

    @property
    def param_str(self) -> str:
        return " ".join(str(p) for p in self.params)


@dataclass(frozen=True)
class Instance:
    x: tuple
    y: tuple


@dataclass(frozen=True)
class Instruction:
    tokens: tuple
    template_id: int
    task_id: str

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class ParseFailure:
    reason: str


def alphabet_letters(alphabet_size: int) -> tuple:
    if not 8 <= alphabet_size <= 26:
        raise CorpusError(f"alphabet size must be in [8, 26], got {alphabet_size}")
    return tuple(string.ascii_lowercase[:alphabet_size])


def execute(program: TaskProgram, x) -> tuple:
    """Apply the program to a token sequence. Pure; raises on invalid input."""
    letters = alphabet_letters(program.alphabet_size)
    index = {c: i for i, c in enumerate(letters)}
    x = tuple(x)
    for pos, tok in enumerate(x):
        if tok not in index:
            raise CorpusError(f"invalid token {tok!r} at position {pos}")
    fam = program.family
    if fam == REVERSE:
        return x[::-1]
    if fam == SHIFT:
        n = int(program.params[0])
        return tuple(letters[(index[c] + n) % len(letters)] for c in x)
    if fam == MAP:
        dests = program.params
        return tuple(dests[index[c]] for c in x)
    if fam == DUPLICATE:
        return x + x
    if fam == DROP_FIRST:
        return x[1:]
    if fam == SORT:
        return tuple(sorted(x))
    if fam == SWAP_CASE:
        return tuple(c.upper() for c in x)
    if fam == TAKE_LAST:
        n = int(program.params[0])
        return x[-n:]
    raise CorpusError(f"unknown family {fam!r}")


# ---------------------------------------------------------------------------
# grammar

_NUM = "<n>"
_PAIRS = "<pairs>"

TEMPLATES = {
    REVERSE: (
        ("reverse", "the", "input", "sequence"),
        ("reverse", "the", "sequence"),
        ("write", "the", "sequence", "in", "reverse", "order"),
    ),
    SHIFT: (
        ("shift", "each", "letter", "forward", "by", _NUM),
        ("shift", "every", "letter", "forward", "by", _NUM),
        ("advance", "each", "letter", "by", _NUM, "places"),
    ),
    MAP: (
        ("map", "letters", "as", _PAIRS),
        ("substitute", "letters", "using", _PAIRS),
        ("apply", "the", "letter", "mapping", _PAIRS),
    ),
    DUPLICATE: (
        ("repeat", "the", "sequence", "twice"),
        ("duplicate", "the", "sequence"),
        ("write", "the", "sequence", "two", "times"),
    ),
    DROP_FIRST: (
        ("drop", "the", "first", "letter"),
        ("remove", "the", "first", "letter"),
        ("delete", "the", "leading", "letter"),
    ),
    SORT: (
        ("sort", "the", "letters", "in", "alphabetical", "order"),
        ("sort", "the", "letters"),
        ("arrange", "the", "letters", "in", "ascending", "order"),
    ),
    SWAP_CASE: (
        ("swap", "the", "case", "of", "every", "letter"),
        ("toggle", "letter", "case"),
        ("invert", "the", "case", "of", "each", "letter"),
    ),
    TAKE_LAST: (
        ("take", "the", "last", _NUM, "letters"),
        ("keep", "only", "the", "last", _NUM, "letters"),
        ("output", "the", "final", _NUM, "letters"),
    ),
}

NEUTRAL_PHRASE = ("do", "the", "task")


class Grammar:
    """Render programs to instruction token sequences and parse them back."""

    def __init__(self, alphabet_size: int):
        self.alphabet_size = alphabet_size
        self.letters = alphabet_letters(alphabet_size)
        self._letter_set = set(self.letters)

    def n_templates(self, family: str) -> int:
        return len(TEMPLATES[family])

    def render(self, program: TaskProgram, template_id: int) -> Instruction:
        patterns = TEMPLATES[program.family]
        if not 0 <= template_id < len(patterns):
            raise CorpusError(f"template {template_id} out of range for {program.family}")
        out = []
        for tok in patterns[template_id]:
            if tok == _NUM:
                out.append(str(program.params[0]))
            elif tok == _PAIRS:
                for src, dst in zip(self.letters, program.params):
                    out.append(src)
                    out.append(dst)
            else:
                out.append(tok)
        return Instruction(tuple(out), template_id, program.task_id)

    def parse(self, tokens):
        """Return the unique TaskProgram for an instruction, else ParseFailure."""
        tokens = tuple(tokens)
        matches = []
        for family, patterns in TEMPLATES.items():
            for pattern in patterns:
                program = self._match(family, pattern, tokens)
                if program is not None:
                    matches.append(program)
        unique = set(matches)
        if not unique:
            return ParseFailure("no template matched")
        if len(unique) > 1:
            return ParseFailure(f"ambiguous: {sorted(p.task_id for p in unique)}")
        return matches[0]

    def _match(self, family: str, pattern, tokens):
        pos = 0
        num = None
        pairs = None
        for pat in pattern:
            if pat == _NUM:
                if pos >= len(tokens):
                    return None
                tok = tokens[pos]
                if not tok.isdigit():
                    return None
                val = int(tok)
                if not 1 <= val < self.alphabet_size:
                    return None
                num = val
                pos += 1
            elif pat == _PAIRS:
                need = 2 * self.alphabet_size
                chunk = tokens[pos:pos + need]
                if len(chunk) != need or any(c not in self._letter_set for c in chunk):
                    return None
                seen_src = {}
                for i in range(0, need, 2):
                    src, dst = chunk[i], chunk[i + 1]
                    if src in seen_src:
                        return None
                    seen_src[src] = dst
                if set(seen_src) != self._letter_set:
                    return None
                dests = tuple(seen_src[c] for c in self.letters)
                if set(dests) != self._letter_set:
                    return None  # destinations must form a permutation
                pairs = dests
                pos += need
            else:
                if pos >= len(tokens) or tokens[pos] != pat:
                    return None
                pos += 1
        if pos != len(tokens):
            return None
        if family == SHIFT or family == TAKE_LAST:
            return TaskProgram(family, (num,), self.alphabet_size)
        if family == MAP:
            return TaskProgram(MAP, pairs, self.alphabet_size)
        return TaskProgram(family, (), self.alphabet_size)


@functools.lru_cache(maxsize=8)
def _grammar(alphabet_size: int) -> Grammar:
    return Grammar(alphabet_size)


def render_instruction(program: TaskProgram, template_id: int, rng_seed: int = 0) -> Instruction:
    # rng_seed is part of the call contract for future surface variation;
    # rendering is deterministic per (program, template).
    del rng_seed
    return _grammar(program.alphabet_size).render(program, template_id)


def parse_instruction(tokens, alphabet_size: int = 16):
    return _grammar(alphabet_size).parse(tokens)


# ---------------------------------------------------------------------------
# task enumeration


@dataclass(frozen=True)
class CorpusConfig:
    alphabet_size: int = 16
    families: tuple = ALL_FAMILIES
    map_count: int = 40
    take_last_max: int = 6
    train_per_task: int = 64
    map_seed: int = 7021  # fixed: MAP permutations are part of the corpus identity
    min_tasks: int = 20


def _is_cyclic_shift(perm, letters) -> bool:
    a = len(letters)
    index = {c: i for i, c in enumerate(letters)}
    for s in range(a):
        if all(index[perm[i]] == (i + s) % a for i in range(a)):
            return True
    return False


def _map_permutations(config: CorpusConfig):
    letters = alphabet_letters(config.alphabet_size)
    rng = np.random.default_rng(np.random.SeedSequence([config.map_seed, config.alphabet_size]))
    found = []
    seen = set()
    while len(found) < config.map_count:
        order = rng.permutation(config.alphabet_size)
        perm = tuple(letters[i] for i in order)
        if any(perm[i] == letters[i] for i in range(config.alphabet_size)):
            continue  # avoid fixed points so MAP never shadows identity-ish behavior
        if _is_cyclic_shift(perm, letters) or perm in seen:
            continue
        seen.add(perm)
        found.append(perm)
    return found


def enumerate_tasks(config: CorpusConfig):
    """Deterministic ordered task list for a config. Rejects degenerate setups."""
    letters = alphabet_letters(config.alphabet_size)
    del letters
    unknown = set(config.families) - set(ALL_FAMILIES)
    if unknown:
        raise CorpusError(f"unknown families: {sorted(unknown)}")
    a = config.alphabet_size
    tasks = []
    if REVERSE in config.families:
        tasks.append(TaskProgram(REVERSE, (), a))
    if SHIFT in config.families:
        for n in range(1, a):
            tasks.append(TaskProgram(SHIFT, (n,), a))
    if MAP in config.families:
        for perm in _map_permutations(config):
            tasks.append(TaskProgram(MAP, perm, a))
    if DUPLICATE in config.families:
        tasks.append(TaskProgram(DUPLICATE, (), a))
    if DROP_FIRST in config.families:
        tasks.append(TaskProgram(DROP_FIRST, (), a))
    if SORT in config.families:
        tasks.append(TaskProgram(SORT, (), a))
    if SWAP_CASE in config.families:
        tasks.append(TaskProgram(SWAP_CASE, (), a))
    if TAKE_LAST in config.families:
        for n in range(1, config.take_last_max + 1):
            tasks.append(TaskProgram(TAKE_LAST, (n,), a))
    return tasks


def require_viable(tasks, min_tasks: int = 20):
    """Corpus generation refuses tiny task sets; a 90/10 split needs headroom.
    Hand-built micro splits for unit tests bypass this on purpose."""
    if len(tasks) < min_tasks:
        raise CorpusError(f"config yields {len(tasks)} tasks; at least {min_tasks} required")
    return tasks


# ---------------------------------------------------------------------------
# splits and instances


@dataclass
class CorpusSplit:
    tasks: list
    seen_ids: list
    unseen_ids: list
    train: dict  # task_id -> [Instance] (seen tasks only)
    test: dict  # task_id -> [Instance] (every task)
    seed: int
    train_per_task: int

    def __post_init__(self):
        self._by_id = {t.task_id: t for t in self.tasks}

    def task(self, task_id: str) -> TaskProgram:
        return self._by_id[task_id]

    @property
    def seen_tasks(self):
        return [self._by_id[i] for i in self.seen_ids]

    @property
    def unseen_tasks(self):
        return [self._by_id[i] for i in self.unseen_ids]

    @property
    def alphabet_size(self) -> int:
        return self.tasks[0].alphabet_size

    def validate(self):
        if set(self.seen_ids) & set(self.unseen_ids):
            raise CorpusError("seen and unseen overlap")
        if set(self.seen_ids) | set(self.unseen_ids) != set(t.task_id for t in self.tasks):
            raise CorpusError("split does not cover all tasks")
        for tid, insts in self.test.items():
            if len(insts) != TEST_PER_TASK:
                raise CorpusError(f"task {tid} has {len(insts)} test instances")
        for tid in self.unseen_ids:
            if tid in self.train:
                raise CorpusError(f"unseen task {tid} has train instances")
        for tid, insts in list(self.train.items()) + list(self.test.items()):
            program = self._by_id[tid]
            xs = set()
            for inst in insts:
                if execute(program, inst.x) != inst.y:
                    raise CorpusError(f"task {tid}: stored y does not match execute(x)")
                xs.add(inst.x)
        for tid in self.train:
            train_xs = {i.x for i in self.train[tid]}
            test_xs = {i.x for i in self.test[tid]}
            if train_xs & test_xs:
                raise CorpusError(f"task {tid}: train/test instance leak")
            if len(train_xs) != len(self.train[tid]) or len(test_xs) != len(self.test[tid]):
                raise CorpusError(f"task {tid}: duplicate instances")


def _task_rng(seed: int, task_id: str):
    digest = int(hashlib.sha256(task_id.encode()).hexdigest()[:12], 16)
    return np.random.default_rng(np.random.SeedSequence([seed, digest]))


def _sample_distinct_inputs(rng, letters, count: int):
    out = []
    used = set()
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 200 * count + 1000:
            raise CorpusError("could not sample enough distinct inputs")
        length = int(rng.integers(MIN_LEN, MAX_LEN + 1))
        x = tuple(letters[int(i)] for i in rng.integers(0, len(letters), size=length))
        if x in used:
            continue
        used.add(x)
        out.append(x)
    return out


def build_split(tasks, train_per_task: int, seed: int) -> CorpusSplit:
    """90/10 seen/unseen task split with per-task instance sampling.

    Exactly TEST_PER_TASK held-out instances per task; train instances only
    for seen tasks; instances never repeat within a task.
    """
    if train_per_task < 8:
        raise CorpusError(f"train_per_task must be >= 8, got {train_per_task}")
    if not tasks:
        raise CorpusError("no tasks to split")
    letters = alphabet_letters(tasks[0].alphabet_size)
    n_unseen = len(tasks) // 10
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    order = rng.permutation(len(tasks))
    unseen_idx = set(int(i) for i in order[:n_unseen])
    seen_ids = [t.task_id for i, t in enumerate(tasks) if i not in unseen_idx]
    unseen_ids = [t.task_id for i, t in enumerate(tasks) if i in unseen_idx]
    train = {}
    test = {}
    for i, task in enumerate(tasks):
        trng = _task_rng(seed, task.task_id)
        if i in unseen_idx:
            xs = _sample_distinct_inputs(trng, letters, TEST_PER_TASK)
            test[task.task_id] = [Instance(x, execute(task, x)) for x in xs]
        else:
            xs = _sample_distinct_inputs(trng, letters, train_per_task + TEST_PER_TASK)
            test_xs, train_xs = xs[:TEST_PER_TASK], xs[TEST_PER_TASK:]
            test[task.task_id] = [Instance(x, execute(task, x)) for x in test_xs]
            train[task.task_id] = [Instance(x, execute(task, x)) for x in train_xs]
    split = CorpusSplit(list(tasks), seen_ids, unseen_ids, train, test, seed, train_per_task)
    split.validate()
    return split


# ---------------------------------------------------------------------------
# serialization

_HEADER = "#ship-corpus v1"


def serialize_corpus(split: CorpusSplit) -> str:
    lines = [f"{_HEADER}\tseed={split.seed}\talphabet={split.alphabet_size}"
             f"\ttrain_per_task={split.train_per_task}"]
    for task in split.tasks:
        tid = task.task_id
        tag = "seen" if tid in set(split.seen_ids) else "unseen"
        n_tpl = len(TEMPLATES[task.family])
        roles = [("train", inst) for inst in split.train.get(tid, [])]
        roles += [("test", inst) for inst in split.test[tid]]
        for idx, (role, inst) in enumerate(roles):
            instruction = render_instruction(task, idx % n_tpl)
            fields = [
                f"task_id={tid}",
                f"family={task.family}",
                f"params={task.param_str}",
                f"split_tag={tag}",
                f"role={role}",
                f"instruction_text={instruction.text}",
                f"template_id={instruction.template_id}",
                f"x={' '.join(inst.x)}",
                f"y={' '.join(inst.y)}",
            ]
            lines.append("\t".join(fields))
    return "\n".join(lines) + "\n"


def split_hash(split: CorpusSplit) -> str:
    """Stable content hash of the serialized corpus."""
    return hashlib.sha256(serialize_corpus(split).encode("utf-8")).hexdigest()[:16]


def save_corpus(split: CorpusSplit, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_corpus(split))


_REQUIRED_FIELDS = ("task_id", "family", "params", "split_tag", "role",
                    "instruction_text", "template_id", "x", "y")


def _parse_params(family: str, param_str: str, alphabet_size: int) -> tuple:
    if family in (SHIFT, TAKE_LAST):
        return (int(param_str),)
    if family == MAP:
        return tuple(param_str.split())
    return ()


def load_corpus(path) -> CorpusSplit:
    with open(path, encoding="utf-8") as fh:
        raw = fh.read().splitlines()
    if not raw or not raw[0].startswith(_HEADER):
        raise CorpusError(f"{path}: missing corpus header")
    header = dict(kv.split("=", 1) for kv in raw[0].split("\t")[1:])
    try:
        seed = int(header["seed"])
        alphabet_size = int(header["alphabet"])
        train_per_task = int(header["train_per_task"])
    except (KeyError, ValueError) as exc:
        raise CorpusError(f"{path}: bad header: {exc}") from None

    tasks = []
    by_id = {}
    tags = {}
    train = {}
    test = {}
    for lineno, line in enumerate(raw[1:], start=2):
        if not line.strip():
            continue
        fields = {}
        for chunk in line.split("\t"):
            if "=" not in chunk:
                raise CorpusError(f"{path}:{lineno}: malformed field {chunk!r}")
            key, value = chunk.split("=", 1)
            fields[key] = value
        missing = [k for k in _REQUIRED_FIELDS if k not in fields]
        if missing:
            raise CorpusError(f"{path}:{lineno}: missing fields {missing}")
        family = fields["family"]
        if family not in ALL_FAMILIES:
            raise CorpusError(f"{path}:{lineno}: unknown family {family!r}")
        params = _parse_params(family, fields["params"], alphabet_size)
        program = TaskProgram(family, params, alphabet_size)
        tid = fields["task_id"]
        if program.task_id != tid:
            raise CorpusError(f"{path}:{lineno}: task_id does not match (family, params)")
        if tid not in by_id:
            by_id[tid] = program
            tasks.append(program)
            tags[tid] = fields["split_tag"]
        elif tags[tid] != fields["split_tag"]:
            raise CorpusError(f"{path}:{lineno}: inconsistent split_tag for {tid}")
        parsed = parse_instruction(fields["instruction_text"].split(), alphabet_size)
        if parsed != program:
            raise CorpusError(f"{path}:{lineno}: instruction does not parse to its program")
        x = tuple(fields["x"].split())
        y = tuple(fields["y"].split())
        if execute(program, x) != y:
            raise CorpusError(f"{path}:{lineno}: y does not match execute(program, x)")
        inst = Instance(x, y)
        if fields["role"] == "train":
            train.setdefault(tid, []).append(inst)
        elif fields["role"] == "test":
            test.setdefault(tid, []).append(inst)
        else:
            raise CorpusError(f"{path}:{lineno}: bad role {fields['role']!r}")

    seen_ids = [t.task_id for t in tasks if tags[t.task_id] == "seen"]
    unseen_ids = [t.task_id for t in tasks if tags[t.task_id] == "unseen"]
    split = CorpusSplit(tasks, seen_ids, unseen_ids, train, test, seed, train_per_task)
    split.validate()
    return split


# ---------------------------------------------------------------------------
# probes and diagnostics


def probes_for_task(task_id: str, n: int, alphabet_size: int):
    """Deterministic probe inputs derived from the task id."""
    letters = alphabet_letters(alphabet_size)
    rng = _task_rng(0xBEEF, task_id)
    return _sample_distinct_inputs(rng, letters, n)


def indistinct_pairs(tasks, n_probes: int = 200, seed: int = 0):
    """Pairs of enumerated tasks that agree on every probe (expected empty)."""
    if not tasks:
        return []
    letters = alphabet_letters(tasks[0].alphabet_size)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD15C]))
    probes = _sample_distinct_inputs(rng, letters, n_probes)
    signatures = [tuple(execute(t, x) for x in probes) for t in tasks]
    bad = []
    for i in range(len(tasks)):
        for j in range(i + 1, len(tasks)):
            if signatures[i] == signatures[j]:
                bad.append((tasks[i].task_id, tasks[j].task_id))
    return bad


def median_instruction_len(tasks) -> int:
    lengths = []
    for task in tasks:
        for tpl in range(len(TEMPLATES[task.family])):
            lengths.append(len(render_instruction(task, tpl).tokens))
    return int(np.median(lengths))


# ---------------------------------------------------------------------------
# vocabulary

PAD, BOS, EOS, SEP, ARROW = "<pad>", "<bos>", "<eos>", "<sep>", "->"
_COND_WORDS = ("x", "=", ";", "y")


@dataclass(frozen=True)
class Vocab:
    tokens: tuple
    pad_id: int
    bos_id: int
    eos_id: int
    sep_id: int
    arrow_id: int
    lower_ids: tuple
    upper_ids: tuple
    decoder_out_ids: tuple  # instruction-side output vocabulary (global ids)
    task_out_ids: tuple  # data-side output vocabulary (global ids)
    index: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    def encode(self, toks):
        try:
            return [self.index[t] for t in toks]
        except KeyError:
            bad = next(t for t in toks if t not in self.index)
            raise CorpusError(f"out-of-vocabulary token {bad!r}") from None

    def decode(self, ids):
        return [self.tokens[i] for i in ids]


def build_vocab(alphabet_size: int) -> Vocab:
    letters = alphabet_letters(alphabet_size)
    uppers = tuple(c.upper() for c in letters)
    numbers = tuple(str(n) for n in range(1, alphabet_size))
    words = set(NEUTRAL_PHRASE) | set(_COND_WORDS)
    for patterns in TEMPLATES.values():
        for pattern in patterns:
            for tok in pattern:
                if tok not in (_NUM, _PAIRS):
                    words.add(tok)
    word_list = tuple(sorted(words))
    tokens = (PAD, BOS, EOS, SEP, ARROW) + letters + uppers + numbers + word_list
    index = {t: i for i, t in enumerate(tokens)}
    lower_ids = tuple(index[c] for c in letters)
    upper_ids = tuple(index[c] for c in uppers)
    decoder_out = tuple(sorted(
        {index[EOS]} | set(lower_ids)
        | {index[n] for n in numbers} | {index[w] for w in word_list}))
    task_out = tuple(sorted({index[EOS]} | set(lower_ids) | set(upper_ids)))
    return Vocab(tokens, index[PAD], index[BOS], index[EOS], index[SEP], index[ARROW],
                 lower_ids, upper_ids, decoder_out, task_out)
