"""Synthetic pretraining corpus and the five downstream tasks.

Token ids ``0..3`` are reserved (pad, mask, separator, unknown). The next
block holds summary tags: corpus sequences often end with a separator and
tags naming their dominant topic, their first subject's number and their
clause count. Task label tokens are drawn from that block, so every label is
a word the frozen backbone learned to emit from a whole-sequence summary.
Everything else is grammar content, also used for task symbols.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

PAD, MASK, SEP, UNK = 0, 1, 2, 3
NUM_SPECIAL = 4
NUM_TOPICS = 8
REGRESSION_BINS = 11
NUM_TAGS = NUM_TOPICS + 2 + REGRESSION_BINS

TASK_NAMES = ("parity", "majority", "pair_match", "order", "ratio_reg")


class TaskError(ValueError):
    pass


# ---------------------------------------------------------------------------
# grammar corpus
# ---------------------------------------------------------------------------

@dataclass
class Grammar:
    """Partition of the content vocabulary into grammatical categories."""

    vocab_size: int
    topic_tag: np.ndarray          # one per topic
    number_tag: np.ndarray         # [singular, plural]
    count_tag: np.ndarray          # clause count 1..REGRESSION_BINS, capped
    det: list[np.ndarray]          # [singular ids, plural ids]
    noun: list[list[np.ndarray]]   # noun[topic][number]
    verb: list[list[np.ndarray]]   # verb[topic][number]
    adj: list[np.ndarray]          # adj[topic]
    conj: np.ndarray
    filler: np.ndarray

    @classmethod
    def for_vocab(cls, vocab_size: int) -> "Grammar":
        content = vocab_size - NUM_SPECIAL - NUM_TAGS
        if content < 8 * NUM_TOPICS * 5:
            raise TaskError(f"vocabulary of {vocab_size} is too small for the grammar corpus")
        k = (content * 4 // 5) // (NUM_TOPICS * 5)
        ids = iter(range(NUM_SPECIAL, vocab_size))

        def take(n):
            return np.array([next(ids) for _ in range(n)], dtype=np.int64)

        topic_tag, number_tag, count_tag = take(NUM_TOPICS), take(2), take(REGRESSION_BINS)

        noun = [[take(k), take(k)] for _ in range(NUM_TOPICS)]
        verb = [[take(k), take(k)] for _ in range(NUM_TOPICS)]
        adj = [take(k) for _ in range(NUM_TOPICS)]
        rest = content - NUM_TOPICS * 5 * k
        n_det = max(2, rest // 6)
        det = [take(n_det), take(n_det)]
        conj = take(max(2, rest // 6))
        filler = np.arange(next(ids), vocab_size, dtype=np.int64)
        return cls(vocab_size, topic_tag, number_tag, count_tag, det, noun, verb, adj, conj, filler)

    @property
    def tags(self) -> np.ndarray:
        return np.concatenate([self.topic_tag, self.number_tag, self.count_tag])

    def clause(self, rng: np.random.Generator, topic: int | None = None,
               num: int | None = None) -> list[int]:
        topic = int(rng.integers(NUM_TOPICS)) if topic is None else topic
        num = int(rng.integers(2)) if num is None else num
        out = [int(rng.choice(self.det[num]))]
        if rng.random() < 0.4:
            out.append(int(rng.choice(self.adj[topic])))
        out.append(int(rng.choice(self.noun[topic][num])))
        out.append(int(rng.choice(self.verb[topic][num])))
        if rng.random() < 0.6:
            obj = int(rng.integers(2))
            out.append(int(rng.choice(self.det[obj])))
            if rng.random() < 0.3:
                out.append(int(rng.choice(self.adj[topic])))
            out.append(int(rng.choice(self.noun[topic][obj])))
        if len(self.filler) and rng.random() < 0.15:
            out.insert(int(rng.integers(len(out) + 1)), int(rng.choice(self.filler)))
        return out


def generate_pretrain_corpus(seed: int, size: int, vocab_size: int = 512,
                             min_len: int = 8, max_len: int = 48,
                             tag_rate: float = 0.5) -> list[list[int]]:
    """``size`` token sequences cut from a stream of agreeing clauses.

    With probability ``tag_rate`` a sequence ends in ``SEP`` and three summary
    tags (dominant topic, number of the first subject, clause count), all
    determined by the clauses before the separator.
    """
    if size < 1:
        raise TaskError("corpus size must be at least 1")
    if min_len < 5:
        raise TaskError("min_len must leave room for the summary tags")
    grammar = Grammar.for_vocab(vocab_size)
    rng = np.random.default_rng(seed)
    corpus = []
    for _ in range(size):
        length = int(rng.integers(min_len, max_len + 1))
        tagged = rng.random() < tag_rate
        body_len = length - 4 if tagged else length
        # a favoured topic makes the dominant one well defined most of the time
        lead = int(rng.integers(NUM_TOPICS))
        seq: list[int] = []
        topics: list[int] = []
        first_num = None
        while len(seq) < body_len:
            if seq:
                seq.append(int(rng.choice(grammar.conj)))
            topic = lead if rng.random() < 0.6 else int(rng.integers(NUM_TOPICS))
            num = int(rng.integers(2))
            first_num = num if first_num is None else first_num
            topics.append(topic)
            seq.extend(grammar.clause(rng, topic, num))
        seq = seq[:body_len]
        if tagged:
            dominant = Counter(topics).most_common(1)[0][0]
            count = min(len(topics), REGRESSION_BINS)
            seq += [SEP, int(grammar.topic_tag[dominant]), int(grammar.number_tag[first_num]),
                    int(grammar.count_tag[count - 1])]
        corpus.append(seq)
    return corpus


# ---------------------------------------------------------------------------
# downstream tasks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str                         # "classification" | "regression"
    num_classes: int
    label_tokens: tuple[int, ...]
    symbols: tuple[int, ...]          # marked tokens first, then the distractor alphabet
    generator_seed: int = 0
    sizes: tuple[int, int, int] = (256, 256, 512)
    length_range: tuple[int, int] = (8, 16)
    vocab_size: int = 512
    metrics: tuple[str, ...] = ("accuracy",)

    def __post_init__(self):
        if self.name not in _GENERATORS:
            raise TaskError(f"unknown task generator {self.name!r}")
        if self.kind not in ("classification", "regression"):
            raise TaskError(f"unknown task kind {self.kind!r}")
        if len(set(self.label_tokens)) != len(self.label_tokens):
            raise TaskError("label tokens must be distinct")
        if len(self.label_tokens) != self.num_classes:
            raise TaskError("one label token per class is required")
        for t in (*self.label_tokens, *self.symbols):
            if not NUM_SPECIAL <= t < self.vocab_size:
                raise TaskError(f"token {t} is not a content id under V={self.vocab_size}")
        if min(self.sizes) < 1:
            raise TaskError("every split needs at least one example")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise TaskError(f"bad length range {self.length_range}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        for key in ("label_tokens", "symbols", "sizes", "length_range", "metrics"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class Example:
    tokens: tuple[int, ...]
    target: float  # class index for classification, value in [0, 1] for regression


@dataclass
class Dataset:
    train: list[Example]
    val: list[Example]
    test: list[Example]
    spec: TaskSpec = field(repr=False, default=None)


def _distractors(spec: TaskSpec, n_marked: int) -> np.ndarray:
    return np.asarray(spec.symbols[n_marked:], dtype=np.int64)


def _fill(rng, length: int, alphabet: np.ndarray, placed: dict[int, int]) -> tuple[int, ...]:
    seq = [int(t) for t in rng.choice(alphabet, size=length)]
    for pos, tok in placed.items():
        seq[pos] = tok
    return tuple(seq)


def _gen_parity(spec, rng, label):
    marked = spec.symbols[0]
    lo, hi = spec.length_range
    length = int(rng.integers(max(lo, 3), hi + 1))
    count = int(rng.choice([c for c in range(4) if c % 2 == label]))
    pos = rng.choice(length, size=count, replace=False)
    return _fill(rng, length, _distractors(spec, 1), {int(p): marked for p in pos})


def _rule_parity(spec, tokens):
    return tokens.count(spec.symbols[0]) % 2


def _gen_majority(spec, rng, label):
    a, b = spec.symbols[:2]
    lo, hi = spec.length_range
    length = int(rng.integers(max(lo, 7), hi + 1))
    total = int(rng.choice([3, 5, 7]))
    winner = int(rng.integers(total // 2 + 1, total + 1))
    pos = rng.choice(length, size=total, replace=False)
    win_tok, lose_tok = (a, b) if label == 0 else (b, a)
    placed = {int(p): (win_tok if i < winner else lose_tok) for i, p in enumerate(pos)}
    return _fill(rng, length, _distractors(spec, 2), placed)


def _rule_majority(spec, tokens):
    a, b = spec.symbols[:2]
    return 0 if tokens.count(a) > tokens.count(b) else 1


def _gen_pair_match(spec, rng, label):
    alphabet = np.asarray(spec.symbols, dtype=np.int64)
    lo, hi = spec.length_range
    k = int(rng.integers(max(2, (lo - 1) // 2), max(2, (hi - 1) // 2) + 1))
    first = [int(t) for t in rng.choice(alphabet, size=k)]
    second = [first[i] for i in rng.permutation(k)]
    if label == 0:
        j = int(rng.integers(k))
        second[j] = int(rng.choice([t for t in alphabet if t != second[j]]))
    return tuple(first + [SEP] + second)


def _rule_pair_match(spec, tokens):
    cut = tokens.index(SEP)
    return int(Counter(tokens[:cut]) == Counter(tokens[cut + 1:]))


def _gen_order(spec, rng, label):
    x, y = spec.symbols[:2]
    lo, hi = spec.length_range
    length = int(rng.integers(max(lo, 2), hi + 1))
    i, j = sorted(int(p) for p in rng.choice(length, size=2, replace=False))
    placed = {i: x, j: y} if label == 1 else {i: y, j: x}
    return _fill(rng, length, _distractors(spec, 2), placed)


def _rule_order(spec, tokens):
    x, y = spec.symbols[:2]
    return int(tokens.index(x) < tokens.index(y))


def _gen_ratio(spec, rng, label):
    a, b = spec.symbols[:2]
    n_dist = int(rng.integers(0, 5))
    toks = [a] * label + [b] * (REGRESSION_BINS - 1 - label)
    toks += [int(t) for t in rng.choice(_distractors(spec, 2), size=n_dist)]
    return tuple(toks[i] for i in rng.permutation(len(toks)))


def _rule_ratio(spec, tokens):
    a, b = spec.symbols[:2]
    na, nb = tokens.count(a), tokens.count(b)
    return na / (na + nb)


_GENERATORS: dict[str, tuple[Callable, Callable]] = {
    "parity": (_gen_parity, _rule_parity),
    "majority": (_gen_majority, _rule_majority),
    "pair_match": (_gen_pair_match, _rule_pair_match),
    "order": (_gen_order, _rule_order),
    "ratio_reg": (_gen_ratio, _rule_ratio),
}


def task_rule(spec: TaskSpec, tokens: Sequence[int]) -> float:
    """The generating rule evaluated directly on ``tokens``."""
    return _GENERATORS[spec.name][1](spec, tuple(tokens))


def generate_task(spec: TaskSpec) -> Dataset:
    """Label-balanced train/val/test splits; a pure function of ``spec``."""
    gen, _ = _GENERATORS[spec.name]
    rng = np.random.default_rng(spec.generator_seed)
    k = REGRESSION_BINS if spec.kind == "regression" else spec.num_classes
    seen: set[tuple[int, ...]] = set()
    splits = []
    for size in spec.sizes:
        classes = [i % k for i in range(size)]
        classes = [classes[i] for i in rng.permutation(size)]
        split = []
        for c in classes:
            for _ in range(10_000):
                tokens = gen(spec, rng, c)
                if tokens not in seen:
                    break
            else:
                raise TaskError(f"{spec.name}: could not draw a fresh sequence for class {c}")
            seen.add(tokens)
            target = c / (REGRESSION_BINS - 1) if spec.kind == "regression" else c
            split.append(Example(tokens, float(target) if spec.kind == "regression" else int(target)))
        splits.append(split)
    return Dataset(*splits, spec=spec)


def target_token(spec: TaskSpec, example: Example) -> int:
    """Vocabulary id the model should emit for ``example``."""
    if spec.kind == "regression":
        return spec.label_tokens[int(round(example.target * (REGRESSION_BINS - 1)))]
    return spec.label_tokens[int(example.target)]


def decode_prediction(spec: TaskSpec, token: int):
    """Class index, bin value, or ``None`` when the token is not a label."""
    try:
        idx = spec.label_tokens.index(int(token))
    except ValueError:
        return None
    if spec.kind == "regression":
        return idx / (REGRESSION_BINS - 1)
    return idx


def majority_baseline(examples: Sequence[Example]) -> float:
    counts = Counter(int(e.target) for e in examples)
    return max(counts.values()) / len(examples)


# ---------------------------------------------------------------------------
# the built-in suite
# ---------------------------------------------------------------------------

_SUITE_LAYOUT = {
    # name: (kind, classes, marked symbols, distractors, length range, metrics)
    "parity": ("classification", 2, 1, 6, (8, 14), ("accuracy",)),
    "majority": ("classification", 2, 2, 6, (9, 15), ("accuracy",)),
    "pair_match": ("classification", 2, 0, 6, (7, 11), ("f1", "accuracy")),
    "order": ("classification", 2, 2, 6, (6, 12), ("mcc",)),
    "ratio_reg": ("regression", REGRESSION_BINS, 2, 6, (10, 14), ("pearson", "spearman")),
}


def make_task_spec(name: str, vocab_size: int = 512, generator_seed: int = 0,
                   sizes: tuple[int, int, int] = (256, 256, 512)) -> TaskSpec:
    """Build one of the built-in tasks.

    Label tokens are summary tags chosen to mean something for the task, the
    way real prompt tuning uses label words such as "positive":

    * majority: A and B are nouns of two topics, labelled by those topics' tags;
    * order: X is a singular noun and Y a plural one, labelled by the number
      tags, since "X first" means the first noun is singular;
    * ratio_reg: the ordered clause-count tags serve as the 11 bins;
    * parity and pair_match have no such counterpart and use other topic tags.

    Distractors are filler tokens, which carry no topic or number.
    """
    if name not in _SUITE_LAYOUT:
        raise TaskError(f"unknown task {name!r}; choose from {TASK_NAMES}")
    kind, k, n_marked, n_dist, lengths, metrics = _SUITE_LAYOUT[name]
    g = Grammar.for_vocab(vocab_size)
    rng = np.random.default_rng([TASK_NAMES.index(name), 7919])
    topics = [int(t) for t in rng.permutation(NUM_TOPICS)]
    fillers = [int(t) for t in rng.choice(g.filler, size=n_dist, replace=False)]

    def noun(topic, num=0):
        return int(rng.choice(g.noun[topic][num]))

    if name == "majority":
        marked = [noun(topics[0]), noun(topics[1])]
        labels = [int(g.topic_tag[topics[0]]), int(g.topic_tag[topics[1]])]
    elif name == "order":
        marked = [noun(topics[0], 0), noun(topics[1], 1)]
        # class 1 (X before Y) means the first noun is singular
        labels = [int(g.number_tag[1]), int(g.number_tag[0])]
    elif name == "ratio_reg":
        marked = [noun(topics[0]), noun(topics[1])]
        labels = [int(t) for t in g.count_tag]
    elif name == "pair_match":
        nouns = np.concatenate([g.noun[t][0] for t in topics[:3]])
        marked, fillers = [], [int(t) for t in rng.choice(nouns, size=n_dist, replace=False)]
        labels = [int(g.topic_tag[topics[3]]), int(g.topic_tag[topics[4]])]
    else:
        marked = [noun(topics[0])]
        labels = [int(g.topic_tag[topics[1]]), int(g.topic_tag[topics[2]])]
    return TaskSpec(name=name, kind=kind, num_classes=k, label_tokens=tuple(labels),
                    symbols=tuple(marked + fillers), generator_seed=generator_seed, sizes=sizes,
                    length_range=lengths, vocab_size=vocab_size, metrics=metrics)


def default_suite(vocab_size: int = 512, generator_seed: int = 0,
                  sizes: tuple[int, int, int] = (256, 256, 512)) -> list[TaskSpec]:
    return [make_task_spec(n, vocab_size, generator_seed, sizes) for n in TASK_NAMES]


# ---------------------------------------------------------------------------
# line-based JSON dump/load
# ---------------------------------------------------------------------------

def dump_examples(examples: Iterable[Example], path: str | Path) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps({"tokens": list(ex.tokens), "target": ex.target}) + "\n")


def load_examples(path: str | Path) -> list[Example]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out.append(Example(tuple(int(t) for t in d["tokens"]), d["target"]))
    return out
