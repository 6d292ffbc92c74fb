"""Synthetic instruction-style sequence tasks with a shared integer tokenizer.

Three families: pattern_completion (periodic sequences, predict the next
answer_len symbols), copy_reverse (emit the prompt reversed), and
modular_arith (single-digit "a + b mod m"). Prompts end with the question
marker, responses end with EOS, and answers are a deterministic function of
the prompt so labels are never ambiguous.

The tokenizer is one fixed symbol table (specials + letters + digits +
operators), identical for teacher and student by construction.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, asdict

import numpy as np

from .numcore import ConfigError

PAD, BOS, EOS, QMARK = "<pad>", "<bos>", "<eos>", "?"
SPECIALS = (PAD, BOS, EOS, QMARK)
LETTERS = tuple(string.ascii_lowercase)
DIGITS = tuple(string.digits)
OPERATORS = ("+", "mod")

FAMILIES = ("pattern_completion", "copy_reverse", "modular_arith")


class DataError(ValueError):
    pass


class Tokenizer:
    """Fixed symbol table shared by every model in a run."""

    def __init__(self):
        self.symbols = SPECIALS + LETTERS + DIGITS + OPERATORS
        self._ids = {s: i for i, s in enumerate(self.symbols)}
        self.pad_id = self._ids[PAD]
        self.bos_id = self._ids[BOS]
        self.eos_id = self._ids[EOS]
        self.q_id = self._ids[QMARK]

    @property
    def vocab_size(self) -> int:
        return len(self.symbols)

    def encode(self, symbols) -> list[int]:
        try:
            return [self._ids[s] for s in symbols]
        except KeyError as e:
            raise DataError(f"unknown symbol {e.args[0]!r}") from None

    def decode(self, ids) -> list[str]:
        return [self.symbols[i] for i in ids]

    def letter(self, k: int) -> str:
        return LETTERS[k]

    def digit(self, n: int) -> str:
        return DIGITS[n]


@dataclass
class Example:
    prompt_tokens: list[int]
    response_tokens: list[int]
    task_family: str
    difficulty: int


@dataclass(frozen=True)
class TaskSpec:
    family: str = "pattern_completion"
    alphabet_size: int = 10
    min_pattern: int = 2
    max_pattern: int = 5
    answer_len: int = 3
    max_seq_len: int = 48
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown task family {self.family!r}; valid: {FAMILIES}")
        if not 1 <= self.alphabet_size <= len(LETTERS):
            raise ConfigError(f"alphabet_size must be in [1, {len(LETTERS)}]")
        if not 1 <= self.min_pattern <= self.max_pattern:
            raise ConfigError("need 1 <= min_pattern <= max_pattern")
        if self.answer_len < 1:
            raise ConfigError("answer_len must be >= 1")


# ----------------------------------------------------------------------
# generators (symbols, not ids)


def _gen_pattern(spec: TaskSpec, tok: Tokenizer, rng) -> tuple[list[str], list[str], int]:
    p = int(rng.integers(spec.min_pattern, spec.max_pattern + 1))
    if spec.alphabet_size < p:
        raise DataError("alphabet too small for requested uniqueness")
    period = [tok.letter(k) for k in rng.choice(spec.alphabet_size, size=p, replace=False)]
    shown = int(rng.integers(p + 1, 3 * p + 2))
    prompt = [period[i % p] for i in range(shown)]
    answer = [period[(shown + i) % p] for i in range(spec.answer_len)]
    return prompt, answer, p


def _gen_copy_reverse(spec: TaskSpec, tok: Tokenizer, rng) -> tuple[list[str], list[str], int]:
    n = int(rng.integers(spec.min_pattern, spec.max_pattern + 1))
    seq = [tok.letter(int(k)) for k in rng.integers(0, spec.alphabet_size, size=n)]
    return seq, list(reversed(seq)), n


def _gen_modular(spec: TaskSpec, tok: Tokenizer, rng) -> tuple[list[str], list[str], int]:
    a, b = int(rng.integers(0, 10)), int(rng.integers(0, 10))
    m = int(rng.integers(2, 10))
    prompt = [tok.digit(a), "+", tok.digit(b), "mod", tok.digit(m)]
    return prompt, [tok.digit((a + b) % m)], m


_GENERATORS = {
    "pattern_completion": _gen_pattern,
    "copy_reverse": _gen_copy_reverse,
    "modular_arith": _gen_modular,
}


# ----------------------------------------------------------------------
# independent rule checkers


def minimal_period(seq) -> int:
    for p in range(1, len(seq) + 1):
        if all(seq[i] == seq[i % p] for i in range(len(seq))):
            return p
    return len(seq)


def check_example(ex: Example, tok: Tokenizer) -> bool:
    """Recompute the answer from the prompt under the family rule."""
    prompt = tok.decode(ex.prompt_tokens)
    response = tok.decode(ex.response_tokens)
    if prompt[-1] != QMARK or response[-1] != EOS:
        return False
    body, answer = prompt[:-1], response[:-1]
    if ex.task_family == "pattern_completion":
        p = minimal_period(body)
        want = [body[(len(body) + i) % p] for i in range(len(answer))]
        return answer == want
    if ex.task_family == "copy_reverse":
        return answer == list(reversed(body))
    if ex.task_family == "modular_arith":
        a, op1, b, op2, m = body
        if (op1, op2) != ("+", "mod"):
            return False
        return answer == [tok.digit((int(a) + int(b)) % int(m))]
    return False


# ----------------------------------------------------------------------
# dataset generation


def make_example(spec: TaskSpec, tok: Tokenizer, rng) -> Example:
    prompt, answer, difficulty = _GENERATORS[spec.family](spec, tok, rng)
    ex = Example(
        prompt_tokens=tok.encode(prompt + [QMARK]),
        response_tokens=tok.encode(answer + [EOS]),
        task_family=spec.family,
        difficulty=difficulty,
    )
    if len(ex.prompt_tokens) + len(ex.response_tokens) > spec.max_seq_len:
        raise DataError(f"example exceeds max_seq_len {spec.max_seq_len}")
    return ex


def _answer_classes(spec: TaskSpec, tok: Tokenizer) -> int:
    if spec.family == "modular_arith":
        return 9  # digits 0..8 are reachable under m <= 9
    return spec.alphabet_size


def generate_dataset(spec: TaskSpec, n: int, seed: int | None = None) -> dict[str, list[Example]]:
    """Deterministic train/dev/test splits, disjoint at the whole-example level.

    The first response token is balanced across its reachable classes (quota
    sampling keeps per-class counts within one of each other).
    """
    if n < 30:
        raise ConfigError("need n >= 30 to form nonempty splits")
    tok = Tokenizer()
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed if seed is None else seed, 0xDA7A]))
    classes = _answer_classes(spec, tok)
    quota = -(-n // classes)  # ceil
    counts: dict[int, int] = {}
    seen: set[tuple[int, ...]] = set()
    accepted: list[Example] = []
    attempts = 0
    stall = 0
    # quota relaxes when a class's reachable prompt space is exhausted, so
    # skewed families (modular answers) still complete; balanced families
    # never trip this path
    stall_limit = 100 * classes
    max_attempts = 500 * n
    while len(accepted) < n:
        attempts += 1
        if attempts > max_attempts:
            raise DataError(
                "alphabet too small for requested uniqueness "
                f"(accepted {len(accepted)}/{n} after {attempts} attempts)"
            )
        ex = make_example(spec, tok, rng)
        key = tuple(ex.prompt_tokens)
        cls = ex.response_tokens[0]
        if key in seen or counts.get(cls, 0) >= quota:
            stall += 1
            if stall >= stall_limit:
                quota += 1
                stall = 0
            continue
        seen.add(key)
        counts[cls] = counts.get(cls, 0) + 1
        accepted.append(ex)
        stall = 0
    order = rng.permutation(n)
    shuffled = [accepted[i] for i in order]
    n_dev = max(1, n // 10)
    n_test = max(1, n // 10)
    n_train = n - n_dev - n_test
    return {
        "train": shuffled[:n_train],
        "dev": shuffled[n_train : n_train + n_dev],
        "test": shuffled[n_train + n_dev :],
    }


# ----------------------------------------------------------------------
# persistence

_FIELDS = ("prompt_tokens", "response_tokens", "task_family", "difficulty")


def save_jsonl(examples: list[Example], path):
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps(asdict(ex)) + "\n")


def load_jsonl(path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"line {lineno}: malformed JSON ({e.msg})") from None
            for field in _FIELDS:
                if field not in rec:
                    raise DataError(f"line {lineno}: missing field {field!r}")
            out.append(
                Example(
                    prompt_tokens=list(rec["prompt_tokens"]),
                    response_tokens=list(rec["response_tokens"]),
                    task_family=rec["task_family"],
                    difficulty=int(rec["difficulty"]),
                )
            )
    return out


# ----------------------------------------------------------------------
# batching


def make_batch(examples: list[Example], tok: Tokenizer) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forcing arrays (inputs, targets, response-position mask).

    Sequences are [BOS, prompt..., response...]; inputs drop the last token,
    targets drop the first, and the mask marks positions whose target is a
    response token. Padding positions stay masked out.
    """
    seqs = [[tok.bos_id] + ex.prompt_tokens + ex.response_tokens for ex in examples]
    width = max(len(s) for s in seqs) - 1
    b = len(examples)
    inputs = np.full((b, width), tok.pad_id, dtype=np.int64)
    targets = np.full((b, width), tok.pad_id, dtype=np.int64)
    mask = np.zeros((b, width), dtype=bool)
    for i, (ex, s) in enumerate(zip(examples, seqs)):
        t = len(s) - 1
        inputs[i, :t] = s[:-1]
        targets[i, :t] = s[1:]
        start = 1 + len(ex.prompt_tokens)  # first target position inside the response
        mask[i, start - 1 : t] = True
    return inputs, targets, mask
