"""Corpus loading, vocabularies, encoding, splits and synthetic data."""

from __future__ import annotations

import hashlib
import json
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .mathtext import FormulaMode, Segmenter, TokenKind, formula_rows, tokenize

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
KIND_PAD, KIND_WORD, KIND_FORMULA = 0, 1, 2


class DataError(ValueError):
    """Malformed or invalid dataset content."""


@dataclass(frozen=True)
class Example:
    text: str
    labels: tuple[str, ...]

    def __post_init__(self):
        if not self.text:
            raise DataError("example text is empty")
        if not self.labels:
            raise DataError("example has no labels")


def load_jsonl(path) -> list[Example]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            text, labels = record.get("text"), record.get("labels")
            if not isinstance(text, str) or not text:
                raise DataError(f"{path}:{lineno}: 'text' must be a non-empty string")
            if not isinstance(labels, list) or not all(isinstance(x, str) for x in labels):
                raise DataError(f"{path}:{lineno}: 'labels' must be an array of strings")
            if not labels:
                raise DataError(f"{path}:{lineno}: empty labels")
            examples.append(Example(text, tuple(dict.fromkeys(labels))))
    return examples


def dump_jsonl(examples: Iterable[Example], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({"text": ex.text, "labels": list(ex.labels)}, ensure_ascii=False) + "\n")


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------


def split(examples: Sequence[Example], seed: int):
    """Seeded 80/10/10 shuffle split into (train, validation, test)."""
    n = len(examples)
    if n < 10:
        raise DataError(f"need at least 10 examples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_val = n_test = n // 10
    n_train = n - n_val - n_test
    pick = lambda idx: [examples[i] for i in idx]  # noqa: E731
    return pick(order[:n_train]), pick(order[n_train : n_train + n_val]), pick(order[n_train + n_val :])


def split_digest(examples: Sequence[Example]) -> str:
    h = hashlib.sha256()
    for ex in examples:
        h.update(ex.text.encode("utf-8"))
        h.update(b"\x1f")
        h.update("\x1e".join(ex.labels).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def split_manifest(train, val, test, seed: int, config_hash: str = "") -> dict:
    return {
        "seed": seed,
        "sizes": {"train": len(train), "validation": len(val), "test": len(test)},
        "digests": {"train": split_digest(train), "validation": split_digest(val), "test": split_digest(test)},
        "config_hash": config_hash,
    }


# --------------------------------------------------------------------------
# vocabulary
# --------------------------------------------------------------------------


def _ranked(counts: Counter) -> list[tuple[str, int]]:
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


@dataclass
class Vocabulary:
    tokens: list[str]
    token_freqs: list[int]
    labels: list[str]
    label_freqs: list[int]
    token_index: dict[str, int] = field(init=False, repr=False)
    label_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.token_index = {t: i for i, t in enumerate(self.tokens)}
        self.label_index = {t: i for i, t in enumerate(self.labels)}
        if len(self.token_index) != len(self.tokens) or len(self.label_index) != len(self.labels):
            raise DataError("vocabulary contains duplicate entries")

    @classmethod
    def build(cls, token_keys: Iterable[Iterable[str]], label_sets: Iterable[Iterable[str]]) -> "Vocabulary":
        tok = Counter()
        for keys in token_keys:
            tok.update(keys)
        lab = Counter()
        for labels in label_sets:
            lab.update(labels)
        tok.pop(PAD_TOKEN, None)
        tok.pop(UNK_TOKEN, None)
        ranked = _ranked(tok)
        ranked_labels = _ranked(lab)
        return cls(
            [PAD_TOKEN, UNK_TOKEN] + [t for t, _ in ranked],
            [0, 0] + [c for _, c in ranked],
            [t for t, _ in ranked_labels],
            [c for _, c in ranked_labels],
        )

    def __len__(self):
        return len(self.tokens)

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    def token_id(self, key: str) -> int:
        return self.token_index.get(key, UNK)

    def save(self, directory) -> None:
        directory = Path(directory)
        _write_tsv(directory / "vocab.tsv", self.tokens, self.token_freqs)
        _write_tsv(directory / "labels.tsv", self.labels, self.label_freqs)

    @classmethod
    def load(cls, directory) -> "Vocabulary":
        directory = Path(directory)
        tokens, tfreq = _read_tsv(directory / "vocab.tsv")
        labels, lfreq = _read_tsv(directory / "labels.tsv")
        return cls(tokens, tfreq, labels, lfreq)


def _write_tsv(path: Path, items: list[str], freqs: list[int]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i, (item, freq) in enumerate(zip(items, freqs)):
            if "\t" in item or "\n" in item:
                raise DataError(f"cannot serialize entry {item!r} containing tab/newline")
            fh.write(f"{item}\t{i}\t{freq}\n")


def _read_tsv(path: Path) -> tuple[list[str], list[int]]:
    items, freqs = [], []
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3 or int(parts[1]) != len(items):
                raise DataError(f"{path}:{lineno}: expected 'token<TAB>id<TAB>freq' with consecutive ids")
            items.append(parts[0])
            freqs.append(int(parts[2]))
    return items, freqs


# --------------------------------------------------------------------------
# encoding
# --------------------------------------------------------------------------


@dataclass
class EncodedExample:
    token_ids: np.ndarray  # (max_len,) int64
    token_kinds: np.ndarray  # (max_len,) int8
    formula_rows: list[list[int]]  # per position; empty unless a formula
    target: np.ndarray  # (L,) float64 multi-hot
    tokens: list[str]  # surface keys of the kept (unpadded) tokens

    @property
    def length(self) -> int:
        return int((self.token_kinds != KIND_PAD).sum())


@dataclass
class Batch:
    ids: np.ndarray  # (B, n)
    kinds: np.ndarray  # (B, n)
    mask: np.ndarray  # (B, n) float, 1 on real tokens
    formula_rows: np.ndarray  # flat hashed table rows
    formula_slots: np.ndarray  # flat index b*n + t for each row in formula_rows
    targets: np.ndarray  # (B, L)

    @property
    def size(self) -> int:
        return self.ids.shape[0]


class Encoder:
    """Turns examples into fixed-length id sequences under one formula mode."""

    def __init__(
        self,
        vocab: Vocabulary,
        segmenter: Segmenter,
        mode: FormulaMode | str = FormulaMode.EMBED,
        max_len: int = 120,
        formula_table_rows: int = 1 << 16,
    ):
        self.vocab = vocab
        self.segmenter = segmenter
        self.mode = FormulaMode(mode)
        self.max_len = max_len
        self.formula_table_rows = formula_table_rows

    def tokens(self, text: str):
        return tokenize(text, self.mode, self.segmenter, strict=False)

    def encode_text(self, text: str, labels: Sequence[str] = ()) -> EncodedExample:
        toks = self.tokens(text)[: self.max_len]
        ids = np.zeros(self.max_len, dtype=np.int64)
        kinds = np.zeros(self.max_len, dtype=np.int8)
        rows: list[list[int]] = [[] for _ in range(self.max_len)]
        for t, tok in enumerate(toks):
            ids[t] = self.vocab.token_id(tok.key)
            if tok.kind is TokenKind.FORMULA:
                kinds[t] = KIND_FORMULA
                rows[t] = formula_rows(tok.formula, self.formula_table_rows)
            else:
                kinds[t] = KIND_WORD
        target = np.zeros(self.vocab.n_labels)
        for label in labels:
            idx = self.vocab.label_index.get(label)
            if idx is not None:
                target[idx] = 1.0
        return EncodedExample(ids, kinds, rows, target, [tok.key for tok in toks])

    def encode(self, example: Example) -> EncodedExample:
        enc = self.encode_text(example.text, example.labels)
        if enc.target.sum() < 1:
            raise DataError(f"none of the labels {example.labels} are in the label vocabulary")
        return enc

    def encode_all(self, examples: Iterable[Example]) -> list[EncodedExample]:
        return [self.encode(ex) for ex in examples]


def collate(items: Sequence[EncodedExample], trim: bool = True) -> Batch:
    """Stack encoded examples; with ``trim`` drop trailing all-pad columns."""
    n = max((it.length for it in items), default=1) if trim else len(items[0].token_ids)
    n = max(n, 1)
    ids = np.stack([it.token_ids[:n] for it in items])
    kinds = np.stack([it.token_kinds[:n] for it in items])
    rows, slots = [], []
    for b, it in enumerate(items):
        for t in range(n):
            for r in it.formula_rows[t]:
                rows.append(r)
                slots.append(b * n + t)
    return Batch(
        ids=ids,
        kinds=kinds,
        mask=(kinds != KIND_PAD).astype(np.float64),
        formula_rows=np.asarray(rows, dtype=np.int64),
        formula_slots=np.asarray(slots, dtype=np.int64),
        targets=np.stack([it.target for it in items]),
    )


def build_vocabulary(train: Sequence[Example], all_examples: Sequence[Example], segmenter: Segmenter, mode) -> Vocabulary:
    """Token vocabulary from the training split; label set from every example."""
    keys = ([tok.key for tok in tokenize(ex.text, mode, segmenter, strict=False)] for ex in train)
    return Vocabulary.build(keys, (ex.labels for ex in all_examples))


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------


def corpus_stats(examples: Sequence[Example], segmenter: Segmenter | None = None) -> dict:
    """Per formula mode: question/label counts and mean words, formulas and length."""
    segmenter = segmenter or Segmenter.from_corpus(ex.text for ex in examples)
    n = len(examples)
    if n == 0:
        raise DataError("empty corpus")
    labels = {label for ex in examples for label in ex.labels}
    out = {
        "questions": n,
        "labels": len(labels),
        "mean_labels": sum(len(ex.labels) for ex in examples) / n,
        "mean_chars": sum(len("".join(ex.text.split())) for ex in examples) / n,
        "modes": {},
    }
    for mode in FormulaMode:
        words = formulas = 0
        vocab = set()
        for ex in examples:
            toks = tokenize(ex.text, mode, segmenter, strict=False)
            f = sum(1 for t in toks if t.kind is TokenKind.FORMULA)
            formulas += f
            words += len(toks) - f
            vocab.update(t.key for t in toks)
        out["modes"][mode.value] = {
            "mean_words": words / n,
            "mean_formulas": formulas / n,
            "mean_length": (words + formulas) / n,
            "distinct_tokens": len(vocab),
        }
    return out


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

LABEL_NAMES = string.ascii_uppercase
FILLERS = ("已知", "求", "设", "则", "函数", "的", "值", "find", "the", "value", "of", "let", "and", "given")


def keyword(label: str) -> str:
    return f"kw{label.lower()}"


def formula_template(label_index: int) -> str:
    return f"$x^{{{label_index + 1}}}$"


def synth_generate(n_examples: int, n_labels: int, seed: int) -> list[Example]:
    """Separable toy corpus: each label owns a keyword and a formula.

    Every example carries 1 to 3 labels; its text is the shuffled union of
    their keywords and formulas plus 3 to 8 filler words.
    """
    if not 1 <= n_labels <= len(LABEL_NAMES):
        raise DataError(f"n_labels must be in 1..{len(LABEL_NAMES)}, got {n_labels}")
    rng = np.random.default_rng(seed)
    names = LABEL_NAMES[:n_labels]
    out = []
    for _ in range(n_examples):
        k = min(int(rng.choice([1, 2, 3], p=[0.4, 0.35, 0.25])), n_labels)
        chosen = sorted(rng.choice(n_labels, size=k, replace=False).tolist())
        pieces = [keyword(names[j]) for j in chosen] + [formula_template(j) for j in chosen]
        pieces += [FILLERS[i] for i in rng.integers(0, len(FILLERS), size=int(rng.integers(3, 9)))]
        order = rng.permutation(len(pieces))
        out.append(Example(" ".join(pieces[i] for i in order), tuple(names[j] for j in chosen)))
    return out
