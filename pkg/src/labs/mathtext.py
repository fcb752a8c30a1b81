"""Tokenization of mixed Chinese/LaTeX problem text.

Formulas are ``$...$`` (or ``$$...$$``) spans. Depending on the
:class:`FormulaMode` a formula becomes one token carrying its symbol layout
tree, a run of LaTeX command/character tokens, or nothing at all.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

ROOT_PARENT = "⊥"
ROOT_EDGE = "root"
SUB, SUP = "subscript", "superscript"
NUM, DEN = "fraction-numerator", "fraction-denominator"
RADICAND, ARG, NEXT = "radicand", "argument", "next-sibling"
EDGE_ORDER = (SUB, SUP, NUM, DEN, RADICAND, ARG, NEXT)

GROUP = "{}"
FRAC_COMMANDS = {"\\frac": "frac", "\\dfrac": "frac", "\\tfrac": "frac", "\\binom": "binom"}
ARG_COMMANDS = frozenset(
    r"\mathrm \text \textbf \mathbf \mathit \mathbb \mathcal \boldsymbol \operatorname \overline"
    r" \underline \vec \hat \bar \widehat \tilde \widetilde \dot \ddot \overrightarrow \overleftarrow"
    r" \overset \underset".split()
)
SKIP_COMMANDS = frozenset(
    r"\left \right \big \Big \bigg \Bigg \bigl \bigr \Bigl \Bigr \displaystyle \textstyle"
    r" \quad \qquad \, \; \: \! \  \limits \nolimits".split()
) | {"\\ "}

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1


class MathTextError(ValueError):
    """Base class for tokenization and formula parsing failures."""


class DelimiterError(MathTextError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class FormulaParseError(MathTextError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class FormulaMode(str, Enum):
    EMBED = "embed"
    TEXT = "text"
    DROP = "drop"


class TokenKind(str, Enum):
    WORD = "word"
    FORMULA = "formula"
    DROPPED = "dropped"


# --------------------------------------------------------------------------
# formula trees
# --------------------------------------------------------------------------


@dataclass(eq=True)
class Node:
    symbol: str
    edges: dict[str, "Node"] = field(default_factory=dict)

    def child(self, edge: str) -> "Node | None":
        return self.edges.get(edge)

    def ordered_edges(self) -> list[tuple[str, "Node"]]:
        return [(e, self.edges[e]) for e in EDGE_ORDER if e in self.edges]


@dataclass(eq=True)
class FormulaTree:
    root: Node

    def nodes(self) -> Iterator[Node]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(child for _, child in reversed(node.ordered_edges()))

    def node_count(self) -> int:
        return sum(1 for _ in self.nodes())

    def to_latex(self) -> str:
        return serialize(self)


_LATEX_TOKEN = re.compile(
    r"(?P<cmd>\\[A-Za-z]+)|(?P<esc>\\.)|(?P<num>\d+(?:\.\d+)?)|(?P<ws>\s+)"
    r"|(?P<letter>[A-Za-z])|(?P<wide>[^\x00-\x7f]+)|(?P<other>.)",
    re.DOTALL,
)


def _lex_latex(latex: str) -> list[tuple[str, str, int]]:
    out = []
    for m in _LATEX_TOKEN.finditer(latex):
        kind = m.lastgroup
        if kind == "ws":
            continue
        out.append((kind, m.group(), m.start()))
    return out


class _FormulaParser:
    def __init__(self, latex: str):
        self.latex = latex
        self.toks = [t for t in _lex_latex(latex) if t[1] not in SKIP_COMMANDS]
        self.pos = 0

    def peek(self):
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def where(self) -> int:
        tok = self.peek()
        return tok[2] if tok else len(self.latex)

    def advance(self):
        tok = self.toks[self.pos]
        self.pos += 1
        return tok

    def parse(self) -> FormulaTree:
        if not self.toks:
            raise FormulaParseError("empty formula", 0)
        nodes = self.chain(stop=())
        tok = self.peek()
        if tok is not None:
            raise FormulaParseError(f"unbalanced {tok[1]!r}", tok[2])
        if not nodes:
            raise FormulaParseError("formula has no symbols", 0)
        return FormulaTree(_link(nodes))

    def chain(self, stop: tuple[str, ...]) -> list[Node]:
        nodes = []
        while True:
            tok = self.peek()
            if tok is None or tok[1] == "}" or tok[1] in stop:
                return nodes
            nodes.append(self.term())

    def term(self) -> Node:
        kind, text, _ = self.peek()
        if text in ("_", "^"):
            base = Node(GROUP)
        else:
            base = self.atom()
        while (tok := self.peek()) is not None and tok[1] in ("_", "^"):
            self.advance()
            edge = SUB if tok[1] == "_" else SUP
            arg = self.argument()
            if edge in base.edges:
                base = Node(GROUP, {ARG: base})
            base.edges[edge] = arg
        return base

    def atom(self) -> Node:
        kind, text, start = self.advance()
        if text == "{":
            nodes = self.group_body(start)
            if not nodes:
                return Node(GROUP)
            if len(nodes) == 1:
                return nodes[0]
            return Node(GROUP, {ARG: _link(nodes)})
        if text in FRAC_COMMANDS:
            num = self.argument()
            den = self.argument()
            return Node(FRAC_COMMANDS[text], {NUM: num, DEN: den})
        if text == "\\sqrt":
            node = Node("sqrt")
            tok = self.peek()
            if tok is not None and tok[1] == "[":
                self.advance()
                index = self.chain(stop=("]",))
                close = self.peek()
                if close is None or close[1] != "]":
                    raise FormulaParseError("unclosed '[' in \\sqrt", tok[2])
                self.advance()
                node.edges[ARG] = _link(index) if index else Node(GROUP)
            node.edges[RADICAND] = self.argument()
            return node
        if text in ARG_COMMANDS:
            return Node(text, {ARG: self.argument()})
        return Node(text)

    def group_body(self, start: int) -> list[Node]:
        nodes = self.chain(stop=())
        close = self.peek()
        if close is None or close[1] != "}":
            raise FormulaParseError("unbalanced '{'", start)
        self.advance()
        return nodes

    def argument(self) -> Node:
        tok = self.peek()
        if tok is None:
            raise FormulaParseError("missing argument", len(self.latex))
        kind, text, start = tok
        if text == "}":
            raise FormulaParseError("missing argument before '}'", start)
        if text == "{":
            self.advance()
            nodes = self.group_body(start)
            return _link(nodes) if nodes else Node(GROUP)
        if kind == "num" and len(text) > 1:
            # an unbraced argument takes a single character: x^23 is x^{2}3
            self.toks[self.pos] = ("num", text[1:], start + 1)
            return Node(text[0])
        if text in ("_", "^"):
            raise FormulaParseError(f"script {text!r} cannot be an argument", start)
        return self.atom()


def _link(nodes: list[Node]) -> Node:
    for left, right in zip(nodes, nodes[1:]):
        left.edges[NEXT] = right
    return nodes[0]


def parse_formula(latex: str) -> FormulaTree:
    """Parse the interior of a ``$...$`` span into a symbol layout tree."""
    return _FormulaParser(latex).parse()


def _serialize_chain(node: Node | None) -> str:
    parts = []
    while node is not None:
        parts.append(_serialize_node(node))
        node = node.edges.get(NEXT)
    return " ".join(parts)


def _serialize_node(node: Node) -> str:
    sym = node.symbol
    e = node.edges
    if sym in ("frac", "binom"):
        text = f"\\{sym}{{{_serialize_chain(e[NUM])}}}{{{_serialize_chain(e[DEN])}}}"
    elif sym == "sqrt":
        index = f"[{_serialize_chain(e[ARG])}]" if ARG in e else ""
        text = f"\\sqrt{index}{{{_serialize_chain(e[RADICAND])}}}"
    elif ARG in e:
        text = f"{'' if sym == GROUP else sym}{{{_serialize_chain(e[ARG])}}}"
    else:
        text = sym
    if SUB in e:
        text += f"_{{{_serialize_chain(e[SUB])}}}"
    if SUP in e:
        text += f"^{{{_serialize_chain(e[SUP])}}}"
    return text


def serialize(tree: FormulaTree) -> str:
    """Canonical LaTeX for a tree; re-parses to an identical tree."""
    return _serialize_chain(tree.root)


# --------------------------------------------------------------------------
# tuples and hashing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FormulaTuple:
    parent: str
    child: str
    edge: str
    depth: int

    def key(self) -> str:
        return f"{self.parent}\t{self.child}\t{self.edge}\t{self.depth}"


def extract_tuples(tree: FormulaTree) -> list[FormulaTuple]:
    """Depth-first (parent, child, edge, depth) tuples, starting with the root tuple."""
    out = []
    stack: list[tuple[str, Node, str, int]] = [(ROOT_PARENT, tree.root, ROOT_EDGE, 0)]
    while stack:
        parent, node, edge, depth = stack.pop()
        out.append(FormulaTuple(parent, node.symbol, edge, depth))
        for child_edge, child in reversed(node.ordered_edges()):
            stack.append((node.symbol, child, child_edge, depth + 1))
    return out


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def tuple_row(t: FormulaTuple, n_rows: int) -> int:
    return fnv1a_64(t.key().encode("utf-8")) % n_rows


def formula_rows(tree: FormulaTree, n_rows: int) -> list[int]:
    return [tuple_row(t, n_rows) for t in extract_tuples(tree)]


def embed_formula(tuples: list[FormulaTuple], table: Tensor) -> Tensor:
    """Mean of the hashed table rows of ``tuples``; differentiable in ``table``."""
    if not tuples:
        raise MathTextError("cannot embed an empty formula")
    rows = [tuple_row(t, table.shape[0]) for t in tuples]
    out = T.segment_mean(table, np.array(rows), np.zeros(len(rows), dtype=np.int64), 1)
    return T.reshape(out, (table.shape[1],))


# --------------------------------------------------------------------------
# text segmentation
# --------------------------------------------------------------------------

_CJK = "㐀-䶿一-鿿豈-﫿"
_TEXT_PIECE = re.compile(rf"(?P<cjk>[{_CJK}]+)|(?P<alpha>[A-Za-z]+)|(?P<num>\d+(?:\.\d+)?)|(?P<ws>\s+)|(?P<other>.)", re.DOTALL)
_AS_TEXT = re.compile(r"\\[A-Za-z]+|\\.|\S")


class Segmenter:
    """Greedy longest-match segmentation of CJK runs with single-character fallback.

    Non-CJK text splits into ASCII words, numbers and single punctuation
    characters.
    """

    def __init__(self, lexicon: Iterable[str] = (), max_word_len: int = 8):
        self.lexicon = frozenset(w for w in lexicon if len(w) >= 2)
        self.max_word_len = max(max_word_len, max((len(w) for w in self.lexicon), default=1))

    @classmethod
    def from_corpus(cls, texts: Iterable[str], max_word_len: int = 4) -> "Segmenter":
        """Lexicon of the whitespace-delimited CJK runs seen in ``texts``."""
        words = set()
        for text in texts:
            for chunk in strip_formulas(text).split():
                if re.fullmatch(rf"[{_CJK}]+", chunk) and 2 <= len(chunk) <= max_word_len:
                    words.add(chunk)
        return cls(words, max_word_len)

    def segment(self, text: str) -> list[str]:
        out = []
        for m in _TEXT_PIECE.finditer(text):
            kind = m.lastgroup
            if kind == "ws":
                continue
            if kind == "cjk":
                out.extend(self._longest_match(m.group()))
            else:
                out.append(m.group())
        return out

    def _longest_match(self, run: str) -> list[str]:
        words = []
        i = 0
        while i < len(run):
            for width in range(min(self.max_word_len, len(run) - i), 1, -1):
                if run[i : i + width] in self.lexicon:
                    break
            else:
                width = 1
            words.append(run[i : i + width])
            i += width
        return words


# --------------------------------------------------------------------------
# tokenization
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=True)
class Token:
    kind: TokenKind
    text: str
    formula: FormulaTree | None = None

    @property
    def key(self) -> str:
        """Vocabulary key: words verbatim, formulas as canonical ``$...$``."""
        if self.kind is TokenKind.FORMULA and self.formula is not None:
            return f"${serialize(self.formula)}$"
        return self.text


def split_spans(text: str) -> list[tuple[bool, str]]:
    """Split ``text`` into (is_formula, chunk) pieces.

    ``\\$`` is a literal dollar sign; ``$$`` opens a display formula closed by
    ``$$``.
    """
    pieces: list[tuple[bool, str]] = []
    buf: list[str] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "\\" and i + 1 < n and text[i + 1] == "$":
            buf.append("$")
            i += 2
            continue
        if ch != "$":
            buf.append(ch)
            i += 1
            continue
        delim = "$$" if text.startswith("$$", i) else "$"
        j = i + len(delim)
        while j < n:
            if text[j] == "\\":
                j += 2
                continue
            if text.startswith(delim, j):
                break
            j += 1
        if j >= n:
            raise DelimiterError(f"unbalanced {delim!r} delimiter", len(text[:i].encode("utf-8")))
        if buf:
            pieces.append((False, "".join(buf)))
            buf = []
        pieces.append((True, text[i + len(delim) : j]))
        i = j + len(delim)
    if buf:
        pieces.append((False, "".join(buf)))
    return pieces


def strip_formulas(text: str) -> str:
    try:
        return " ".join(chunk for is_formula, chunk in split_spans(text) if not is_formula)
    except DelimiterError:
        return text


def tokenize(
    text: str,
    mode: FormulaMode | str = FormulaMode.EMBED,
    segmenter: Segmenter | None = None,
    strict: bool = True,
    keep_dropped: bool = False,
) -> list[Token]:
    """Tokenize problem text under a formula preprocessing mode.

    With ``strict=False`` a formula that fails to parse becomes a single-node
    tree holding its raw text (blank formulas are skipped) instead of raising.
    """
    mode = FormulaMode(mode)
    segmenter = segmenter or Segmenter()
    tokens: list[Token] = []
    for is_formula, chunk in split_spans(text):
        if not is_formula:
            tokens.extend(Token(TokenKind.WORD, w) for w in segmenter.segment(chunk))
        elif mode is FormulaMode.DROP:
            if keep_dropped:
                tokens.append(Token(TokenKind.DROPPED, chunk))
        elif mode is FormulaMode.TEXT:
            tokens.extend(Token(TokenKind.WORD, piece) for piece in _AS_TEXT.findall(chunk))
        else:
            try:
                tree = parse_formula(chunk)
            except FormulaParseError:
                if strict:
                    raise
                if not chunk.strip():
                    continue
                tree = FormulaTree(Node(chunk.strip()))
            tokens.append(Token(TokenKind.FORMULA, chunk, tree))
    return tokens
