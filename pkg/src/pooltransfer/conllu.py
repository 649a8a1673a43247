"""Reading and writing corpora in the CoNLL-U format.

Only the columns the two tasks need are kept (ID, FORM, UPOS, HEAD, DEPREL).
Multiword-token ranges (``3-4``) and empty nodes (``5.1``) are skipped.
"""

from __future__ import annotations

import dataclasses
import pathlib
from typing import Iterable, Iterator, Optional, Sequence, Union


class ConlluParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class TreeValidationError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class Token:
    form: str
    upos: Optional[str] = None
    head: Optional[int] = None
    deprel: Optional[str] = None


@dataclasses.dataclass(frozen=True)
class Sentence:
    tokens: tuple[Token, ...]
    id: str

    def __post_init__(self):
        if not self.tokens:
            raise TreeValidationError(f"sentence {self.id!r} is empty")
        object.__setattr__(self, "tokens", tuple(self.tokens))
        validate_sentence(self)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def forms(self) -> list[str]:
        return [t.form for t in self.tokens]

    @property
    def upos(self) -> list[Optional[str]]:
        return [t.upos for t in self.tokens]

    @property
    def heads(self) -> list[Optional[int]]:
        return [t.head for t in self.tokens]

    @property
    def deprels(self) -> list[Optional[str]]:
        return [t.deprel for t in self.tokens]

    @property
    def has_tree(self) -> bool:
        return all(t.head is not None for t in self.tokens)

    @property
    def has_tags(self) -> bool:
        return all(t.upos is not None for t in self.tokens)

    def with_tree(self, heads: Sequence[int], deprels: Sequence[str]) -> "Sentence":
        """Copy of this sentence with the given (predicted) tree attached."""
        tokens = tuple(
            dataclasses.replace(t, head=h, deprel=r) for t, h, r in zip(self.tokens, heads, deprels)
        )
        return Sentence(tokens, self.id)

    def with_tags(self, tags: Sequence[str]) -> "Sentence":
        tokens = tuple(dataclasses.replace(t, upos=u) for t, u in zip(self.tokens, tags))
        return Sentence(tokens, self.id)

    def unlabelled(self) -> "Sentence":
        """Drop the gold tree (keeps UPOS, which parsers take as input)."""
        tokens = tuple(dataclasses.replace(t, head=None, deprel=None) for t in self.tokens)
        return Sentence(tokens, self.id)

    def untagged(self) -> "Sentence":
        tokens = tuple(dataclasses.replace(t, upos=None) for t in self.tokens)
        return Sentence(tokens, self.id)


@dataclasses.dataclass(frozen=True)
class Corpus:
    sentences: tuple[Sentence, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "sentences", tuple(self.sentences))
        seen: set[str] = set()
        for s in self.sentences:
            if s.id in seen:
                raise TreeValidationError(f"duplicate sentence id {s.id!r}")
            seen.add(s.id)

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self) -> Iterator[Sentence]:
        return iter(self.sentences)

    def __getitem__(self, i):
        return self.sentences[i]

    @property
    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)


def validate_sentence(sentence: Sentence) -> None:
    n = len(sentence.tokens)
    for j, tok in enumerate(sentence.tokens, start=1):
        if (tok.head is None) != (tok.deprel is None):
            raise TreeValidationError(
                f"sentence {sentence.id!r}, token {j}: HEAD and DEPREL must be both present or both absent"
            )
        if tok.head is not None and not (0 <= tok.head <= n and tok.head != j):
            raise TreeValidationError(f"sentence {sentence.id!r}, token {j}: invalid head {tok.head}")
    if not sentence.has_tree:
        return
    heads = [0] + [t.head for t in sentence.tokens]
    roots = [j for j in range(1, n + 1) if heads[j] == 0]
    if len(roots) != 1:
        raise TreeValidationError(f"sentence {sentence.id!r} has {len(roots)} root children, expected 1")
    for start in range(1, n + 1):
        node, steps = start, 0
        while node != 0:
            node = heads[node]
            steps += 1
            if steps > n:
                raise TreeValidationError(f"sentence {sentence.id!r} has a cycle in its heads")


def _field(value: str) -> Optional[str]:
    return None if value == "_" else value


def _blocks(lines: Iterable[str]) -> Iterator[list[tuple[int, str]]]:
    block: list[tuple[int, str]] = []
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if line.strip():
            block.append((lineno, line))
        elif block:
            yield block
            block = []
    if block:
        yield block


def parse_conllu(text: str) -> Corpus:
    sentences: list[Sentence] = []
    for block in _blocks(text.splitlines()):
        sent_id: Optional[str] = None
        tokens: list[Token] = []
        first_line = block[0][0]
        for lineno, line in block:
            if line.startswith("#"):
                key, sep, value = line[1:].partition("=")
                if sep and key.strip() == "sent_id":
                    sent_id = value.strip()
                continue
            cols = line.split("\t")
            if len(cols) != 10:
                raise ConlluParseError(f"expected 10 tab-separated columns, found {len(cols)}", lineno)
            idx = cols[0]
            if "-" in idx or "." in idx:
                continue
            try:
                int(idx)
            except ValueError:
                raise ConlluParseError(f"invalid token ID {idx!r}", lineno) from None
            head_s = cols[6]
            if head_s == "_":
                head = None
            else:
                try:
                    head = int(head_s)
                except ValueError:
                    raise ConlluParseError(f"non-integer HEAD {head_s!r}", lineno) from None
            tokens.append(Token(form=cols[1], upos=_field(cols[3]), head=head, deprel=_field(cols[7])))
        if not tokens:
            raise ConlluParseError("sentence block without token lines", first_line)
        if sent_id is None:
            sent_id = str(len(sentences) + 1)
        sentences.append(Sentence(tuple(tokens), sent_id))
    return Corpus(tuple(sentences))


def _show(value) -> str:
    return "_" if value is None else str(value)


def write_conllu(corpus: Corpus) -> str:
    out: list[str] = []
    for sent in corpus:
        out.append(f"# sent_id = {sent.id}\n")
        for j, tok in enumerate(sent.tokens, start=1):
            cols = [str(j), tok.form, "_", _show(tok.upos), "_", "_", _show(tok.head), _show(tok.deprel), "_", "_"]
            out.append("\t".join(cols) + "\n")
        out.append("\n")
    return "".join(out)


PathLike = Union[str, pathlib.Path]


def read_conllu(path: PathLike) -> Corpus:
    return parse_conllu(pathlib.Path(path).read_text(encoding="utf-8"))


def save_conllu(corpus: Corpus, path: PathLike) -> None:
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(write_conllu(corpus), encoding="utf-8")
