"""
CoNLL column files, token normalisation, tag-scheme conversion and
mini-batch iteration.
"""
import os
import re
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ncrft.models.models import TagScheme
from ncrft.utils.errors import DataError
from ncrft.utils.logger import app_logger
from ncrft.utils.numerics import RngState

DOCSTART = "-DOCSTART-"
OUTSIDE = "O"

_DIGITS = re.compile(r"[0-9]")


def preprocess(token: str) -> str:
    """Replace every ASCII digit with '0'"""
    return _DIGITS.sub("0", token)


@dataclass
class Sentence:
    tokens: List[str]
    tags: Optional[List[str]] = None
    columns: List[List[str]] = field(default_factory=list)
    normalized: List[str] = field(default_factory=list)
    chars: List[List[str]] = field(default_factory=list)
    # Filled by vocabulary binding
    word_ids: Optional[np.ndarray] = None
    char_ids: Optional[List[np.ndarray]] = None
    tag_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.tokens:
            raise DataError("A sentence needs at least one token")
        if self.tags is not None and len(self.tags) != len(self.tokens):
            raise DataError(f"Sentence has {len(self.tokens)} tokens but {len(self.tags)} tags")
        if not self.columns:
            self.columns = [[token] for token in self.tokens]
        if not self.normalized:
            self.normalized = [preprocess(token) for token in self.tokens]
        if not self.chars:
            self.chars = [list(token) for token in self.normalized]

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class Corpus:
    sentences: List[Sentence]
    path: Optional[str] = None
    scheme: TagScheme = TagScheme.RAW

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self) -> Iterator[Sentence]:
        return iter(self.sentences)

    @property
    def num_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)


def read_conll(path: str, token_column: int = 0, tag_column: Optional[int] = -1) -> Corpus:
    """
    Read a whitespace-separated column file: one token per line, blank lines
    end sentences, -DOCSTART- lines are skipped.

    Args:
        path: File path (UTF-8; LF or CRLF line ends)
        token_column: Column holding the surface token
        tag_column: Column holding the gold tag, or None for untagged input

    Returns:
        Corpus with the detected tag scheme
    """
    if not os.path.isfile(path):
        raise DataError(f"Data file not found: {path}")

    sentences: List[Sentence] = []
    rows: List[List[str]] = []
    width = None

    def flush():
        if rows:
            tokens = [row[token_column] for row in rows]
            tags = [row[tag_column] for row in rows] if tag_column is not None else None
            sentences.append(Sentence(tokens=tokens, tags=tags, columns=[list(row) for row in rows]))
            rows.clear()

    with open(path, "r", encoding="utf-8", newline="") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                flush()
                continue
            if line.startswith(DOCSTART):
                flush()
                continue
            fields = line.split()
            if width is None:
                width = len(fields)
                for column in (token_column, tag_column):
                    if column is not None and not -width <= column < width:
                        raise DataError(f"{path}:{lineno}: column {column} out of range for {width} columns")
            elif len(fields) != width:
                raise DataError(f"{path}:{lineno}: expected {width} columns, found {len(fields)}")
            rows.append(fields)
    flush()

    if not sentences:
        raise DataError(f"No sentences found in {path}")

    scheme = detect_scheme(tag for s in sentences for tag in (s.tags or []))
    corpus = Corpus(sentences=sentences, path=path, scheme=scheme)
    app_logger.info(f"Loaded {len(corpus)} sentences / {corpus.num_tokens} tokens from {path} ({scheme.value})")
    return corpus


def write_conll(
    sentences: Iterable[Sentence],
    path: str,
    extra_column: Optional[Sequence[Sequence[str]]] = None,
    header: Optional[str] = None,
):
    """
    Write sentences as column text, optionally appending one column per sentence.

    Sentences read from a file keep their original columns; sentences built in
    memory are written as "token tag" (or "token").
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        if header:
            f.write(f"{DOCSTART} {header}\n\n")
        for index, sentence in enumerate(sentences):
            for position, row in enumerate(_rows(sentence)):
                if extra_column is not None:
                    row = row + [extra_column[index][position]]
                f.write(" ".join(row) + "\n")
            f.write("\n")


def _rows(sentence: Sentence) -> List[List[str]]:
    if sentence.columns and len(sentence.columns[0]) > 1:
        return [list(row) for row in sentence.columns]
    if sentence.tags is not None:
        return [[token, tag] for token, tag in zip(sentence.tokens, sentence.tags)]
    return [[token] for token in sentence.tokens]


def split_tag(tag: str) -> Tuple[str, str]:
    """'B-PER' -> ('B', 'PER'); 'O' -> ('O', '')"""
    if tag == OUTSIDE:
        return OUTSIDE, ""
    prefix, sep, entity_type = tag.partition("-")
    if not sep or prefix not in ("B", "I", "E", "S") or not entity_type:
        raise DataError(f"Unknown tag shape: {tag!r}")
    return prefix, entity_type


def bio_to_bioes(tags: Sequence[str]) -> List[str]:
    """
    Convert BIO tags to BIOES. I-X that does not continue an X span is
    repaired to B-X first.
    """
    repaired = []
    previous_type = None
    for tag in tags:
        prefix, entity_type = split_tag(tag)
        if prefix not in ("O", "B", "I"):
            raise DataError(f"Not a BIO tag: {tag!r}")
        if prefix == "I" and previous_type != entity_type:
            prefix = "B"
        repaired.append((prefix, entity_type))
        previous_type = entity_type if prefix != "O" else None

    converted = []
    for index, (prefix, entity_type) in enumerate(repaired):
        continues = index + 1 < len(repaired) and repaired[index + 1] == ("I", entity_type)
        if prefix == "O":
            converted.append(OUTSIDE)
        elif prefix == "B":
            converted.append(f"{'B' if continues else 'S'}-{entity_type}")
        else:
            converted.append(f"{'I' if continues else 'E'}-{entity_type}")
    return converted


def bioes_to_bio(tags: Sequence[str]) -> List[str]:
    converted = []
    for tag in tags:
        prefix, entity_type = split_tag(tag)
        if prefix == "O":
            converted.append(OUTSIDE)
        elif prefix in ("B", "S"):
            converted.append(f"B-{entity_type}")
        else:
            converted.append(f"I-{entity_type}")
    return converted


def detect_scheme(tags: Iterable[str]) -> TagScheme:
    scheme = TagScheme.RAW
    for tag in tags:
        if tag[:2] in ("E-", "S-"):
            return TagScheme.BIOES
        if tag[:2] in ("B-", "I-"):
            scheme = TagScheme.BIO
    return scheme


def convert_scheme(corpus: Corpus, target: TagScheme) -> Corpus:
    """Return a corpus whose gold tags follow the target scheme"""
    if target == TagScheme.RAW or corpus.scheme == target or corpus.scheme == TagScheme.RAW:
        if target != TagScheme.RAW and corpus.scheme == TagScheme.RAW:
            app_logger.warning(f"{corpus.path}: no BIO tags found, keeping raw tags")
        return corpus
    convert = bio_to_bioes if target == TagScheme.BIOES else bioes_to_bio
    sentences = [
        replace(s, tags=convert(s.tags) if s.tags is not None else None, word_ids=None, char_ids=None, tag_ids=None)
        for s in corpus.sentences
    ]
    return Corpus(sentences=sentences, path=corpus.path, scheme=target)


def batch_iter(
    sentences: Sequence[Sentence],
    batch_size: int,
    rng: Optional[RngState] = None,
    shuffle: bool = False,
) -> Iterator[List[Sentence]]:
    """Yield one epoch of mini-batches; the last batch may be partial"""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if shuffle:
        if rng is None:
            raise ValueError("Shuffling needs a random stream")
        order = rng.permutation(len(sentences))
    else:
        order = np.arange(len(sentences))
    for start in range(0, len(order), batch_size):
        yield [sentences[i] for i in order[start:start + batch_size]]


def split_dev(corpus: Corpus, size: int, rng: RngState) -> Tuple[Corpus, Corpus]:
    """Sample a dev set of the given size from a training corpus (seeded)"""
    if not 0 < size < len(corpus):
        raise DataError(f"Dev size {size} must be between 1 and {len(corpus) - 1}")
    picked = set(int(i) for i in rng.permutation(len(corpus))[:size])
    train = [s for i, s in enumerate(corpus.sentences) if i not in picked]
    dev = [s for i, s in enumerate(corpus.sentences) if i in picked]
    return (Corpus(sentences=train, path=corpus.path, scheme=corpus.scheme),
            Corpus(sentences=dev, path=corpus.path, scheme=corpus.scheme))
