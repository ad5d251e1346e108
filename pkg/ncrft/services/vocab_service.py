import os
from collections import Counter
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from ncrft.services.data_service import Corpus, Sentence
from ncrft.utils.errors import DataError
from ncrft.utils.logger import app_logger
from ncrft.utils.numerics import RngState

UNK = "<UNK>"
BOS = "<bos>"


class Vocabulary:
    """
    Word, character and label id maps.

    Word and character id 0 is UNK. Real labels take ids 0..K-1 and <bos>
    takes id K, so no model output ever covers <bos>.
    """

    def __init__(self, words: List[str], chars: List[str], labels: List[str],
                 word_counts: Optional[Dict[str, int]] = None):
        if not words or words[0] != UNK or not chars or chars[0] != UNK:
            raise ValueError("Word and character vocabularies must start with the UNK entry")
        if BOS in labels:
            raise ValueError("<bos> is reserved and cannot be a gold label")
        if not labels:
            raise ValueError("Label vocabulary is empty")
        self.words = list(words)
        self.chars = list(chars)
        self.labels = list(labels)
        self.word_counts = dict(word_counts or {})
        self._word_index = {w: i for i, w in enumerate(self.words)}
        self._char_index = {c: i for i, c in enumerate(self.chars)}
        self._label_index = {t: i for i, t in enumerate(self.labels)}
        self._label_index[BOS] = len(self.labels)

    @property
    def num_words(self) -> int:
        return len(self.words)

    @property
    def num_chars(self) -> int:
        return len(self.chars)

    @property
    def num_labels(self) -> int:
        """K, excluding <bos>"""
        return len(self.labels)

    @property
    def bos_id(self) -> int:
        return len(self.labels)

    def word_id(self, word: str) -> int:
        return self._word_index.get(word, 0)

    def char_id(self, char: str) -> int:
        return self._char_index.get(char, 0)

    def label_id(self, label: str) -> int:
        if label not in self._label_index:
            raise DataError(f"Label {label!r} is not in the model's label inventory")
        return self._label_index[label]

    def label(self, label_id: int) -> str:
        if label_id == self.bos_id:
            return BOS
        return self.labels[label_id]

    def word(self, word_id: int) -> str:
        return self.words[word_id]

    def to_dict(self) -> Dict[str, List[str]]:
        return {"words": self.words, "chars": self.chars, "labels": self.labels}

    @classmethod
    def from_dict(cls, data: Dict[str, List[str]]) -> "Vocabulary":
        return cls(words=data["words"], chars=data["chars"], labels=data["labels"])

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.to_dict() == other.to_dict()


def build_vocab(sentences: Iterable[Sentence], rare_word_threshold: int = 1) -> Vocabulary:
    """
    Build vocabularies from training sentences.

    Args:
        sentences: Training sentences (normalized tokens are counted)
        rare_word_threshold: Words seen this many times or fewer map to UNK

    Returns:
        Vocabulary with ids assigned by first occurrence
    """
    sentences = list(sentences.sentences if isinstance(sentences, Corpus) else sentences)
    if not sentences:
        raise DataError("Cannot build a vocabulary from an empty corpus")

    word_counts = Counter()
    first_seen: Dict[str, None] = {}
    chars: Dict[str, None] = {}
    labels: Dict[str, None] = {}
    for sentence in sentences:
        for token in sentence.normalized:
            word_counts[token] += 1
            first_seen.setdefault(token, None)
            for char in token:
                chars.setdefault(char, None)
        for tag in sentence.tags or []:
            labels.setdefault(tag, None)
    if not labels:
        raise DataError("Training sentences carry no gold tags")

    words = [UNK] + [w for w in first_seen if word_counts[w] > rare_word_threshold and w != UNK]
    vocab = Vocabulary(words=words, chars=[UNK] + [c for c in chars if c != UNK],
                       labels=list(labels), word_counts=dict(word_counts))
    app_logger.info(
        f"Vocabulary: {vocab.num_words} words ({len(first_seen) - vocab.num_words + 1} rare -> UNK), "
        f"{vocab.num_chars} chars, {vocab.num_labels} labels"
    )
    return vocab


def bind_sentence(sentence: Sentence, vocab: Vocabulary) -> Sentence:
    """Resolve word, character and (when present) tag ids in place"""
    sentence.word_ids = np.array([vocab.word_id(w) for w in sentence.normalized], dtype=np.int64)
    sentence.char_ids = [np.array([vocab.char_id(c) for c in chars], dtype=np.int64) for chars in sentence.chars]
    if sentence.tags is not None:
        sentence.tag_ids = np.array([vocab.label_id(t) for t in sentence.tags], dtype=np.int64)
    return sentence


def bind_corpus(corpus: Corpus, vocab: Vocabulary) -> Corpus:
    for sentence in corpus.sentences:
        bind_sentence(sentence, vocab)
    return corpus


def load_pretrained_embeddings(path: str, vocab: Vocabulary, dim: int, rng: RngState) -> Tuple[np.ndarray, float]:
    """
    Read a text embedding file (token followed by floats on each line).

    Args:
        path: Embedding file
        vocab: Vocabulary whose word rows are filled
        dim: Expected dimension (must equal the file's)
        rng: Stream for rows missing from the file

    Returns:
        (num_words x dim matrix, fraction of vocabulary rows found in the file)
    """
    if not os.path.isfile(path):
        raise DataError(f"Embedding file not found: {path}")
    scale = np.sqrt(3.0 / dim)
    table = rng.uniform(-scale, scale, size=(vocab.num_words, dim))
    exact_found = set()
    folded = set()
    lowered: Dict[str, List[int]] = {}
    for index, word in enumerate(vocab.words[1:], 1):
        lowered.setdefault(word.lower(), []).append(index)
    file_dim = None
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            fields = line.rstrip().split()
            if not fields:
                continue
            if file_dim is None:
                file_dim = len(fields) - 1
                if file_dim != dim:
                    raise DataError(f"{path}: embeddings have dimension {file_dim}, configuration expects {dim}")
            elif len(fields) - 1 != file_dim:
                raise DataError(f"{path}:{lineno}: expected {file_dim} values, found {len(fields) - 1}")
            exact = vocab._word_index.get(fields[0])
            targets = [exact] if exact and exact not in exact_found else []
            # Case-folded matches fill only rows no earlier line reached
            targets += [index for index in lowered.get(fields[0].lower(), [])
                        if index != exact and index not in exact_found and index not in folded]
            if not targets:
                continue
            try:
                vector = np.array(fields[1:], dtype=np.float64)
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric embedding value")
            for index in targets:
                table[index] = vector
                if index == exact:
                    exact_found.add(index)
                    folded.discard(index)
                else:
                    folded.add(index)
    found = len(exact_found) + len(folded)
    coverage = found / vocab.num_words
    app_logger.info(f"Pretrained embeddings: {found}/{vocab.num_words} rows from {path}")
    return table, coverage
