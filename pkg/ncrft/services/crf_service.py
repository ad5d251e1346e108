"""
Linear-chain CRF head: forward/backward in log space, posterior marginals,
negative log-likelihood with its gradient, and Viterbi decoding.

Scores follow the convention

    score(y) = begin[y_1] + sum_i f[i, y_i] + sum_i A[y_{i-1}, y_i] + end[y_n]
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ncrft.utils.numerics import log_sum_exp


@dataclass
class TransitionTable:
    A: np.ndarray        # K x K, A[j, k] scores label j followed by label k
    begin: np.ndarray    # K
    end: np.ndarray      # K

    @classmethod
    def zeros(cls, num_labels: int) -> "TransitionTable":
        return cls(A=np.zeros((num_labels, num_labels)), begin=np.zeros(num_labels), end=np.zeros(num_labels))

    @property
    def num_labels(self) -> int:
        return self.A.shape[0]

    def masked(self, constraints: Optional["TransitionConstraints"]) -> "TransitionTable":
        if constraints is None:
            return self
        return TransitionTable(
            A=self.A + constraints.transition_mask(),
            begin=self.begin + constraints.start_mask(),
            end=self.end + constraints.end_mask(),
        )


@dataclass
class LinearChainGradients:
    df: np.ndarray
    dA: np.ndarray
    dbegin: np.ndarray
    dend: np.ndarray


@dataclass
class TransitionConstraints:
    """Allowed label transitions; disallowed ones score -inf when decoding"""
    allowed: np.ndarray   # K x K bool
    start: np.ndarray     # K bool
    end: np.ndarray       # K bool

    @staticmethod
    def _log(mask: np.ndarray) -> np.ndarray:
        return np.where(mask, 0.0, -np.inf)

    def transition_mask(self) -> np.ndarray:
        return self._log(self.allowed)

    def start_mask(self) -> np.ndarray:
        return self._log(self.start)

    def end_mask(self) -> np.ndarray:
        return self._log(self.end)


def _parse_tag(tag: str) -> Tuple[Optional[str], str]:
    if tag[:2] in ("B-", "I-", "E-", "S-"):
        return tag[0], tag[2:]
    return "O" if tag == "O" else None, ""


def bioes_constraints(labels: Sequence[str]) -> TransitionConstraints:
    """
    Structural BIOES rules: B-X/I-X must be followed by I-X or E-X; a span
    may only start with B-X or S-X; sequences cannot end inside a span.
    Labels that are not BIOES-shaped are unconstrained.
    """
    K = len(labels)
    parsed = [_parse_tag(tag) for tag in labels]
    allowed = np.ones((K, K), dtype=bool)
    start = np.ones(K, dtype=bool)
    end = np.ones(K, dtype=bool)
    for j, (prev_prefix, prev_type) in enumerate(parsed):
        if prev_prefix in ("B", "I"):
            end[j] = False
        for k, (prefix, entity_type) in enumerate(parsed):
            if prev_prefix is None or prefix is None:
                continue
            inside = prev_prefix in ("B", "I")
            if inside:
                allowed[j, k] = prefix in ("I", "E") and entity_type == prev_type
            else:
                allowed[j, k] = prefix in ("O", "B", "S")
    for k, (prefix, _) in enumerate(parsed):
        if prefix in ("I", "E"):
            start[k] = False
    return TransitionConstraints(allowed=allowed, start=start, end=end)


def bio_constraints(labels: Sequence[str]) -> TransitionConstraints:
    """I-X only at the continuation of a B-X or I-X span; anything may end a sequence"""
    K = len(labels)
    parsed = [_parse_tag(tag) for tag in labels]
    allowed = np.ones((K, K), dtype=bool)
    start = np.ones(K, dtype=bool)
    end = np.ones(K, dtype=bool)
    for k, (prefix, entity_type) in enumerate(parsed):
        if prefix != "I":
            continue
        start[k] = False
        for j, (prev_prefix, prev_type) in enumerate(parsed):
            if prev_prefix is not None:
                allowed[j, k] = prev_prefix in ("B", "I") and prev_type == entity_type
    return TransitionConstraints(allowed=allowed, start=start, end=end)


def label_constraints(labels: Sequence[str]) -> TransitionConstraints:
    """BIOES rules when the inventory has E-/S- tags, BIO rules otherwise"""
    if any(tag[:2] in ("E-", "S-") for tag in labels):
        return bioes_constraints(labels)
    return bio_constraints(labels)


def _check(f: np.ndarray, table: TransitionTable):
    if f.ndim != 2 or f.shape[0] < 1:
        raise ValueError(f"Expected an n x K score matrix with n >= 1, got shape {f.shape}")
    if table.A.shape != (f.shape[1], f.shape[1]):
        raise ValueError(f"Transition matrix {table.A.shape} does not match K={f.shape[1]}")


def lc_forward(f: np.ndarray, table: TransitionTable) -> np.ndarray:
    """alpha[i, k] = log-sum of scores of all prefixes ending in label k at position i"""
    _check(f, table)
    n, K = f.shape
    alpha = np.zeros((n, K))
    alpha[0] = table.begin + f[0]
    for i in range(1, n):
        alpha[i] = log_sum_exp(alpha[i - 1][:, None] + table.A, axis=0) + f[i]
    return alpha


def lc_backward(f: np.ndarray, table: TransitionTable) -> np.ndarray:
    """beta[i, k] = log-sum of scores of all suffixes after position i given label k there"""
    _check(f, table)
    n, K = f.shape
    beta = np.zeros((n, K))
    beta[n - 1] = table.end
    for i in range(n - 2, -1, -1):
        beta[i] = log_sum_exp(table.A + (f[i + 1] + beta[i + 1])[None, :], axis=1)
    return beta


def lc_log_z(f: np.ndarray, table: TransitionTable) -> float:
    alpha = lc_forward(f, table)
    return float(log_sum_exp(alpha[-1] + table.end))


def lc_marginals(f: np.ndarray, table: TransitionTable) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    Posterior marginals.

    Returns:
        (node marginals n x K, pairwise marginals (n-1) x K x K, log Z)
    """
    alpha = lc_forward(f, table)
    beta = lc_backward(f, table)
    log_z = float(log_sum_exp(alpha[-1] + table.end))
    node = np.exp(alpha + beta - log_z)
    n = f.shape[0]
    pair = np.zeros((max(n - 1, 0), f.shape[1], f.shape[1]))
    for i in range(1, n):
        pair[i - 1] = np.exp(alpha[i - 1][:, None] + table.A + (f[i] + beta[i])[None, :] - log_z)
    return node, pair, log_z


def lc_sequence_score(f: np.ndarray, table: TransitionTable, labels: Sequence[int]) -> float:
    labels = np.asarray(labels)
    if len(labels) != f.shape[0]:
        raise ValueError(f"Label sequence length {len(labels)} does not match n={f.shape[0]}")
    score = table.begin[labels[0]] + table.end[labels[-1]]
    score += f[np.arange(len(labels)), labels].sum()
    score += table.A[labels[:-1], labels[1:]].sum()
    return float(score)


def lc_nll_and_grad(f: np.ndarray, table: TransitionTable, gold: Sequence[int]) -> Tuple[float, LinearChainGradients]:
    """
    loss = -score(gold) + log Z, with gradients from forward-backward marginals.
    """
    gold = np.asarray(gold)
    node, pair, log_z = lc_marginals(f, table)
    loss = log_z - lc_sequence_score(f, table, gold)
    n = len(gold)
    positions = np.arange(n)

    df = node.copy()
    df[positions, gold] -= 1.0
    dA = pair.sum(axis=0)
    np.add.at(dA, (gold[:-1], gold[1:]), -1.0)
    dbegin = node[0].copy()
    dbegin[gold[0]] -= 1.0
    dend = node[-1].copy()
    dend[gold[-1]] -= 1.0
    return float(loss), LinearChainGradients(df=df, dA=dA, dbegin=dbegin, dend=dend)


def lc_viterbi(f: np.ndarray, table: TransitionTable,
               constraints: Optional[TransitionConstraints] = None) -> Tuple[List[int], float]:
    """
    Highest-scoring label sequence. Among equal-scoring optima the
    lexicographically smallest sequence wins: best completions are computed
    right to left, then labels are chosen left to right taking the lowest id
    that still reaches the optimum.

    Returns:
        (labels, score recomputed from the returned labels)
    """
    _check(f, table)
    scored = table.masked(constraints)
    n, K = f.shape
    best_suffix = np.zeros((n, K))
    best_suffix[n - 1] = scored.end
    for i in range(n - 2, -1, -1):
        best_suffix[i] = (scored.A + (f[i + 1] + best_suffix[i + 1])[None, :]).max(axis=1)

    labels = [int(np.argmax(scored.begin + f[0] + best_suffix[0]))]
    for i in range(1, n):
        labels.append(int(np.argmax(scored.A[labels[-1]] + f[i] + best_suffix[i])))
    return labels, lc_sequence_score(f, scored, labels)
