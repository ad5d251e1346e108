"""
RNN transducer and NCRF transducer heads.

Both heads read transcription scores f (n x K) produced by F and run the
prediction network G over label prefixes. The RNN transducer normalizes
every step locally; the NCRF transducer scores whole sequences with

    u(y) = sum_i [phi_i(y_i) + psi_i(y_0:i-1, y_i)]

and normalizes once over all sequences (exactly by enumeration on small
instances, or over a beam with early updates during training).
"""
import itertools
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ncrft.models.models import PotentialDesign
from ncrft.services.crf_service import TransitionConstraints
from ncrft.services.encoder_service import (
    GState,
    gold_prefix,
    initial_gstate,
    prediction_backward,
    prediction_forward,
    prediction_step,
)
from ncrft.utils.logger import app_logger, log_early_update
from ncrft.utils.numerics import (
    Gradients,
    ParamStore,
    log_softmax,
    log_softmax_backward,
    log_sum_exp,
    softmax,
)

DEFAULT_ENUMERATION_CAP = 100_000


# ---------------------------------------------------------------------------
# RNN transducer
# ---------------------------------------------------------------------------

def rnnt_step_log_probs(f_i: np.ndarray, g_i: np.ndarray) -> np.ndarray:
    """log softmax(f_i + g_i) over the last axis"""
    return log_softmax(np.asarray(f_i) + np.asarray(g_i), axis=-1)


def rnnt_nll(f: np.ndarray, gold: Sequence[int], params: ParamStore, bos_id: int) -> Tuple[float, np.ndarray, Gradients]:
    """
    Teacher-forced negative log-likelihood -sum_i log p(y*_i | y*_0:i-1, x).

    Returns:
        (loss, d loss / d f, G gradients)
    """
    gold = np.asarray(gold, dtype=np.int64)
    g, cache = prediction_forward(gold_prefix(gold, bos_id), params, bos_id)
    logits = f + g
    log_probs = log_softmax(logits, axis=1)
    positions = np.arange(len(gold))
    loss = -float(log_probs[positions, gold].sum())

    dlogits = np.exp(log_probs)
    dlogits[positions, gold] -= 1.0
    grads: Gradients = {}
    prediction_backward(dlogits, cache, params, grads)
    return loss, dlogits, grads


def rnnt_exact_nll(f: np.ndarray, gold: Sequence[int], params: ParamStore, bos_id: int) -> float:
    """Exact sequence NLL of the locally normalized model (chain rule, no gradient)"""
    gold = np.asarray(gold, dtype=np.int64)
    g, _ = prediction_forward(gold_prefix(gold, bos_id), params, bos_id)
    log_probs = rnnt_step_log_probs(f, g)
    return -float(log_probs[np.arange(len(gold)), gold].sum())


def rnnt_greedy_decode(f: np.ndarray, params: ParamStore, bos_id: int) -> Tuple[List[int], float]:
    """Per-step argmax, feeding each prediction back into G"""
    state = initial_gstate(params)
    state, g_row = prediction_step(params, state, np.array([bos_id]))
    labels = []
    total = 0.0
    for i in range(f.shape[0]):
        log_probs = rnnt_step_log_probs(f[i], g_row[0])
        best = int(np.argmax(log_probs))
        labels.append(best)
        total += float(log_probs[best])
        if i + 1 < f.shape[0]:
            state, g_row = prediction_step(params, state, np.array([best]))
    return labels, total


def rnnt_beam_decode(f: np.ndarray, params: ParamStore, bos_id: int, width: int,
                     constraints: Optional[TransitionConstraints] = None) -> Tuple[List[int], float]:
    """Beam search over locally normalized step log-probabilities"""
    beam = beam_search(f, params, bos_id, width, rnnt_row_scorer(f), constraints=constraints)
    return beam.best()


def rnnt_row_scorer(f: np.ndarray) -> "RowScorer":
    return lambda i, g_rows: rnnt_step_log_probs(f[i][None, :], g_rows)


# ---------------------------------------------------------------------------
# NCRF transducer potentials
# ---------------------------------------------------------------------------

def ncrft_potentials(f_i: np.ndarray, g_i: np.ndarray, design: PotentialDesign) -> Tuple[np.ndarray, np.ndarray]:
    """
    Node and clique potentials from f and g rows (any leading shape, K last).

    ADDITIVE:   phi = f, psi = g
    LOGSOFTMAX: phi = log-softmax(f), psi = log-softmax(g)
    """
    f_i = np.asarray(f_i, dtype=np.float64)
    g_i = np.asarray(g_i, dtype=np.float64)
    if design == PotentialDesign.ADDITIVE:
        return f_i, g_i
    if design == PotentialDesign.LOGSOFTMAX:
        return log_softmax(f_i, axis=-1), log_softmax(g_i, axis=-1)
    raise ValueError(f"Unknown potential design: {design}")


def ncrft_potentials_backward(dphi: np.ndarray, dpsi: np.ndarray, f_i: np.ndarray, g_i: np.ndarray,
                              design: PotentialDesign) -> Tuple[np.ndarray, np.ndarray]:
    if design == PotentialDesign.ADDITIVE:
        return dphi, dpsi
    return log_softmax_backward(dphi, f_i, axis=-1), log_softmax_backward(dpsi, g_i, axis=-1)


@dataclass
class PrefixScoreCache:
    prefixes: np.ndarray
    g: np.ndarray
    g_cache: object


def prefix_scores(f: np.ndarray, prefixes: np.ndarray, params: ParamStore, design: PotentialDesign,
                  bos_id: int) -> Tuple[np.ndarray, PrefixScoreCache]:
    """
    Partial potentials u(y_1:j) for a batch of equal-length prefixes.

    Args:
        f: n x K transcription scores (only the first j rows are read)
        prefixes: (M, j) label ids, 1 <= j <= n

    Returns:
        (u of shape (M,), cache for the prefix-set gradient)
    """
    prefixes = np.atleast_2d(np.asarray(prefixes, dtype=np.int64))
    count, length = prefixes.shape
    num_labels = f.shape[1]
    if not 1 <= length <= f.shape[0]:
        raise ValueError(f"Prefix length {length} outside [1, {f.shape[0]}]")
    if prefixes.min() < 0 or prefixes.max() >= num_labels:
        raise ValueError(f"Label id out of range [0, {num_labels})")

    inputs = np.concatenate([np.full((count, 1), bos_id, dtype=np.int64), prefixes[:, :-1]], axis=1)
    g, g_cache = prediction_forward(inputs, params, bos_id)
    phi, psi = ncrft_potentials(f[:length], g, design)
    positions = np.arange(length)
    node = phi[positions[None, :], prefixes].sum(axis=1)
    clique = np.take_along_axis(psi, prefixes[:, :, None], axis=2)[:, :, 0].sum(axis=1)
    return node + clique, PrefixScoreCache(prefixes=prefixes, g=g, g_cache=g_cache)


def ncrft_sequence_potential(f: np.ndarray, labels: Sequence[int], params: ParamStore, design: PotentialDesign,
                             bos_id: int) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != f.shape[0]:
        raise ValueError(f"Label sequence length {len(labels)} does not match n={f.shape[0]}")
    scores, _ = prefix_scores(f, labels[None, :], params, design, bos_id)
    return float(scores[0])


def prefix_set_nll(f: np.ndarray, prefixes: np.ndarray, gold_index: int, params: ParamStore,
                   design: PotentialDesign, bos_id: int) -> Tuple[float, np.ndarray, Gradients]:
    """
    -u(gold prefix) + log sum_{y' in S} exp u(y') over a fixed prefix set S.

    Args:
        prefixes: (M, j) distinct prefixes, row gold_index is the gold prefix

    Returns:
        (loss, d loss / d f with rows beyond j zero, G gradients)
    """
    scores, cache = prefix_scores(f, prefixes, params, design, bos_id)
    loss = float(log_sum_exp(scores) - scores[gold_index])
    dscores = softmax(scores)
    dscores[gold_index] -= 1.0

    count, length = cache.prefixes.shape
    num_labels = f.shape[1]
    dphi = np.zeros((length, num_labels))
    np.add.at(dphi, (np.tile(np.arange(length), count), cache.prefixes.reshape(-1)),
              np.repeat(dscores, length))
    dpsi = np.zeros((count, length, num_labels))
    np.put_along_axis(dpsi, cache.prefixes[:, :, None], np.broadcast_to(dscores[:, None, None], (count, length, 1)),
                      axis=2)

    dphi, dg = ncrft_potentials_backward(dphi, dpsi, f[:length], cache.g, design)
    df = np.zeros_like(f)
    df[:length] = dphi
    grads: Gradients = {}
    prediction_backward(dg, cache.g_cache, params, grads)
    return loss, df, grads


# ---------------------------------------------------------------------------
# Enumeration oracle
# ---------------------------------------------------------------------------

def enumerate_sequences(length: int, num_labels: int, cap: int = DEFAULT_ENUMERATION_CAP) -> np.ndarray:
    """All num_labels ** length sequences in lexicographic order"""
    total = num_labels ** length
    if total > cap:
        raise ValueError(f"K^n = {num_labels}^{length} = {total} exceeds the enumeration cap {cap}")
    return np.array(list(itertools.product(range(num_labels), repeat=length)), dtype=np.int64).reshape(total, length)


@dataclass
class OracleResult:
    log_z: float
    best: List[int]
    best_score: float
    sequences: np.ndarray
    scores: np.ndarray
    num_labels: int

    @property
    def log_probs(self) -> np.ndarray:
        return self.scores - self.log_z

    def log_prob(self, labels: Sequence[int]) -> float:
        return float(self.log_probs[sequence_index(labels, self.num_labels)])


def sequence_index(labels: Sequence[int], num_labels: int) -> int:
    """Position of a sequence in lexicographic enumeration order"""
    index = 0
    for label in labels:
        index = index * num_labels + int(label)
    return index


SequenceScorer = Callable[[np.ndarray], np.ndarray]


def brute_force_oracle(score_sequences: SequenceScorer, length: int, num_labels: int,
                       cap: int = DEFAULT_ENUMERATION_CAP) -> OracleResult:
    """
    Score every label sequence and return exact log Z, the argmax and the
    full distribution. The argmax is the lexicographically smallest among
    equal-scoring optima.

    Args:
        score_sequences: Maps an (M, n) array of sequences to their M scores
    """
    sequences = enumerate_sequences(length, num_labels, cap)
    scores = np.asarray(score_sequences(sequences), dtype=np.float64)
    best = int(np.argmax(scores))
    return OracleResult(log_z=float(log_sum_exp(scores)), best=sequences[best].tolist(),
                        best_score=float(scores[best]), sequences=sequences, scores=scores,
                        num_labels=num_labels)


def ncrft_scorer(f: np.ndarray, params: ParamStore, design: PotentialDesign, bos_id: int) -> SequenceScorer:
    return lambda sequences: prefix_scores(f, sequences, params, design, bos_id)[0]


def ncrft_exact_nll(f: np.ndarray, gold: Sequence[int], params: ParamStore, design: PotentialDesign, bos_id: int,
                    cap: int = DEFAULT_ENUMERATION_CAP) -> Tuple[float, np.ndarray, Gradients]:
    """Exact NCRF transducer NLL and gradients, normalizing over all K^n sequences"""
    sequences = enumerate_sequences(f.shape[0], f.shape[1], cap)
    return prefix_set_nll(f, sequences, sequence_index(gold, f.shape[1]), params, design, bos_id)


# ---------------------------------------------------------------------------
# Beam search
# ---------------------------------------------------------------------------

RowScorer = Callable[[int, np.ndarray], np.ndarray]


def ncrft_row_scorer(f: np.ndarray, design: PotentialDesign) -> RowScorer:
    """Incremental potential phi_i(k) + psi_i(prefix, k) for every beam entry"""
    def score(i: int, g_rows: np.ndarray) -> np.ndarray:
        phi, psi = ncrft_potentials(f[i], g_rows, design)
        return phi[None, :] + psi
    return score


@dataclass
class BeamEntry:
    prefix: List[int]
    score: float
    gstate: GState
    alive: bool = True


@dataclass
class Beam:
    """
    Equal-length prefixes sorted by score (descending, ties by lexicographic
    prefix), with the G state and next g row of every entry.
    """
    width: int
    prefixes: np.ndarray      # (M, j)
    scores: np.ndarray        # (M,)
    h: np.ndarray
    c: np.ndarray
    g_rows: np.ndarray        # (M, K)
    fell_out_at: Optional[int] = None
    gold_index: Optional[int] = None

    def __len__(self) -> int:
        return len(self.scores)

    @property
    def length(self) -> int:
        return self.prefixes.shape[1]

    def entries(self) -> List[BeamEntry]:
        alive = self.fell_out_at is None
        return [BeamEntry(prefix=self.prefixes[m].tolist(), score=float(self.scores[m]),
                          gstate=(self.h[m], self.c[m]), alive=alive) for m in range(len(self))]

    def best(self) -> Tuple[List[int], float]:
        return self.prefixes[0].tolist(), float(self.scores[0])


def _candidate_order(prefixes: np.ndarray, labels: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Candidate indices by score descending, ties by lexicographic (prefix, label)"""
    keys = [labels] + [prefixes[:, col] for col in range(prefixes.shape[1] - 1, -1, -1)] + [-scores]
    return np.lexsort(keys)


def beam_search(f: np.ndarray, params: ParamStore, bos_id: int, width: int, row_scorer: RowScorer,
                gold: Optional[Sequence[int]] = None,
                constraints: Optional[TransitionConstraints] = None) -> Beam:
    """
    Position-synchronous beam search over label prefixes.

    Each entry expands to K children scored by row_scorer; the top `width`
    survive. With a gold sequence, the search stops at the first position
    where the gold prefix is not among the survivors and records it in
    `fell_out_at` (1-based prefix length); the returned beam then holds the
    survivors of that step.
    """
    if width < 1:
        raise ValueError(f"Beam width must be >= 1, got {width}")
    n, num_labels = f.shape
    gold = None if gold is None else np.asarray(gold, dtype=np.int64)

    (h, c), g_rows = prediction_step(params, initial_gstate(params), np.array([bos_id]))
    prefixes = np.zeros((1, 0), dtype=np.int64)
    scores = np.zeros(1)
    gold_index = 0 if gold is not None else None

    for i in range(n):
        increments = row_scorer(i, g_rows)
        if constraints is not None:
            if i == 0:
                increments = increments + constraints.start_mask()[None, :]
            else:
                increments = increments + constraints.transition_mask()[prefixes[:, -1]]
            if i == n - 1:
                increments = increments + constraints.end_mask()[None, :]

        count = len(scores)
        candidate_scores = (scores[:, None] + increments).reshape(-1)
        parents = np.repeat(np.arange(count), num_labels)
        labels = np.tile(np.arange(num_labels), count)
        order = _candidate_order(prefixes[parents], labels, candidate_scores)
        finite = np.isfinite(candidate_scores[order])
        if finite.any():
            order = order[finite]
        top = order[:width]

        new_gold_index = None
        if gold_index is not None:
            gold_candidate = gold_index * num_labels + gold[i]
            hits = np.flatnonzero(top == gold_candidate)
            new_gold_index = int(hits[0]) if hits.size else None

        parents, labels = parents[top], labels[top]
        prefixes = np.concatenate([prefixes[parents], labels[:, None]], axis=1)
        scores = candidate_scores[top]
        h, c = h[parents], c[parents]

        if gold_index is not None and new_gold_index is None:
            log_early_update(app_logger, i + 1, n)
            return Beam(width=width, prefixes=prefixes, scores=scores, h=h, c=c, g_rows=g_rows[parents],
                        fell_out_at=i + 1, gold_index=None)
        gold_index = new_gold_index
        if i + 1 < n:
            (h, c), g_rows = prediction_step(params, (h, c), labels)
        else:
            g_rows = g_rows[parents]

    return Beam(width=width, prefixes=prefixes, scores=scores, h=h, c=c, g_rows=g_rows, gold_index=gold_index)


def beam_search_decode(f: np.ndarray, params: ParamStore, design: PotentialDesign, bos_id: int, width: int,
                       constraints: Optional[TransitionConstraints] = None) -> Tuple[List[int], float]:
    """Highest-scoring complete sequence found by the NCRF transducer beam"""
    beam = beam_search(f, params, bos_id, width, ncrft_row_scorer(f, design), constraints=constraints)
    return beam.best()


def union_with_gold(prefixes: np.ndarray, gold_prefix_: np.ndarray) -> Tuple[np.ndarray, int]:
    """Set union of beam prefixes and the gold prefix; returns (set, gold row)"""
    matches = np.flatnonzero(np.all(prefixes == gold_prefix_[None, :], axis=1))
    if matches.size:
        return prefixes, int(matches[0])
    return np.concatenate([prefixes, gold_prefix_[None, :]], axis=0), len(prefixes)


@dataclass
class EarlyUpdateResult:
    loss: float
    df: np.ndarray
    grads: Gradients
    fell_out_at: Optional[int]
    set_size: int


def early_update_loss(f: np.ndarray, gold: Sequence[int], params: ParamStore, design: PotentialDesign, bos_id: int,
                      width: int, constraints: Optional[TransitionConstraints] = None) -> EarlyUpdateResult:
    """
    Beam-approximated NLL with early update.

    If the gold prefix leaves the beam at step j the loss is
    -u(y*_1:j) + log sum over (beam at j) union {y*_1:j}; otherwise j = n
    and the final beam plus y* normalizes. Beam membership is treated as a
    constant, so gradients flow only through the scores.
    """
    gold = np.asarray(gold, dtype=np.int64)
    beam = beam_search(f, params, bos_id, width, ncrft_row_scorer(f, design), gold=gold, constraints=constraints)
    length = beam.length
    prefixes, gold_row = union_with_gold(beam.prefixes, gold[:length])
    loss, df, grads = prefix_set_nll(f, prefixes, gold_row, params, design, bos_id)
    return EarlyUpdateResult(loss=loss, df=df, grads=grads, fell_out_at=beam.fell_out_at, set_size=len(prefixes))


def beam_sequence_nll(f: np.ndarray, gold: Sequence[int], params: ParamStore, design: PotentialDesign, bos_id: int,
                      width: int) -> float:
    """NLL normalized over the unconstrained decoding beam plus the gold sequence"""
    gold = np.asarray(gold, dtype=np.int64)
    beam = beam_search(f, params, bos_id, width, ncrft_row_scorer(f, design))
    prefixes, gold_row = union_with_gold(beam.prefixes, gold)
    scores, _ = prefix_scores(f, prefixes, params, design, bos_id)
    return float(log_sum_exp(scores) - scores[gold_row])
