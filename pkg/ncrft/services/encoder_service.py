"""
Transcription network F (word embedding + char-CNN -> bi-LSTM -> linear) and
prediction network G (label embedding -> uni-LSTM -> linear), each with a
hand-derived backward pass.

Parameter names:
    emb.word, emb.char, cnn.W, cnn.b,
    F.{layer}.fwd.W/b, F.{layer}.bwd.W/b, F.out.W/b,
    G.emb, G.lstm.W/b, G.out.W/b
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ncrft.models.models import EncoderConfig
from ncrft.utils.numerics import (
    Gradients,
    ParamStore,
    RngState,
    add_grad,
    add_rows,
    dropout_apply,
    dropout_backward,
    glorot_uniform,
    init_lstm,
    lstm_backward,
    lstm_forward,
    lstm_step,
)

GState = Tuple[np.ndarray, np.ndarray]


def init_transcription_params(params: ParamStore, config: EncoderConfig, num_words: int, num_chars: int,
                              num_labels: int, rng: RngState, word_table: Optional[np.ndarray] = None):
    """Create embedding, char-CNN and bi-LSTM parameters for F"""
    scale = np.sqrt(3.0 / config.word_dim)
    if word_table is None:
        word_table = rng.uniform(-scale, scale, size=(num_words, config.word_dim))
    elif word_table.shape != (num_words, config.word_dim):
        raise ValueError(f"Word table shape {word_table.shape} does not match ({num_words}, {config.word_dim})")
    params.add("emb.word", word_table)
    char_scale = np.sqrt(3.0 / config.char_dim)
    params.add("emb.char", rng.uniform(-char_scale, char_scale, size=(num_chars, config.char_dim)))
    params.add("cnn.W", glorot_uniform((config.char_filters, config.char_width * config.char_dim), rng))
    params.add("cnn.b", np.zeros(config.char_filters))

    input_dim = config.token_dim
    for layer in range(config.f_layers):
        init_lstm(params, f"F.{layer}.fwd", input_dim, config.f_hidden, rng)
        init_lstm(params, f"F.{layer}.bwd", input_dim, config.f_hidden, rng)
        input_dim = 2 * config.f_hidden
    params.add("F.out.W", glorot_uniform((num_labels, input_dim), rng))
    params.add("F.out.b", np.zeros(num_labels))


def init_prediction_params(params: ParamStore, config: EncoderConfig, num_labels: int, rng: RngState):
    """Create G parameters; the label embedding has K+1 rows, the last one for <bos>"""
    label_scale = np.sqrt(3.0 / config.label_dim)
    params.add("G.emb", rng.uniform(-label_scale, label_scale, size=(num_labels + 1, config.label_dim)))
    init_lstm(params, "G.lstm", config.label_dim, config.g_hidden, rng)
    params.add("G.out.W", glorot_uniform((num_labels, config.g_hidden), rng))
    params.add("G.out.b", np.zeros(num_labels))


# ---------------------------------------------------------------------------
# Character CNN
# ---------------------------------------------------------------------------

@dataclass
class CharCache:
    char_ids: np.ndarray
    windows: np.ndarray
    argmax: np.ndarray
    left: int


def char_cnn_encode(char_ids: np.ndarray, params: ParamStore, config: EncoderConfig) -> Tuple[np.ndarray, CharCache]:
    """
    Encode one word: embed characters, zero-pad so every position hosts a
    full window, convolve, max-pool over positions.

    Returns:
        (char_filters vector, cache for char_cnn_backward)
    """
    char_ids = np.asarray(char_ids, dtype=np.int64)
    if char_ids.size == 0:
        raise ValueError("Cannot encode a word with no characters")
    table = params.value("emb.char")
    if char_ids.min() < 0 or char_ids.max() >= table.shape[0]:
        raise ValueError(f"Character id out of range [0, {table.shape[0]})")

    width = config.char_width
    left = (width - 1) // 2
    right = width - 1 - left
    embedded = table[char_ids]
    padded = np.pad(embedded, ((left, right), (0, 0)))
    windows = sliding_window_view(padded, (width, table.shape[1]))[:, 0].reshape(len(char_ids), -1)
    conv = windows @ params.value("cnn.W").T + params.value("cnn.b")
    argmax = conv.argmax(axis=0)
    pooled = conv[argmax, np.arange(conv.shape[1])]
    return pooled, CharCache(char_ids=char_ids, windows=windows, argmax=argmax, left=left)


def char_cnn_backward(dout: np.ndarray, cache: CharCache, params: ParamStore, config: EncoderConfig,
                      grads: Gradients):
    length = len(cache.char_ids)
    filters = dout.shape[0]
    dconv = np.zeros((length, filters))
    dconv[cache.argmax, np.arange(filters)] = dout
    add_grad(grads, "cnn.W", dconv.T @ cache.windows)
    add_grad(grads, "cnn.b", dconv.sum(axis=0))

    table = params.value("emb.char")
    width = config.char_width
    dwindows = (dconv @ params.value("cnn.W")).reshape(length, width, table.shape[1])
    dpadded = np.zeros((length + width - 1, table.shape[1]))
    for offset in range(width):
        dpadded[offset:offset + length] += dwindows[:, offset, :]
    dembedded = dpadded[cache.left:cache.left + length]
    add_rows(grads, "emb.char", table.shape, cache.char_ids, dembedded)


# ---------------------------------------------------------------------------
# Token embedding
# ---------------------------------------------------------------------------

@dataclass
class EmbedCache:
    word_ids: np.ndarray
    char_caches: List[CharCache]
    mask: Optional[np.ndarray]


def embed_tokens(word_ids: np.ndarray, char_ids: Sequence[np.ndarray], params: ParamStore, config: EncoderConfig,
                 rng: Optional[RngState] = None, training: bool = False) -> Tuple[np.ndarray, EmbedCache]:
    """
    Per token, concatenate the word-embedding row with the char-CNN output.

    Returns:
        (n x (word_dim + char_filters) matrix, cache for embed_backward)
    """
    word_ids = np.asarray(word_ids, dtype=np.int64)
    table = params.value("emb.word")
    if word_ids.size == 0:
        raise ValueError("Cannot embed an empty sentence")
    if len(char_ids) != len(word_ids):
        raise ValueError(f"{len(word_ids)} word ids but {len(char_ids)} character sequences")
    if word_ids.min() < 0 or word_ids.max() >= table.shape[0]:
        raise ValueError(f"Word id out of range [0, {table.shape[0]})")

    char_rows = []
    char_caches = []
    for ids in char_ids:
        pooled, cache = char_cnn_encode(ids, params, config)
        char_rows.append(pooled)
        char_caches.append(cache)
    embedded = np.concatenate([table[word_ids], np.stack(char_rows)], axis=1)
    embedded, mask = dropout_apply(embedded, config.dropout, rng, training)
    return embedded, EmbedCache(word_ids=word_ids, char_caches=char_caches, mask=mask)


def embed_backward(dembedded: np.ndarray, cache: EmbedCache, params: ParamStore, config: EncoderConfig,
                   grads: Gradients):
    dembedded = dropout_backward(dembedded, cache.mask)
    table = params.value("emb.word")
    add_rows(grads, "emb.word", table.shape, cache.word_ids, dembedded[:, :config.word_dim])
    for position, char_cache in enumerate(cache.char_caches):
        char_cnn_backward(dembedded[position, config.word_dim:], char_cache, params, config, grads)


# ---------------------------------------------------------------------------
# Transcription network F
# ---------------------------------------------------------------------------

@dataclass
class TranscriptionCache:
    layer_inputs: List[np.ndarray] = field(default_factory=list)
    lstm_caches: List[Tuple[object, object]] = field(default_factory=list)
    hidden: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None


def transcription_forward(embedded: np.ndarray, params: ParamStore, config: EncoderConfig,
                          rng: Optional[RngState] = None,
                          training: bool = False) -> Tuple[np.ndarray, TranscriptionCache]:
    """
    Bi-LSTM layers over the sentence, dropout, then a linear map to K scores.

    Args:
        embedded: n x token_dim token embeddings

    Returns:
        (f of shape n x K, cache for transcription_backward)
    """
    if embedded.ndim != 2 or embedded.shape[0] < 1:
        raise ValueError(f"Expected an n x D embedding matrix with n >= 1, got {embedded.shape}")
    cache = TranscriptionCache()
    inputs = embedded[None, :, :]
    for layer in range(config.f_layers):
        forward_h, forward_cache = lstm_forward(inputs, params.value(f"F.{layer}.fwd.W"),
                                                params.value(f"F.{layer}.fwd.b"))
        backward_h, backward_cache = lstm_forward(inputs, params.value(f"F.{layer}.bwd.W"),
                                                  params.value(f"F.{layer}.bwd.b"), reverse=True)
        cache.layer_inputs.append(inputs)
        cache.lstm_caches.append((forward_cache, backward_cache))
        inputs = np.concatenate([forward_h, backward_h], axis=2)

    hidden, mask = dropout_apply(inputs[0], config.dropout, rng, training)
    cache.hidden, cache.mask = hidden, mask
    f = hidden @ params.value("F.out.W").T + params.value("F.out.b")
    return f, cache


def transcription_backward(df: np.ndarray, cache: TranscriptionCache, params: ParamStore, config: EncoderConfig,
                           grads: Gradients) -> np.ndarray:
    """Accumulate F gradients; returns d(embedded)"""
    add_grad(grads, "F.out.W", df.T @ cache.hidden)
    add_grad(grads, "F.out.b", df.sum(axis=0))
    dhidden = dropout_backward(df @ params.value("F.out.W"), cache.mask)[None, :, :]

    hidden = config.f_hidden
    for layer in range(config.f_layers - 1, -1, -1):
        forward_cache, backward_cache = cache.lstm_caches[layer]
        dx_f, dW_f, db_f = lstm_backward(dhidden[:, :, :hidden], forward_cache, params.value(f"F.{layer}.fwd.W"))
        dx_b, dW_b, db_b = lstm_backward(dhidden[:, :, hidden:], backward_cache, params.value(f"F.{layer}.bwd.W"))
        add_grad(grads, f"F.{layer}.fwd.W", dW_f)
        add_grad(grads, f"F.{layer}.fwd.b", db_f)
        add_grad(grads, f"F.{layer}.bwd.W", dW_b)
        add_grad(grads, f"F.{layer}.bwd.b", db_b)
        dhidden = dx_f + dx_b
    return dhidden[0]


# ---------------------------------------------------------------------------
# Prediction network G
# ---------------------------------------------------------------------------

@dataclass
class PredictionCache:
    labels: np.ndarray
    hidden: np.ndarray
    lstm_cache: object


def _check_labels(labels: np.ndarray, bos_id: int):
    if labels.ndim != 2 or labels.shape[1] < 1:
        raise ValueError(f"Expected a (batch, n) label matrix with n >= 1, got {labels.shape}")
    if np.any(labels[:, 0] != bos_id):
        raise ValueError("Every label prefix fed to the prediction network must start with <bos>")
    rest = labels[:, 1:]
    if rest.size and (rest.min() < 0 or rest.max() >= bos_id):
        raise ValueError(f"Label id out of range [0, {bos_id})")


def prediction_forward(labels: np.ndarray, params: ParamStore, bos_id: int) -> Tuple[np.ndarray, PredictionCache]:
    """
    Run G over label prefixes y_0..y_{n-1} with y_0 = <bos>.

    Args:
        labels: (batch, n) or (n,) label ids
        bos_id: Id of <bos> (equals K)

    Returns:
        (g of shape (batch, n, K) or (n, K), cache); row i depends on labels[..., :i+1] only
    """
    labels = np.asarray(labels, dtype=np.int64)
    single = labels.ndim == 1
    labels2 = labels[None, :] if single else labels
    _check_labels(labels2, bos_id)

    embedded = params.value("G.emb")[labels2]
    hidden, lstm_cache = lstm_forward(embedded, params.value("G.lstm.W"), params.value("G.lstm.b"))
    g = hidden @ params.value("G.out.W").T + params.value("G.out.b")
    cache = PredictionCache(labels=labels2, hidden=hidden, lstm_cache=lstm_cache)
    return (g[0] if single else g), cache


def prediction_backward(dg: np.ndarray, cache: PredictionCache, params: ParamStore, grads: Gradients):
    dg = dg.reshape(cache.hidden.shape[0], cache.hidden.shape[1], -1)
    hidden_dim = cache.hidden.shape[2]
    flat_hidden = cache.hidden.reshape(-1, hidden_dim)
    flat_dg = dg.reshape(-1, dg.shape[2])
    add_grad(grads, "G.out.W", flat_dg.T @ flat_hidden)
    add_grad(grads, "G.out.b", flat_dg.sum(axis=0))
    dhidden = dg @ params.value("G.out.W")
    dembedded, dW, db = lstm_backward(dhidden, cache.lstm_cache, params.value("G.lstm.W"))
    add_grad(grads, "G.lstm.W", dW)
    add_grad(grads, "G.lstm.b", db)
    table = params.value("G.emb")
    add_rows(grads, "G.emb", table.shape, cache.labels.reshape(-1), dembedded.reshape(-1, table.shape[1]))


def initial_gstate(params: ParamStore, batch: int = 1) -> GState:
    hidden = params.value("G.lstm.W").shape[0] // 4
    return np.zeros((batch, hidden)), np.zeros((batch, hidden))


def prediction_step(params: ParamStore, state: GState, labels: np.ndarray) -> Tuple[GState, np.ndarray]:
    """
    Feed one label per prefix to G.

    Args:
        state: (h, c), each (batch, g_hidden)
        labels: (batch,) label ids just appended to each prefix

    Returns:
        (new state, g rows of shape (batch, K) scoring the next position)
    """
    labels = np.asarray(labels, dtype=np.int64)
    table = params.value("G.emb")
    if labels.min() < 0 or labels.max() >= table.shape[0]:
        raise ValueError(f"Label id out of range [0, {table.shape[0]})")
    h, c = state
    h, c, _ = lstm_step(table[labels], h, c, params.value("G.lstm.W"), params.value("G.lstm.b"))
    rows = h @ params.value("G.out.W").T + params.value("G.out.b")
    return (h, c), rows


@dataclass
class ScoreSequences:
    """Per-sentence f and teacher-forced g, plus the G hidden states behind g"""
    f: np.ndarray
    g: Optional[np.ndarray] = None
    g_states: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.g is not None and self.g.shape != self.f.shape:
            raise ValueError(f"f {self.f.shape} and g {self.g.shape} must both be n x K")


def gold_prefix(gold: Sequence[int], bos_id: int) -> np.ndarray:
    """<bos>, y_1 .. y_{n-1}: the G input that produces g_1 .. g_n"""
    gold = np.asarray(gold, dtype=np.int64)
    return np.concatenate([[bos_id], gold[:-1]]).astype(np.int64)
