#!/usr/bin/env python3
"""
Unified test suite for the ncrft sequence labeling toolkit.

Tests are organised by feature: numerics, vocabulary, encoders, linear
chain, transducers, beam search and early update, data, evaluation,
checkpoints, configuration, training, synthetic data and the command line.
The full-scale synthetic parity experiment runs only with RUN_SLOW=1.
"""
import itertools
import math
import os

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from sqlmodel import Session, select

from ncrft.main import main
from ncrft.models.database import get_engine
from ncrft.models.models import (
    EncoderConfig,
    ModelKind,
    OptimizerKind,
    OptimizerSettings,
    PotentialDesign,
    RunStatus,
    TagScheme,
    TaskType,
    TrainingRun,
)
from ncrft.services.checkpoint_service import MAGIC, ModelCheckpoint, load_model
from ncrft.services.crf_service import (
    TransitionTable,
    bioes_constraints,
    label_constraints,
    lc_log_z,
    lc_marginals,
    lc_nll_and_grad,
    lc_sequence_score,
    lc_viterbi,
)
from ncrft.services.data_service import (
    Sentence,
    batch_iter,
    bio_to_bioes,
    bioes_to_bio,
    convert_scheme,
    detect_scheme,
    preprocess,
    read_conll,
    split_dev,
    write_conll,
)
from ncrft.services.encoder_service import (
    char_cnn_encode,
    embed_tokens,
    init_prediction_params,
    init_transcription_params,
    initial_gstate,
    prediction_forward,
    prediction_step,
    transcription_forward,
)
from ncrft.services.eval_service import (
    EntitySpan,
    EvaluationReport,
    bio_spans,
    evaluate_tags,
    extract_entities,
    format_summary,
    micro_f1,
    summarize_runs,
    token_accuracy,
)
from ncrft.services.gradcheck_service import GRADIENT_TOLERANCE, check_objectives, tiny_model
from ncrft.services.inference_service import run_eval, run_predict
from ncrft.services.model_service import warm_start_from_rnnt
from ncrft.services.synthetic_service import (
    SyntheticTask,
    first_order_bound,
    generator_entropy,
    parity_sequence,
    run_synthetic,
)
from ncrft.services.training_service import TrainingService, run_train
from ncrft.services.transducer_service import (
    beam_search,
    beam_search_decode,
    brute_force_oracle,
    early_update_loss,
    enumerate_sequences,
    ncrft_exact_nll,
    ncrft_potentials,
    ncrft_row_scorer,
    ncrft_scorer,
    ncrft_sequence_potential,
    prefix_scores,
    rnnt_beam_decode,
    rnnt_greedy_decode,
    rnnt_nll,
    rnnt_step_log_probs,
)
from ncrft.services.vocab_service import BOS, UNK, bind_sentence, build_vocab, load_pretrained_embeddings
from ncrft.utils.config import PRESETS, load_run_config, save_run_config
from ncrft.utils.errors import ConfigError, DataError, NumericError
from ncrft.utils.numerics import (
    ParamStore,
    RngState,
    dropout_apply,
    grad_check,
    log_sum_exp,
    lstm_step,
    softmax,
)
from ncrft.utils.optimizers import build_optimizer, decayed_learning_rate, optimizer_step

RUN_SLOW = os.getenv("RUN_SLOW") == "1"

SMALL = EncoderConfig(word_dim=4, char_dim=3, char_filters=5, char_width=3, f_hidden=3, f_layers=1,
                      g_hidden=4, label_dim=3, dropout=0.0)

TOY_CORPUS = [
    ("The cat sat on the mat", "DT NN VBD IN DT NN"),
    ("A dog ran in the park", "DT NN VBD IN DT NN"),
    ("Birds fly", "NNS VBP"),
    ("She reads books", "PRP VBZ NNS"),
    ("He ate 3 apples", "PRP VBD CD NNS"),
    ("The sun rises", "DT NN VBZ"),
    ("They sing loudly", "PRP VBP RB"),
    ("We walked home quickly", "PRP VBD NN RB"),
    ("Dogs bark at night", "NNS VBP IN NN"),
    ("I like green tea", "PRP VBP JJ NN"),
]


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def write_lines(path, lines):
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return str(path)


def write_toy_corpus(path, copies=1):
    lines = []
    for words, tags in TOY_CORPUS * copies:
        lines.extend(f"{word} {tag}" for word, tag in zip(words.split(), tags.split()))
        lines.append("")
    return write_lines(path, lines)


def g_params(num_labels, seed, config=SMALL):
    params = ParamStore()
    init_prediction_params(params, config, num_labels, RngState(seed))
    return params


def zero_params(params):
    for name in params.names():
        params.set_value(name, np.zeros_like(params.value(name)))
    return params


def random_table(rng, num_labels):
    return TransitionTable(A=rng.normal(1.0, size=(num_labels, num_labels)), begin=rng.normal(1.0, size=num_labels),
                           end=rng.normal(1.0, size=num_labels))


def stepwise_scores(f, params, design, sequences):
    """Sequence potentials accumulated one G step at a time over the whole batch"""
    count, length = sequences.shape
    bos = f.shape[1]
    state, rows = prediction_step(params, initial_gstate(params, count), np.full(count, bos))
    total = np.zeros(count)
    for i in range(length):
        phi, psi = ncrft_potentials(f[i], rows, design)
        total += phi[sequences[:, i]] + psi[np.arange(count), sequences[:, i]]
        state, rows = prediction_step(params, state, sequences[:, i])
    return total


def numeric_gradient(fn, x, epsilon=1e-6):
    grad = np.zeros_like(x)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        original = flat[k]
        flat[k] = original + epsilon
        plus = fn()
        flat[k] = original - epsilon
        minus = fn()
        flat[k] = original
        out[k] = (plus - minus) / (2 * epsilon)
    return grad


def toy_overrides(tmp_path, kind, **extra):
    train = write_toy_corpus(tmp_path / "toy.txt")
    overrides = {
        "model_kind": kind, "task": "accuracy", "tag_scheme": "raw", "train_path": train, "dev_path": train,
        "checkpoint_path": str(tmp_path / f"{kind}.ckpt"), "registry_url": "", "rare_word_threshold": 0,
        "word_dim": 16, "char_dim": 4, "char_filters": 4, "f_hidden": 16, "g_hidden": 8, "label_dim": 4,
        "dropout": 0.0, "batch_size": 1, "epochs": 50, "patience": 50, "train_beam": 4, "decode_beam": 8,
        "exact_nll_cap": 1, "optimizer_kind": "adam", "optimizer_learning_rate": 0.05, "optimizer_decay": 0.0,
        "seed": 3,
    }
    if kind == "ncrft":
        overrides["cold_start"] = True
    overrides.update(extra)
    return overrides


# ---------------------------------------------------------------------------
# Numerics
# ---------------------------------------------------------------------------

class TestNumerics:
    def test_log_sum_exp_examples(self):
        assert log_sum_exp(np.array([5.0])) == 5.0
        assert_allclose(log_sum_exp(np.zeros(4)), math.log(4), rtol=1e-12)
        assert_allclose(log_sum_exp(np.array([1000.0, 1000.0])), 1000.0 + math.log(2), rtol=1e-12)

    def test_log_sum_exp_bounds(self):
        rng = RngState(11)
        for _ in range(50):
            v = rng.normal(10.0, size=int(rng.integers(1, 9)))
            value = log_sum_exp(v)
            assert value >= v.max()
            assert value <= v.max() + math.log(len(v)) + 1e-12

    def test_log_sum_exp_rejects_empty_axis(self):
        with pytest.raises(ValueError):
            log_sum_exp(np.zeros(0))
        with pytest.raises(ValueError):
            log_sum_exp(np.zeros((2, 3)), axis=2)

    def test_softmax_examples(self):
        assert_allclose(softmax(np.array([3.7])), [1.0])
        assert_allclose(softmax(np.full(3, -42.5)), np.full(3, 1 / 3), atol=1e-12)
        assert_allclose(softmax(np.array([1.0, 2.0])), [0.268941, 0.731059], atol=1e-6)

    def test_softmax_sums_to_one_and_is_shift_invariant(self):
        rng = RngState(5)
        v = rng.normal(3.0, size=(4, 6))
        probs = softmax(v, axis=1)
        assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
        assert_allclose(softmax(v + 17.0, axis=1), probs, atol=1e-12)

    def test_lstm_zero_fixed_point(self):
        h, c, _ = lstm_step(np.zeros(3), np.zeros(2), np.zeros(2), np.zeros((8, 5)), np.zeros(8))
        assert_array_equal(h, np.zeros(2))
        assert_array_equal(c, np.zeros(2))

    def test_lstm_shapes_and_dimension_errors(self):
        rng = RngState(0)
        h, c, _ = lstm_step(rng.normal(size=4), np.zeros(3), np.zeros(3), rng.normal(size=(12, 7)), np.zeros(12))
        assert h.shape == (3,) and c.shape == (3,)
        with pytest.raises(ValueError):
            lstm_step(np.zeros(5), np.zeros(3), np.zeros(3), np.zeros((12, 7)), np.zeros(12))

    def test_lstm_scalar_cell(self):
        x, h, c = 0.5, -0.3, 0.8
        W = np.array([[0.1, 0.2], [0.3, -0.4], [0.5, 0.6], [-0.7, 0.8]])
        b = np.array([0.01, 0.02, 0.03, 0.04])

        def sigmoid(z):
            return 1.0 / (1.0 + math.exp(-z))

        i = sigmoid(0.1 * x + 0.2 * h + 0.01)
        f = sigmoid(0.3 * x - 0.4 * h + 0.02)
        o = sigmoid(0.5 * x + 0.6 * h + 0.03)
        g = math.tanh(-0.7 * x + 0.8 * h + 0.04)
        c_new = f * c + i * g
        h_new = o * math.tanh(c_new)
        h_out, c_out, _ = lstm_step(np.array([x]), np.array([h]), np.array([c]), W, b)
        assert_allclose(h_out, [h_new], atol=1e-12)
        assert_allclose(c_out, [c_new], atol=1e-12)

    def test_dropout(self):
        v = np.arange(6.0)
        out, mask = dropout_apply(v, 0.5, None, training=False)
        assert out is v and mask is None
        out, _ = dropout_apply(v, 0.0, RngState(1), training=True)
        assert_array_equal(out, v)
        out, _ = dropout_apply(np.ones(100_000), 0.5, RngState(2), training=True)
        assert 0.98 <= out.mean() <= 1.02
        with pytest.raises(ValueError):
            dropout_apply(v, 1.0, RngState(1), training=True)

    def _store(self, value, grad):
        params = ParamStore()
        params.add("w", np.array(value, dtype=float))
        params.zero_grad()
        params.accumulate({"w": np.array(grad, dtype=float)})
        return params

    def test_sgd_steps(self):
        params = self._store([0.0], [1.0])
        state = build_optimizer(OptimizerSettings(kind=OptimizerKind.SGD_MOMENTUM, learning_rate=0.1, momentum=0.0))
        optimizer_step(params, state)
        assert_allclose(params.value("w"), [-0.1])

        params = self._store([0.3, -0.2], [0.0, 0.0])
        state = build_optimizer(OptimizerSettings(kind=OptimizerKind.SGD_MOMENTUM, learning_rate=0.1))
        optimizer_step(params, state)
        assert_array_equal(params.value("w"), [0.3, -0.2])

        lr, mu, g = 0.1, 0.9, 2.0
        params = self._store([0.0], [g])
        state = build_optimizer(OptimizerSettings(kind=OptimizerKind.SGD_MOMENTUM, learning_rate=lr, momentum=mu))
        optimizer_step(params, state)
        optimizer_step(params, state)
        assert_allclose(params.value("w"), [-lr * g * (2 + mu)], rtol=1e-12)
        assert state.step == 2

    def test_adam_first_step_moves_by_learning_rate(self):
        params = self._store([1.0, 1.0], [0.5, -3.0])
        state = build_optimizer(OptimizerSettings(kind=OptimizerKind.ADAM, learning_rate=0.01))
        optimizer_step(params, state)
        assert_allclose(params.value("w"), [0.99, 1.01], rtol=1e-6)

    def test_optimizer_needs_gradients(self):
        params = ParamStore()
        params.add("w", np.zeros(2))
        with pytest.raises(ValueError):
            optimizer_step(params, build_optimizer(OptimizerSettings()))

    def test_learning_rate_decay(self):
        assert decayed_learning_rate(0.01, 0.05, 0) == 0.01
        assert_allclose(decayed_learning_rate(0.01, 0.05, 2), 0.01 / 1.1)

    def test_clip_grad_norm(self):
        params = self._store([0.0, 0.0], [3.0, 4.0])
        assert params.clip_grad_norm(1.0) == 5.0
        assert_allclose(params.grad("w"), [0.6, 0.8])
        params.accumulate({"w": np.array([np.inf, 0.0])})
        with pytest.raises(NumericError):
            params.clip_grad_norm(1.0)

    def test_grad_check_quadratic(self):
        params = ParamStore()
        params.add("theta", np.array([[1.5, -2.0], [0.7, 3.1]]))
        params.add("bias", np.array([-1.2]))

        def loss_fn(store):
            values = [store.value(name) for name in store.names()]
            return 0.5 * sum(float((v * v).sum()) for v in values), {name: store.value(name).copy()
                                                                    for name in store.names()}

        assert grad_check(loss_fn, params, epsilon=1e-4, sample_count=4) < 1e-9

    def test_grad_check_rejects_non_finite_loss(self):
        params = ParamStore()
        params.add("w", np.ones(1))
        with pytest.raises(NumericError):
            grad_check(lambda store: (float("nan"), {}), params)

    def test_rng_streams_are_reproducible(self):
        assert_array_equal(RngState(7).derive(1, 2).random(5), RngState(7).derive(1, 2).random(5))
        assert not np.array_equal(RngState(7).derive(1).random(5), RngState(7).derive(2).random(5))


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

class TestVocabulary:
    def test_rare_words_map_to_unk(self):
        sentences = [Sentence(tokens=["a", "a", "b", "a"], tags=["O", "B-PER", "O", "O"])]
        vocab = build_vocab(sentences, rare_word_threshold=1)
        assert vocab.words == [UNK, "a"]
        assert vocab.word_id("b") == 0
        assert vocab.num_labels == 2
        assert vocab.bos_id == 2
        assert vocab.label(vocab.bos_id) == BOS

    def test_ids_are_stable(self, tmp_path):
        path = write_toy_corpus(tmp_path / "toy.txt")
        first = build_vocab(read_conll(path), rare_word_threshold=0)
        second = build_vocab(read_conll(path), rare_word_threshold=0)
        assert first == second
        assert all(first.word_id(first.word(i)) == i for i in range(first.num_words))

    def test_digits_are_normalized_before_lookup(self):
        vocab = build_vocab([Sentence(tokens=["1984", "x"], tags=["CD", "NN"])], rare_word_threshold=0)
        sentence = bind_sentence(Sentence(tokens=["2001"], tags=["CD"]), vocab)
        assert sentence.word_ids.tolist() == [vocab.word_id("0000")]

    def test_empty_corpus_and_unknown_tags(self):
        with pytest.raises(DataError):
            build_vocab([])
        vocab = build_vocab([Sentence(tokens=["a"], tags=["O"])], rare_word_threshold=0)
        with pytest.raises(DataError):
            bind_sentence(Sentence(tokens=["a"], tags=["B-PER"]), vocab)

    def test_pretrained_embeddings(self, tmp_path):
        vocab = build_vocab([Sentence(tokens=["Paris", "is", "big"], tags=["S-LOC", "O", "O"])],
                            rare_word_threshold=0)
        path = write_lines(tmp_path / "emb.txt", ["paris 1 2 3", "is 4 5 6", "unrelated 7 8 9"])
        table, coverage = load_pretrained_embeddings(path, vocab, 3, RngState(0))
        assert table.shape == (vocab.num_words, 3)
        assert_array_equal(table[vocab.word_id("Paris")], [1, 2, 3])
        assert_array_equal(table[vocab.word_id("is")], [4, 5, 6])
        assert coverage == 2 / vocab.num_words
        with pytest.raises(DataError):
            load_pretrained_embeddings(path, vocab, 4, RngState(0))

    def test_exact_embedding_match_wins_over_case_folding(self, tmp_path):
        vocab = build_vocab([Sentence(tokens=["The", "the", "dog"], tags=["O", "O", "O"])], rare_word_threshold=0)
        path = write_lines(tmp_path / "emb.txt", ["The 1 1", "the 2 2", "DOG 3 3"])
        table, coverage = load_pretrained_embeddings(path, vocab, 2, RngState(0))
        assert_array_equal(table[vocab.word_id("The")], [1, 1])
        assert_array_equal(table[vocab.word_id("the")], [2, 2])
        assert_array_equal(table[vocab.word_id("dog")], [3, 3])
        assert coverage == 3 / vocab.num_words


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------

class TestEncoders:
    def _params(self, seed=0, num_words=6, num_chars=7, num_labels=3, config=SMALL):
        params = ParamStore()
        init_transcription_params(params, config, num_words, num_chars, num_labels, RngState(seed))
        init_prediction_params(params, config, num_labels, RngState(seed).derive(1))
        return params

    def test_default_token_width(self):
        assert EncoderConfig().token_dim == 130

    def test_char_cnn(self):
        params = self._params()
        pooled, _ = char_cnn_encode(np.array([3]), params, SMALL)
        assert pooled.shape == (SMALL.char_filters,)
        forward, _ = char_cnn_encode(np.array([1, 2, 3]), params, SMALL)
        backward, _ = char_cnn_encode(np.array([3, 2, 1]), params, SMALL)
        assert np.abs(forward - backward).max() > 1e-9
        with pytest.raises(ValueError):
            char_cnn_encode(np.array([], dtype=np.int64), params, SMALL)
        with pytest.raises(ValueError):
            char_cnn_encode(np.array([99]), params, SMALL)

        params.set_value("cnn.W", np.zeros_like(params.value("cnn.W")))
        params.set_value("cnn.b", np.zeros_like(params.value("cnn.b")))
        pooled, _ = char_cnn_encode(np.array([1, 2]), params, SMALL)
        assert_array_equal(pooled, np.zeros(SMALL.char_filters))

    def test_embed_tokens(self):
        params = self._params()
        word_ids = np.array([2, 4, 2])
        char_ids = [np.array([1, 2]), np.array([3]), np.array([1, 2])]
        embedded, _ = embed_tokens(word_ids, char_ids, params, SMALL)
        assert embedded.shape == (3, SMALL.token_dim)
        assert_array_equal(embedded[0], embedded[2])
        with pytest.raises(ValueError):
            embed_tokens(np.array([6]), [np.array([1])], params, SMALL)

        embedded, _ = embed_tokens(word_ids, char_ids, zero_params(params), SMALL)
        assert_array_equal(embedded, np.zeros((3, SMALL.token_dim)))

    def test_transcription_shapes_and_zero_parameters(self):
        params = self._params()
        embedded = RngState(1).normal(size=(4, SMALL.token_dim))
        f, cache = transcription_forward(embedded, params, SMALL)
        assert f.shape == (4, 3)
        assert cache.hidden.shape == (4, 2 * SMALL.f_hidden)
        f, _ = transcription_forward(embedded, zero_params(params), SMALL)
        assert_array_equal(f, np.zeros((4, 3)))

    def test_transcription_reversal_symmetry(self):
        params = self._params(seed=4)
        swapped = ParamStore()
        for name in params.names():
            swapped.add(name, params.value(name))
        for suffix in ("W", "b"):
            swapped.set_value(f"F.0.fwd.{suffix}", params.value(f"F.0.bwd.{suffix}"))
            swapped.set_value(f"F.0.bwd.{suffix}", params.value(f"F.0.fwd.{suffix}"))
        hidden = SMALL.f_hidden
        out = params.value("F.out.W")
        swapped.set_value("F.out.W", np.concatenate([out[:, hidden:], out[:, :hidden]], axis=1))

        embedded = RngState(2).normal(size=(5, SMALL.token_dim))
        f, _ = transcription_forward(embedded, params, SMALL)
        f_reversed, _ = transcription_forward(embedded[::-1].copy(), swapped, SMALL)
        assert_allclose(f_reversed, f[::-1], atol=1e-12)

    def test_prediction_network_is_causal(self):
        params = g_params(3, seed=0)
        g, _ = prediction_forward(np.array([[3, 0, 1, 2], [3, 0, 1, 0]]), params, bos_id=3)
        assert g.shape == (2, 4, 3)
        assert_array_equal(g[0, :3], g[1, :3])
        assert np.abs(g[0, 3] - g[1, 3]).max() > 0

        single, _ = prediction_forward(np.array([3]), params, bos_id=3)
        assert single.shape == (1, 3)

    def test_incremental_prediction_matches_whole_sequence(self):
        params = g_params(3, seed=1)
        prefix = np.array([3, 2, 0, 0, 1])
        g, _ = prediction_forward(prefix, params, bos_id=3)
        state = initial_gstate(params)
        for i, label in enumerate(prefix):
            state, rows = prediction_step(params, state, np.array([label]))
            assert_allclose(rows[0], g[i], atol=1e-12)

    def test_prediction_needs_bos(self):
        params = g_params(3, seed=0)
        with pytest.raises(ValueError):
            prediction_forward(np.array([0, 1]), params, bos_id=3)
        with pytest.raises(ValueError):
            prediction_forward(np.array([3, 3]), params, bos_id=3)

    def test_score_sequences(self):
        model, sentence = tiny_model(ModelKind.RNNT, seed=2, length=4, num_labels=3)
        scores = model.score_sequences(sentence)
        assert scores.f.shape == scores.g.shape == (4, 3)
        assert scores.g_states.shape == (4, model.encoder.g_hidden)
        model, sentence = tiny_model(ModelKind.LINEAR_CHAIN, seed=2, length=4, num_labels=3)
        assert model.score_sequences(sentence).g is None


# ---------------------------------------------------------------------------
# Linear-chain CRF
# ---------------------------------------------------------------------------

class TestLinearChain:
    def _oracle(self, f, table):
        return brute_force_oracle(lambda seqs: [lc_sequence_score(f, table, s) for s in seqs], f.shape[0], f.shape[1])

    def test_uniform_potentials(self):
        table = TransitionTable.zeros(2)
        assert_allclose(lc_log_z(np.zeros((3, 2)), table), 3 * math.log(2), rtol=1e-12)
        loss, _ = lc_nll_and_grad(np.zeros((4, 3)), TransitionTable.zeros(3), [0, 1, 2, 0])
        assert_allclose(loss, 4 * math.log(3), rtol=1e-12)

    def test_single_position(self):
        rng = RngState(3)
        f = rng.normal(size=(1, 4))
        table = random_table(rng, 4)
        assert_allclose(lc_log_z(f, table), log_sum_exp(f[0] + table.begin + table.end), rtol=1e-12)
        labels, _ = lc_viterbi(f, table)
        assert labels == [int(np.argmax(f[0] + table.begin + table.end))]

    def test_saturated_gold(self):
        gold = [0, 2, 1, 1]
        f = np.full((4, 3), -50.0)
        f[np.arange(4), gold] = 50.0
        loss, _ = lc_nll_and_grad(f, TransitionTable.zeros(3), gold)
        assert loss < 1e-6

    def test_gradient_matches_finite_differences(self):
        rng = RngState(8)
        f = rng.normal(size=(4, 3))
        table = random_table(rng, 3)
        gold = [2, 0, 0, 1]
        _, grads = lc_nll_and_grad(f, table, gold)

        def loss():
            return lc_nll_and_grad(f, table, gold)[0]

        for analytic, array in ((grads.df, f), (grads.dA, table.A), (grads.dbegin, table.begin),
                                (grads.dend, table.end)):
            assert_allclose(analytic, numeric_gradient(loss, array), atol=1e-6)

    def test_marginals_are_distributions(self):
        rng = RngState(9)
        node, pair, _ = lc_marginals(rng.normal(size=(5, 3)), random_table(rng, 3))
        assert_allclose(node.sum(axis=1), 1.0, atol=1e-12)
        assert_allclose(pair.sum(axis=(1, 2)), 1.0, atol=1e-12)
        assert_allclose(pair.sum(axis=2), node[:-1], atol=1e-12)

    def test_viterbi_without_transitions_is_rowwise_argmax(self):
        f = RngState(4).normal(size=(6, 4))
        labels, score = lc_viterbi(f, TransitionTable.zeros(4))
        assert labels == f.argmax(axis=1).tolist()
        assert_allclose(score, f.max(axis=1).sum(), rtol=1e-12)

    def test_viterbi_ties_prefer_smallest_sequence(self):
        labels, score = lc_viterbi(np.zeros((4, 3)), TransitionTable.zeros(3))
        assert labels == [0, 0, 0, 0]
        assert score == 0.0

    def test_oracle_equivalence(self):
        rng = RngState(21)
        for _ in range(50):
            n, K = int(rng.integers(1, 7)), int(rng.integers(2, 5))
            f = rng.normal(1.5, size=(n, K))
            table = random_table(rng, K)
            oracle = self._oracle(f, table)
            assert_allclose(lc_log_z(f, table), oracle.log_z, rtol=1e-9)
            labels, score = lc_viterbi(f, table)
            assert labels == oracle.best
            assert_allclose(score, lc_sequence_score(f, table, labels), rtol=1e-12)

    def test_constrained_viterbi_obeys_bioes(self):
        labels = ["O", "B-X", "I-X", "E-X", "S-X"]
        constraints = bioes_constraints(labels)
        f = RngState(6).normal(size=(5, 5))
        f[0, 2] = 20.0
        f[4, 1] = 20.0
        path, _ = lc_viterbi(f, TransitionTable.zeros(5), constraints)
        assert constraints.start[path[0]] and constraints.end[path[-1]]
        assert all(constraints.allowed[a, b] for a, b in zip(path, path[1:]))
        unconstrained, _ = lc_viterbi(f, TransitionTable.zeros(5))
        assert unconstrained[0] == 2

    def test_constrained_viterbi_keeps_legal_bio_paths(self):
        labels = ["O", "B-X", "I-X"]
        constraints = label_constraints(labels)
        table = TransitionTable.zeros(3)
        path, _ = lc_viterbi(np.array([[0.0, 5.0, 0.0], [5.0, 0.0, 0.0]]), table, constraints)
        assert list(path) == [1, 0]
        path, _ = lc_viterbi(np.array([[0.0, 5.0, 0.0], [0.0, 0.0, 5.0]]), table, constraints)
        assert list(path) == [1, 2]
        path, _ = lc_viterbi(np.array([[0.0, 1.0, 9.0], [5.0, 0.0, 0.0]]), table, constraints)
        assert list(path) == [1, 0]
        assert not constraints.allowed[0, 2] and constraints.end.all()

    def test_label_constraints_follow_the_inventory(self):
        bioes = ["O", "B-X", "I-X", "E-X", "S-X"]
        for field in ("allowed", "start", "end"):
            assert_array_equal(getattr(label_constraints(bioes), field),
                               getattr(bioes_constraints(bioes), field))
        bio = label_constraints(["O", "B-X", "I-X", "B-Y", "I-Y"])
        assert bio.allowed[1, 2] and bio.allowed[2, 2] and not bio.allowed[1, 4]
        assert bio.allowed[1, 0] and bio.end[1] and bio.end[2]


# ---------------------------------------------------------------------------
# RNN and NCRF transducers
# ---------------------------------------------------------------------------

class TestTransducers:
    def test_rnnt_step_log_probs(self):
        assert_allclose(rnnt_step_log_probs(np.array([1.0, 2.0, 3.0]), np.array([2.0, 1.0, 0.0])),
                        np.full(3, -math.log(3)), atol=1e-12)
        assert_allclose(rnnt_step_log_probs(np.array([0.4]), np.array([-2.0])), [0.0], atol=1e-15)
        assert_allclose(rnnt_step_log_probs(np.array([1.0, 0.0]), np.array([0.0, 1.0])),
                        np.full(2, math.log(0.5)), atol=1e-12)
        rng = RngState(2)
        probs = np.exp(rnnt_step_log_probs(rng.normal(size=(7, 5)), rng.normal(size=(7, 5))))
        assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_rnnt_zero_networks(self):
        params = zero_params(g_params(3, seed=0))
        loss, _, _ = rnnt_nll(np.zeros((4, 3)), [0, 2, 1, 1], params, 3)
        assert_allclose(loss, 4 * math.log(3), rtol=1e-12)

    def test_rnnt_loss_is_non_negative(self):
        rng = RngState(4)
        for seed in range(10):
            loss, _, _ = rnnt_nll(rng.normal(size=(3, 3)), rng.integers(0, 3, size=3), g_params(3, seed), 3)
            assert loss >= 0.0

    def test_rnnt_width_one_beam_is_greedy(self):
        params = g_params(4, seed=6)
        f = RngState(6).normal(size=(5, 4))
        greedy, total = rnnt_greedy_decode(f, params, 4)
        beamed, score = rnnt_beam_decode(f, params, 4, width=1)
        assert greedy == beamed
        assert_allclose(score, total, rtol=1e-12)

    def test_potential_designs(self):
        phi, psi = ncrft_potentials(np.array([0.3, 0.7]), np.array([1.0, -1.0]), PotentialDesign.ADDITIVE)
        assert_array_equal(phi, [0.3, 0.7])
        assert_array_equal(psi, [1.0, -1.0])
        phi, _ = ncrft_potentials(np.zeros(2), np.zeros(2), PotentialDesign.LOGSOFTMAX)
        assert_allclose(phi, np.full(2, -math.log(2)), atol=1e-12)
        rng = RngState(3)
        phi, psi = ncrft_potentials(rng.normal(size=(6, 4)), rng.normal(size=(6, 4)), PotentialDesign.LOGSOFTMAX)
        assert_allclose(np.exp(phi).sum(axis=1), 1.0, atol=1e-12)
        assert_allclose(np.exp(psi).sum(axis=1), 1.0, atol=1e-12)

    def test_zero_networks_give_uniform_distribution(self):
        params = zero_params(g_params(3, seed=0))
        f = np.zeros((4, 3))
        assert ncrft_sequence_potential(f, [2, 1, 0, 0], params, PotentialDesign.ADDITIVE, 3) == 0.0
        oracle = brute_force_oracle(ncrft_scorer(f, params, PotentialDesign.ADDITIVE, 3), 4, 3)
        assert_allclose(oracle.log_z, 4 * math.log(3), rtol=1e-12)
        assert_allclose(oracle.log_probs, np.full(81, -4 * math.log(3)), atol=1e-12)

    def test_potential_is_additive_over_positions(self):
        params = g_params(3, seed=5)
        f = RngState(5).normal(size=(5, 3))
        labels = np.array([1, 0, 2, 2, 1])
        for design in PotentialDesign:
            full = ncrft_sequence_potential(f, labels, params, design, 3)
            head, _ = prefix_scores(f, labels[None, :4], params, design, 3)
            g, _ = prediction_forward(np.concatenate([[3], labels[:4]]), params, 3)
            phi, psi = ncrft_potentials(f[4], g[4], design)
            assert_allclose(full, head[0] + phi[labels[4]] + psi[labels[4]], atol=1e-9)

    def test_exact_distribution_sums_to_one(self):
        params = g_params(3, seed=7)
        f = RngState(7).normal(size=(4, 3))
        for design in PotentialDesign:
            oracle = brute_force_oracle(ncrft_scorer(f, params, design, 3), 4, 3)
            assert_allclose(np.exp(oracle.log_probs).sum(), 1.0, atol=1e-9)

    def test_node_shift_invariance(self):
        params = g_params(3, seed=8)
        rng = RngState(8)
        f = rng.normal(size=(4, 3))
        shifted = f + rng.normal(5.0, size=(4, 1))
        base = brute_force_oracle(ncrft_scorer(f, params, PotentialDesign.ADDITIVE, 3), 4, 3)
        moved = brute_force_oracle(ncrft_scorer(shifted, params, PotentialDesign.ADDITIVE, 3), 4, 3)
        assert_allclose(moved.log_probs, base.log_probs, atol=1e-9)
        softmaxed = brute_force_oracle(ncrft_scorer(f, params, PotentialDesign.LOGSOFTMAX, 3), 4, 3)
        assert np.abs(softmaxed.log_probs - base.log_probs).max() > 1e-6

    def test_enumeration_cap(self):
        assert enumerate_sequences(2, 3).tolist() == [list(p) for p in itertools.product(range(3), repeat=2)]
        with pytest.raises(ValueError):
            enumerate_sequences(10, 4, cap=1000)

    def test_oracle_equivalence_for_normalizer(self):
        rng = RngState(31)
        for trial in range(50):
            n, K = int(rng.integers(1, 7)), int(rng.integers(2, 5))
            params = g_params(K, seed=100 + trial)
            f = rng.normal(1.5, size=(n, K))
            gold = rng.integers(0, K, size=n)
            for design in PotentialDesign:
                oracle = brute_force_oracle(ncrft_scorer(f, params, design, K), n, K)
                independent = stepwise_scores(f, params, design, oracle.sequences)
                assert_allclose(oracle.log_z, log_sum_exp(independent), rtol=1e-9)
                loss, _, _ = ncrft_exact_nll(f, gold, params, design, K)
                assert_allclose(loss, -oracle.log_prob(gold), rtol=1e-9, atol=1e-12)


# ---------------------------------------------------------------------------
# Beam search and early update
# ---------------------------------------------------------------------------

class TestBeamAndEarlyUpdate:
    def test_exhaustive_beam_matches_oracle(self):
        rng = RngState(41)
        for trial in range(50):
            n, K = int(rng.integers(1, 7)), int(rng.integers(2, 5))
            params = g_params(K, seed=200 + trial)
            f = rng.normal(1.5, size=(n, K))
            for design in PotentialDesign:
                oracle = brute_force_oracle(ncrft_scorer(f, params, design, K), n, K)
                labels, score = beam_search_decode(f, params, design, K, width=K ** n)
                assert labels == oracle.best
                assert_allclose(score, oracle.best_score, rtol=1e-9, atol=1e-12)

    def test_ties_prefer_smallest_sequence(self):
        params = zero_params(g_params(3, seed=0))
        for width in (1, 2, 27):
            labels, _ = beam_search_decode(np.zeros((3, 3)), params, PotentialDesign.ADDITIVE, 3, width)
            assert labels == [0, 0, 0]

    def test_width_one_is_greedy(self):
        params = g_params(3, seed=12)
        f = RngState(12).normal(size=(5, 3))
        labels, _ = beam_search_decode(f, params, PotentialDesign.ADDITIVE, 3, width=1)
        state, rows = prediction_step(params, initial_gstate(params), np.array([3]))
        expected = []
        for i in range(5):
            best = int(np.argmax(f[i] + rows[0]))
            expected.append(best)
            state, rows = prediction_step(params, state, np.array([best]))
        assert labels == expected

    def test_beam_scores_recompute_from_scratch(self):
        params = g_params(3, seed=13)
        f = RngState(13).normal(size=(5, 3))
        for design in PotentialDesign:
            oracle = brute_force_oracle(ncrft_scorer(f, params, design, 3), 5, 3)
            beam = beam_search(f, params, 3, 4, ncrft_row_scorer(f, design))
            assert len(beam) == 4
            assert np.all(np.diff(beam.scores) <= 0)
            for entry in beam.entries():
                assert_allclose(entry.score, ncrft_sequence_potential(f, entry.prefix, params, design, 3), atol=1e-9)
            assert beam.best()[1] <= oracle.best_score + 1e-9

    def test_constrained_beam_obeys_bioes(self):
        labels = ["O", "B-X", "I-X", "E-X", "S-X"]
        constraints = bioes_constraints(labels)
        params = g_params(5, seed=14)
        f = RngState(14).normal(size=(4, 5))
        f[0, 2] = 20.0
        path, _ = beam_search_decode(f, params, PotentialDesign.ADDITIVE, 5, 8, constraints)
        assert constraints.start[path[0]] and constraints.end[path[-1]]
        assert all(constraints.allowed[a, b] for a, b in zip(path, path[1:]))
        unconstrained, _ = beam_search_decode(f, params, PotentialDesign.ADDITIVE, 5, 8)
        assert unconstrained[0] == 2

    def test_exhaustive_early_update_equals_exact_nll(self):
        rng = RngState(51)
        for trial in range(20):
            n, K = int(rng.integers(1, 5)), int(rng.integers(2, 4))
            params = g_params(K, seed=300 + trial)
            f = rng.normal(size=(n, K))
            gold = rng.integers(0, K, size=n)
            for design in PotentialDesign:
                result = early_update_loss(f, gold, params, design, K, width=K ** n)
                exact, _, _ = ncrft_exact_nll(f, gold, params, design, K)
                assert result.fell_out_at is None
                assert result.set_size == K ** n
                assert_allclose(result.loss, exact, rtol=1e-9, atol=1e-12)

    def test_early_update_loss_is_non_negative(self):
        rng = RngState(52)
        for trial in range(200):
            n, K = int(rng.integers(1, 5)), int(rng.integers(2, 4))
            params = g_params(K, seed=trial)
            design = PotentialDesign.ADDITIVE if trial % 2 else PotentialDesign.LOGSOFTMAX
            result = early_update_loss(rng.normal(2.0, size=(n, K)), rng.integers(0, K, size=n), params, design,
                                       K, width=int(rng.integers(1, 4)))
            assert result.loss >= 0.0

    def test_saturated_gold_survives(self):
        gold = np.array([2, 0, 1, 1])
        f = np.full((4, 3), -50.0)
        f[np.arange(4), gold] = 50.0
        result = early_update_loss(f, gold, g_params(3, seed=1), PotentialDesign.ADDITIVE, 3, width=2)
        assert result.fell_out_at is None
        assert result.loss < 1e-6

    def test_gold_falling_out_stops_the_search(self):
        f = np.zeros((3, 3))
        f[:, 0] = 10.0
        result = early_update_loss(f, [1, 1, 1], zero_params(g_params(3, seed=1)), PotentialDesign.ADDITIVE, 3,
                                   width=1)
        assert result.fell_out_at == 1
        assert result.set_size == 2
        assert_allclose(result.loss, math.log(1 + math.exp(10.0)), rtol=1e-12)
        assert np.all(result.df[1:] == 0.0)

    def test_gradients_of_every_objective(self):
        for seed in range(3):
            errors = check_objectives(seed)
            assert set(errors) == {"linear-chain", "rnnt", "ncrft-exact/additive", "ncrft-exact/logsoftmax",
                                   "early-update/additive", "early-update/logsoftmax"}
            for objective, error in errors.items():
                assert error < GRADIENT_TOLERANCE, f"{objective} seed {seed}: {error}"

    @pytest.mark.skipif(not RUN_SLOW, reason="set RUN_SLOW=1")
    def test_gradients_over_twenty_seeds(self):
        for seed in range(20):
            for objective, error in check_objectives(seed, length=4, num_labels=3).items():
                assert error < GRADIENT_TOLERANCE, f"{objective} seed {seed}: {error}"


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

class TestData:
    def test_read_two_token_sentence(self, tmp_path):
        corpus = read_conll(write_lines(tmp_path / "a.txt", ["dog NN", "ran VBD", ""]))
        assert len(corpus) == 1
        assert corpus.sentences[0].tokens == ["dog", "ran"]
        assert corpus.sentences[0].tags == ["NN", "VBD"]
        assert corpus.scheme == TagScheme.RAW

    def test_docstart_and_crlf(self, tmp_path):
        path = tmp_path / "b.txt"
        path.write_bytes(b"-DOCSTART- -X- O\r\n\r\nParis NNP S-LOC\r\nrocks VBZ O\r\n\r\nYes UH O\r\n")
        corpus = read_conll(str(path))
        assert [s.tokens for s in corpus] == [["Paris", "rocks"], ["Yes"]]
        assert corpus.scheme == TagScheme.BIOES
        tagged = read_conll(str(path), token_column=0, tag_column=1)
        assert tagged.sentences[0].tags == ["NNP", "VBZ"]

    def test_bad_files(self, tmp_path):
        with pytest.raises(DataError):
            read_conll(write_lines(tmp_path / "blank.txt", ["", "", ""]))
        with pytest.raises(DataError, match=":3:"):
            read_conll(write_lines(tmp_path / "ragged.txt", ["a B", "b C", "c"]))
        with pytest.raises(DataError):
            read_conll(str(tmp_path / "missing.txt"))

    def test_write_read_round_trip(self, tmp_path):
        sentences = [Sentence(tokens=["New", "York"], tags=["B-LOC", "E-LOC"]), Sentence(tokens=["x"], tags=["O"])]
        path = str(tmp_path / "out.txt")
        write_conll(sentences, path)
        corpus = read_conll(path)
        assert [s.tokens for s in corpus] == [["New", "York"], ["x"]]
        assert [s.tags for s in corpus] == [["B-LOC", "E-LOC"], ["O"]]

    def test_preprocess(self):
        assert preprocess("1984") == "0000"
        assert preprocess("B-52s") == "B-00s"
        assert preprocess("dog") == "dog"
        assert preprocess(preprocess("a1b2")) == preprocess("a1b2")

    def test_bio_to_bioes(self):
        assert bio_to_bioes(["B-PER", "I-PER", "O"]) == ["B-PER", "E-PER", "O"]
        assert bio_to_bioes(["B-LOC"]) == ["S-LOC"]
        assert bio_to_bioes(["B-ORG", "I-ORG", "I-ORG", "O", "B-ORG"]) == ["B-ORG", "I-ORG", "E-ORG", "O", "S-ORG"]
        assert bio_to_bioes(["O", "I-PER", "I-PER"]) == ["O", "B-PER", "E-PER"]
        with pytest.raises(DataError):
            bio_to_bioes(["X-PER"])
        with pytest.raises(DataError):
            bio_to_bioes(["S-PER"])

    def test_scheme_round_trip_and_spans(self):
        bio = ["B-PER", "I-PER", "O", "B-LOC", "B-LOC", "I-LOC", "O", "B-MISC"]
        bioes = bio_to_bioes(bio)
        assert bioes_to_bio(bioes) == bio
        assert extract_entities(bioes) == bio_spans(bio)

    def test_convert_scheme(self, tmp_path):
        corpus = read_conll(write_lines(tmp_path / "bio.txt", ["a B-PER", "b I-PER", "c O", ""]))
        assert corpus.scheme == TagScheme.BIO
        converted = convert_scheme(corpus, TagScheme.BIOES)
        assert converted.scheme == TagScheme.BIOES
        assert converted.sentences[0].tags == ["B-PER", "E-PER", "O"]
        assert detect_scheme(["O", "NN"]) == TagScheme.RAW

    def test_batch_iter(self):
        sentences = [Sentence(tokens=[f"w{i}"]) for i in range(33)]
        assert [len(b) for b in batch_iter(sentences, 16)] == [16, 16, 1]
        assert [s for b in batch_iter(sentences, 16) for s in b] == sentences
        first = [[s.tokens[0] for s in b] for b in batch_iter(sentences, 16, RngState(4), shuffle=True)]
        second = [[s.tokens[0] for s in b] for b in batch_iter(sentences, 16, RngState(4), shuffle=True)]
        assert first == second
        assert sorted(t for b in first for t in b) == sorted(s.tokens[0] for s in sentences)
        with pytest.raises(ValueError):
            list(batch_iter(sentences, 0))

    def test_split_dev(self, tmp_path):
        corpus = read_conll(write_toy_corpus(tmp_path / "toy.txt"))
        train, dev = split_dev(corpus, 3, RngState(1))
        assert len(train) == 7 and len(dev) == 3
        again_train, again_dev = split_dev(corpus, 3, RngState(1))
        assert [s.tokens for s in dev] == [s.tokens for s in again_dev]
        with pytest.raises(DataError):
            split_dev(corpus, 10, RngState(1))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

# (gold BIOES, predicted BIOES, gold span count, predicted span count, correct)
GOLDEN = [
    ("S-PER", "S-PER", 1, 1, 1),
    ("B-PER E-PER O S-LOC", "B-PER E-PER O S-LOC", 2, 2, 2),
    ("B-ORG I-ORG E-ORG", "B-ORG I-ORG E-ORG", 1, 1, 1),
    ("S-PER S-PER", "B-PER E-PER", 2, 1, 0),
    ("B-LOC E-LOC B-LOC E-LOC", "B-LOC E-LOC B-LOC E-LOC", 2, 2, 2),
    ("O O O", "O O O", 0, 0, 0),
    ("O S-MISC", "O O", 1, 0, 0),
    ("O O", "S-MISC O", 0, 1, 0),
    ("B-PER E-PER", "B-PER E-LOC", 1, 0, 0),
    ("B-PER I-PER E-PER", "B-PER O E-PER", 1, 0, 0),
    ("S-ORG O", "I-ORG O", 1, 0, 0),
    ("B-LOC E-LOC", "B-LOC B-LOC", 1, 0, 0),
    ("S-PER O S-LOC", "S-PER O S-ORG", 2, 2, 1),
    ("B-MISC E-MISC S-MISC", "B-MISC E-MISC S-MISC", 2, 2, 2),
    ("O B-ORG E-ORG", "O S-ORG S-ORG", 1, 2, 0),
    ("B-PER I-PER I-PER E-PER", "B-PER I-PER I-PER E-PER", 1, 1, 1),
    ("S-LOC", "E-LOC", 1, 0, 0),
    ("B-ORG E-ORG O", "B-ORG I-ORG E-ORG", 1, 1, 0),
    ("O O S-PER", "O O S-PER", 1, 1, 1),
    ("B-LOC I-LOC E-LOC S-ORG", "B-LOC E-LOC B-ORG E-ORG", 2, 2, 0),
]


class TestEvaluation:
    def test_token_accuracy(self):
        assert token_accuracy(["A", "B"], ["A", "B"]) == 1.0
        assert token_accuracy(["A", "B"], ["C", "D"]) == 0.0
        assert token_accuracy(["A", "B", "C", "D"], ["A", "B", "C", "X"]) == 0.75
        with pytest.raises(ValueError):
            token_accuracy(["A"], ["A", "B"])

    def test_extract_entities(self):
        assert extract_entities(["B-PER", "E-PER", "O", "S-LOC"]) == {EntitySpan(0, 1, "PER"), EntitySpan(3, 3, "LOC")}
        assert extract_entities(["O", "O"]) == set()
        assert extract_entities(["B-PER", "E-LOC"]) == set()
        assert extract_entities(["B-PER", "B-PER", "E-PER"]) == {EntitySpan(1, 2, "PER")}
        with pytest.raises(DataError):
            extract_entities(["Q-PER"])

    def test_spans_are_disjoint_and_sortable(self):
        spans = sorted(extract_entities("S-A B-B E-B O B-A I-A E-A S-B".split()))
        assert [(s.start, s.end) for s in spans] == [(0, 0), (1, 2), (4, 6), (7, 7)]
        assert all(a.end < b.start for a, b in zip(spans, spans[1:]))

    def test_micro_f1_examples(self):
        gold = [{EntitySpan(0, 1, "PER"), EntitySpan(3, 3, "LOC")}]
        assert micro_f1(gold, gold) == (1.0, 1.0, 1.0)
        half = [{EntitySpan(0, 1, "PER"), EntitySpan(2, 3, "LOC")}]
        assert micro_f1(gold, half) == (0.5, 0.5, 0.5)
        assert micro_f1([set()], [set()]) == (1.0, 1.0, 1.0)
        assert micro_f1([set()], [{EntitySpan(0, 0, "X")}]) == (0.0, 0.0, 0.0)

    def test_f1_harmonic_bound(self):
        rng = RngState(61)
        pool = [EntitySpan(i, i + int(rng.integers(0, 2)), t) for i in range(6) for t in ("A", "B")]
        for _ in range(100):
            gold = [{pool[k] for k in rng.integers(0, len(pool), size=int(rng.integers(1, 6)))}]
            pred = [{pool[k] for k in rng.integers(0, len(pool), size=int(rng.integers(1, 6)))}]
            precision, recall, f1 = micro_f1(gold, pred)
            low = min(precision, recall)
            assert f1 <= 2 * low / (1 + low) + 1e-12

    def test_golden_file(self, tmp_path):
        lines = []
        for index, (gold, pred, _, _, _) in enumerate(GOLDEN):
            lines.extend(f"w{index}_{k} {g} {p}" for k, (g, p) in enumerate(zip(gold.split(), pred.split())))
            lines.append("")
        path = write_lines(tmp_path / "golden.txt", lines)
        gold_corpus = read_conll(path, tag_column=1)
        pred_corpus = read_conll(path, tag_column=2)
        assert len(gold_corpus) == 20

        gold_spans = [extract_entities(s.tags) for s in gold_corpus]
        pred_spans = [extract_entities(s.tags) for s in pred_corpus]
        assert [len(s) for s in gold_spans] == [row[2] for row in GOLDEN]
        assert [len(s) for s in pred_spans] == [row[3] for row in GOLDEN]
        assert [len(g & p) for g, p in zip(gold_spans, pred_spans)] == [row[4] for row in GOLDEN]

        precision, recall, f1 = micro_f1(gold_spans, pred_spans)
        assert_allclose((precision, recall, f1), (11 / 19, 11 / 24, 22 / 43), rtol=1e-12)

        for sentence in gold_corpus:
            bio = bioes_to_bio(sentence.tags)
            assert bio_to_bioes(bio) == sentence.tags
            assert bio_spans(bio) == extract_entities(sentence.tags)

        report = evaluate_tags([s.tags for s in gold_corpus], [s.tags for s in pred_corpus], TaskType.F1,
                               scheme=TagScheme.BIOES)
        assert_allclose(report.primary, 22 / 43, rtol=1e-12)
        assert report.metrics["sentences"] == 20.0
        assert set(report.per_type["type"]) == {"PER", "LOC", "ORG", "MISC"}

    def test_report_records(self):
        report = EvaluationReport(task=TaskType.ACCURACY, metrics={"accuracy": 0.5, "tokens": 4.0})
        assert report.to_records() == "accuracy\t0.5\ntokens\t4.0\n"
        assert "accuracy" in report.to_text()

    def test_summarize_runs(self):
        reports = [EvaluationReport(task=TaskType.F1, metrics={"f1": value, "accuracy": 0.9})
                   for value in (0.90, 0.92, 0.91, 0.93, 0.94)]
        summary = summarize_runs(reports)
        assert_allclose(summary.loc["f1", "mean"], 0.92, rtol=1e-12)
        assert_allclose(summary.loc["f1", "std"], math.sqrt(1e-3 / 4), rtol=1e-9)
        assert_allclose(summary.loc["f1", "max"], 0.94)
        assert summary.loc["accuracy", "std"] < 1e-12
        assert summary.loc["f1", "runs"] == 5
        assert "f1" in format_summary(summary)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

class TestCheckpoints:
    def test_round_trip_is_byte_identical(self):
        for kind in ModelKind:
            model, _ = tiny_model(kind, seed=4)
            data = ModelCheckpoint.from_model(model).to_bytes()
            assert data.startswith(MAGIC)
            restored = ModelCheckpoint.from_bytes(data)
            assert restored.to_bytes() == data
            assert ModelCheckpoint.from_model(restored.to_model()).to_bytes() == data

    def test_saved_model_evaluates_like_in_memory_model(self, tmp_path):
        model, sentence = tiny_model(ModelKind.NCRFT, seed=5, length=4, num_labels=3,
                                     design=PotentialDesign.LOGSOFTMAX)
        checkpoint = ModelCheckpoint.from_bytes(ModelCheckpoint.from_model(model).to_bytes())
        in_memory = checkpoint.to_model()
        path = str(tmp_path / "model.ckpt")
        checkpoint.save(path)
        loaded, _ = load_model(path)
        assert loaded.design == PotentialDesign.LOGSOFTMAX
        assert loaded.decode(sentence, beam_width=4) == in_memory.decode(sentence, beam_width=4)
        assert loaded.sequence_nll(sentence) == in_memory.sequence_nll(sentence)

    def test_corrupt_checkpoints(self, tmp_path):
        model, _ = tiny_model(ModelKind.RNNT, seed=1)
        data = ModelCheckpoint.from_model(model).to_bytes()
        with pytest.raises(DataError, match="magic"):
            ModelCheckpoint.from_bytes(b"XXXXXX" + data[6:])
        with pytest.raises(DataError, match="truncated"):
            ModelCheckpoint.from_bytes(data[:-3])
        with pytest.raises(DataError, match="trailing"):
            ModelCheckpoint.from_bytes(data + b"\x00")
        with pytest.raises(DataError):
            ModelCheckpoint.load(str(tmp_path / "missing.ckpt"))

    def test_parameters_must_fit_the_model_kind(self):
        model, _ = tiny_model(ModelKind.LINEAR_CHAIN, seed=2)
        checkpoint = ModelCheckpoint.from_model(model)
        relabelled = ModelCheckpoint(kind=ModelKind.RNNT, design=checkpoint.design, encoder=checkpoint.encoder,
                                     vocab=checkpoint.vocab, arrays=dict(checkpoint.arrays))
        with pytest.raises(DataError, match="do not fit"):
            relabelled.to_model()
        del checkpoint.arrays["crf.end"]
        with pytest.raises(DataError, match="crf.end"):
            checkpoint.to_model()


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

class TestConfiguration:
    def test_file_and_override_precedence(self, tmp_path):
        path = write_lines(tmp_path / "run.config", [
            "# comment", "model_kind = rnnt", "word_dim = 8", "optimizer_learning_rate = 0.5", "",
            "train_path = 'data with space.txt'",
        ])
        config = load_run_config(path, overrides={"word_dim": "12", "seed": None})
        assert config.model_kind == ModelKind.RNNT
        assert config.encoder.word_dim == 12
        assert config.optimizer.learning_rate == 0.5
        assert config.train_path == "data with space.txt"
        assert config.seed == 1

    def test_save_load_is_lossless(self, tmp_path):
        config = load_run_config(preset="english-ner", overrides={"train_path": "a b.txt", "cold_start": True})
        path = str(tmp_path / "saved.config")
        save_run_config(config, path)
        assert load_run_config(path) == config

    def test_presets(self):
        chunking = load_run_config(preset="chunking")
        assert chunking.encoder.f_layers == 2
        assert chunking.dev_size == 1000
        assert chunking.optimizer.kind == OptimizerKind.ADAM
        finetune = load_run_config(preset="finetune")
        assert finetune.optimizer.learning_rate == 5e-3
        assert set(PRESETS) == {"pos", "english-ner", "chunking", "dutch-ner", "finetune"}
        with pytest.raises(ConfigError):
            load_run_config(preset="imaginary")

    def test_invalid_configurations(self, tmp_path):
        with pytest.raises(ConfigError, match="batch_size"):
            load_run_config(overrides={"batch_size": "0"})
        with pytest.raises(ConfigError, match="bogus"):
            load_run_config(overrides={"bogus": "1"})
        with pytest.raises(ConfigError):
            load_run_config(overrides={"task": "f1", "tag_scheme": "raw"})
        with pytest.raises(ConfigError):
            load_run_config(str(tmp_path / "missing.config"))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class TestTraining:
    def test_ncrft_needs_warm_start_or_cold_start(self, tmp_path):
        overrides = toy_overrides(tmp_path, "ncrft")
        overrides["cold_start"] = False
        with pytest.raises(ConfigError):
            TrainingService(load_run_config(overrides=overrides)).validate()

    def test_missing_files_fail_before_training(self, tmp_path):
        overrides = toy_overrides(tmp_path, "rnnt", dev_path=str(tmp_path / "nope.txt"))
        with pytest.raises(DataError):
            run_train(load_run_config(overrides=overrides))

    @pytest.mark.parametrize("kind", ["linear-chain", "rnnt", "ncrft"])
    def test_overfits_toy_corpus(self, tmp_path, kind):
        config = load_run_config(overrides=toy_overrides(tmp_path, kind))
        result = run_train(config)
        losses = [record.train_loss for record in result.history]
        assert losses[4] < losses[0]
        assert result.best_dev_metric >= 0.99

        for suffix in ("", ".config", ".metrics"):
            assert os.path.isfile(config.checkpoint_path + suffix)
        assert load_run_config(config.checkpoint_path + ".config") == config

        output = str(tmp_path / "predicted.txt")
        run_predict(config.checkpoint_path, config.train_path, output)
        rows = [line.split() for line in open(output, encoding="utf-8") if line.strip()]
        assert sum(row[1] == row[2] for row in rows) / len(rows) >= 0.99

    def test_identical_runs_give_identical_checkpoints(self, tmp_path):
        paths = []
        for name, workers in (("a", 1), ("b", 1), ("c", 2)):
            overrides = toy_overrides(tmp_path, "ncrft", epochs=2, dropout=0.5, batch_size=4, workers=workers,
                                      checkpoint_path=str(tmp_path / f"{name}.ckpt"))
            run_train(load_run_config(overrides=overrides))
            paths.append(tmp_path / f"{name}.ckpt")
        data = [path.read_bytes() for path in paths]
        assert data[0] == data[1] == data[2]

    def test_warm_start_copies_rnnt_weights(self, tmp_path):
        rnnt_config = load_run_config(overrides=toy_overrides(tmp_path, "rnnt", epochs=1))
        run_train(rnnt_config)
        ncrft_overrides = toy_overrides(tmp_path, "ncrft", pretrained_rnnt=rnnt_config.checkpoint_path)
        ncrft_overrides["cold_start"] = False
        service = TrainingService(load_run_config(overrides=ncrft_overrides))
        model = service.prepare()
        rnnt, _ = load_model(rnnt_config.checkpoint_path)
        assert model.params.names() == rnnt.params.names()
        for name in model.params.names():
            assert_array_equal(model.params.value(name), rnnt.params.value(name))

    def test_warm_start_rejects_mismatches(self):
        ncrft, _ = tiny_model(ModelKind.NCRFT, seed=1)
        rnnt, _ = tiny_model(ModelKind.RNNT, seed=1)
        assert len(warm_start_from_rnnt(ncrft, rnnt)) == len(ncrft.params)
        other, _ = tiny_model(ModelKind.RNNT, seed=2, num_labels=3)
        with pytest.raises(DataError):
            warm_start_from_rnnt(ncrft, other)
        chain, _ = tiny_model(ModelKind.LINEAR_CHAIN, seed=2)
        with pytest.raises(DataError):
            warm_start_from_rnnt(ncrft, chain)

    def test_runs_are_registered(self, tmp_path):
        config = load_run_config(overrides=toy_overrides(tmp_path, "linear-chain", epochs=2, registry_url="auto"))
        result = run_train(config)
        engine = get_engine(f"sqlite:///{tmp_path / 'runs.db'}")
        with Session(engine) as session:
            run = session.get(TrainingRun, result.run_id)
            assert run.status == RunStatus.FINISHED
            assert run.best_epoch == result.best_epoch
            assert len(run.epochs) == 2
            assert len(session.exec(select(TrainingRun)).all()) == 1

    def test_dev_split_and_test_report(self, tmp_path):
        # Three copies keep every tag in the training part of any two-sentence split
        tripled = write_toy_corpus(tmp_path / "tripled.txt", copies=3)
        overrides = toy_overrides(tmp_path, "linear-chain", epochs=2, train_path=tripled, dev_path="", dev_size=2,
                                  test_path=tripled)
        result = run_train(load_run_config(overrides=overrides))
        assert result.test_report is not None
        assert result.test_report.metrics["sentences"] == 30.0


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

class TestSynthetic:
    def test_parity_sequences(self):
        assert parity_sequence(0, 1, 8) == [0, 1, 1, 0, 1, 1, 0, 1]
        assert parity_sequence(0, 0, 8) == [0] * 8
        assert parity_sequence(1, 0, 1) == [1]

    def test_entropies(self):
        assert_allclose(generator_entropy(SyntheticTask.SECOND_ORDER_PARITY, 10), math.log(4), rtol=1e-12)
        assert_allclose(first_order_bound(SyntheticTask.SECOND_ORDER_PARITY, 10), 10 * math.log(2), rtol=1e-12)
        assert_allclose(generator_entropy(SyntheticTask.FIRST_ORDER_CHAIN, 6), math.log(2), rtol=1e-12)
        assert_allclose(first_order_bound(SyntheticTask.FIRST_ORDER_CHAIN, 6), math.log(2), rtol=1e-12)

    def test_generated_files(self, tmp_path):
        files = run_synthetic(SyntheticTask.SECOND_ORDER_PARITY, 7, str(tmp_path / "a"), train_size=20, dev_size=5,
                              length=6)
        again = run_synthetic(SyntheticTask.SECOND_ORDER_PARITY, 7, str(tmp_path / "b"), train_size=20, dev_size=5,
                              length=6)
        with open(files.train_path, encoding="utf-8") as f:
            assert f.readline().startswith("-DOCSTART- synthetic task=second-order-parity seed=7")
        assert open(files.train_path, "rb").read() == open(again.train_path, "rb").read()
        train = read_conll(files.train_path)
        assert len(train) == 20 and len(read_conll(files.dev_path)) == 5
        for sentence in train:
            labels = [int(tag) for tag in sentence.tags]
            assert labels == parity_sequence(labels[0], labels[1], 6)
            assert set(sentence.tokens) == {"x"}

    @pytest.mark.skipif(not RUN_SLOW, reason="set RUN_SLOW=1")
    def test_parity_experiment(self, tmp_path):
        files = run_synthetic(SyntheticTask.SECOND_ORDER_PARITY, 1, str(tmp_path), train_size=2000, dev_size=500,
                              length=10)
        common = {
            "task": "accuracy", "tag_scheme": "raw", "train_path": files.train_path, "dev_path": files.dev_path,
            "registry_url": "", "rare_word_threshold": 0, "word_dim": 4, "char_dim": 2, "char_filters": 2,
            "f_hidden": 8, "g_hidden": 16, "label_dim": 8, "dropout": 0.0, "batch_size": 16, "epochs": 30,
            "patience": 5, "stop_on": "nll", "train_beam": 16, "decode_beam": 32, "exact_nll_cap": 2 ** 10,
            "optimizer_kind": "adam", "optimizer_learning_rate": 0.01, "optimizer_decay": 0.0,
        }
        ncrft = run_train(load_run_config(overrides={**common, "model_kind": "ncrft", "cold_start": True,
                                                     "checkpoint_path": str(tmp_path / "ncrft.ckpt")}))
        chain = run_train(load_run_config(overrides={**common, "model_kind": "linear-chain",
                                                     "checkpoint_path": str(tmp_path / "chain.ckpt")}))
        assert abs(ncrft.best_dev_nll - math.log(4)) < 0.10
        assert chain.best_dev_nll - ncrft.best_dev_nll >= 0.30


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

class TestCommandLine:
    def test_usage_errors_exit_one(self, capsys):
        assert main([]) == 1
        assert main(["train", "--bogus"]) == 1
        assert main(["train"]) == 1
        assert "Error:" in capsys.readouterr().err

    def test_data_errors_exit_two(self, tmp_path):
        data = write_toy_corpus(tmp_path / "toy.txt")
        assert main(["eval", "--checkpoint", str(tmp_path / "missing.ckpt"), "--data", data]) == 2

    def test_synth(self, tmp_path, capsys):
        assert main(["synth", "--task", "first-order-chain", "--seed", "3", "--train-size", "4", "--dev-size", "2",
                     "--length", "5", "--noise", "0.1", "--out-dir", str(tmp_path)]) == 0
        assert os.path.isfile(tmp_path / "first-order-chain.train.txt")
        assert "entropy" in capsys.readouterr().out
        assert main(["synth", "--noise", "2"]) == 1

    def test_gradcheck(self, capsys):
        assert main(["gradcheck", "--seeds", "1"]) == 0
        assert "early-update/logsoftmax" in capsys.readouterr().out

    def test_train_eval_predict(self, tmp_path, capsys):
        data = write_toy_corpus(tmp_path / "toy.txt")
        checkpoint = str(tmp_path / "cli.ckpt")
        assert main(["train", "--model-kind", "linear-chain", "--task", "accuracy", "--tag-scheme", "raw",
                     "--train-path", data, "--dev-path", data, "--checkpoint-path", checkpoint, "--epochs", "2",
                     "--word-dim", "4", "--char-dim", "2", "--char-filters", "2", "--f-hidden", "4",
                     "--registry-url", "", "--constrained-decoding"]) == 0
        capsys.readouterr()

        assert main(["eval", "--checkpoint", checkpoint, "--data", data, "--nll"]) == 0
        first = capsys.readouterr().out
        assert main(["eval", "--checkpoint", checkpoint, "--data", data, "--nll"]) == 0
        assert capsys.readouterr().out == first
        assert run_eval(checkpoint, data).metrics == run_eval(checkpoint, data).metrics

        assert main(["eval", "--multi", checkpoint, checkpoint, "--data", data]) == 0
        assert "runs" in capsys.readouterr().out

        untagged = write_lines(tmp_path / "raw.txt", ["The", "cat", "", "Birds", "fly", "quickly"])
        out_a, out_b = str(tmp_path / "a.txt"), str(tmp_path / "b.txt")
        assert main(["predict", "--checkpoint", checkpoint, "--input", untagged, "--output", out_a]) == 0
        assert main(["predict", "--checkpoint", checkpoint, "--input", untagged, "--output", out_b]) == 0
        lines = open(out_a, encoding="utf-8").read().splitlines()
        assert open(out_a, "rb").read() == open(out_b, "rb").read()
        assert [len(line.split()) for line in lines] == [2, 2, 0, 2, 2, 2, 0]
