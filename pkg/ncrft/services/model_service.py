"""
SequenceLabeler: one object per model kind bundling vocabulary, encoder
configuration, potential design and parameters, with the loss, decoding and
likelihood entry points used by training, evaluation and prediction.
"""
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from ncrft.models.models import EncoderConfig, ModelKind, PotentialDesign
from ncrft.services.crf_service import (
    TransitionConstraints,
    TransitionTable,
    label_constraints,
    lc_log_z,
    lc_nll_and_grad,
    lc_sequence_score,
    lc_viterbi,
)
from ncrft.services.data_service import Sentence
from ncrft.services.encoder_service import (
    EmbedCache,
    ScoreSequences,
    TranscriptionCache,
    embed_backward,
    embed_tokens,
    gold_prefix,
    init_prediction_params,
    init_transcription_params,
    prediction_forward,
    transcription_backward,
    transcription_forward,
)
from ncrft.services.transducer_service import (
    DEFAULT_ENUMERATION_CAP,
    beam_sequence_nll,
    beam_search_decode,
    early_update_loss,
    ncrft_exact_nll,
    prefix_set_nll,
    rnnt_beam_decode,
    rnnt_exact_nll,
    rnnt_greedy_decode,
    rnnt_nll,
)
from ncrft.services.vocab_service import Vocabulary
from ncrft.utils.errors import DataError
from ncrft.utils.logger import app_logger
from ncrft.utils.numerics import Gradients, ParamStore, RngState, add_grad

DEFAULT_DECODE_BEAM = 512


@dataclass
class LossResult:
    loss: float
    grads: Gradients
    fell_out_at: Optional[int] = None


@dataclass
class EncodeCache:
    embed: EmbedCache
    transcription: TranscriptionCache


class SequenceLabeler:
    """
    Linear-chain NCRF, RNN transducer or NCRF transducer over a shared
    transcription network F.
    """

    def __init__(self, kind: ModelKind, design: PotentialDesign, encoder: EncoderConfig, vocab: Vocabulary,
                 params: ParamStore, constrained_decoding: bool = False):
        self.kind = ModelKind(kind)
        self.design = PotentialDesign(design)
        self.encoder = encoder
        self.vocab = vocab
        self.params = params
        self.constrained_decoding = constrained_decoding
        self._constraints: Optional[TransitionConstraints] = None

    @classmethod
    def create(cls, kind: ModelKind, encoder: EncoderConfig, vocab: Vocabulary, rng: RngState,
               design: PotentialDesign = PotentialDesign.ADDITIVE, word_table: Optional[np.ndarray] = None,
               constrained_decoding: bool = False) -> "SequenceLabeler":
        """Initialise parameters for a fresh model"""
        params = ParamStore()
        num_labels = vocab.num_labels
        init_transcription_params(params, encoder, vocab.num_words, vocab.num_chars, num_labels,
                                  rng.derive(0), word_table=word_table)
        if kind == ModelKind.LINEAR_CHAIN:
            params.add("crf.A", np.zeros((num_labels, num_labels)))
            params.add("crf.begin", np.zeros(num_labels))
            params.add("crf.end", np.zeros(num_labels))
        else:
            init_prediction_params(params, encoder, num_labels, rng.derive(1))
        model = cls(kind, design, encoder, vocab, params, constrained_decoding=constrained_decoding)
        app_logger.info(f"Created {model.describe()} with {params.num_values()} parameters")
        return model

    def describe(self) -> str:
        if self.kind == ModelKind.NCRFT:
            return f"{self.kind.value}/{self.design.value}"
        return self.kind.value

    @property
    def num_labels(self) -> int:
        return self.vocab.num_labels

    @property
    def bos_id(self) -> int:
        return self.vocab.bos_id

    @property
    def constraints(self) -> Optional[TransitionConstraints]:
        if not self.constrained_decoding:
            return None
        if self._constraints is None:
            self._constraints = label_constraints(self.vocab.labels)
        return self._constraints

    def transition_table(self) -> TransitionTable:
        return TransitionTable(A=self.params.value("crf.A"), begin=self.params.value("crf.begin"),
                               end=self.params.value("crf.end"))

    # -- encoding -----------------------------------------------------------

    def encode(self, sentence: Sentence, rng: Optional[RngState] = None,
               training: bool = False) -> Tuple[np.ndarray, EncodeCache]:
        """Transcription scores f (n x K) for a vocabulary-bound sentence"""
        if sentence.word_ids is None:
            raise DataError("Sentence is not bound to a vocabulary")
        embedded, embed_cache = embed_tokens(sentence.word_ids, sentence.char_ids, self.params, self.encoder,
                                             rng=rng, training=training)
        f, transcription_cache = transcription_forward(embedded, self.params, self.encoder,
                                                       rng=rng, training=training)
        return f, EncodeCache(embed=embed_cache, transcription=transcription_cache)

    def encode_backward(self, df: np.ndarray, cache: EncodeCache, grads: Gradients):
        dembedded = transcription_backward(df, cache.transcription, self.params, self.encoder, grads)
        embed_backward(dembedded, cache.embed, self.params, self.encoder, grads)

    def score_sequences(self, sentence: Sentence) -> ScoreSequences:
        """f, plus teacher-forced g and its G hidden states for the transducers"""
        f, _ = self.encode(sentence)
        if self.kind == ModelKind.LINEAR_CHAIN:
            return ScoreSequences(f=f)
        g, cache = prediction_forward(gold_prefix(self._gold(sentence), self.bos_id), self.params, self.bos_id)
        return ScoreSequences(f=f, g=g, g_states=cache.hidden[0])

    def _gold(self, sentence: Sentence) -> np.ndarray:
        if sentence.tag_ids is None:
            raise DataError("Sentence has no gold tags")
        return sentence.tag_ids

    # -- training objectives ------------------------------------------------

    def loss_and_grad(self, sentence: Sentence, rng: Optional[RngState] = None, training: bool = True,
                      beam_width: int = 128) -> LossResult:
        """
        Training objective for one sentence: exact NLL for the linear chain,
        teacher-forced NLL for the RNN transducer, early-update beam NLL for
        the NCRF transducer.
        """
        gold = self._gold(sentence)
        f, cache = self.encode(sentence, rng=rng, training=training)
        grads: Gradients = {}
        fell_out_at = None
        if self.kind == ModelKind.LINEAR_CHAIN:
            loss, chain_grads = lc_nll_and_grad(f, self.transition_table(), gold)
            df = chain_grads.df
            add_grad(grads, "crf.A", chain_grads.dA)
            add_grad(grads, "crf.begin", chain_grads.dbegin)
            add_grad(grads, "crf.end", chain_grads.dend)
        elif self.kind == ModelKind.RNNT:
            loss, df, grads = rnnt_nll(f, gold, self.params, self.bos_id)
        else:
            result = early_update_loss(f, gold, self.params, self.design, self.bos_id, beam_width)
            loss, df, grads, fell_out_at = result.loss, result.df, result.grads, result.fell_out_at
        self.encode_backward(df, cache, grads)
        return LossResult(loss=loss, grads=grads, fell_out_at=fell_out_at)

    def exact_loss_and_grad(self, sentence: Sentence, cap: int = DEFAULT_ENUMERATION_CAP) -> LossResult:
        """Exact NLL with dropout off; NCRF transducers normalize by enumeration"""
        if self.kind != ModelKind.NCRFT:
            return self.loss_and_grad(sentence, training=False)
        gold = self._gold(sentence)
        f, cache = self.encode(sentence)
        loss, df, grads = ncrft_exact_nll(f, gold, self.params, self.design, self.bos_id, cap)
        self.encode_backward(df, cache, grads)
        return LossResult(loss=loss, grads=grads)

    def prefix_set_loss_and_grad(self, sentence: Sentence, prefixes: np.ndarray, gold_index: int) -> LossResult:
        """NCRF transducer NLL over a frozen prefix set (dropout off)"""
        f, cache = self.encode(sentence)
        loss, df, grads = prefix_set_nll(f, prefixes, gold_index, self.params, self.design, self.bos_id)
        self.encode_backward(df, cache, grads)
        return LossResult(loss=loss, grads=grads)

    # -- inference ----------------------------------------------------------

    def decode(self, sentence: Sentence, beam_width: Optional[int] = 512) -> List[int]:
        """
        Best label ids: Viterbi for the linear chain, greedy (width 1 or None)
        or beam for the RNN transducer, beam for the NCRF transducer (width
        512 when None).
        """
        f, _ = self.encode(sentence)
        if self.kind == ModelKind.LINEAR_CHAIN:
            labels, _ = lc_viterbi(f, self.transition_table(), self.constraints)
        elif self.kind == ModelKind.RNNT:
            if beam_width is None or (beam_width == 1 and self.constraints is None):
                labels, _ = rnnt_greedy_decode(f, self.params, self.bos_id)
            else:
                labels, _ = rnnt_beam_decode(f, self.params, self.bos_id, beam_width, self.constraints)
        else:
            width = beam_width or DEFAULT_DECODE_BEAM
            labels, _ = beam_search_decode(f, self.params, self.design, self.bos_id, width, self.constraints)
        return labels

    def predict_tags(self, sentence: Sentence, beam_width: Optional[int] = 512) -> List[str]:
        return [self.vocab.label(label) for label in self.decode(sentence, beam_width)]

    def sequence_nll(self, sentence: Sentence, cap: int = DEFAULT_ENUMERATION_CAP,
                     beam_width: Optional[int] = DEFAULT_DECODE_BEAM) -> float:
        """
        -log p(y* | x): exact for the linear chain and RNN transducer; for the
        NCRF transducer exact when K^n <= cap, otherwise normalized over the
        decoding beam plus the gold sequence.
        """
        gold = self._gold(sentence)
        f, _ = self.encode(sentence)
        if self.kind == ModelKind.LINEAR_CHAIN:
            table = self.transition_table()
            return lc_log_z(f, table) - lc_sequence_score(f, table, gold)
        if self.kind == ModelKind.RNNT:
            return rnnt_exact_nll(f, gold, self.params, self.bos_id)
        if self.num_labels ** len(gold) <= cap:
            loss, _, _ = ncrft_exact_nll(f, gold, self.params, self.design, self.bos_id, cap)
            return loss
        width = beam_width or DEFAULT_DECODE_BEAM
        return beam_sequence_nll(f, gold, self.params, self.design, self.bos_id, width)


def warm_start_from_rnnt(model: SequenceLabeler, rnnt: SequenceLabeler) -> List[str]:
    """
    Copy F and G weights from a trained RNN transducer into an NCRF transducer.

    Raises:
        DataError: Kinds, vocabularies or shapes do not match
    """
    if model.kind != ModelKind.NCRFT or rnnt.kind != ModelKind.RNNT:
        raise DataError(f"Warm start needs an ncrft model and an rnnt checkpoint, got {model.kind.value} "
                        f"and {rnnt.kind.value}")
    if model.vocab != rnnt.vocab:
        raise DataError("Pretrained RNN transducer was built on a different vocabulary")
    if model.encoder.model_dump(exclude={"dropout"}) != rnnt.encoder.model_dump(exclude={"dropout"}):
        raise DataError("Pretrained RNN transducer has a different encoder configuration")
    copied = model.params.copy_from(rnnt.params)
    if len(copied) != len(model.params):
        missing = sorted(set(model.params.names()) - set(copied))
        raise DataError(f"Pretrained RNN transducer is missing parameters: {missing}")
    app_logger.info(f"Warm-started {len(copied)} parameter arrays from the RNN transducer")
    return copied
