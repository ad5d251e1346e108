"""
Finite-difference verification of every training objective on tiny random
models.
"""
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from ncrft.models.models import EncoderConfig, ModelKind, PotentialDesign
from ncrft.services.data_service import Sentence
from ncrft.services.model_service import LossResult, SequenceLabeler
from ncrft.services.transducer_service import beam_search, ncrft_row_scorer, union_with_gold
from ncrft.services.vocab_service import bind_sentence, build_vocab
from ncrft.utils.logger import app_logger
from ncrft.utils.numerics import Gradients, ParamStore, RngState, grad_check

GRADIENT_TOLERANCE = 1e-4

TINY_ENCODER = EncoderConfig(word_dim=4, char_dim=3, char_filters=3, char_width=3, f_hidden=4, f_layers=1,
                             g_hidden=4, label_dim=3, dropout=0.0)

_WORDS = ("the", "cat", "sat", "on", "a", "mat", "Paris", "ran")


def tiny_sentence(rng: RngState, length: int, num_labels: int) -> Sentence:
    words = [_WORDS[i] for i in rng.integers(0, len(_WORDS), size=length)]
    tags = [f"L{k}" for k in rng.integers(0, num_labels, size=length)]
    return Sentence(tokens=words, tags=tags)


def tiny_model(kind: ModelKind, seed: int, length: int = 3, num_labels: int = 2,
               design: PotentialDesign = PotentialDesign.ADDITIVE,
               encoder: EncoderConfig = TINY_ENCODER) -> Tuple[SequenceLabeler, Sentence]:
    """
    A randomly initialised model with labels L0..L{K-1} and one random
    vocabulary-bound sentence.
    """
    rng = RngState(seed)
    sentence = tiny_sentence(rng.derive(0), length, num_labels)
    inventory = Sentence(tokens=list(_WORDS[:num_labels]), tags=[f"L{k}" for k in range(num_labels)])
    vocab = build_vocab([inventory, sentence], rare_word_threshold=0)
    bind_sentence(sentence, vocab)
    model = SequenceLabeler.create(kind, encoder, vocab, rng.derive(1), design=design)
    # Non-zero transitions exercise their gradients
    if kind == ModelKind.LINEAR_CHAIN:
        for offset, name in enumerate(("crf.A", "crf.begin", "crf.end")):
            model.params.set_value(name, rng.derive(2, offset).normal(0.5, size=model.params.value(name).shape))
    return model, sentence


def _as_loss_fn(objective: Callable[[], LossResult]) -> Callable[[ParamStore], Tuple[float, Gradients]]:
    def loss_fn(params: ParamStore) -> Tuple[float, Gradients]:
        result = objective()
        return result.loss, result.grads
    return loss_fn


def frozen_beam_prefixes(model: SequenceLabeler, sentence: Sentence, width: int) -> Tuple[np.ndarray, int]:
    """Prefix set of the early-update objective at the current parameters"""
    f, _ = model.encode(sentence)
    gold = sentence.tag_ids
    beam = beam_search(f, model.params, model.bos_id, width, ncrft_row_scorer(f, model.design), gold=gold)
    return union_with_gold(beam.prefixes, gold[:beam.length])


def check_objectives(seed: int, length: int = 3, num_labels: int = 2, epsilon: float = 1e-5,
                     sample_count: int = 5, beam_width: int = 2) -> Dict[str, float]:
    """Max relative gradient error of each objective on one random instance"""
    errors = {}
    check_rng = RngState(seed).derive(99)

    model, sentence = tiny_model(ModelKind.LINEAR_CHAIN, seed, length, num_labels)
    errors["linear-chain"] = grad_check(_as_loss_fn(lambda: model.loss_and_grad(sentence, training=False)),
                                        model.params, epsilon, sample_count, check_rng.derive(0))

    model, sentence = tiny_model(ModelKind.RNNT, seed, length, num_labels)
    errors["rnnt"] = grad_check(_as_loss_fn(lambda: model.loss_and_grad(sentence, training=False)),
                                model.params, epsilon, sample_count, check_rng.derive(1))

    for offset, design in enumerate(PotentialDesign):
        model, sentence = tiny_model(ModelKind.NCRFT, seed, length, num_labels, design=design)
        errors[f"ncrft-exact/{design.value}"] = grad_check(
            _as_loss_fn(lambda: model.exact_loss_and_grad(sentence)),
            model.params, epsilon, sample_count, check_rng.derive(2 + offset))

        prefixes, gold_index = frozen_beam_prefixes(model, sentence, beam_width)
        errors[f"early-update/{design.value}"] = grad_check(
            _as_loss_fn(lambda: model.prefix_set_loss_and_grad(sentence, prefixes, gold_index)),
            model.params, epsilon, sample_count, check_rng.derive(4 + offset))
    return errors


def run_gradcheck(seeds: Sequence[int], length: int = 3, num_labels: int = 2) -> pd.DataFrame:
    """
    Grad-check every objective over several seeds.

    Returns:
        DataFrame indexed by objective with the worst error and a pass flag
    """
    rows: List[Dict[str, float]] = []
    for seed in seeds:
        for objective, error in check_objectives(seed, length, num_labels).items():
            rows.append({"objective": objective, "seed": seed, "error": error})
    frame = pd.DataFrame(rows)
    summary = frame.groupby("objective", sort=False)["error"].max().to_frame("max_error")
    summary["passed"] = summary["max_error"] < GRADIENT_TOLERANCE
    app_logger.info(f"Gradient check over {len(seeds)} seeds: worst error {summary['max_error'].max():.3e}")
    return summary
