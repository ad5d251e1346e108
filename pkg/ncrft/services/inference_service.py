"""
Checkpoint-driven evaluation and prediction.
"""
import os
from typing import List, Optional, Sequence, Tuple

import pandas as pd

from ncrft.models.models import TagScheme, TaskType
from ncrft.services.checkpoint_service import load_model
from ncrft.services.data_service import Corpus, convert_scheme, detect_scheme, read_conll, write_conll
from ncrft.services.eval_service import EvaluationReport, evaluate_model, summarize_runs
from ncrft.services.model_service import SequenceLabeler
from ncrft.services.vocab_service import bind_corpus
from ncrft.utils.config import read_config_file
from ncrft.utils.errors import DataError
from ncrft.utils.logger import app_logger


def model_scheme(model: SequenceLabeler) -> TagScheme:
    return detect_scheme(model.vocab.labels)


def task_for(checkpoint_path: str, model: SequenceLabeler, task: Optional[TaskType] = None) -> TaskType:
    """Explicit task, else the task saved next to the checkpoint, else inferred from the label scheme"""
    if task is not None:
        return TaskType(task)
    config_path = f"{checkpoint_path}.config"
    if os.path.isfile(config_path):
        saved = read_config_file(config_path).get("task")
        if saved:
            return TaskType(saved)
    return TaskType.ACCURACY if model_scheme(model) == TagScheme.RAW else TaskType.F1


def load_for_data(checkpoint_path: str, data_path: str, token_column: int = 0,
                  tag_column: Optional[int] = -1) -> Tuple[SequenceLabeler, Corpus]:
    """Load a checkpoint and a column file bound to its vocabulary"""
    model, _ = load_model(checkpoint_path)
    corpus = read_conll(data_path, token_column, tag_column)
    if tag_column is not None:
        corpus = convert_scheme(corpus, model_scheme(model))
    try:
        bind_corpus(corpus, model.vocab)
    except DataError as e:
        raise DataError(f"{data_path} does not match checkpoint {checkpoint_path}: {e.detail}")
    return model, corpus


def run_eval(checkpoint_path: str, data_path: str, beam_width: Optional[int] = 512,
             task: Optional[TaskType] = None, token_column: int = 0, tag_column: int = -1,
             with_nll: bool = False) -> EvaluationReport:
    """Decode a gold-tagged file with a checkpoint and score it"""
    model, corpus = load_for_data(checkpoint_path, data_path, token_column, tag_column)
    report = evaluate_model(model, corpus, task_for(checkpoint_path, model, task), beam_width=beam_width,
                            with_nll=with_nll)
    report.source = f"{checkpoint_path} on {data_path}"
    return report


def run_eval_multi(checkpoint_paths: Sequence[str], data_path: str, beam_width: Optional[int] = 512,
                   task: Optional[TaskType] = None, token_column: int = 0,
                   tag_column: int = -1) -> Tuple[List[EvaluationReport], pd.DataFrame]:
    """Evaluate independent runs and summarize mean, sample std and max per metric"""
    reports = [run_eval(path, data_path, beam_width, task, token_column, tag_column) for path in checkpoint_paths]
    return reports, summarize_runs(reports)


def run_predict(checkpoint_path: str, input_path: str, output_path: str, beam_width: Optional[int] = 512,
                token_column: int = 0) -> int:
    """
    Append a predicted tag column to every line of a column file.

    Returns:
        Number of sentences written
    """
    model, corpus = load_for_data(checkpoint_path, input_path, token_column, tag_column=None)
    predictions = [model.predict_tags(sentence, beam_width) for sentence in corpus.sentences]
    write_conll(corpus.sentences, output_path, extra_column=predictions)
    app_logger.info(f"Wrote predictions for {len(corpus)} sentences to {output_path}")
    return len(corpus)
