"""
Token accuracy, entity span extraction and entity-level micro-averaged F1,
plus report formatting and multi-run summaries.
"""
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence, Set, Tuple

import pandas as pd

from ncrft.models.models import TagScheme, TaskType
from ncrft.services.data_service import Corpus, detect_scheme, split_tag
from ncrft.utils.errors import DataError
from ncrft.utils.logger import app_logger


@dataclass(frozen=True, order=True)
class EntitySpan:
    """Typed span over inclusive token indices; orders by (start, end, type)"""
    start: int
    end: int
    type: str

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise ValueError(f"Invalid span [{self.start}, {self.end}]")


def token_accuracy(gold: Sequence[str], predicted: Sequence[str]) -> float:
    if len(gold) != len(predicted):
        raise ValueError(f"Length mismatch: {len(gold)} gold vs {len(predicted)} predicted tags")
    if not gold:
        raise ValueError("Cannot score an empty tag sequence")
    return sum(g == p for g, p in zip(gold, predicted)) / len(gold)


def extract_entities(tags: Sequence[str]) -> Set[EntitySpan]:
    """
    Strict BIOES extraction: S-X is a singleton, B-X I-X* E-X of one type is
    a span. A broken run yields nothing; the tag that broke it is read again
    as a possible start.
    """
    spans = set()
    open_start: Optional[int] = None
    open_type = ""
    for index, tag in enumerate(tags):
        prefix, entity_type = split_tag(tag)
        if open_start is not None:
            if prefix == "I" and entity_type == open_type:
                continue
            if prefix == "E" and entity_type == open_type:
                spans.add(EntitySpan(open_start, index, entity_type))
                open_start = None
                continue
            open_start = None
        if prefix == "S":
            spans.add(EntitySpan(index, index, entity_type))
        elif prefix == "B":
            open_start, open_type = index, entity_type
    return spans


def bio_spans(tags: Sequence[str]) -> Set[EntitySpan]:
    """
    conlleval-style BIO chunks: a chunk starts at B-X, or at I-X that does not
    continue an X chunk, and runs until O, B-* or a type change.
    """
    spans = set()
    start: Optional[int] = None
    current_type = ""
    for index, tag in enumerate(tags):
        prefix, entity_type = split_tag(tag)
        if prefix not in ("O", "B", "I"):
            raise DataError(f"Not a BIO tag: {tag!r}")
        continues = prefix == "I" and start is not None and entity_type == current_type
        if start is not None and not continues:
            spans.add(EntitySpan(start, index - 1, current_type))
            start = None
        if prefix != "O" and not continues:
            start, current_type = index, entity_type
    if start is not None:
        spans.add(EntitySpan(start, len(tags) - 1, current_type))
    return spans


def spans_for(tags: Sequence[str], scheme: TagScheme) -> Set[EntitySpan]:
    if scheme == TagScheme.BIOES:
        return extract_entities(tags)
    if scheme == TagScheme.BIO:
        return bio_spans(tags)
    raise ValueError("Entity spans need a BIO or BIOES tag scheme")


def _pooled(spans: Iterable[Iterable[EntitySpan]]) -> Counter:
    return Counter((index, span) for index, sentence_spans in enumerate(spans) for span in sentence_spans)


def micro_f1(gold: Sequence[Iterable[EntitySpan]],
             predicted: Sequence[Iterable[EntitySpan]]) -> Tuple[float, float, float]:
    """
    Micro-averaged precision, recall and F1 with counts pooled over sentences.

    Args:
        gold: Gold spans per sentence
        predicted: Predicted spans per sentence, aligned with gold

    Returns:
        (precision, recall, f1); an empty side scores 1 only if the other side is empty too
    """
    if len(gold) != len(predicted):
        raise ValueError(f"{len(gold)} gold sentences vs {len(predicted)} predicted")
    gold_counts = _pooled(gold)
    predicted_counts = _pooled(predicted)
    correct = sum((gold_counts & predicted_counts).values())
    num_gold = sum(gold_counts.values())
    num_predicted = sum(predicted_counts.values())

    precision = correct / num_predicted if num_predicted else (1.0 if num_gold == 0 else 0.0)
    recall = correct / num_gold if num_gold else (1.0 if num_predicted == 0 else 0.0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def per_type_scores(gold: Sequence[Iterable[EntitySpan]], predicted: Sequence[Iterable[EntitySpan]]) -> pd.DataFrame:
    """Diagnostic precision/recall/F1 per entity type"""
    gold = [list(s) for s in gold]
    predicted = [list(s) for s in predicted]
    types = sorted({span.type for spans in gold + predicted for span in spans})
    rows = []
    for entity_type in types:
        gold_t = [[span for span in spans if span.type == entity_type] for spans in gold]
        pred_t = [[span for span in spans if span.type == entity_type] for spans in predicted]
        precision, recall, f1 = micro_f1(gold_t, pred_t)
        rows.append({
            "type": entity_type,
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "gold": sum(len(s) for s in gold_t),
            "predicted": sum(len(s) for s in pred_t),
        })
    return pd.DataFrame(rows, columns=["type", "precision", "recall", "f1", "gold", "predicted"])


@dataclass
class EvaluationReport:
    task: TaskType
    metrics: Dict[str, float]
    per_type: Optional[pd.DataFrame] = None
    source: str = ""

    @property
    def primary(self) -> float:
        return self.metrics["accuracy" if self.task == TaskType.ACCURACY else "f1"]

    def to_text(self) -> str:
        lines = [f"Evaluation of {self.source or 'model'} ({self.task.value})"]
        for name, value in self.metrics.items():
            lines.append(f"  {name:<12} {value:.4f}" if isinstance(value, float) else f"  {name:<12} {value}")
        if self.per_type is not None and not self.per_type.empty:
            lines.append("")
            lines.append(self.per_type.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
        return "\n".join(lines)

    def to_records(self) -> str:
        """One 'metric<TAB>value' line per metric"""
        return "".join(f"{name}\t{value!r}\n" for name, value in self.metrics.items())


def evaluate_tags(gold_tags: Sequence[Sequence[str]], predicted_tags: Sequence[Sequence[str]], task: TaskType,
                  scheme: Optional[TagScheme] = None, source: str = "") -> EvaluationReport:
    """Score aligned gold and predicted tag sequences"""
    if len(gold_tags) != len(predicted_tags):
        raise ValueError(f"{len(gold_tags)} gold sentences vs {len(predicted_tags)} predicted")
    tokens = sum(len(tags) for tags in gold_tags)
    flat_gold = [tag for tags in gold_tags for tag in tags]
    flat_pred = [tag for tags in predicted_tags for tag in tags]
    metrics: Dict[str, float] = {"accuracy": token_accuracy(flat_gold, flat_pred)}
    per_type = None
    if task == TaskType.F1:
        scheme = scheme or detect_scheme(flat_gold)
        gold_spans = [spans_for(tags, scheme) for tags in gold_tags]
        pred_spans = [spans_for(tags, scheme) for tags in predicted_tags]
        precision, recall, f1 = micro_f1(gold_spans, pred_spans)
        metrics.update(precision=precision, recall=recall, f1=f1)
        per_type = per_type_scores(gold_spans, pred_spans)
    metrics.update(sentences=float(len(gold_tags)), tokens=float(tokens))
    return EvaluationReport(task=task, metrics=metrics, per_type=per_type, source=source)


def evaluate_model(model, corpus: Corpus, task: TaskType, beam_width: Optional[int] = 512,
                   with_nll: bool = False) -> EvaluationReport:
    """
    Decode every sentence of a vocabulary-bound corpus and score it.

    Args:
        model: SequenceLabeler
        with_nll: Also report the mean per-sentence negative log-likelihood
    """
    gold_tags = [sentence.tags for sentence in corpus.sentences]
    if any(tags is None for tags in gold_tags):
        raise DataError(f"{corpus.path}: evaluation needs gold tags on every sentence")
    predicted = [model.predict_tags(sentence, beam_width) for sentence in corpus.sentences]
    report = evaluate_tags(gold_tags, predicted, task, scheme=corpus.scheme, source=corpus.path or "")
    if with_nll:
        total = sum(model.sequence_nll(sentence, beam_width=beam_width) for sentence in corpus.sentences)
        report.metrics["nll"] = total / len(corpus)
    app_logger.info(f"Evaluated {len(corpus)} sentences: {report.task.value}={report.primary:.4f}")
    return report


def summarize_runs(reports: Sequence[EvaluationReport]) -> pd.DataFrame:
    """
    Mean, sample standard deviation (ddof=1) and max of every metric across
    independent runs.
    """
    if not reports:
        raise ValueError("No reports to summarize")
    frame = pd.DataFrame([report.metrics for report in reports])
    summary = frame.agg(["mean", "std", "max"]).T
    summary["runs"] = len(reports)
    summary.index.name = "metric"
    return summary


def format_summary(summary: pd.DataFrame) -> str:
    lines = [f"{'metric':<12} {'mean':>10} {'std':>10} {'max':>10}  runs"]
    for metric, row in summary.iterrows():
        std = "nan" if pd.isna(row["std"]) else f"{row['std']:.4f}"
        lines.append(f"{metric:<12} {row['mean']:>10.4f} {std:>10} {row['max']:>10.4f}  {int(row['runs'])}")
    return "\n".join(lines)
