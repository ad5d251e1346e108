"""
Training driver: data loading, vocabulary, model construction (with optional
RNN transducer warm start), mini-batch optimisation, per-epoch dev
evaluation, early stopping and run bookkeeping.
"""
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, List, Optional, Tuple

import numpy as np
from sqlmodel import Session

from ncrft.models.database import create_db_and_tables, get_engine
from ncrft.models.models import (
    EpochMetric,
    ModelKind,
    RunConfig,
    RunStatus,
    StopCriterion,
    TrainingRun,
)
from ncrft.services.checkpoint_service import ModelCheckpoint
from ncrft.services.data_service import Corpus, Sentence, batch_iter, convert_scheme, read_conll, split_dev
from ncrft.services.eval_service import EvaluationReport, evaluate_model
from ncrft.services.model_service import LossResult, SequenceLabeler, warm_start_from_rnnt
from ncrft.services.vocab_service import bind_corpus, build_vocab, load_pretrained_embeddings
from ncrft.utils.config import dump_run_config, save_run_config
from ncrft.utils.errors import ConfigError, DataError, NumericError
from ncrft.utils.logger import app_logger, log_epoch
from ncrft.utils.numerics import RngState
from ncrft.utils.optimizers import build_optimizer, decayed_learning_rate, optimizer_step

# Stream keys under the run seed
_MODEL_STREAM = 0
_SHUFFLE_STREAM = 1
_DROPOUT_STREAM = 2
_EMBEDDING_STREAM = 3
_SPLIT_STREAM = 4


@dataclass
class EpochRecord:
    epoch: int
    learning_rate: float
    train_loss: float
    dev_metric: float
    dev_nll: float
    early_update_rate: float
    seconds: float

    def as_dict(self) -> Dict[str, float]:
        return {
            "learning_rate": self.learning_rate,
            "train_loss": self.train_loss,
            "dev_metric": self.dev_metric,
            "dev_nll": self.dev_nll,
            "early_update_rate": self.early_update_rate,
            "seconds": self.seconds,
        }


@dataclass
class TrainingResult:
    best_epoch: int
    best_dev_metric: float
    best_dev_nll: float
    history: List[EpochRecord] = field(default_factory=list)
    checkpoint: Optional[ModelCheckpoint] = None
    checkpoint_bytes: bytes = b""
    run_id: Optional[int] = None
    test_report: Optional[EvaluationReport] = None

    def best_model(self) -> SequenceLabeler:
        return self.checkpoint.to_model()


def registry_url_for(config: RunConfig) -> Optional[str]:
    if config.registry_url == "":
        return None
    if config.registry_url == "auto":
        directory = os.path.dirname(os.path.abspath(config.checkpoint_path))
        return f"sqlite:///{os.path.join(directory, 'runs.db')}"
    return config.registry_url


class TrainingService:
    """Trains one model according to a validated RunConfig"""

    def __init__(self, config: RunConfig):
        self.config = config
        self.rng = RngState(config.seed)
        self.model: Optional[SequenceLabeler] = None
        self.train_corpus: Optional[Corpus] = None
        self.dev_corpus: Optional[Corpus] = None

    # -- preparation --------------------------------------------------------

    def validate(self):
        """Fail fast on protocol and file problems before any work"""
        config = self.config
        if config.model_kind == ModelKind.NCRFT and not config.pretrained_rnnt and not config.cold_start:
            raise ConfigError("ncrft training needs pretrained_rnnt (an RNN transducer checkpoint) "
                              "or an explicit cold_start")
        if not config.train_path:
            raise ConfigError("train_path is required")
        for name in ("train_path", "dev_path", "test_path", "embeddings_path", "pretrained_rnnt"):
            path = getattr(config, name)
            if path and not os.path.isfile(path):
                raise DataError(f"{name} not found: {path}")
        if not config.dev_path and not config.dev_size:
            raise ConfigError("Either dev_path or dev_size (sampled from training data) is required")

    def _load_corpus(self, path: str) -> Corpus:
        corpus = read_conll(path, self.config.token_column, self.config.tag_column)
        return convert_scheme(corpus, self.config.tag_scheme)

    def prepare(self) -> SequenceLabeler:
        """Load data, build the vocabulary and create (or warm-start) the model"""
        self.validate()
        config = self.config
        train = self._load_corpus(config.train_path)
        if config.dev_path:
            dev = self._load_corpus(config.dev_path)
        else:
            train, dev = split_dev(train, config.dev_size, self.rng.derive(_SPLIT_STREAM))
            app_logger.info(f"Sampled {len(dev)} dev sentences from the training data")

        rnnt = None
        if config.pretrained_rnnt:
            rnnt = ModelCheckpoint.load(config.pretrained_rnnt).to_model()
            vocab = rnnt.vocab
        else:
            vocab = build_vocab(train, config.rare_word_threshold)
        try:
            bind_corpus(train, vocab)
            bind_corpus(dev, vocab)
        except DataError as e:
            raise DataError(f"Data does not match the model vocabulary: {e.detail}")

        word_table = None
        if config.embeddings_path and rnnt is None:
            word_table, coverage = load_pretrained_embeddings(config.embeddings_path, vocab, config.encoder.word_dim,
                                                              self.rng.derive(_EMBEDDING_STREAM))
            app_logger.info(f"Embedding coverage {coverage:.1%}")

        model = SequenceLabeler.create(config.model_kind, config.encoder, vocab, self.rng.derive(_MODEL_STREAM),
                                       design=config.design, word_table=word_table,
                                       constrained_decoding=config.constrained_decoding)
        if rnnt is not None:
            warm_start_from_rnnt(model, rnnt)

        self.model, self.train_corpus, self.dev_corpus = model, train, dev
        return model

    # -- optimisation -------------------------------------------------------

    def _sentence_loss(self, item: Tuple[int, Sentence], epoch: int) -> LossResult:
        index, sentence = item
        rng = self.rng.derive(_DROPOUT_STREAM, epoch, index)
        return self.model.loss_and_grad(sentence, rng=rng, training=True, beam_width=self.config.train_beam)

    def _batch_losses(self, batch: List[Tuple[int, Sentence]], epoch: int,
                      pool: Optional[ThreadPoolExecutor]) -> List[LossResult]:
        if pool is None:
            return [self._sentence_loss(item, epoch) for item in batch]
        return list(pool.map(lambda item: self._sentence_loss(item, epoch), batch))

    def train_epoch(self, epoch: int, optimizer, pool: Optional[ThreadPoolExecutor] = None) -> Tuple[float, float]:
        """
        One pass over the training data.

        Returns:
            (mean sentence loss, fraction of sentences with an early update)
        """
        params = self.model.params
        indexed = list(enumerate(self.train_corpus.sentences))
        total_loss = 0.0
        early_updates = 0
        for batch in batch_iter(indexed, self.config.batch_size, self.rng.derive(_SHUFFLE_STREAM, epoch),
                                shuffle=True):
            params.zero_grad()
            results = self._batch_losses(batch, epoch, pool)
            # Sentence order keeps the reduction deterministic under any worker count
            for result in results:
                if not np.isfinite(result.loss):
                    raise NumericError(f"Non-finite training loss in epoch {epoch}")
                params.accumulate(result.grads, scale=1.0 / len(batch))
                total_loss += result.loss
                early_updates += result.fell_out_at is not None
            params.clip_grad_norm(self.config.optimizer.clip_norm)
            optimizer_step(params, optimizer)
        count = len(indexed)
        return total_loss / count, early_updates / count

    def evaluate_dev(self) -> Tuple[float, float]:
        config = self.config
        report = evaluate_model(self.model, self.dev_corpus, config.task, beam_width=config.decode_beam)
        nll = float(np.mean([
            self.model.sequence_nll(sentence, cap=config.exact_nll_cap, beam_width=config.decode_beam)
            for sentence in self.dev_corpus.sentences
        ]))
        return report.primary, nll

    def evaluate_test(self, model: SequenceLabeler) -> Optional[EvaluationReport]:
        if not self.config.test_path:
            return None
        test = self._load_corpus(self.config.test_path)
        try:
            bind_corpus(test, model.vocab)
        except DataError as e:
            raise DataError(f"Test data does not match the model vocabulary: {e.detail}")
        report = evaluate_model(model, test, self.config.task, beam_width=self.config.decode_beam)
        report.source = self.config.test_path
        return report

    def _improved(self, metric: float, nll: float, best_metric: float, best_nll: float) -> bool:
        if self.config.stop_on == StopCriterion.NLL:
            return nll < best_nll
        return metric > best_metric

    def train(self) -> TrainingResult:
        """
        Optimise until the epoch cap or patience runs out; keeps the best
        epoch's checkpoint by the configured criterion.
        """
        if self.model is None:
            self.prepare()
        config = self.config
        optimizer = build_optimizer(config.optimizer)
        run_name = f"{self.model.describe()}#seed{config.seed}"
        best = TrainingResult(best_epoch=-1, best_dev_metric=-np.inf, best_dev_nll=np.inf)
        stale = 0

        pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
        try:
            for epoch in range(config.epochs):
                started = time.perf_counter()
                optimizer.learning_rate = decayed_learning_rate(config.optimizer.learning_rate,
                                                                config.optimizer.decay, epoch)
                train_loss, early_rate = self.train_epoch(epoch, optimizer, pool)
                dev_metric, dev_nll = self.evaluate_dev()
                record = EpochRecord(epoch=epoch, learning_rate=optimizer.learning_rate, train_loss=train_loss,
                                     dev_metric=dev_metric, dev_nll=dev_nll, early_update_rate=early_rate,
                                     seconds=time.perf_counter() - started)
                best.history.append(record)
                log_epoch(app_logger, run_name, epoch, record.as_dict())

                if best.best_epoch < 0 or self._improved(dev_metric, dev_nll, best.best_dev_metric, best.best_dev_nll):
                    best.best_epoch, best.best_dev_metric, best.best_dev_nll = epoch, dev_metric, dev_nll
                    best.checkpoint_bytes = ModelCheckpoint.from_model(self.model).to_bytes()
                    stale = 0
                else:
                    stale += 1
                    if stale >= config.patience:
                        app_logger.info(f"Early stopping after epoch {epoch} (best epoch {best.best_epoch})")
                        break
        finally:
            if pool is not None:
                pool.shutdown()

        best.checkpoint = ModelCheckpoint.from_bytes(best.checkpoint_bytes)
        return best


def write_metrics(history: List[EpochRecord], path: str):
    """Line-oriented `epoch<TAB>metric<TAB>value` records"""
    with open(path, "w", encoding="utf-8") as stream:
        for record in history:
            for name, value in record.as_dict().items():
                stream.write(f"{record.epoch}\t{name}\t{value!r}\n")


def _register_start(config: RunConfig) -> Optional[int]:
    url = registry_url_for(config)
    if url is None:
        return None
    engine = get_engine(url)
    create_db_and_tables(engine)
    with Session(engine) as session:
        run = TrainingRun(kind=config.model_kind.value, design=config.design.value, seed=config.seed,
                          config_text=dump_run_config(config), checkpoint_path=config.checkpoint_path)
        session.add(run)
        session.commit()
        session.refresh(run)
        return run.id


def _register_finish(config: RunConfig, run_id: Optional[int], result: Optional[TrainingResult],
                     status: RunStatus):
    if run_id is None:
        return
    with Session(get_engine(registry_url_for(config))) as session:
        run = session.get(TrainingRun, run_id)
        run.status = status
        run.finished_at = datetime.utcnow()
        if result is not None:
            run.best_epoch = result.best_epoch
            run.best_dev_metric = result.best_dev_metric
            for record in result.history:
                session.add(EpochMetric(run_id=run_id, **record.as_dict(), epoch=record.epoch))
        session.add(run)
        session.commit()


def run_train(config: RunConfig) -> TrainingResult:
    """
    Train, score the best epoch on test_path when given, then write the best
    checkpoint, `<checkpoint>.config` and `<checkpoint>.metrics`, and record
    the run in the registry.
    """
    service = TrainingService(config)
    service.validate()
    run_id = _register_start(config)
    try:
        service.prepare()
        result = service.train()
        result.test_report = service.evaluate_test(result.best_model())
    except Exception:
        _register_finish(config, run_id, None, RunStatus.FAILED)
        raise

    result.checkpoint.save(config.checkpoint_path)
    save_run_config(config, f"{config.checkpoint_path}.config")
    write_metrics(result.history, f"{config.checkpoint_path}.metrics")
    result.run_id = run_id
    _register_finish(config, run_id, result, RunStatus.FINISHED)
    app_logger.info(f"Best epoch {result.best_epoch}: dev metric {result.best_dev_metric:.4f}, "
                    f"dev NLL {result.best_dev_nll:.4f}")
    return result
