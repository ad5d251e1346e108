"""
Binary model checkpoints.

Layout (all integers uint32 little-endian):

    b"NCRFT1"
    architecture length, architecture JSON (UTF-8, sorted keys, compact)
    entry count
    per entry: name length, name (UTF-8), rank, extents..., float32 LE values

The architecture block carries model kind, potential design, encoder
configuration and the full vocabularies, so a checkpoint alone is enough for
prediction.
"""
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from ncrft.models.models import EncoderConfig, ModelKind, PotentialDesign
from ncrft.services.model_service import SequenceLabeler
from ncrft.services.vocab_service import Vocabulary
from ncrft.utils.errors import DataError
from ncrft.utils.logger import app_logger
from ncrft.utils.numerics import ParamStore

MAGIC = b"NCRFT1"
_U32 = struct.Struct("<I")

_SHARED_PARAMS = {"emb.word", "emb.char", "cnn.W", "cnn.b", "F.out.W", "F.out.b"}
_CRF_PARAMS = {"crf.A", "crf.begin", "crf.end"}
_PREDICTION_PARAMS = {"G.emb", "G.out.W", "G.out.b"}


@dataclass
class ModelCheckpoint:
    kind: ModelKind
    design: PotentialDesign
    encoder: EncoderConfig
    vocab: Vocabulary
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    constrained_decoding: bool = False

    @classmethod
    def from_model(cls, model: SequenceLabeler) -> "ModelCheckpoint":
        arrays = {name: entry.value.astype("<f4") for name, entry in model.params.items()}
        return cls(kind=model.kind, design=model.design, encoder=model.encoder.model_copy(), vocab=model.vocab,
                   arrays=arrays, constrained_decoding=model.constrained_decoding)

    def to_model(self) -> SequenceLabeler:
        self._check_parameter_names()
        params = ParamStore()
        for name, values in self.arrays.items():
            params.add(name, values.astype(np.float64))
        return SequenceLabeler(self.kind, self.design, self.encoder, self.vocab, params,
                               constrained_decoding=self.constrained_decoding)

    def _check_parameter_names(self):
        required, foreign = _SHARED_PARAMS | _CRF_PARAMS, _PREDICTION_PARAMS
        if self.kind != ModelKind.LINEAR_CHAIN:
            required, foreign = _SHARED_PARAMS | _PREDICTION_PARAMS, _CRF_PARAMS
        missing = sorted(required - self.arrays.keys())
        unexpected = sorted(foreign & self.arrays.keys())
        if missing or unexpected:
            raise DataError(f"Checkpoint parameters do not fit a {self.kind.value} model: "
                            f"missing {missing}, unexpected {unexpected}")

    def architecture(self) -> dict:
        return {
            "kind": self.kind.value,
            "design": self.design.value,
            "encoder": self.encoder.model_dump(mode="json"),
            "vocab": self.vocab.to_dict(),
            "sizes": {
                "words": self.vocab.num_words,
                "chars": self.vocab.num_chars,
                "labels": self.vocab.num_labels,
            },
            "constrained_decoding": self.constrained_decoding,
        }

    def to_bytes(self) -> bytes:
        header = json.dumps(self.architecture(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        header_bytes = header.encode("utf-8")
        chunks = [MAGIC, _U32.pack(len(header_bytes)), header_bytes, _U32.pack(len(self.arrays))]
        for name, values in self.arrays.items():
            name_bytes = name.encode("utf-8")
            chunks.append(_U32.pack(len(name_bytes)))
            chunks.append(name_bytes)
            chunks.append(_U32.pack(values.ndim))
            chunks.extend(_U32.pack(extent) for extent in values.shape)
            chunks.append(np.ascontiguousarray(values, dtype="<f4").tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "ModelCheckpoint":
        reader = _Reader(data, source)
        if reader.take(len(MAGIC)) != MAGIC:
            raise DataError(f"{source}: not a model checkpoint (bad magic)")
        try:
            architecture = json.loads(reader.take(reader.u32()).decode("utf-8"))
            vocab = Vocabulary.from_dict(architecture["vocab"])
            sizes = architecture["sizes"]
            if (sizes["words"], sizes["chars"], sizes["labels"]) != (vocab.num_words, vocab.num_chars,
                                                                      vocab.num_labels):
                raise DataError(f"{source}: vocabulary sizes disagree with the stored vocabularies")
            checkpoint = cls(
                kind=ModelKind(architecture["kind"]),
                design=PotentialDesign(architecture["design"]),
                encoder=EncoderConfig(**architecture["encoder"]),
                vocab=vocab,
                constrained_decoding=bool(architecture.get("constrained_decoding", False)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{source}: malformed architecture block: {e}")

        for _ in range(reader.u32()):
            name = reader.take(reader.u32()).decode("utf-8")
            rank = reader.u32()
            shape = tuple(reader.u32() for _ in range(rank))
            count = int(np.prod(shape)) if shape else 1
            values = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape).copy()
            if name in checkpoint.arrays:
                raise DataError(f"{source}: duplicate parameter {name}")
            checkpoint.arrays[name] = values
        if not reader.exhausted:
            raise DataError(f"{source}: trailing bytes after the last parameter")
        return checkpoint

    def save(self, path: str) -> int:
        """Write the checkpoint atomically; returns the byte count"""
        data = self.to_bytes()
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        temporary = f"{path}.tmp"
        with open(temporary, "wb") as f:
            f.write(data)
        os.replace(temporary, path)
        app_logger.info(f"Saved checkpoint {path} ({len(self.arrays)} arrays, {len(data)} bytes)")
        return len(data)

    @classmethod
    def load(cls, path: str) -> "ModelCheckpoint":
        if not os.path.isfile(path):
            raise DataError(f"Checkpoint not found: {path}")
        with open(path, "rb") as f:
            data = f.read()
        checkpoint = cls.from_bytes(data, source=path)
        app_logger.info(f"Loaded checkpoint {path} ({checkpoint.kind.value}, {len(checkpoint.arrays)} arrays)")
        return checkpoint


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.source = source
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.data):
            raise DataError(f"{self.source}: checkpoint truncated at byte {self.offset}")
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    @property
    def exhausted(self) -> bool:
        return self.offset == len(self.data)


def load_model(path: str) -> Tuple[SequenceLabeler, ModelCheckpoint]:
    checkpoint = ModelCheckpoint.load(path)
    return checkpoint.to_model(), checkpoint
