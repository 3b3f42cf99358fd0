"""Binary checkpoint: model parameters, vocabulary and a config echo."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .graph import FormatError, _Reader
from .ingest import Vocab
from .model import VARIANTS, ModelParams

CKPT_MAGIC = b"SGCN"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    params: ModelParams
    vocab: Vocab
    seed: int = 0
    config: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.vocab) != self.params.vocab_size:
            raise ValueError(f"vocabulary has {len(self.vocab)} tokens, "
                             f"embedding table has {self.params.vocab_size} rows")


def _string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    p = ckpt.params
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), _string(p.variant),
             struct.pack("<IId", p.dim, p.n_layers, p.leaky_slope),
             struct.pack("<I", len(ckpt.vocab))]
    parts += [_string(t) for t in ckpt.vocab.tokens[1:]]
    parts.append(np.asarray(ckpt.vocab.counts, dtype="<u8").tobytes())
    parts.append(p.embeddings.astype("<f4").tobytes())
    if p.attention is not None:
        parts.append(struct.pack("<B", 1) + p.attention.astype("<f4").tobytes())
    else:
        parts.append(struct.pack("<B", 0))
    echo = "".join(f"{k}={v}\n" for k, v in sorted(ckpt.config.items()))
    parts.append(struct.pack("<Q", ckpt.seed) + _string(echo))
    return b"".join(parts)


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    r.magic(CKPT_MAGIC, CKPT_VERSION)
    variant = r.string()
    if variant not in VARIANTS:
        raise FormatError(f"unknown variant tag {variant!r}")
    dim, layers, slope = r.unpack("<IId")
    (vsize,) = r.unpack("<I")
    if vsize < 1 or dim < 1:
        raise FormatError("inconsistent shapes in checkpoint header")
    tokens = [""] + [r.string() for _ in range(vsize - 1)]
    counts = r.array("<u8", vsize).astype(np.int64).tolist()
    emb = r.array("<f4", vsize * dim).reshape(vsize, dim).astype(np.float32)
    (has_att,) = r.unpack("<B")
    att = r.array("<f4", layers * 2 * dim).reshape(layers, 2 * dim).astype(np.float32) if has_att else None
    if (att is not None) != (variant != "mean"):
        raise FormatError("attention section does not match the variant")
    (seed,) = r.unpack("<Q")
    echo = r.string()
    r.done()
    config = dict(line.split("=", 1) for line in echo.splitlines() if line)
    params = ModelParams(emb, att, variant, layers, slope)
    return Checkpoint(params, Vocab(tokens, counts), seed, config)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())
