"""Question and image encoders.

The question side is a word-embedding table feeding a single-layer
unidirectional LSTM; the question vector is the final hidden state. The
image side is a small stack of conv blocks (conv, ReLU, 2x max pool),
producing a (C, H, W) feature grid whose receptive field spans the whole
image, so any cell can in principle draw on global context.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .tensor import Tensor

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_PUNCT = re.compile(r"[^a-z0-9\s]")


def split_tokens(text: str) -> list[str]:
    """Lowercase, replace punctuation with spaces, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


class Vocabulary:
    """Token ids plus the closed answer set.

    Ids are dense; PAD is always 0 and UNK always 1. Built from a corpus
    by frequency with lexicographic tie-break so construction is
    deterministic.
    """

    def __init__(self, tokens: list[str], answers: list[str]):
        if not answers:
            raise ValueError("answer set must be nonempty")
        if len(set(answers)) != len(answers):
            raise ValueError("answer set contains duplicates")
        self.token_to_id = {PAD_TOKEN: 0, UNK_TOKEN: 1}
        for tok in tokens:
            if tok not in self.token_to_id:
                self.token_to_id[tok] = len(self.token_to_id)
        self.answers = list(answers)
        self.answer_to_index = {a: i for i, a in enumerate(self.answers)}

    def __len__(self) -> int:
        return len(self.token_to_id)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @classmethod
    def build(cls, questions: list[str], answers: list[str]) -> "Vocabulary":
        counts = Counter()
        for q in questions:
            counts.update(split_tokens(q))
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        return cls(ordered, answers)

    def to_json(self) -> str:
        return json.dumps({"tokens": self.token_to_id, "answers": self.answers},
                          sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        doc = json.loads(text)
        vocab = cls.__new__(cls)
        vocab.token_to_id = {k: int(v) for k, v in doc["tokens"].items()}
        vocab.answers = list(doc["answers"])
        vocab.answer_to_index = {a: i for i, a in enumerate(vocab.answers)}
        return vocab

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text())

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def tokenize(question: str, vocab: Vocabulary) -> list[int]:
    """Map question text to token ids; unknown tokens become UNK."""
    toks = split_tokens(question)
    if not toks:
        raise ValueError("empty question")
    return [vocab.token_to_id.get(t, vocab.unk_id) for t in toks]


def pad_ids(ids: list[int], max_len: int, pad_id: int = 0) -> list[int]:
    """Pad (right) or truncate to a fixed length for batch-independence."""
    ids = ids[:max_len]
    return ids + [pad_id] * (max_len - len(ids))


# -- question encoder ---------------------------------------------------------

# Fused gate layout along the last weight axis: input, forget, cell, output.
LSTM_GATES = ("i", "f", "c", "o")


def question_param_shapes(cfg: ModelConfig, vocab_size: int) -> dict[str, tuple]:
    return {
        "qenc.embed": (vocab_size, cfg.embed_dim),
        "qenc.w_x": (cfg.embed_dim, 4 * cfg.q_dim),
        "qenc.w_h": (cfg.q_dim, 4 * cfg.q_dim),
        "qenc.b": (4 * cfg.q_dim,),
    }


def encode_question(ids: np.ndarray, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Run the LSTM over a batch of fixed-length id sequences.

    ids: (B, T) int array, already padded/truncated to cfg.max_question_len.
    Padding is processed like any other token (the pad embedding is
    trainable), so the result never depends on batch composition.
    Returns the final hidden state, shape (B, Q).
    """
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError(f"expected (B, T) id batch, got shape {ids.shape}")
    vocab_size = params["qenc.embed"].shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        raise IndexError(f"token id out of vocabulary range [0, {vocab_size})")
    bsz, steps = ids.shape
    q = cfg.q_dim
    dtype = params["qenc.embed"].dtype
    # The input projection has no recurrent dependency: hoist it out of the
    # time loop as one (B*T, E) @ (E, 4Q) product.
    emb = T.gather_rows(params["qenc.embed"], ids.reshape(-1))           # (B*T, E)
    x_proj = T.add(T.matmul(emb, params["qenc.w_x"]), params["qenc.b"])  # (B*T, 4Q)
    x_proj = T.reshape(x_proj, (bsz, steps, 4 * q))
    h = Tensor(np.zeros((bsz, q), dtype=dtype))
    c = Tensor(np.zeros((bsz, q), dtype=dtype))
    for t in range(steps):
        pre = T.add(T.reshape(T.narrow(x_proj, 1, t, 1), (bsz, 4 * q)),
                    T.matmul(h, params["qenc.w_h"]))                     # (B, 4Q)
        i_g = T.sigmoid(T.narrow(pre, 1, 0, q))
        f_g = T.sigmoid(T.narrow(pre, 1, q, q))
        c_g = T.tanh(T.narrow(pre, 1, 2 * q, q))
        o_g = T.sigmoid(T.narrow(pre, 1, 3 * q, q))
        c = T.add(T.mul(f_g, c), T.mul(i_g, c_g))
        h = T.mul(o_g, T.tanh(c))
    return h


def encode_question_single(ids: list[int], params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Encode one already-tokenized question; returns shape (Q,)."""
    if not ids:
        raise ValueError("empty id sequence")
    batch = np.asarray([pad_ids(list(ids), cfg.max_question_len)])
    return T.reshape(encode_question(batch, params, cfg), (cfg.q_dim,))


# -- image encoder ------------------------------------------------------------


def image_param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    shapes = {}
    cin = 3
    for i, cout in enumerate(cfg.encoder_channels):
        shapes[f"ienc.conv{i}.w"] = (cout, cin, cfg.encoder_kernel, cfg.encoder_kernel)
        shapes[f"ienc.conv{i}.b"] = (cout,)
        cin = cout
    return shapes


def encode_image(images: np.ndarray | Tensor, params: dict[str, Tensor],
                 cfg: ModelConfig) -> Tensor:
    """Conv blocks with ReLU and 2x max pooling.

    images: (B, 3, S, S) with S divisible by 2**depth.
    Returns features of shape (B, C, S/2**depth, S/2**depth).
    """
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=params["ienc.conv0.w"].dtype))
    if x.ndim != 4 or x.shape[1] != 3:
        raise T.ShapeError("encode_image", f"expected (B, 3, S, S), got {x.shape}")
    if x.shape[2] % (2 ** cfg.depth) or x.shape[3] % (2 ** cfg.depth):
        raise T.ShapeError("encode_image",
                           f"spatial size {x.shape[2]}x{x.shape[3]} not divisible by 2^{cfg.depth}")
    pad = cfg.encoder_kernel // 2
    pool = T.maxpool2d if cfg.encoder_pool == "max" else T.downsample_nearest
    for i in range(cfg.depth):
        x = T.conv2d(x, params[f"ienc.conv{i}.w"], params[f"ienc.conv{i}.b"], padding=pad)
        x = T.relu(x)
        x = pool(x, 2)
    return x
