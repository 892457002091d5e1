"""Full answering model and the baseline input variants.

Prediction runs in three stages: encode the question and the image,
compute glimpse attention and pool it under the region mask, then
classify the concatenated (pooled features, question vector). The
baselines differ only in how the input triple (image, question, mask) is
rewritten before entering that shared pipeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import attention_map, attention_param_shapes, downsample_mask, masked_pool
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig, config_from_dict
from .encoders import (Vocabulary, encode_image, encode_question,
                       image_param_shapes, pad_ids, question_param_shapes, tokenize)
from .tensor import Tensor

RED = np.array([1.0, 0.0, 0.0])


def classifier_param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    in_dim = cfg.feature_channels * cfg.glimpses + cfg.q_dim
    return {
        "clf.w1": (in_dim, cfg.mlp_hidden),
        "clf.b1": (cfg.mlp_hidden,),
        "clf.w2": (cfg.mlp_hidden, cfg.n_answers),
        "clf.b2": (cfg.n_answers,),
    }


def param_shapes(cfg: ModelConfig, vocab_size: int) -> dict[str, tuple]:
    shapes = {}
    shapes.update(image_param_shapes(cfg))
    shapes.update(question_param_shapes(cfg, vocab_size))
    shapes.update(attention_param_shapes(cfg))
    shapes.update(classifier_param_shapes(cfg))
    return shapes


def _fan_in(shape: tuple) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


def _init_array(name: str, shape: tuple, rng: np.random.Generator, dtype,
                gain: float = 2.0) -> np.ndarray:
    if name.endswith(".b") or name == "qenc.b" or name in ("clf.b1", "clf.b2"):
        return np.zeros(shape, dtype=dtype)
    if name == "qenc.embed":
        return rng.uniform(-0.1, 0.1, size=shape).astype(dtype)
    # Kaiming-style scaled uniform: bound sqrt(gain / fan_in).
    bound = np.sqrt(gain / _fan_in(shape))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# Variance-preserving uniform bound for the frozen backbone stand-in: a
# pretrained encoder delivers unit-scale activations, which sqrt(2/fan)
# uniform init does not (it shrinks them ~sqrt(3)x per ReLU block).
FROZEN_ENCODER_GAIN = 6.0


def init_params(cfg: ModelConfig, seed: int, vocab_size: int) -> dict[str, Tensor]:
    """Deterministic parameter init.

    Trainable weights draw from uniform(-b, b) with b = sqrt(2/fan_in),
    biases start at zero and embeddings at uniform(-0.1, 0.1). When the
    image encoder is frozen its weights come from the dedicated
    `frozen_encoder_seed` stream at a variance-preserving scale, so all
    runs share one fixed backbone regardless of the training seed, and
    those tensors do not require gradients.
    """
    cfg.validate()
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(seed)
    enc_rng = np.random.default_rng(cfg.frozen_encoder_seed) if cfg.freeze_image_encoder else rng
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg, vocab_size).items():
        is_encoder = name.startswith("ienc.")
        frozen = is_encoder and cfg.freeze_image_encoder
        arr = _init_array(name, shape, enc_rng if is_encoder else rng, dtype,
                          gain=FROZEN_ENCODER_GAIN if frozen else 2.0)
        params[name] = Tensor(arr, requires_grad=not frozen)
    return params


# -- baseline input construction ----------------------------------------------


def region_bounds(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Inclusive (r0, c0, r1, c1) bounding box of the mask's support."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty region mask")
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def snap_region_text(mask: np.ndarray, grid_n: int) -> str:
    """Describe a region as grid-snapped corner coordinates.

    Corners snap outward to an S/grid_n-pixel grid, so the snapped
    rectangle always contains the true region.
    """
    size = mask.shape[0]
    step = size // grid_n
    r0, c0, r1, c1 = region_bounds(mask)
    top = (r0 // step) * step
    left = (c0 // step) * step
    bottom = -(-(r1 + 1) // step) * step
    right = -(-(c1 + 1) // step) * step
    return f"in ({top},{left}) to ({bottom},{right})"


def _erode(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:, :] &= mask[:-1, :]
    out[:-1, :] &= mask[1:, :]
    out[:, 1:] &= mask[:, :-1]
    out[:, :-1] &= mask[:, 1:]
    return out


def region_boundary(mask: np.ndarray, thickness: int = 2) -> np.ndarray:
    """Binary band of `thickness` pixels along the inside of the region edge."""
    m = mask.astype(bool)
    inner = m
    for _ in range(thickness):
        inner = _erode(inner)
    return m & ~inner


def build_variant_input(variant: str, image: np.ndarray, question: str,
                        mask: np.ndarray, grid_n: int = 8):
    """Rewrite (image, question, mask) for one of the baseline variants.

    ours            -> unchanged
    no_mask         -> mask replaced by all-ones (region withheld)
    region_in_text  -> mask all-ones; grid-snapped corners appended to the question
    crop_region     -> pixels outside the region zeroed; mask all-ones
    draw_region     -> 2 px red outline painted on the region edge; mask all-ones
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    ones = np.ones_like(mask)
    if variant == "ours":
        return image, question, mask
    if variant == "no_mask":
        return image, question, ones
    if variant == "region_in_text":
        return image, f"{question} {snap_region_text(mask, grid_n)}", ones
    if variant == "crop_region":
        return image * mask[None].astype(image.dtype), question, ones
    if variant == "draw_region":
        band = region_boundary(mask)
        painted = image.copy()
        painted[:, band] = RED[:, None].astype(image.dtype)
        return painted, question, ones
    raise ValueError(f"unknown variant '{variant}'")


# -- forward pass ---------------------------------------------------------------


def classify(pooled: Tensor, question_vec: Tensor, params: dict[str, Tensor],
             cfg: ModelConfig, *, train: bool = False,
             rng: np.random.Generator | None = None) -> Tensor:
    """MLP head over the concatenated (pooled, question) vector; returns logits."""
    p = cfg.dropout
    joint = T.concat([pooled, question_vec], axis=1)
    hidden = T.relu(T.add(T.matmul(T.dropout(joint, p, rng, train), params["clf.w1"]),
                          params["clf.b1"]))
    return T.add(T.matmul(T.dropout(hidden, p, rng, train), params["clf.w2"]),
                 params["clf.b2"])


def forward_batch(params: dict[str, Tensor], cfg: ModelConfig, q_ids: np.ndarray,
                  features: Tensor, mask_down: np.ndarray, *, train: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Logits for a batch given precomputed image features.

    q_ids: (B, T) padded token ids; features: (B, C, H, W);
    mask_down: (B, H, W) binary at feature resolution.
    """
    question_vec = encode_question(q_ids, params, cfg)
    weights = attention_map(features, question_vec, params, cfg, train=train, rng=rng)
    pooled = masked_pool(weights, features, mask_down)
    return classify(pooled, question_vec, params, cfg, train=train, rng=rng)


@dataclass
class AnswerDistribution:
    probabilities: np.ndarray
    index: int
    answer: str


def predict(image: np.ndarray, question: str, mask: np.ndarray,
            params: dict[str, Tensor], vocab: Vocabulary,
            cfg: ModelConfig) -> AnswerDistribution:
    """Answer one raw (image, question, region) triple in eval mode.

    The configured variant's input rewrite is applied first, so callers
    always pass the untouched inputs.
    """
    if len(vocab.answers) != cfg.n_answers:
        raise ValueError(f"answer set size {len(vocab.answers)} != configured {cfg.n_answers}")
    img, q, m = build_variant_input(cfg.variant, image, question, mask, cfg.grid_n)
    ids = np.asarray([pad_ids(tokenize(q, vocab), cfg.max_question_len)])
    hw = cfg.feature_hw
    with T.no_grad():
        features = encode_image(img[None].astype(cfg.dtype), params, cfg)
        mask_down = downsample_mask(m.astype(np.float64), hw, hw)[None]
        logits = forward_batch(params, cfg, ids, features, mask_down)
        probs = T.softmax(logits, axis=1).data[0]
    idx = int(np.argmax(probs))
    return AnswerDistribution(probs.astype(np.float64), idx, vocab.answers[idx])


# -- model checkpointing --------------------------------------------------------


def save_model(directory, params: dict[str, Tensor], cfg: ModelConfig,
               vocab: Vocabulary, extra: dict | None = None) -> None:
    directory = Path(directory)
    save_checkpoint(directory, params)
    meta = {"model": {k: (list(v) if isinstance(v, tuple) else v)
                      for k, v in vars(cfg).items()},
            "vocab_digest": vocab.digest(),
            "answers": vocab.answers}
    if extra:
        meta.update(extra)
    (directory / "config.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_model(directory, vocab: Vocabulary) -> tuple[dict[str, Tensor], ModelConfig]:
    directory = Path(directory)
    meta = json.loads((directory / "config.json").read_text())
    if meta["vocab_digest"] != vocab.digest():
        raise ValueError("checkpoint was trained with a different vocabulary/answer set")
    cfg = config_from_dict({"model": meta["model"]}).model
    arrays = load_checkpoint(directory)
    params = {}
    for name, arr in arrays.items():
        frozen = name.startswith("ienc.") and cfg.freeze_image_encoder
        params[name] = Tensor(arr, requires_grad=not frozen)
    return params, cfg
