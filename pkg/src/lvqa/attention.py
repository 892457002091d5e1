"""Glimpse attention with post-hoc region masking.

The attention map is always computed from the full image feature grid
and the question vector; the region mask enters only afterwards, when
the weighted features are pooled. Masked-out cells therefore still shape
the attention weights (through the shared projections and the softmax
normalization), which is what lets the pooled vector carry context from
outside the queried region.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .tensor import Tensor


def attention_param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    return {
        "attn.img_proj": (cfg.feature_channels, cfg.attn_dim),   # 1x1 conv as matmul over cells
        "attn.txt_proj": (cfg.q_dim, cfg.attn_dim),
        "attn.glimpse_proj": (cfg.attn_dim, cfg.glimpses),
    }


def attention_map(features: Tensor, question_vec: Tensor, params: dict[str, Tensor],
                  cfg: ModelConfig, *, train: bool = False,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Compute glimpse weights from image features and the question vector.

    features: (B, C, H, W); question_vec: (B, Q). Returns (B, G, H, W).
    Each linear transform sees dropout on its input in train mode. With
    softmax_axis == "spatial" every glimpse normalizes to 1 over (H, W);
    with "glimpse" the G values at each cell normalize to 1 instead.
    No mask is involved at any point here.
    """
    bsz, c, h, w = features.shape
    if c != cfg.feature_channels:
        raise T.ShapeError("attention_map", f"feature channels {c} != configured {cfg.feature_channels}")
    if question_vec.shape != (bsz, cfg.q_dim):
        raise T.ShapeError("attention_map",
                           f"question batch {question_vec.shape} incompatible with features {features.shape}")
    p = cfg.dropout
    cells = T.reshape(T.transpose(features, (0, 2, 3, 1)), (bsz * h * w, c))
    img = T.matmul(T.dropout(cells, p, rng, train), params["attn.img_proj"])   # (B*HW, A)
    txt = T.matmul(T.dropout(question_vec, p, rng, train), params["attn.txt_proj"])  # (B, A)
    img = T.reshape(img, (bsz, h * w, cfg.attn_dim))
    txt = T.reshape(txt, (bsz, 1, cfg.attn_dim))
    joint = T.relu(T.mul(img, txt))                                            # (B, HW, A)
    joint = T.reshape(joint, (bsz * h * w, cfg.attn_dim))
    logits = T.matmul(T.dropout(joint, p, rng, train), params["attn.glimpse_proj"])
    logits = T.transpose(T.reshape(logits, (bsz, h * w, cfg.glimpses)), (0, 2, 1))  # (B, G, HW)
    axis = 2 if cfg.softmax_axis == "spatial" else 1
    weights = T.softmax(logits, axis=axis)
    return T.reshape(weights, (bsz, cfg.glimpses, h, w))


def downsample_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Reduce a full-resolution binary mask to the feature grid.

    A cell is 1 iff any covered pixel is 1 (max-pool rule), so arbitrarily
    small regions survive. Accepts (S, S) or a (B, S, S) batch.
    """
    mask = np.asarray(mask)
    single = mask.ndim == 2
    if single:
        mask = mask[None]
    bsz, s_r, s_c = mask.shape
    if s_r % h or s_c % w:
        raise T.ShapeError("downsample_mask", f"mask {s_r}x{s_c} not divisible into {h}x{w} cells")
    kr, kc = s_r // h, s_c // w
    down = mask.reshape(bsz, h, kr, w, kc).max(axis=(2, 4))
    down = (down > 0).astype(mask.dtype if mask.dtype.kind == "f" else np.float64)
    return down[0] if single else down


def masked_pool(weights: Tensor, features: Tensor, mask_down: np.ndarray) -> Tensor:
    """Weight features by glimpse attention, zero masked cells, sum space.

    weights: (B, G, H, W); features: (B, C, H, W); mask_down: (B, H, W)
    binary. Returns (B, G*C) with glimpse-major layout: entry g*C + c is
    sum_hw weights[g] * features[c] * mask[hw].
    """
    bsz, g, h, w = weights.shape
    _, c, fh, fw = features.shape
    if (fh, fw) != (h, w) or features.shape[0] != bsz:
        raise T.ShapeError("masked_pool", f"weights {weights.shape} vs features {features.shape}")
    mask_down = np.asarray(mask_down)
    if mask_down.shape != (bsz, h, w):
        raise T.ShapeError("masked_pool", f"mask {mask_down.shape} != {(bsz, h, w)}")
    masked = T.mul(features, Tensor(mask_down[:, None].astype(features.dtype)))  # (B, C, H, W)
    wexp = T.reshape(weights, (bsz, g, 1, h * w))
    fexp = T.reshape(masked, (bsz, 1, c, h * w))
    pooled = T.tsum(T.mul(wexp, fexp), axis=3)                                   # (B, G, C)
    return T.reshape(pooled, (bsz, g * c))
