"""Optimization loop: cross-entropy, Adam, plateau LR decay, early stopping.

Training is deterministic given the seed: shuffling, horizontal-flip
augmentation and dropout all draw from one explicitly threaded generator.
When the image encoder is frozen (the default), feature maps are
precomputed once per distinct encoder input and reused every epoch; with
augmentation this means two cached variants per input (original and
flipped). The cache may be shared across seeds because the frozen
encoder is seed-independent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import downsample_mask
from .config import ModelConfig, TrainConfig
from .datagen import rasterize_region
from .encoders import Vocabulary, encode_image, pad_ids, tokenize
from .evaluation import accuracy, roc_auc
from .model import build_variant_input, forward_batch, save_model
from .netpbm import read_ppm
from .optim import Adam
from .tensor import Tensor

PLAIN_VARIANTS = ("ours", "no_mask", "region_in_text")


class NumericsError(RuntimeError):
    """Loss became non-finite; carries the lr, epoch, and batch diagnostics."""

    def __init__(self, epoch: int, batch_index: int, lr: float):
        self.epoch = epoch
        self.batch_index = batch_index
        self.lr = lr
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch_index}, lr {lr:g}")


# -- loss -----------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of integer labels under softmax(logits)."""
    labels = np.asarray(labels)
    bsz, k = logits.shape
    if labels.shape != (bsz,):
        raise T.ShapeError("cross_entropy", f"labels {labels.shape} vs logits {logits.shape}")
    onehot = np.zeros((bsz, k), dtype=logits.dtype)
    onehot[np.arange(bsz), labels] = 1.0
    probs = T.softmax(logits, axis=1)
    picked = T.tsum(T.mul(T.log(probs), Tensor(onehot)), axis=1)
    return T.scale(T.tmean(picked), -1.0)


# -- augmentation ----------------------------------------------------------------


def augment(sample: dict, rng: np.random.Generator, force_flip: bool | None = None) -> dict:
    """Horizontal flip of image and mask together, with probability 0.5.

    The question text is untouched; variant rewrites that depend on the
    region (coordinate tokens) must run after augmentation so they see
    the flipped mask.
    """
    flip = bool(rng.random() < 0.5) if force_flip is None else force_flip
    if not flip:
        return dict(sample)
    out = dict(sample)
    out["image"] = np.ascontiguousarray(sample["image"][..., ::-1])
    out["mask"] = np.ascontiguousarray(sample["mask"][..., ::-1])
    return out


# -- schedules -------------------------------------------------------------------


def lr_on_plateau(val_losses, base_lr: float, factor: float = 0.1, patience: int = 5,
                  min_delta: float = 1e-4, floor: float = 1e-7) -> float:
    """Current learning rate after replaying the validation-loss history.

    The rate is multiplied by `factor` whenever `patience` consecutive
    epochs fail to improve the best loss by more than `min_delta`, and is
    never reduced below `floor`.
    """
    lr = base_lr
    best = np.inf
    since = 0
    for loss in val_losses:
        if loss < best - min_delta:
            best = loss
            since = 0
        else:
            since += 1
            if since >= patience:
                lr = max(lr * factor, floor)
                since = 0
    return lr


def early_stop(val_metrics, patience: int) -> bool:
    """True once the best validation metric is `patience` epochs stale."""
    if not len(val_metrics):
        return False
    best_idx = int(np.argmax(val_metrics))
    since = len(val_metrics) - 1 - best_idx
    return since > 0 and since >= patience


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1

    def write_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for e in range(len(self.train_loss)):
                f.write(json.dumps({"epoch": e, "train_loss": self.train_loss[e],
                                    "val_loss": self.val_loss[e],
                                    "val_metric": self.val_metric[e],
                                    "lr": self.lr[e]}) + "\n")
            f.write(json.dumps({"best_epoch": self.best_epoch,
                                "epochs_run": len(self.train_loss)}) + "\n")


# -- data preparation -------------------------------------------------------------


def build_vocabulary(records: list[dict], model_cfg: ModelConfig,
                     data_root) -> Vocabulary:
    """Vocabulary from the training split as the configured variant sees it.

    For region_in_text this includes the coordinate tokens of both the
    original and the flipped region, so augmentation never produces
    unknown tokens.
    """
    questions = []
    for rec in records:
        questions.append(rec["question"])
        if model_cfg.variant == "region_in_text":
            mask = _record_mask(rec, data_root, model_cfg.image_size)
            for m in (mask, mask[:, ::-1]):
                _, q, _ = build_variant_input("region_in_text",
                                              np.zeros((3, 1, 1)), rec["question"], m,
                                              model_cfg.grid_n)
                questions.append(q)
    return Vocabulary.build(questions, ["no", "yes"])


def _record_mask(rec: dict, data_root, size: int) -> np.ndarray:
    if "region" in rec:
        return rasterize_region(rec["region"], size)
    from .netpbm import read_pgm
    return (read_pgm(Path(data_root) / rec["mask"]) > 127).astype(np.uint8)


def load_images(records: list[dict], data_root, dtype) -> dict[int, np.ndarray]:
    images = {}
    for rec in records:
        if rec["image_id"] not in images:
            images[rec["image_id"]] = (read_ppm(Path(data_root) / rec["image"])
                                       .astype(dtype) / 255.0)
    return images


@dataclass
class Prepared:
    """Per-record tensors for fast batching, one slot per flip state."""

    q_ids: np.ndarray        # (N, F, T) int32
    mask_down: np.ndarray    # (N, F, H, W)
    labels: np.ndarray       # (N,)
    feat_keys: list          # (N, F) nested lists of feature-store keys
    feat_inputs: dict        # key -> (3, S, S) encoder input (until encoded)
    n_flips: int


def _record_uid(rec: dict) -> str:
    """Stable identity of a record's region, unique across splits."""
    if rec.get("mask"):
        return str(rec["mask"])
    return json.dumps(rec.get("region", {}), sort_keys=True)


def prepare(records: list[dict], vocab: Vocabulary, cfg: ModelConfig,
            images: dict[int, np.ndarray], data_root, with_flips: bool) -> Prepared:
    n = len(records)
    flips = (False, True) if with_flips else (False,)
    hw = cfg.feature_hw
    q_ids = np.zeros((n, len(flips), cfg.max_question_len), dtype=np.int32)
    mask_down = np.zeros((n, len(flips), hw, hw), dtype=cfg.dtype)
    labels = np.zeros(n, dtype=np.int64)
    feat_keys: list[list] = []
    feat_inputs: dict = {}
    plain = cfg.variant in PLAIN_VARIANTS
    for i, rec in enumerate(records):
        labels[i] = vocab.answer_to_index[rec["answer"]]
        image = images[rec["image_id"]]
        mask = _record_mask(rec, data_root, cfg.image_size)
        keys = []
        for f, flip in enumerate(flips):
            img_f = image[..., ::-1] if flip else image
            mask_f = mask[..., ::-1] if flip else mask
            img_v, q_v, mask_v = build_variant_input(cfg.variant, img_f, rec["question"],
                                                     mask_f, cfg.grid_n)
            q_ids[i, f] = pad_ids(tokenize(q_v, vocab), cfg.max_question_len)
            mask_down[i, f] = downsample_mask(mask_v.astype(np.float64), hw, hw)
            # Plain variants feed the untouched image, so features are shared
            # per image; crop/draw inputs depend on the record's region too.
            if plain:
                key = (rec["image_id"], flip)
            else:
                key = (rec["image_id"], flip, cfg.variant, _record_uid(rec))
            if key not in feat_inputs:
                feat_inputs[key] = np.ascontiguousarray(img_v.astype(cfg.dtype))
            keys.append(key)
        feat_keys.append(keys)
    return Prepared(q_ids, mask_down, labels, feat_keys, feat_inputs, len(flips))


def encode_features(feat_inputs: dict, params: dict[str, Tensor], cfg: ModelConfig,
                    store: dict | None = None, batch: int = 64) -> dict:
    """Run the (frozen) encoder over every pending input; returns key -> array."""
    store = store if store is not None else {}
    pending = [k for k in feat_inputs if k not in store]
    with T.no_grad():
        for start in range(0, len(pending), batch):
            keys = pending[start:start + batch]
            stack = np.stack([feat_inputs[k] for k in keys])
            feats = encode_image(stack, params, cfg).data
            for j, k in enumerate(keys):
                store[k] = feats[j]
    return store


# -- scoring (shared by validation and test evaluation) ---------------------------


def score_records(params: dict[str, Tensor], vocab: Vocabulary, cfg: ModelConfig,
                  records: list[dict], data_root, feature_store: dict | None = None,
                  batch: int = 64) -> np.ndarray:
    """Eval-mode answer probabilities for every record; shape (N, n_answers)."""
    images = load_images(records, data_root, cfg.dtype)
    prep = prepare(records, vocab, cfg, images, data_root, with_flips=False)
    if cfg.freeze_image_encoder:
        store = encode_features(prep.feat_inputs, params, cfg, feature_store)
    probs = np.zeros((len(records), cfg.n_answers))
    with T.no_grad():
        for start in range(0, len(records), batch):
            idx = np.arange(start, min(start + batch, len(records)))
            if cfg.freeze_image_encoder:
                feats = Tensor(np.stack([store[prep.feat_keys[i][0]] for i in idx]))
            else:
                feats = encode_image(np.stack([prep.feat_inputs[prep.feat_keys[i][0]]
                                               for i in idx]), params, cfg)
            logits = forward_batch(params, cfg, prep.q_ids[idx, 0],
                                   feats, prep.mask_down[idx, 0])
            probs[idx] = T.softmax(logits, axis=1).data
    return probs


def _metric(probs: np.ndarray, labels: np.ndarray, kind: str, yes_index: int) -> float:
    predictions = probs.argmax(axis=1)
    if kind == "accuracy" or len(np.unique(labels)) < 2:
        return accuracy(predictions, labels)
    return roc_auc(probs[:, yes_index], (labels == yes_index).astype(int))


# -- the loop ---------------------------------------------------------------------


def train(params: dict[str, Tensor], vocab: Vocabulary, model_cfg: ModelConfig,
          train_cfg: TrainConfig, train_records: list[dict], val_records: list[dict],
          data_root, run_dir=None, feature_store: dict | None = None,
          log=None) -> tuple[dict[str, np.ndarray], History]:
    """Optimize `params` in place; returns (best parameter arrays, history).

    The checkpoint criterion is the validation selection metric; LR decay
    watches validation loss. `feature_store` (optional, frozen encoder
    only) lets callers reuse encoder outputs across seeds.
    """
    if not train_records or not val_records:
        raise ValueError("train and validation manifests must be nonempty")
    model_cfg.validate()
    train_cfg.validate()
    rng = np.random.default_rng(train_cfg.seed)
    dtype = np.dtype(model_cfg.dtype)

    images = load_images(train_records, data_root, dtype)
    prep = prepare(train_records, vocab, model_cfg, images, data_root,
                   with_flips=train_cfg.augment)
    frozen = model_cfg.freeze_image_encoder
    if frozen:
        store = encode_features(prep.feat_inputs, params, model_cfg, feature_store)

    val_images = load_images(val_records, data_root, dtype)
    val_prep = prepare(val_records, vocab, model_cfg, val_images, data_root, with_flips=False)
    if frozen:
        encode_features(val_prep.feat_inputs, params, model_cfg, store)
    val_labels = val_prep.labels
    yes_index = vocab.answer_to_index["yes"]

    optimizer = Adam(params, lr=train_cfg.lr)
    history = History()
    n = len(train_records)
    best_metric = -np.inf
    best_params: dict[str, np.ndarray] = {k: p.data.copy() for k, p in params.items()}

    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for batch_idx, start in enumerate(range(0, n, train_cfg.batch_size)):
            idx = order[start:start + train_cfg.batch_size]
            if train_cfg.augment:
                flip = (rng.random(idx.size) < 0.5).astype(int)
            else:
                flip = np.zeros(idx.size, dtype=int)
            q_ids = prep.q_ids[idx, flip]
            mask_down = prep.mask_down[idx, flip]
            labels = prep.labels[idx]
            if frozen:
                feats = Tensor(np.stack([store[prep.feat_keys[i][f]]
                                         for i, f in zip(idx, flip)]))
            else:
                feats = encode_image(np.stack([prep.feat_inputs[prep.feat_keys[i][f]]
                                               for i, f in zip(idx, flip)]),
                                     params, model_cfg)
            logits = forward_batch(params, model_cfg, q_ids, feats, mask_down,
                                   train=True, rng=rng)
            loss = cross_entropy(logits, labels)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise NumericsError(epoch, batch_idx, optimizer.lr)
            loss.backward()
            optimizer.step()
            epoch_loss += loss_value * idx.size

        val_probs = _score_prepared(params, model_cfg, val_prep,
                                    store if frozen else None)
        val_loss = _nll(val_probs, val_labels)
        val_metric = _metric(val_probs, val_labels, train_cfg.selection_metric, yes_index)

        history.train_loss.append(epoch_loss / n)
        history.val_loss.append(float(val_loss))
        history.val_metric.append(float(val_metric))
        if val_metric > best_metric:
            best_metric = val_metric
            history.best_epoch = epoch
            best_params = {k: p.data.copy() for k, p in params.items()}
        optimizer.lr = lr_on_plateau(history.val_loss, train_cfg.lr,
                                     train_cfg.plateau_factor, train_cfg.plateau_patience,
                                     train_cfg.plateau_min_delta, train_cfg.lr_floor)
        history.lr.append(optimizer.lr)
        if log:
            log(f"epoch {epoch:3d}  train {history.train_loss[-1]:.4f}  "
                f"val {val_loss:.4f}  metric {val_metric:.4f}  lr {optimizer.lr:g}")
        if early_stop(history.val_metric, train_cfg.early_stop_patience):
            break

    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        best_tensors = {k: Tensor(v, requires_grad=params[k].requires_grad)
                        for k, v in best_params.items()}
        save_model(run_dir / "checkpoint", best_tensors, model_cfg, vocab,
                   extra={"variant": model_cfg.variant, "seed": train_cfg.seed,
                          "best_epoch": history.best_epoch})
        history.write_jsonl(run_dir / "history.jsonl")
    return best_params, history


def _score_prepared(params, cfg, prep: Prepared, store, batch: int = 128) -> np.ndarray:
    n = prep.labels.size
    probs = np.zeros((n, cfg.n_answers))
    with T.no_grad():
        for start in range(0, n, batch):
            idx = np.arange(start, min(start + batch, n))
            if store is not None:
                feats = Tensor(np.stack([store[prep.feat_keys[i][0]] for i in idx]))
            else:
                feats = encode_image(np.stack([prep.feat_inputs[prep.feat_keys[i][0]]
                                               for i in idx]), params, cfg)
            logits = forward_batch(params, cfg, prep.q_ids[idx, 0], feats,
                                   prep.mask_down[idx, 0])
            probs[idx] = T.softmax(logits, axis=1).data
    return probs


def _nll(probs: np.ndarray, labels: np.ndarray) -> float:
    picked = probs[np.arange(labels.size), labels]
    return float(-np.mean(np.log(np.maximum(picked, 1e-12))))
