"""Training loops for both networks, plus fine-tuning and composed inference."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import ops
from .bridge import BridgeConfig, apply_bridge, predict_masks, segment_and_blend
from .dataprep import AugmentConfig, ImageSample, augment
from .effnet import EffNetModel, effnet_forward
from .metrics import EvalReport, dice, iou, pixel_accuracy, roc_auc
from .optim import Adam
from .tensor import Tensor, no_grad
from .unet import UNetModel, binarize_mask, unet_forward

log = logging.getLogger(__name__)

FINE_TUNE_PRESET_SIZE = 140
AUGMENT_MODES = ("none", "flagged", "all")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    shuffle: bool = True
    l2_lambda: float = 0.0
    augment: Optional[AugmentConfig] = None
    augment_mode: str = "flagged"
    split: str = "70-15-15"
    preset: str = "custom"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if self.augment_mode not in AUGMENT_MODES:
            raise ValueError(f"augment_mode must be one of {AUGMENT_MODES}")

    @classmethod
    def seg_paper(cls, **kw) -> "TrainConfig":
        return cls(**{"lr": 1e-3, "batch_size": 32, "epochs": 10, "preset": "paper", **kw})

    @classmethod
    def seg_desk(cls, **kw) -> "TrainConfig":
        return cls(**{"lr": 1e-3, "batch_size": 16, "epochs": 40, "preset": "desk", **kw})

    @classmethod
    def cls_paper(cls, **kw) -> "TrainConfig":
        return cls(**{"lr": 1e-3, "batch_size": 15, "epochs": 50, "l2_lambda": 1e-4, "shuffle": True,
                      "augment": AugmentConfig(), "split": "80-20", "preset": "paper", **kw})

    @classmethod
    def cls_desk(cls, **kw) -> "TrainConfig":
        return cls(**{"lr": 1e-3, "batch_size": 16, "epochs": 30, "l2_lambda": 1e-4, "shuffle": True,
                      "augment": AugmentConfig(), "preset": "desk", **kw})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = asdict(self.augment) if self.augment is not None else None
        return d


@dataclass
class History:
    records: List[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def train_loss(self) -> List[float]:
        return [r["train_loss"] for r in self.records]

    def to_dict(self) -> dict:
        return {"records": self.records, "meta": self.meta}

    def write_csv(self, path) -> None:
        """Columns ``epoch, train_loss, val_metric`` (Dice for segmentation, accuracy for classification)."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_metric"])
            for r in self.records:
                val = r.get("val_metric")
                w.writerow([r["epoch"], repr(r["train_loss"]), "" if val is None else repr(val)])


def _nchw(images: Sequence[np.ndarray]) -> np.ndarray:
    return np.ascontiguousarray(np.stack(images).astype(np.float32).transpose(0, 3, 1, 2))


def _batches(n: int, batch_size: int, rng: Optional[np.random.Generator]):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _snapshot(model) -> Dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_dict().items()}


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------


def evaluate_segmentation(model: UNetModel, samples: Sequence[ImageSample], batch_size: int = 16,
                          pixel_roc: bool = False) -> dict:
    """Mean BCE, pixel accuracy, Dice and IoU in inference mode, pooled over all pixels.

    With ``pixel_roc`` the result also holds ``pixel_roc_points`` and
    ``pixel_auc``, treating every pixel as one scored example (``None`` when
    the masks contain a single class).
    """
    was_training = model.training
    model.eval()
    x = np.stack([s.pixels for s in samples]).astype(np.float32)
    y = np.stack([s.mask for s in samples]).astype(np.float32)
    soft = predict_masks(model, x, batch_size)
    model.train(was_training)
    with no_grad():
        loss = ops.bce_loss(Tensor(soft), y).item()
    out = {"loss": loss, "pixel_accuracy": pixel_accuracy(soft, y), "dice": dice(soft, y), "iou": iou(soft, y),
           "soft": soft}
    if pixel_roc:
        try:
            out["pixel_roc_points"], out["pixel_auc"] = roc_auc(soft.ravel(), (y.ravel() >= 0.5).astype(int))
        except ValueError:
            out["pixel_roc_points"], out["pixel_auc"] = [], None
    return out


def train_segmentation(model: UNetModel, train_set: Sequence[ImageSample], val_set: Sequence[ImageSample],
                       cfg: TrainConfig):
    """Minibatch Adam on pixelwise BCE against ground-truth masks.

    Keeps the weights with the lowest validation loss (the last epoch when
    ``val_set`` is empty).

    Returns:
        ``(model, history)``; the model is trained in place and left in eval mode.
    """
    for s in list(train_set) + list(val_set):
        if s.mask is None:
            raise ValueError(f"sample {s.id!r} has no mask")
    x = _nchw([s.pixels for s in train_set])
    y = np.stack([s.mask for s in train_set]).astype(np.float32)[:, None]
    opt = Adam(model.parameters(), lr=cfg.lr)
    model.reseed_dropout([cfg.seed, 1])
    history = History(meta={"task": "segmentation", "train_config": cfg.to_dict(), "n_train": len(train_set),
                            "n_val": len(val_set)})
    best, best_loss = None, np.inf
    for epoch in range(cfg.epochs):
        model.train()
        rng = np.random.default_rng([cfg.seed, epoch]) if cfg.shuffle else None
        total = 0.0
        for idx in _batches(len(x), cfg.batch_size, rng):
            out = unet_forward(model, Tensor(x[idx]))
            loss = ops.bce_loss(out, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        record = {"epoch": epoch + 1, "train_loss": total / len(x)}
        if val_set:
            ev = evaluate_segmentation(model, val_set)
            record.update(val_loss=ev["loss"], val_pixel_accuracy=ev["pixel_accuracy"], val_dice=ev["dice"],
                          val_metric=ev["dice"])
            if ev["loss"] < best_loss:
                best_loss, best = ev["loss"], _snapshot(model)
        history.records.append(record)
        log.info("seg epoch %d: %s", epoch + 1, record)
    if best is not None:
        model.load_state_dict(best)
        history.meta["best_val_loss"] = best_loss
    model.eval()
    return model, history


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------


class _InputBuilder:
    """Produces classifier inputs, caching blended images for unaugmented samples."""

    def __init__(self, samples, seg_model, bridge_cfg, cfg: Optional[TrainConfig]):
        self.samples = list(samples)
        self.seg_model = seg_model
        self.bridge_cfg = bridge_cfg or BridgeConfig()
        self.cfg = cfg
        self._cache: Dict[int, np.ndarray] = {}

    def _should_augment(self, s: ImageSample) -> bool:
        cfg = self.cfg
        if cfg is None or cfg.augment is None or cfg.augment_mode == "none":
            return False
        return cfg.augment_mode == "all" or s.augment

    def _base(self, indices) -> None:
        todo = [i for i in indices if i not in self._cache]
        if not todo:
            return
        images = np.stack([self.samples[i].pixels for i in todo]).astype(np.float32)
        if self.seg_model is not None:
            images = segment_and_blend(self.seg_model, images, self.bridge_cfg)
        for i, img in zip(todo, images):
            self._cache[i] = img

    def build(self, indices, epoch: int = 0) -> np.ndarray:
        plain = [i for i in indices if not self._should_augment(self.samples[i])]
        self._base(plain)
        out = {i: self._cache[i] for i in plain}
        aug = [i for i in indices if i not in out]
        if aug:
            images = np.stack([augment(self.samples[i], self.cfg.augment, epoch=epoch).pixels for i in aug])
            if self.seg_model is not None:
                images = segment_and_blend(self.seg_model, images, self.bridge_cfg)
            out.update(zip(aug, images))
        return _nchw([out[i] for i in indices])


def predict_probabilities(cls_model: EffNetModel, samples: Sequence[ImageSample],
                          seg_model: Optional[UNetModel] = None, bridge_cfg: Optional[BridgeConfig] = None,
                          batch_size: int = 16) -> np.ndarray:
    """Melanoma probabilities for ``samples`` in inference mode (bridge applied when ``seg_model`` given)."""
    was_training = cls_model.training
    cls_model.eval()
    builder = _InputBuilder(samples, seg_model, bridge_cfg, None)
    probs = []
    with no_grad():
        for start in range(0, len(samples), batch_size):
            idx = list(range(start, min(start + batch_size, len(samples))))
            probs.append(effnet_forward(cls_model, Tensor(builder.build(idx))).data[:, 0])
    cls_model.train(was_training)
    return np.concatenate(probs).astype(np.float64) if probs else np.zeros(0)


def _check_frozen(seg_model) -> None:
    if seg_model is not None and seg_model.training:
        raise ValueError("segmentation model must be frozen (call .eval()) before use in the bridge")


def _bridge_meta(seg_model, bridge_cfg: Optional[BridgeConfig]) -> dict:
    if seg_model is None:
        return {"bridge": "off"}
    bc = bridge_cfg or BridgeConfig()
    return {"bridge": f"on, alpha={bc.alpha:g}", "bridge_config": bc.to_dict()}


def train_classification(cls_model: EffNetModel, seg_model: Optional[UNetModel], train_set: Sequence[ImageSample],
                         val_set: Sequence[ImageSample], cfg: TrainConfig,
                         bridge_cfg: Optional[BridgeConfig] = None, _meta: Optional[dict] = None):
    """Train the classifier, optionally on bridge-blended inputs from a frozen U-Net.

    Per batch: augment (training only) -> blend -> forward -> BCE + L2 ->
    backward -> Adam. The L2 term covers conv and dense weights only. Keeps
    the weights with the lowest validation loss.

    Returns:
        ``(model, history)``; the model is trained in place and left in eval mode.
    """
    for s in list(train_set) + list(val_set):
        if s.label is None:
            raise ValueError(f"sample {s.id!r} has no label")
    _check_frozen(seg_model)
    y = np.array([[s.label] for s in train_set], dtype=np.float32)
    params = cls_model.trainable_parameters()
    decay = [p for p in params if p.decay]
    opt = Adam(params, lr=cfg.lr)
    cls_model.reseed_dropout([cfg.seed, 2])
    builder = _InputBuilder(train_set, seg_model, bridge_cfg, cfg)
    history = History(meta={"task": "classification", "train_config": cfg.to_dict(), "n_train": len(train_set),
                            "n_val": len(val_set), "preset": cls_model.config.preset,
                            **_bridge_meta(seg_model, bridge_cfg), **(_meta or {})})
    val_labels = np.array([s.label for s in val_set])
    best, best_loss = None, np.inf
    step = 0
    for epoch in range(cfg.epochs):
        cls_model.train()
        rng = np.random.default_rng([cfg.seed, epoch]) if cfg.shuffle else None
        total = 0.0
        for idx in _batches(len(train_set), cfg.batch_size, rng):
            xb = builder.build(list(idx), epoch)
            out = effnet_forward(cls_model, Tensor(xb))
            loss = ops.bce_loss(out, y[idx])
            if cfg.l2_lambda > 0 and decay:
                loss = loss + ops.l2_penalty(decay, cfg.l2_lambda)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            step += 1
        record = {"epoch": epoch + 1, "train_loss": total / len(train_set), "steps": step}
        if len(val_set):
            probs = predict_probabilities(cls_model, val_set, seg_model, bridge_cfg)
            with no_grad():
                vloss = ops.bce_loss(Tensor(probs.reshape(-1, 1)), val_labels.reshape(-1, 1)).item()
            vacc = float(np.mean((probs >= 0.5) == (val_labels == 1)))
            record.update(val_loss=vloss, val_accuracy=vacc, val_metric=vacc)
            if vloss < best_loss:
                best_loss, best = vloss, _snapshot(cls_model)
        history.records.append(record)
        log.info("cls epoch %d: %s", epoch + 1, record)
    if best is not None:
        cls_model.load_state_dict(best)
        history.meta["best_val_loss"] = best_loss
    cls_model.eval()
    return cls_model, history


def fine_tune(model: EffNetModel, small_set: Sequence[ImageSample], cfg: TrainConfig, epochs: int = 5,
              lr_scale: float = 0.1, seg_model: Optional[UNetModel] = None,
              bridge_cfg: Optional[BridgeConfig] = None, val_set: Sequence[ImageSample] = ()):
    """Continue training a copy of ``model`` on a small set with a reduced learning rate.

    The input model is never modified. ``epochs=0`` returns an untouched copy.

    Returns:
        ``(tuned_model, history)``.
    """
    if not small_set:
        raise ValueError("fine-tuning set is empty")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    tuned = copy.deepcopy(model)
    meta = {"fine_tune": True, "fine_tune_size": len(small_set), "fine_tune_preset_size": FINE_TUNE_PRESET_SIZE,
            "lr_scale": lr_scale}
    if epochs == 0:
        tuned.eval()
        return tuned, History(meta=meta)
    tuned_cfg = replace(cfg, epochs=epochs, lr=cfg.lr * lr_scale)
    return train_classification(tuned, seg_model, small_set, val_set, tuned_cfg, bridge_cfg, _meta=meta)


# ---------------------------------------------------------------------------
# evaluation / inference
# ---------------------------------------------------------------------------


def evaluate_classifier(cls_model: EffNetModel, samples: Sequence[ImageSample], seg_model: Optional[UNetModel] = None,
                        bridge_cfg: Optional[BridgeConfig] = None, threshold: float = 0.5,
                        split: str = "all") -> EvalReport:
    _check_frozen(seg_model)
    probs = predict_probabilities(cls_model, samples, seg_model, bridge_cfg)
    labels = [s.label for s in samples]
    config = {"threshold": threshold, "preset": cls_model.config.preset, **_bridge_meta(seg_model, bridge_cfg)}
    if seg_model is not None:
        bc = bridge_cfg or BridgeConfig()
        config.update(alpha=bc.alpha, mask_mode=bc.mask_mode)
    return EvalReport.from_predictions(probs, labels, threshold, split=split, config=config)


def predict_pipeline(seg_model: UNetModel, cls_model: EffNetModel, image: np.ndarray,
                     bridge_cfg: Optional[BridgeConfig] = None, threshold: float = 0.5) -> dict:
    """Segment, blend and classify one H x W x 3 image."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    if seg_model.training or cls_model.training:
        raise ValueError("both models must be frozen (eval mode)")
    bridge_cfg = bridge_cfg or BridgeConfig()
    image = np.asarray(image, dtype=np.float32)
    soft = predict_masks(seg_model, image[None])[0]
    blended = apply_bridge(image, soft, bridge_cfg)
    with no_grad():
        prob = float(effnet_forward(cls_model, Tensor(_nchw([blended]))).data[0, 0])
    return {
        "soft_mask": soft,
        "binary_mask": binarize_mask(soft, bridge_cfg.threshold),
        "blended": blended,
        "probability": prob,
        "label": int(prob >= threshold),
    }
