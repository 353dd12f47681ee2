"""Scikit-learn style front door around the training harness.

``MixedSupervisionDetector`` exposes the usual estimator surface
(``fit`` / ``predict`` / ``score`` / ``get_params`` / ``set_params``) with a
flat hyperparameter list, so the detector drops into sklearn tooling such
as ``clone`` and grid search. ``X`` is a batch of images shaped
(n, H, W, 3) with values in [0, 1]; ``y`` is one annotation record per
image holding integer ``labels`` and center-form normalized ``boxes``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .losses import LossConfig
from .matching import MatcherConfig
from .metrics import class_average_precision
from .model import DecoderVariant, ModelConfig
from .training import TrainConfig, predict_scenes, scene_ground_truths, train
from .validation import check_image_batch, scenes_from_arrays


class MixedSupervisionDetector(BaseEstimator):
    """Set-prediction detector trained with mixed supervision.

    Parameters mirror the training configuration; defaults are the tuned
    operating point (top_k=6, tau=0.4, alpha=0.4, cross-attention-first
    decoder with the internal tap, shared predictor heads).
    """

    def __init__(
        self,
        num_queries: int = 30,
        num_classes: int = 3,
        embed_dim: int = 64,
        num_heads: int = 8,
        num_encoder_layers: int = 2,
        num_decoder_layers: int = 3,
        variant: str = "c",
        share_cls_head: bool = True,
        share_box_head: bool = True,
        supervision: str = "mixed",
        alpha: float = 0.4,
        top_k: int = 6,
        tau: float = 0.4,
        include_o2o: bool = True,
        epochs: int = 20,
        batch_size: int = 8,
        lr: float = 6e-4,
        weight_decay: float = 1e-4,
        grad_clip_norm: float = 0.1,
        seed: int = 0,
        deterministic: bool = True,
    ):
        self.num_queries = num_queries
        self.num_classes = num_classes
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.num_encoder_layers = num_encoder_layers
        self.num_decoder_layers = num_decoder_layers
        self.variant = variant
        self.share_cls_head = share_cls_head
        self.share_box_head = share_box_head
        self.supervision = supervision
        self.alpha = alpha
        self.top_k = top_k
        self.tau = tau
        self.include_o2o = include_o2o
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.grad_clip_norm = grad_clip_norm
        self.seed = seed
        self.deterministic = deterministic

    def _train_config(self, image_size: int) -> TrainConfig:
        model = ModelConfig(
            num_queries=self.num_queries,
            num_classes=self.num_classes,
            embed_dim=self.embed_dim,
            num_heads=self.num_heads,
            num_encoder_layers=self.num_encoder_layers,
            num_decoder_layers=self.num_decoder_layers,
            share_cls_head=self.share_cls_head,
            share_box_head=self.share_box_head,
            variant=DecoderVariant.from_letter(self.variant),
            image_size=image_size,
        )
        matcher = MatcherConfig(
            alpha=self.alpha, top_k=self.top_k, tau=self.tau, include_o2o=self.include_o2o
        )
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            grad_clip_norm=self.grad_clip_norm,
            seed=self.seed,
            supervision=self.supervision,
            model=model,
            matcher=matcher,
            loss=LossConfig(),
            deterministic=self.deterministic,
        )

    def fit(self, X, y) -> "MixedSupervisionDetector":
        images = check_image_batch(X)
        if images.shape[0] == 0:
            raise ValueError("cannot fit on an empty batch")
        if images.shape[1] != images.shape[2]:
            raise ValueError("images must be square")
        scenes = scenes_from_arrays(images, y, self.num_classes)
        config = self._train_config(image_size=int(images.shape[1]))
        result = train(config, scenes, val_scenes=None, run_dir=None)
        self.model_ = result.model
        self.config_ = config
        self.image_size_ = int(images.shape[1])
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError("this MixedSupervisionDetector is not fitted yet")

    def predict(self, X) -> list[dict[str, np.ndarray]]:
        """Per image: the Q candidate detections of the final decoder layer."""
        self._check_fitted()
        scenes = scenes_from_arrays(check_image_batch(X), [([], [])] * len(X), self.num_classes)
        predictions = predict_scenes(self.model_, scenes, batch_size=max(self.batch_size, 1))
        return [{"scores": p.scores, "boxes": p.boxes} for p in predictions]

    def score(self, X, y) -> float:
        """Mean AP at IoU 0.5 over classes with ground truth."""
        self._check_fitted()
        scenes = scenes_from_arrays(check_image_batch(X), y, self.num_classes)
        predictions = predict_scenes(self.model_, scenes, batch_size=max(self.batch_size, 1))
        ground_truths = scene_ground_truths(scenes)
        values = []
        for class_id in range(self.num_classes):
            ap = class_average_precision(predictions, ground_truths, class_id, 0.5)
            if ap is not None:
                values.append(ap)
        if not values:
            raise ValueError("no ground-truth objects to score against")
        return float(np.mean(values))
