"""Scikit-learn style wrapper around the spotter pipeline.

``fit`` trains on a list of annotated samples (any mix of supervision
kinds), ``predict`` spots text in raw images, ``transform`` exposes the
decoded per-query embeddings as features. Hyperparameters follow the sklearn
constructor convention so ``get_params`` / ``set_params`` and cloning work.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from textspot.engine import TrainConfig, evaluate, train
from textspot.synth import KINDS, SceneSample


def validate_image(image):
    """Check one image: 2-D, finite, values in [0, 1], sides multiples of 32."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("image contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError(f"image values outside [0, 1]: [{arr.min():.3g}, {arr.max():.3g}]")
    h, w = arr.shape
    if h % 32 or w % 32 or h < 32 or w < 32:
        raise ValueError(f"image sides must be multiples of 32, got {h}x{w}")
    return arr


def validate_samples(X):
    """Check a training set: annotated samples with valid images and kinds."""
    samples = list(X)
    if not samples:
        raise ValueError("training set is empty")
    for i, s in enumerate(samples):
        if not isinstance(s, SceneSample):
            raise ValueError(f"X[{i}] is {type(s).__name__}, expected SceneSample")
        if s.kind not in KINDS:
            raise ValueError(f"X[{i}] has unknown kind {s.kind!r}")
        if not s.instances:
            raise ValueError(f"X[{i}] has no instances")
        validate_image(s.image)
    return samples


class TextSpotter(BaseEstimator):
    """End-to-end text spotter with a fit/transform/predict surface.

    The supervision mix is inferred from the kinds present in the training
    set; each sample keeps its own annotation richness.
    """

    def __init__(self, d=64, num_queries=8, num_char_queries=8, encoder_layers=2,
                 decoder_layers=2, recognizer_layers=2, heads=4,
                 charset_symbols="ABCEHKLTUY0", masked_attention=True,
                 score_thresh=0.5, learning_rate=1e-3, weight_decay=0.05,
                 poly_power=0.9, max_iterations=200, batch_size=4,
                 lambda_mask=5.0, lambda_rec=1.0, focal_alpha=0.25,
                 focal_gamma=2.0, checkpoint_interval=500, seed=0):
        self.d = d
        self.num_queries = num_queries
        self.num_char_queries = num_char_queries
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.recognizer_layers = recognizer_layers
        self.heads = heads
        self.charset_symbols = charset_symbols
        self.masked_attention = masked_attention
        self.score_thresh = score_thresh
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.poly_power = poly_power
        self.max_iterations = max_iterations
        self.batch_size = batch_size
        self.lambda_mask = lambda_mask
        self.lambda_rec = lambda_rec
        self.focal_alpha = focal_alpha
        self.focal_gamma = focal_gamma
        self.checkpoint_interval = checkpoint_interval
        self.seed = seed

    def _config(self, mix_ratios):
        return TrainConfig(
            d=self.d,
            num_queries=self.num_queries,
            num_char_queries=self.num_char_queries,
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers,
            recognizer_layers=self.recognizer_layers,
            heads=self.heads,
            charset_symbols=self.charset_symbols,
            masked_attention=self.masked_attention,
            score_thresh=self.score_thresh,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            poly_power=self.poly_power,
            max_iterations=self.max_iterations,
            batch_size=self.batch_size,
            lambda_mask=self.lambda_mask,
            lambda_rec=self.lambda_rec,
            focal_alpha=self.focal_alpha,
            focal_gamma=self.focal_gamma,
            checkpoint_interval=self.checkpoint_interval,
            seed=self.seed,
            mix_ratios=mix_ratios,
        )

    def fit(self, X, y=None):
        """Train on annotated samples; ``y`` is ignored (labels live in X)."""
        samples = validate_samples(X)
        datasets = {}
        for s in samples:
            datasets.setdefault(s.kind, []).append(s)
        counts = np.array([len(datasets.get(k, [])) for k in KINDS], dtype=np.float64)
        config = self._config(mix_ratios=tuple(counts / counts.sum()))
        self.model_, self.optimizer_ = train(config, datasets=datasets, log_fn=None)
        self.config_ = config
        self.n_iter_ = config.max_iterations
        return self

    def predict(self, X):
        """List of images -> list of per-image instance lists."""
        self._check_fitted()
        return [self.model_.spot(validate_image(img)) for img in X]

    def transform(self, X):
        """List of images -> (n_images, num_queries, d) decoded query embeddings."""
        self._check_fitted()
        rows = [self.model_.forward(validate_image(img)).text_embed.data for img in X]
        return np.stack(rows)

    def score(self, X, y=None):
        """Detection f-measure over fully annotated samples."""
        self._check_fitted()
        samples = validate_samples(X)
        return evaluate(self.model_, samples).det_f

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("this TextSpotter instance is not fitted yet; call fit first")
