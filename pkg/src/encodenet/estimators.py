"""scikit-learn style estimators over the pipeline building blocks.

Images are ``N x C x H x W`` (or ``N x H x W`` for one channel) arrays
with values in [0, 1]. Labels may be any hashable values; they are mapped
to ``classes_`` indices internally.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .clustering import cluster_all_classes, embed_features
from .datasets import DataSplit, LabeledImageSet
from .entropy import build_conversion_pairs, identity_pairs, score_dataset, select_representatives
from .errors import ConfigError
from .model_ir import ModelSpec, dense, parse_model_spec
from .network import Network
from .pipeline import assemble_encodenet, cae_spec_for
from .specs import builtin_spec_names, load_builtin_spec
from .trainer import TrainConfig, predict_proba, train_autoencoder, train_classifier


def check_images(X, spec=None):
    """Validate an image batch; returns float32 ``N x C x H x W``."""
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_min_samples=1)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected N x C x H x W images, got shape {X.shape}")
    if X.min() < 0 or X.max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    if spec is not None and tuple(X.shape[1:]) != tuple(spec.input_shape):
        raise ValueError(f"images are {X.shape[1:]} but the model expects {tuple(spec.input_shape)}")
    return X


def resolve_spec(spec, n_classes=None):
    """ModelSpec from a builtin name, spec text, or ModelSpec; the final dense is resized to ``n_classes``."""
    if isinstance(spec, ModelSpec):
        out = spec.validate()
    elif isinstance(spec, str) and spec in builtin_spec_names():
        out = load_builtin_spec(spec)
    elif isinstance(spec, str):
        out = parse_model_spec(spec)
    else:
        raise ConfigError(f"cannot interpret {type(spec).__name__} as a model spec")
    if n_classes is not None:
        layers = list(out.layers)
        last = max(i for i, lyr in enumerate(layers) if lyr.kind == "dense")
        layers[last] = dense(n_classes)
        out = out.with_layers(layers).validate()
    return out


def _train_cfg(est, prefix):
    return TrainConfig(
        epochs=getattr(est, f"{prefix}epochs"),
        batch_size=est.batch_size,
        optimizer=getattr(est, f"{prefix}optimizer"),
        lr=getattr(est, f"{prefix}lr"),
        weight_decay=getattr(est, f"{prefix}weight_decay"),
        schedule=getattr(est, f"{prefix}schedule"),
        seed=est.random_state,
    )


def _as_set(X, y_idx, n_classes):
    return LabeledImageSet(X, y_idx, n_classes)


class ConvNetClassifier(ClassifierMixin, BaseEstimator):
    """Convolutional classifier defined by a model spec, trained with cross-entropy."""

    def __init__(self, spec="vgg8_mini", epochs=40, batch_size=32, optimizer="sgd", lr=0.1, weight_decay=1e-4,
                 schedule="cosine", random_state=0):
        self.spec = spec
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr = lr
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32)
        self.classes_ = unique_labels(y)
        y_idx = np.searchsorted(self.classes_, y)
        spec = resolve_spec(self.spec, len(self.classes_))
        X = check_images(X, spec)
        data = _as_set(X, y_idx, len(self.classes_))
        self.network_, self.record_ = train_classifier(spec, DataSplit(data, data), _train_cfg(self, ""),
                                                       stage="baseline")
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        return predict_proba(self.network_, check_images(X, self.network_.spec))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]

    def embed(self, X):
        """Pooled feature-extractor vectors, as used for clustering."""
        check_is_fitted(self, "network_")
        return embed_features(self.network_, check_images(X, self.network_.spec)).vectors


class ConvertingAutoencoder(TransformerMixin, BaseEstimator):
    """Learns to map each image to its class/cluster representative.

    ``baseline`` is a fitted :class:`ConvNetClassifier`; when None one is
    fitted first with default settings. ``transform`` returns converted
    images.
    """

    def __init__(self, baseline=None, spec="vgg8_mini", n_clusters=3, target_mode="representative_clustered",
                 cae_epochs=60, batch_size=32, cae_optimizer="adam", cae_lr=1e-3, cae_weight_decay=0.0,
                 cae_schedule="constant", holdout_fraction=0.1, random_state=0):
        self.baseline = baseline
        self.spec = spec
        self.n_clusters = n_clusters
        self.target_mode = target_mode
        self.cae_epochs = cae_epochs
        self.batch_size = batch_size
        self.cae_optimizer = cae_optimizer
        self.cae_lr = cae_lr
        self.cae_weight_decay = cae_weight_decay
        self.cae_schedule = cae_schedule
        self.holdout_fraction = holdout_fraction
        self.random_state = random_state

    def fit(self, X, y):
        base = self.baseline
        if base is None:
            base = ConvNetClassifier(self.spec, random_state=self.random_state).fit(X, y)
        check_is_fitted(base, "network_")
        X = check_images(X, base.network_.spec)
        y_idx = np.searchsorted(base.classes_, np.asarray(y))
        data = _as_set(X, y_idx, len(base.classes_))
        if self.target_mode == "same_image":
            pairs = identity_pairs(data)
            self.cluster_assignments_ = np.zeros(len(data), dtype=np.int64)
            self.representatives_ = None
        else:
            k = 1 if self.target_mode == "representative_unclustered" else self.n_clusters
            if self.target_mode not in ("representative_clustered", "representative_unclustered"):
                raise ValueError(f"unknown target_mode {self.target_mode!r}")
            feats = embed_features(base.network_, X)
            clusters = cluster_all_classes(feats, y_idx, k=k, seed=self.random_state, num_classes=data.num_classes)
            records = score_dataset(base.network_, data, clusters.assignments)
            self.representatives_ = select_representatives(records)
            self.cluster_assignments_ = clusters.assignments
            pairs = build_conversion_pairs(data, clusters.assignments, self.representatives_)
        spec, n = cae_spec_for(base.network_.spec)
        init = Network(spec, seed=self.random_state)
        init.load_state(base.network_.state(), prefix_layers=n)
        self.baseline_ = base
        self.pairs_ = pairs
        self.split_index_ = n
        self.network_, self.record_ = train_autoencoder(init, pairs, _train_cfg(self, "cae_"),
                                                        holdout_fraction=self.holdout_fraction, stage="cae")
        return self

    def transform(self, X):
        check_is_fitted(self, "network_")
        return self.network_.predict_batches(check_images(X, self.network_.spec))

    def encode(self, X):
        check_is_fitted(self, "network_")
        return self.network_.predict_batches(check_images(X, self.network_.spec), stop=self.split_index_)


class EncodeNetClassifier(ClassifierMixin, BaseEstimator):
    """Baseline -> converting autoencoder -> frozen-encoder classifier, in one ``fit``."""

    def __init__(self, spec="vgg8_mini", n_clusters=3, target_mode="representative_clustered", head_init="scratch",
                 epochs=40, cae_epochs=60, head_epochs=40, batch_size=32, optimizer="sgd", lr=0.1,
                 weight_decay=1e-4, schedule="cosine", cae_optimizer="adam", cae_lr=1e-3, cae_weight_decay=0.0,
                 cae_schedule="constant", head_optimizer="sgd", head_lr=0.1, head_weight_decay=1e-4,
                 head_schedule="cosine", random_state=0):
        self.spec = spec
        self.n_clusters = n_clusters
        self.target_mode = target_mode
        self.head_init = head_init
        self.epochs = epochs
        self.cae_epochs = cae_epochs
        self.head_epochs = head_epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.lr = lr
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.cae_optimizer = cae_optimizer
        self.cae_lr = cae_lr
        self.cae_weight_decay = cae_weight_decay
        self.cae_schedule = cae_schedule
        self.head_optimizer = head_optimizer
        self.head_lr = head_lr
        self.head_weight_decay = head_weight_decay
        self.head_schedule = head_schedule
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float32)
        base = ConvNetClassifier(self.spec, self.epochs, self.batch_size, self.optimizer, self.lr,
                                 self.weight_decay, self.schedule, self.random_state).fit(X, y)
        cae = ConvertingAutoencoder(base, n_clusters=self.n_clusters, target_mode=self.target_mode,
                                    cae_epochs=self.cae_epochs, batch_size=self.batch_size,
                                    cae_optimizer=self.cae_optimizer, cae_lr=self.cae_lr,
                                    cae_weight_decay=self.cae_weight_decay, cae_schedule=self.cae_schedule,
                                    random_state=self.random_state).fit(X, y)
        model = assemble_encodenet(cae.network_, base.network_.spec, self.head_init, base.network_,
                                   seed=self.random_state)
        X = check_images(X, base.network_.spec)
        data = _as_set(X, np.searchsorted(base.classes_, y), len(base.classes_))
        cfg = _train_cfg(self, "head_").replace(frozen_prefix=model.split_index)
        self.network_, self.record_ = train_classifier(model.net, DataSplit(data, data), cfg, stage="head")
        self.classes_ = base.classes_
        self.baseline_ = base
        self.autoencoder_ = cae
        self.split_index_ = model.split_index
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        return predict_proba(self.network_, check_images(X, self.network_.spec))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]


__all__ = ["ConvNetClassifier", "ConvertingAutoencoder", "EncodeNetClassifier", "check_images", "resolve_spec"]
