"""scikit-learn style front end.

``ERGLClassifier`` consumes log-mel features ``X`` of shape (N, T, 64), scene
labels ``y`` and, at fit time, 527-dim soft pseudo labels.  It composes with
``LogMelExtractor`` in a :class:`sklearn.pipeline.Pipeline`::

    pipe = make_pipeline(LogMelExtractor(), ERGLClassifier(n_events=10))
    pipe.fit(waveforms, scenes, erglclassifier__pseudo_labels=P)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .backbone import N_MELS
from .exceptions import CompatibilityError
from .ranking import EventRanker
from .training import DESK_CHANNELS, Dataset, TrainConfig, predict_outputs, train


def check_features(X, n_mels=N_MELS):
    """Validate a (N, T, n_mels) float array; 2-d input is treated as one clip."""
    X = np.asarray(X, dtype=np.float64 if np.asarray(X).dtype == np.float64 else np.float32)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[-1] != n_mels:
        raise ValueError(f"expected features of shape (n_clips, frames, {n_mels}), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no clips given")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain NaN or infinity")
    return X


class ERGLClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Event-relational graph scene classifier.

    ``transform`` returns the graph readout (concatenated final node
    features), so the estimator can also act as a feature extractor.
    """

    def __init__(self, n_events=25, n_layers=2, use_ncm=True, use_nnm=True,
                 conv_channels=DESK_CHANNELS, lambda1=1.0, lambda2=1.0, lr=1e-3,
                 batch_size=16, epochs=50, weight_decay=0.01, precision="float32",
                 random_state=0, event_names=None):
        self.n_events = n_events
        self.n_layers = n_layers
        self.use_ncm = use_ncm
        self.use_nnm = use_nnm
        self.conv_channels = conv_channels
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.precision = precision
        self.random_state = random_state
        self.event_names = event_names

    def _config(self, n_scenes):
        return TrainConfig(
            lambda1=self.lambda1, lambda2=self.lambda2, lr=self.lr, batch_size=self.batch_size,
            epochs=self.epochs, n_events=self.n_events, n_layers=self.n_layers,
            use_ncm=self.use_ncm, use_nnm=self.use_nnm, seed=int(self.random_state or 0),
            weight_decay=self.weight_decay, precision=self.precision,
            conv_channels=tuple(self.conv_channels), n_scenes=n_scenes,
        )

    def fit(self, X, y, pseudo_labels=None, validation_data=None):
        """``pseudo_labels``: (N, 527) soft labels used for vocabulary and event loss.

        ``validation_data`` is an optional ``(X_val, y_val)`` pair for model
        selection.
        """
        X = check_features(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} clips but y has {len(y)} labels")
        if pseudo_labels is None:
            raise ValueError("fit needs pseudo_labels of shape (n_clips, 527)")
        self.classes_ = unique_labels(y)
        index = {c: k for k, c in enumerate(self.classes_)}
        yi = np.array([index[c] for c in y])
        self.ranker_ = EventRanker(self.n_events, self.event_names).fit(pseudo_labels)
        self.vocabulary_ = self.ranker_.vocabulary_
        targets = self.ranker_.transform(pseudo_labels)
        # fewer than 2 observed classes still gets a 2-way head
        n_scenes = max(2, len(self.classes_))
        self.config_ = self._config(n_scenes)
        val = None
        if validation_data is not None:
            Xv, yv = validation_data
            val = Dataset(check_features(Xv), np.array([index[c] for c in yv]))
        result = train(self.config_, Dataset(X, yi, targets), val)
        self.model_ = result.model
        self.history_ = result.reports
        self.best_epoch_ = result.best_epoch
        self.n_features_in_ = X.shape[-1]
        return self

    def _outputs(self, X):
        check_is_fitted(self, "model_")
        X = check_features(X)
        with ad.precision(self.config_.precision):
            return predict_outputs(self.model_, X)

    def decision_function(self, X):
        return self._outputs(X)[1][:, : len(self.classes_)]

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]

    def predict_events(self, X):
        """Per-clip probabilities of the n vocabulary events, shape (N, n)."""
        return self._outputs(X)[0]

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_features(X)
        model = self.model_
        model.eval()
        with ad.precision(self.config_.precision), ad.no_grad():
            out = model(ad.Tensor(X), keep_graphs=True)
        g = out.graphs[-1].node_feats.data
        return g.reshape(g.shape[0], -1)

    def check_vocabulary(self, vocabulary):
        check_is_fitted(self, "vocabulary_")
        if list(vocabulary.event_ids) != list(self.vocabulary_.event_ids):
            raise CompatibilityError("event vocabulary differs from the fitted one")
