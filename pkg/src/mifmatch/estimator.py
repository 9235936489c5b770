"""Estimator-style wrappers around the trained network and the descriptor baseline."""
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image
from .evaluation import PIPELINE_MIN_MATCHABILITY, PIPELINE_P_THRESHOLD, match_pair
from .geometry import estimate_homography
from .io import save_checkpoint
from .model import extract_inputs
from .training import TrainConfig, checkpoint_payload, load_model, train


class _PairMatcher(BaseEstimator):
    matcher = None

    def _provider_kw(self):
        raise NotImplementedError

    def _model(self):
        return None

    def _extract_kw(self):
        return {}

    def match(self, image_a, image_b):
        """Detect, describe and match one pair; returns a ``PairMatches``."""
        a = check_image(image_a)
        b = check_image(image_b)
        return match_pair(a, b, self.matcher, self._model(), self._provider_kw(), **self._extract_kw())

    def predict(self, pairs):
        """Match lists ``[(i, j, score), ...]`` for each ``(image_a, image_b)``."""
        return [self.match(a, b).matches for a, b in pairs]

    def estimate(self, image_a, image_b, rng_state=0):
        """Homography A->B from the matches, plus the ``PairMatches`` and inlier mask."""
        pm = self.match(image_a, image_b)
        idx = np.array([(i, j) for i, j, _ in pm.matches], dtype=np.int64).reshape(-1, 2)
        h, mask = estimate_homography(pm.kpts_a[idx[:, 0]], pm.kpts_b[idx[:, 1]], rng_state=rng_state)
        return h, pm, mask


class BaseKnnMatcher(_PairMatcher):
    """Harris patches matched by nearest neighbour with a ratio test."""

    matcher = "base_knn"

    def __init__(self, ratio=0.75, max_kpts=512, nms_radius=4):
        self.ratio = ratio
        self.max_kpts = max_kpts
        self.nms_radius = nms_radius

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def _provider_kw(self):
        return {"max_kpts": self.max_kpts, "nms_radius": self.nms_radius}

    def _extract_kw(self):
        return {"ratio": self.ratio}


class MIFNetMatcher(_PairMatcher):
    """Trainable matcher; ``fit`` runs self-supervised training on single images.

    ``config`` is a :class:`TrainConfig` or a dict of its fields.
    """

    matcher = "mif"

    def __init__(self, config=None, p_threshold=PIPELINE_P_THRESHOLD, min_matchability=PIPELINE_MIN_MATCHABILITY):
        self.config = config
        self.p_threshold = p_threshold
        self.min_matchability = min_matchability

    def _config(self):
        if self.config is None:
            return TrainConfig()
        if isinstance(self.config, TrainConfig):
            return self.config
        return TrainConfig.from_dict(dict(self.config))

    def fit(self, X, y=None, out_dir=None, log_path=None, resume=None):
        """Train on a manifest path or a list of grayscale images."""
        cfg = self._config()
        if not isinstance(X, (str, Path)):
            X = [check_image(im) for im in X]
        self.model_ = train(X, cfg, out_dir=out_dir, resume=resume, log_path=log_path)
        self.config_ = cfg
        self.history_ = self.model_.history
        return self

    def _model(self):
        check_is_fitted(self, "model_")
        return self.model_

    def _provider_kw(self):
        check_is_fitted(self, "config_")
        return self.config_.provider_kwargs()

    def _extract_kw(self):
        return {"p_threshold": self.p_threshold, "min_matchability": self.min_matchability}

    def transform(self, pair):
        """Final-layer invariant descriptors ``(F_A, F_B)`` for one image pair."""
        a, b = (extract_inputs(check_image(im), **self._provider_kw()) for im in pair)
        with torch.no_grad():
            fa, fb = self._model()(a.tensors(), b.tensors())["layers"][-1]
        return fa.double().numpy(), fb.double().numpy()

    @property
    def config_hash(self):
        check_is_fitted(self, "config_")
        return self.config_.hash()

    def save(self, path):
        tensors, meta = checkpoint_payload(self._model(), self.config_)
        save_checkpoint(path, tensors, meta)

    @classmethod
    def load(cls, path, **kw):
        model, cfg, _, _ = load_model(path)
        est = cls(config=cfg, **kw)
        est.model_ = model
        est.config_ = cfg
        est.history_ = []
        return est
