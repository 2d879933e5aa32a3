"""Scikit-learn style front end for the dual-input upsampling models.

PointCloudUpsampler wraps dataset preparation, training, and inference
behind the familiar fit/transform/predict surface so the models drop
into sklearn pipelines and utilities (get_params, set_params, clone).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .autodiff import Adam
from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import InvalidArgument, InvalidModel
from .geometry import farthest_point_sample, normalize_unit_sphere
from .metrics import chamfer_distance
from .network import build_variant, knn_batch, train_step, upsample_cloud
from .synthdata import make_samples
from .validation import as_points


class PointCloudUpsampler(TransformerMixin, BaseEstimator):
    """Learns to densify point clouds by a fixed integer ratio.

    fit(X) expects an iterable of (n, 3) dense clouds, all the same
    size; each is cut into patch/segment training pairs. transform(X)
    upsamples clouds to ratio * n points; a single (n, 3) array in
    gives a single array out. Training is deterministic in
    random_state.

    Parameters mirror the experiment config: `variant` picks the
    architecture ("baseline" local-only, "relpu_minus" one shared
    encoder, "relpu" two independent encoders); the rest control the
    tiling and the optimizer.
    """

    def __init__(self, variant: str = "relpu", ratio: int = 4,
                 num_patches: int = 8, k_neighbors: int = 4,
                 dec_hidden: int = 32, epochs: int = 20,
                 batch_size: int = 32, lr: float = 5e-4,
                 lr_decay: float = 0.05, lr_decay_every: int = 20,
                 subsample: str = "fps", segment_order: str = "random",
                 random_state: int = 0):
        self.variant = variant
        self.ratio = ratio
        self.num_patches = num_patches
        self.k_neighbors = k_neighbors
        self.dec_hidden = dec_hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.lr_decay_every = lr_decay_every
        self.subsample = subsample
        self.segment_order = segment_order
        self.random_state = random_state

    def _clouds(self, X) -> list[np.ndarray]:
        if isinstance(X, np.ndarray) and X.ndim == 2:
            return [as_points(X, "X")]
        return [as_points(c, "X") for c in X]

    def _fitted_model(self):
        model = getattr(self, "model_", None)
        if model is None:
            raise InvalidModel(
                "estimator is not fitted; call fit or from_checkpoint")
        return model

    def fit(self, X, y=None) -> "PointCloudUpsampler":
        """Train on dense clouds; y is ignored (self-supervised)."""
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgument("epochs and batch_size must be >= 1")
        clouds = self._clouds(X)
        if len({len(c) for c in clouds}) != 1:
            raise InvalidArgument(
                "X: all training clouds must have the same size")
        samples = []
        for i, cloud in enumerate(clouds):
            normed, _, _ = normalize_unit_sphere(cloud)
            samples.extend(make_samples(
                normed, self.num_patches, self.ratio,
                seed=self.random_state * 100003 + i,
                subsample=self.subsample,
                segment_order=self.segment_order))
        local = np.stack([s.local_in for s in samples])
        seg = np.stack([s.global_in for s in samples])
        gt = np.stack([s.gt for s in samples])
        model = build_variant(self.variant, seed=self.random_state,
                              k_neighbors=self.k_neighbors, ratio=self.ratio,
                              dec_hidden=self.dec_hidden)
        optimizer = Adam(model.parameters(), lr=self.lr)
        k = min(self.k_neighbors, local.shape[1] - 1)
        nbr_local = knn_batch(local, k)
        nbr_seg = knn_batch(seg, k)
        needs_seg = self.variant != "baseline"
        n = len(local)
        losses = []
        for epoch in range(self.epochs):
            optimizer.lr = self.lr * (
                (1.0 - self.lr_decay) ** (epoch // self.lr_decay_every))
            order = np.random.default_rng(
                [self.random_state, epoch]).permutation(n)
            epoch_losses = []
            for lo in range(0, n, self.batch_size):
                idx = order[lo:lo + self.batch_size]
                epoch_losses.append(train_step(
                    model, optimizer, local[idx],
                    seg[idx] if needs_seg else None, gt[idx],
                    neighbors_local=nbr_local[idx],
                    neighbors_global=nbr_seg[idx] if needs_seg else None))
            losses.append(float(np.mean(epoch_losses)))
        self.model_ = model
        self.losses_ = losses
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        """Upsample clouds to ratio * n points each."""
        model = self._fitted_model()
        single = isinstance(X, np.ndarray) and X.ndim == 2
        out = [upsample_cloud(model, c, num_patches=self.num_patches,
                              seed=self.random_state,
                              segment_order=self.segment_order)
               for c in self._clouds(X)]
        return out[0] if single else out

    def predict(self, X):
        """Alias of transform: the prediction is the upsampled cloud."""
        return self.transform(X)

    def score(self, X, y=None) -> float:
        """Negative mean Chamfer distance of each cloud against its own
        reconstruction from a 1/ratio farthest-point subset. Higher is
        better; an exact pass-through reconstruction scores 0."""
        model = self._fitted_model()
        dists = []
        for cloud in self._clouds(X):
            sub = cloud[farthest_point_sample(cloud, len(cloud) // self.ratio)]
            # The subset is 1/ratio the size the tiling was chosen for,
            # so shrink the patch count until it fits the subset.
            patches = self.num_patches
            while patches > 1 and (len(sub) % patches != 0
                                   or len(sub) // patches <= self.k_neighbors):
                patches -= 1
            up = upsample_cloud(model, sub, num_patches=patches,
                                seed=self.random_state,
                                segment_order=self.segment_order)
            dists.append(chamfer_distance(up, cloud))
        return -float(np.mean(dists))

    def save(self, path) -> None:
        """Snapshot the fitted model to a checkpoint file."""
        save_checkpoint(path, self._fitted_model())

    @classmethod
    def from_checkpoint(cls, path) -> "PointCloudUpsampler":
        """Rebuild a fitted estimator from a checkpoint; training
        hyperparameters not recorded in the model keep their defaults."""
        model, _, _ = load_checkpoint(path)
        est = cls(variant=model.kind, ratio=model.ratio,
                  k_neighbors=model.k_neighbors, dec_hidden=model.dec_hidden,
                  random_state=model.seed)
        est.model_ = model
        est.losses_ = []
        est.n_features_in_ = 3
        return est
