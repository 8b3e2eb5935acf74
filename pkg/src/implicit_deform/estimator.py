"""Estimator front end: fit a deformation between two point clouds.

>>> est = ImplicitDeformation(epochs=2000, implicit_width=64, implicit_layers=3)
>>> est.fit(P0, P1, correspondences=C)            # doctest: +SKIP
>>> est.transform(P0, t=1.0)                      # doctest: +SKIP
>>> est.extract_mesh(t=0.5, resolution=64)        # doctest: +SKIP

All public inputs and outputs are in the caller's coordinates; the fitted
networks live in the normalized frame stored as ``transform_``.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import fields, flow
from .sampler import NormalizationTransform, normalize_pair, validate_correspondences
from .surface import extract_mesh
from .trainer import TrainConfig, TrainState, load_state, save_state, train

_CONFIG_FIELDS = tuple(f.name for f in dataclasses.fields(TrainConfig))


def check_points(X, name: str = "X", min_points: int = 1) -> np.ndarray:
    """Finite float64 array of shape ``(n, 3)``."""
    X = check_array(X, dtype=np.float64, ensure_min_samples=min_points, input_name=name)
    if X.shape[1] != 3:
        raise ValueError(f"{name} must have 3 columns, got {X.shape[1]}")
    return X


def check_normals(N, n: int, name: str) -> np.ndarray | None:
    if N is None:
        return None
    N = check_points(N, name)
    if len(N) != n:
        raise ValueError(f"{name} has {len(N)} rows for {n} points")
    norm = np.linalg.norm(N, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError(f"{name} contains zero vectors")
    return N / norm


def check_time(t) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"time must lie in [0, 1], got {t}")
    return t


class ImplicitDeformation(BaseEstimator):
    """Joint velocity / time-varying SDF fit between a source and a target cloud.

    Hyperparameters are the :class:`TrainConfig` fields plus ``normalize``.
    Passing ``epochs`` alone rescales the warm-up, ramp, freeze and decay
    epochs proportionally (see :meth:`TrainConfig.scaled`) unless
    ``scale_schedule=False``.

    Fitted attributes: ``state_``, ``transform_``, ``metrics_``,
    ``timings_``, ``config_``.
    """

    def __init__(self, *, epochs=10000, batch_size=4000, velocity_batch=None, cloud_batch=None,
                 pair_batch=None, lr=0.005, lr_decay=0.5, lr_decay_interval=2000, warmup_epochs=2000,
                 ramp_end=5000, velocity_freeze_epoch=8000, lam_f=100.0, lam_v=20.0, lam_m=200.0,
                 lam_m_warmup=100.0, lam_l=10.0, lam_div=0.0, lam_n=1.0, alpha=0.01, gamma=1.0,
                 eikonal_mode="mlse", T=25, m=3, beta=100.0, implicit_width=512, implicit_layers=8,
                 velocity_width=256, velocity_layers=8, sphere_radius=0.5, sigma_near=0.05,
                 rho_near=0.5, time_jitter=1.0, grad_clip=10.0, strict_freeze=False, dtype="float64",
                 seed=0, normalize=True, scale_schedule=True):
        self.epochs = epochs
        self.batch_size = batch_size
        self.velocity_batch = velocity_batch
        self.cloud_batch = cloud_batch
        self.pair_batch = pair_batch
        self.lr = lr
        self.lr_decay = lr_decay
        self.lr_decay_interval = lr_decay_interval
        self.warmup_epochs = warmup_epochs
        self.ramp_end = ramp_end
        self.velocity_freeze_epoch = velocity_freeze_epoch
        self.lam_f = lam_f
        self.lam_v = lam_v
        self.lam_m = lam_m
        self.lam_m_warmup = lam_m_warmup
        self.lam_l = lam_l
        self.lam_div = lam_div
        self.lam_n = lam_n
        self.alpha = alpha
        self.gamma = gamma
        self.eikonal_mode = eikonal_mode
        self.T = T
        self.m = m
        self.beta = beta
        self.implicit_width = implicit_width
        self.implicit_layers = implicit_layers
        self.velocity_width = velocity_width
        self.velocity_layers = velocity_layers
        self.sphere_radius = sphere_radius
        self.sigma_near = sigma_near
        self.rho_near = rho_near
        self.time_jitter = time_jitter
        self.grad_clip = grad_clip
        self.strict_freeze = strict_freeze
        self.dtype = dtype
        self.seed = seed
        self.normalize = normalize
        self.scale_schedule = scale_schedule

    @classmethod
    def from_config(cls, cfg: TrainConfig, normalize: bool = True) -> "ImplicitDeformation":
        return cls(**cfg.to_dict(), normalize=normalize, scale_schedule=False)

    def make_config(self) -> TrainConfig:
        """The :class:`TrainConfig` these hyperparameters resolve to."""
        values = {k: getattr(self, k) for k in _CONFIG_FIELDS}
        if not self.scale_schedule:
            return TrainConfig(**values)
        base = TrainConfig()
        defaults = {k: getattr(base, k) for k in ("warmup_epochs", "ramp_end", "velocity_freeze_epoch",
                                                  "lr_decay_interval")}
        if all(values[k] == v for k, v in defaults.items()) and values["epochs"] != base.epochs:
            rest = {k: v for k, v in values.items() if k not in defaults and k != "epochs"}
            return base.scaled(values["epochs"], **rest)
        return TrainConfig(**values)

    # -- fitting ------------------------------------------------------------------------

    def fit(self, P0, P1, correspondences=None, normals0=None, normals1=None, callback=None):
        """Fit on source ``P0`` (t=0) and target ``P1`` (t=1).

        ``correspondences`` is a ``(k, 2)`` array of ``(i, j)`` rows pairing
        ``P0[i]`` with ``P1[j]``; it may be empty.
        """
        P0 = check_points(P0, "P0")
        P1 = check_points(P1, "P1")
        C = np.zeros((0, 2), np.int64) if correspondences is None else correspondences
        C = validate_correspondences(C, len(P0), len(P1))
        N0 = check_normals(normals0, len(P0), "normals0")
        N1 = check_normals(normals1, len(P1), "normals1")
        if (N0 is None) != (N1 is None):
            raise ValueError("pass normals for both clouds or for neither")
        cfg = self.make_config()
        if self.normalize:
            P0n, P1n, tf = normalize_pair(P0, P1)
        else:
            P0n, P1n, tf = P0, P1, NormalizationTransform.identity()
        result = train(P0n, P1n, C, cfg, N0, N1, transform=tf, callback=callback)
        self._set_fitted(result.state)
        self.metrics_ = result.metrics
        self.timings_ = result.timings
        return self

    def _set_fitted(self, state: TrainState):
        self.state_ = state
        self.transform_ = state.transform
        self.config_ = state.config
        self.n_epochs_ = state.epoch

    # -- queries --------------------------------------------------------------------------

    def predict(self, X, t: float = 0.0) -> np.ndarray:
        """Signed distance to the surface at time ``t``, in input units (negative inside)."""
        check_is_fitted(self, "state_")
        X = check_points(X)
        f = fields.sdf(self.state_.F, self.transform_.apply(X), check_time(t))
        return np.asarray(f, dtype=np.float64) / self.transform_.scale

    decision_function = predict

    def transform(self, X, t: float = 1.0) -> np.ndarray:
        """Advect points given at t=0 to time ``t`` along the learned flow."""
        check_is_fitted(self, "state_")
        X = check_points(X)
        Y = flow.integrate_points(self.state_.Vf, self.transform_.apply(X), self.config_.T, check_time(t))
        return self.transform_.invert(np.asarray(Y, dtype=np.float64))

    def inverse_transform(self, X, t: float = 1.0) -> np.ndarray:
        """Carry points given at time ``t`` back to t=0 by integrating -V."""
        check_is_fitted(self, "state_")
        X = check_points(X)
        t = check_time(t)
        steps = int(np.floor(t * self.config_.T + 1e-9))
        Y = self.transform_.apply(X)
        if steps:
            path = np.asarray(flow.euler_paths(self.state_.Vf, Y, self.config_.T, sign=-1.0))
            Y = path[steps]
        return self.transform_.invert(np.asarray(Y, dtype=np.float64))

    def trajectories(self, X) -> np.ndarray:
        """Euler paths ``(T+1, n, 3)`` of points given at t=0, in input units."""
        check_is_fitted(self, "state_")
        X = check_points(X)
        path = np.asarray(flow.euler_paths(self.state_.Vf, self.transform_.apply(X), self.config_.T))
        return self.transform_.invert(path.reshape(-1, 3)).reshape(path.shape)

    def velocity(self, X) -> np.ndarray:
        """Velocity in input units per unit time."""
        check_is_fitted(self, "state_")
        X = check_points(X)
        return np.asarray(fields.velocity(self.state_.Vf, self.transform_.apply(X))) / self.transform_.scale

    def extract_mesh(self, t: float = 0.0, resolution: int = 128):
        """Zero level set at time ``t`` as a :class:`TriMesh` in input coordinates."""
        check_is_fitted(self, "state_")
        return extract_mesh(self.state_.F, check_time(t), resolution, transform=self.transform_)

    # -- persistence ----------------------------------------------------------------------

    def save(self, path):
        check_is_fitted(self, "state_")
        return save_state(path, self.state_)

    @classmethod
    def load(cls, path) -> "ImplicitDeformation":
        state = load_state(path)
        est = cls.from_config(state.config)
        est._set_fitted(state)
        return est
