"""Intent constraint loss: target alignment, noise repulsion and the variance penalty."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hid import autograd as ag
from hid.autograd import Tensor
from hid.intent import IntentAssignment

NORM_TOL = 1e-6
DIST_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    sigma: float = 0.14
    eta: float = 0.2
    lambda_p: float = 0.3
    epsilon: float = 0.2
    detach_penalty: bool = False

    def __post_init__(self):
        for name in ("sigma", "eta", "lambda_p", "epsilon"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.eta < 0 or self.lambda_p < 0 or self.epsilon < 0:
            raise ValueError("eta, lambda_p and epsilon must be >= 0")


@dataclass
class ICLossBatchResult:
    loss: Tensor  # differentiable scalar
    per_session: np.ndarray
    penalty: np.ndarray
    noise_mean: np.ndarray
    noise_var: np.ndarray
    has_noise: np.ndarray

    @property
    def value(self) -> float:
        return self.loss.item()


# -- scalar building blocks (numpy) ---------------------------------------------

def longtail_variance(session, members) -> float:
    """Variance of Euclidean distances from the session to each target-intent item."""
    members = np.atleast_2d(np.asarray(members, dtype=np.float64))
    if members.shape[0] == 0 or members.size == 0:
        raise ValueError("target intent has no member items")
    dist = np.linalg.norm(members - np.asarray(session, dtype=np.float64), axis=1)
    return float(dist.var())


def target_alignment(session, target) -> float:
    return float(np.linalg.norm(np.asarray(session, dtype=np.float64) - np.asarray(target, dtype=np.float64)))


def noise_stats(session, noise) -> tuple[float, float, bool]:
    """Mean and variance of distances to the noise intents, plus a skip flag for an empty set."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.size == 0:
        return 0.0, 0.0, True
    dist = np.linalg.norm(np.atleast_2d(noise) - np.asarray(session, dtype=np.float64), axis=1)
    return float(dist.mean()), float(dist.var()), False


def variance_penalty(variance: float, eta: float) -> float:
    if variance < 0:
        raise ValueError("variance must be >= 0")
    return float(np.clip(variance - eta, 0.0, 1.0))


def triplet_surrogate(session, target, noise) -> float:
    """Sum over noise intents of ``|S - c_u|^2 - |S - c_v|^2 + 2``."""
    s = np.asarray(session, dtype=np.float64)
    pos = float(((s - np.asarray(target)) ** 2).sum())
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    if noise.size == 0:
        return 0.0
    neg = ((noise - s) ** 2).sum(axis=1)
    return float((pos - neg + 2.0).sum())


def dot_log_ratio(session, target, noise) -> float:
    """``-log(exp(S.c_u) / sum_v exp(S.c_v))`` for one session."""
    s = np.asarray(session, dtype=np.float64)
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    x = noise @ s - s @ np.asarray(target)
    top = x.max()
    return float(top + np.log(np.exp(x - top).sum()))


def icloss_reference(session, target, noise, cfg: LossConfig) -> float:
    """Single-session loss evaluated straight from the formula, for spot checks."""
    s = np.asarray(session, dtype=np.float64)
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    if noise.size == 0:
        return 0.0
    cos_t = float(s @ target) / (np.linalg.norm(s) * np.linalg.norm(target))
    cos_v = noise @ s / (np.linalg.norm(noise, axis=1) * np.linalg.norm(s))
    dist = np.linalg.norm(noise - s, axis=1)
    p = variance_penalty(float(dist.var()), cfg.eta)
    ratio = np.exp(cos_t / cfg.sigma) / ((1 + cfg.lambda_p * p) * np.exp(cos_v / cfg.sigma).sum())
    return float(-np.log(ratio))


# -- batched, differentiable loss -----------------------------------------------

def _check_unit(x: Tensor, what: str) -> None:
    norms = np.linalg.norm(x.data, axis=-1)
    if np.any(np.abs(norms - 1.0) > NORM_TOL):
        raise ValueError(f"{what} must be l2-normalized (max deviation {np.abs(norms - 1).max():.2e})")


def icloss_batch(sessions: Tensor, assignment: IntentAssignment, intents: Tensor, cfg: LossConfig,
                 reduction: str = "sum") -> ICLossBatchResult:
    """Intent constraint loss for one batch.

    ``sessions`` is ``(B, d)`` and ``intents`` is ``(n, d)``, both already on
    the unit sphere. Per session::

        log(1 + lambda * p) + logsumexp_{noise}(cos / sigma) - cos_target / sigma

    where ``p = clip(Var(noise distances) - eta, 0, 1)``. Sessions with no
    noise intent contribute exactly zero. ``reduction="mean"`` divides the
    sum by the batch size.
    """
    _check_unit(sessions, "session embeddings")
    _check_unit(intents, "intent embeddings")
    mask = assignment.noise
    B = mask.shape[0]
    has_noise = mask.any(axis=1)
    count = np.maximum(mask.sum(axis=1), 1).astype(np.float64)
    maskf = mask.astype(np.float64)

    cos = sessions @ intents.T  # (B, n)
    cos_t = cos[np.arange(B), assignment.target]
    lse = ag.logsumexp(cos / cfg.sigma, axis=1, mask=mask)

    # euclidean distances on the sphere: sqrt(2 - 2 cos)
    dist = ((2.0 - 2.0 * cos).relu() + DIST_FLOOR).sqrt()
    mean = (dist * maskf).sum(axis=1) / count
    centered = (dist - mean.reshape(B, 1)) * maskf
    var = (centered * centered).sum(axis=1) / count
    penalty = (var - cfg.eta).clip(0.0, 1.0)
    if cfg.detach_penalty:
        penalty = penalty.detach()
    log_pen = (1.0 + cfg.lambda_p * penalty).log()

    per = (log_pen + lse - cos_t / cfg.sigma) * has_noise.astype(np.float64)
    total = per.sum()
    if reduction == "mean":
        total = total / B
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return ICLossBatchResult(total, per.data.copy(), penalty.data.copy() * has_noise,
                             mean.data * has_noise, var.data * has_noise, has_noise)


def total_loss(lp, lc, epsilon: float):
    """``L_p + epsilon * L_c``; works on floats and Tensors alike."""
    return lp + epsilon * lc
