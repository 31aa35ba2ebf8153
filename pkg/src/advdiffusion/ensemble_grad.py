"""Adaptive ensemble gradient estimation for target-similarity guidance.

Per-encoder cosine losses are combined with adaptive weights derived from
the ratio of each encoder's two most recent losses: encoders whose loss
moves fast get down-weighted so the ensemble advances in lockstep. The
resulting image gradient is clipped elementwise to +/- delta and folded
into the diffusion score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .diffusion import NoiseSchedule, eps_to_score
from .encoders import EncoderEnsemble

_RATIO_GUARD = 1e-8
_MAX_LOGIT_SPREAD = 30.0


def adaptive_weights(losses_prev1: np.ndarray, losses_prev2: np.ndarray,
                     tau: float = 2.0) -> np.ndarray:
    """Weights from two consecutive loss vectors.

    w_i = sum_j exp(tau * r_j) / (N_m * exp(tau * r_i)) with
    r_i = L_i(prev1) / (|L_i(prev2)| + 1e-8). The reciprocals of the
    weights always sum to N_m; equal ratios give all-ones.
    """
    l1 = np.asarray(losses_prev1, dtype=np.float64)
    l2 = np.asarray(losses_prev2, dtype=np.float64)
    if l1.shape != l2.shape or l1.ndim != 1 or l1.size < 1:
        raise ValueError("adaptive_weights: loss vectors must be equal-length 1-D")
    if not (np.isfinite(l1).all() and np.isfinite(l2).all()):
        raise ValueError("adaptive_weights: non-finite loss history")
    ratios = l1 / (np.abs(l2) + _RATIO_GUARD)
    if not np.isfinite(ratios).all():
        raise ValueError("adaptive_weights: non-finite loss ratio")
    z = tau * ratios
    z = z - z.max()  # softmax stabilization; weights are shift-invariant
    # near-zero recent losses can make ratios astronomically large; capping
    # the logit spread keeps every weight finite while preserving both the
    # reciprocal-sum identity and the down-weighting of fast movers
    z = np.maximum(z, -_MAX_LOGIT_SPREAD)
    expz = np.exp(z)
    w = expz.sum() / (l1.size * expz)
    if not np.isfinite(w).all():
        raise ValueError("adaptive_weights: non-finite weights (degenerate ratios)")
    return w


@dataclass
class GuidanceState:
    """Mutable per-attack state: weights, loss history, and knobs.

    The first two gradient estimations run with unit weights (there is no
    usable two-step history yet); afterwards the weights follow the
    adaptive rule on the two most recent recorded loss vectors.
    """

    n_members: int
    tau: float = 2.0
    s: float = 35.0
    delta: float = 0.0025
    w: np.ndarray = field(init=False)
    last_losses: np.ndarray | None = field(init=False, default=None)
    last_objective: float | None = field(init=False, default=None)
    _history: list[np.ndarray] = field(init=False, default_factory=list)

    def __post_init__(self):
        if self.n_members < 1:
            raise ValueError("GuidanceState: n_members must be >= 1")
        self.w = np.ones(self.n_members, dtype=np.float64)

    def step_weights(self) -> np.ndarray:
        """Weights for the upcoming gradient estimation."""
        if len(self._history) >= 2:
            self.w = adaptive_weights(self._history[-1], self._history[-2], self.tau)
        else:
            self.w = np.ones(self.n_members, dtype=np.float64)
        return self.w.copy()

    def record_losses(self, losses: np.ndarray) -> None:
        losses = np.asarray(losses, dtype=np.float64)
        if losses.shape != (self.n_members,):
            raise ValueError("record_losses: wrong length")
        if not np.isfinite(losses).all():
            raise ValueError("record_losses: non-finite losses")
        self._history.append(losses)
        del self._history[:-2]  # only the two most recent matter


def target_embeddings(ensemble: EncoderEnsemble, x_tar: np.ndarray) -> list[T.Tensor]:
    """Per-member unit embeddings of the target image, detached constants."""
    return [m.embed(T.Tensor(x_tar, dtype=x_tar.dtype)).detach()
            for m in ensemble.members]


def ensemble_objective(ensemble: EncoderEnsemble, w: np.ndarray, x: T.Tensor,
                       x_tar: np.ndarray | None = None,
                       tar_embeds: list[T.Tensor] | None = None,
                       ) -> tuple[T.Tensor, list[T.Tensor]]:
    """Weighted sum of per-encoder cosine similarities to the target.

    Returns the traced scalar objective together with the individual cosine
    terms. Weights enter as constants; no gradient flows through them.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (ensemble.n_members,):
        raise ValueError(f"objective: got {w.shape[0] if w.ndim else 0} weights "
                         f"for {ensemble.n_members} encoders")
    if tar_embeds is None:
        if x_tar is None:
            raise ValueError("objective: need x_tar or precomputed embeddings")
        tar_embeds = target_embeddings(ensemble, x_tar)
    terms = [T.cosine(m.embed(x), e) for m, e in zip(ensemble.members, tar_embeds)]
    obj = T.scale(terms[0], float(w[0]))
    for wi, ci in zip(w[1:], terms[1:]):
        obj = T.add(obj, T.scale(ci, float(wi)))
    return obj, terms


def estimate_gradient(ensemble: EncoderEnsemble, state: GuidanceState,
                      x_hat_t: np.ndarray, x_tar: np.ndarray | None = None,
                      tar_embeds: list[T.Tensor] | None = None) -> np.ndarray:
    """Clipped gradient of the weighted ensemble objective at x_hat_t.

    Uses the state's current weights, records the per-encoder losses for
    the next weight update, and stashes the objective value for tracing.
    Always satisfies ||g||_inf <= delta.
    """
    leaf = T.Tensor(x_hat_t, requires_grad=True, dtype=x_hat_t.dtype)
    obj, terms = ensemble_objective(ensemble, state.w, leaf, x_tar, tar_embeds)
    raw = T.backward(obj, [leaf])[0]
    losses = np.array([c.item() for c in terms])
    state.record_losses(losses)
    state.last_losses = losses
    state.last_objective = obj.item()
    return np.clip(raw, -state.delta, state.delta)


def compose_score(eps_hat: np.ndarray, g: np.ndarray | None, t: int,
                  sched: NoiseSchedule, s: float,
                  guidance_sign: float = 1.0) -> np.ndarray:
    """Guided score: -eps_hat / sqrt(1 - alpha_bar_t) + s * g.

    With s = 0 (or no gradient) the result is bit-identical to the
    unguided score. ``guidance_sign=-1`` flips the guidance term for
    ablations (descending instead of ascending the similarity).
    """
    base = eps_to_score(eps_hat, t, sched)
    if g is None or s == 0.0:
        return base
    if g.shape != eps_hat.shape:
        raise ValueError(f"compose_score: eps {eps_hat.shape} vs g {g.shape}")
    return base + (guidance_sign * float(s)) * g
