"""End-to-end guided diffusion attack and the momentum-FGSM baseline.

The guided attack re-noises the working image to a mid-chain step, then
denoises back while (a) blending each latent with a freshly noised copy of
the original under a CAM-sampled mask and (b) pushing the score along the
clipped ensemble-similarity gradient. The whole pass repeats for a number
of outer iterations, each restarting from the previous output.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cam_mask import ClassifierModel, cam_to_prob, gradcam, sample_mask, blend
from .diffusion import NoiseSchedule, ddim_step, ddpm_step, forward_noise
from .encoders import EncoderEnsemble
from .ensemble_grad import (GuidanceState, compose_score, ensemble_objective,
                            estimate_gradient, target_embeddings)

SAMPLERS = ("ddpm-mean", "ddim")
MASK_MODES = ("cam", "full", "off")


@dataclass
class AttackConfig:
    """Algorithm hyperparameters; defaults follow the reference setting."""

    s: float = 35.0
    delta: float = 0.0025
    t_star_frac: float = 0.2
    k: int = 8
    tau: float = 2.0
    n_iters: int = 10
    T: int = 200
    sampler: str = "ddpm-mean"
    seed: int = 0
    patches_per_step: int = 1
    clip_lo: float = 0.3
    clip_hi: float = 0.7
    mask_mode: str = "cam"
    guidance_sign: float = 1.0
    label: int | None = None

    def __post_init__(self):
        if not 0.0 < self.t_star_frac <= 1.0:
            raise ValueError("AttackConfig: t_star_frac must be in (0, 1]")
        if self.n_iters < 1:
            raise ValueError("AttackConfig: n_iters must be >= 1")
        if self.sampler not in SAMPLERS:
            raise ValueError(f"AttackConfig: sampler must be one of {SAMPLERS}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"AttackConfig: mask_mode must be one of {MASK_MODES}")

    @property
    def t_star(self) -> int:
        return max(1, round(self.t_star_frac * self.T))


@dataclass
class StepRecord:
    n: int
    t: int
    objective: float
    losses: np.ndarray
    weights: np.ndarray
    linf_g: float


@dataclass
class AttackResult:
    x_adv: np.ndarray
    trace: list[StepRecord] = field(default_factory=list)
    wall_time: float = 0.0

    def max_linf_g(self) -> float:
        return max((r.linf_g for r in self.trace), default=0.0)


def trace_to_csv(result: AttackResult) -> str:
    """Flatten the per-step trace: n, t, objective, w_1..w_Nm, linf_g."""
    if not result.trace:
        return "n,t,objective,linf_g\n"
    n_m = result.trace[0].weights.size
    header = ["n", "t", "objective"] + [f"w_{i + 1}" for i in range(n_m)] + ["linf_g"]
    lines = [",".join(header)]
    for r in result.trace:
        row = [str(r.n), str(r.t), f"{r.objective:.8f}"]
        row += [f"{wi:.8f}" for wi in r.weights]
        row.append(f"{r.linf_g:.8f}")
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def _check_image(name: str, x: np.ndarray) -> None:
    if x.min() < -1e-6 or x.max() > 1.0 + 1e-6:
        raise ValueError(f"{name} must lie in [0, 1]")


def guided_diffusion_attack(x: np.ndarray, x_tar: np.ndarray,
                            ensemble: EncoderEnsemble,
                            classifier: ClassifierModel | None,
                            eps_source, sched: NoiseSchedule,
                            cfg: AttackConfig,
                            rng: np.random.Generator) -> AttackResult:
    """Run the full attack; returns the adversarial image plus the step trace.

    eps_source is anything with predict_eps(x_t, t, sched): the trained
    denoiser or the analytic Gaussian oracle.
    """
    if x.shape != x_tar.shape:
        raise ValueError(f"attack: x {x.shape} vs x_tar {x_tar.shape}")
    _check_image("x", x)
    _check_image("x_tar", x_tar)
    if sched.T != cfg.T:
        raise ValueError(f"attack: schedule T={sched.T} but config T={cfg.T}")
    started = time.perf_counter()

    h, w = x.shape[-2], x.shape[-1]
    if cfg.mask_mode == "cam":
        if classifier is None:
            raise ValueError("attack: mask_mode 'cam' needs a classifier")
        label = cfg.label if cfg.label is not None else classifier.predict(x)
        prob = cam_to_prob(gradcam(classifier, x, label), cfg.clip_lo, cfg.clip_hi)

    x = x.astype(np.float32)
    x_tar = x_tar.astype(np.float32)
    tar_embeds = target_embeddings(ensemble, x_tar)
    state = GuidanceState(n_members=ensemble.n_members, tau=cfg.tau,
                          s=cfg.s, delta=cfg.delta)
    t_star = cfg.t_star
    trace: list[StepRecord] = []
    x0 = x.copy()

    for n in range(1, cfg.n_iters + 1):
        eps0 = rng.standard_normal(x0.shape).astype(np.float32)
        x_tilde = forward_noise(x0, t_star, eps0, sched)
        for t in range(t_star, 0, -1):
            if cfg.mask_mode == "cam":
                m = sample_mask(prob, cfg.k, rng, cfg.patches_per_step)
            elif cfg.mask_mode == "full":
                m = np.ones((h, w))
            else:
                m = np.zeros((h, w))
            eps_t = rng.standard_normal(x0.shape).astype(np.float32)
            x_t = forward_noise(x0, t, eps_t, sched)
            x_hat = blend(x_t, x_tilde, m).astype(np.float32)

            weights = state.step_weights()
            g = estimate_gradient(ensemble, state, x_hat, tar_embeds=tar_embeds)
            eps_hat = eps_source.predict_eps(x_hat, t, sched)
            score = compose_score(eps_hat, g, t, sched, cfg.s, cfg.guidance_sign)
            if cfg.sampler == "ddpm-mean":
                x_tilde = ddpm_step(x_hat, score, t, sched)
            else:
                eps_mod = -np.sqrt(1.0 - sched.alpha_bar(t)).astype(np.float32) * score
                x_tilde = ddim_step(x_hat, eps_mod, t, t - 1, sched, eta=0.0)
            if not np.isfinite(x_tilde).all():
                raise FloatingPointError(f"attack: non-finite latent at n={n}, t={t}")
            trace.append(StepRecord(n=n, t=t, objective=state.last_objective,
                                    losses=state.last_losses, weights=weights,
                                    linf_g=float(np.abs(g).max())))
        x0 = np.clip(x_tilde, 0.0, 1.0).astype(np.float32)

    return AttackResult(x_adv=x0, trace=trace,
                        wall_time=time.perf_counter() - started)


def mifgsm_ensemble_attack(x: np.ndarray, x_tar: np.ndarray,
                           ensemble: EncoderEnsemble, steps: int = 300,
                           eps_budget: float = 16.0 / 255.0, mu: float = 1.0,
                           step_size: float | None = None) -> np.ndarray:
    """Momentum iterative FGSM ascending the equal-weight ensemble similarity.

    The perturbation stays inside the l-infinity budget and the image stays
    inside [0, 1] after every step.
    """
    _check_image("x", x)
    if step_size is None:
        step_size = eps_budget / max(steps, 1) * 2.0
    x = x.astype(np.float32)
    x_tar = x_tar.astype(np.float32)
    tar_embeds = target_embeddings(ensemble, x_tar)
    ones = np.ones(ensemble.n_members)

    x_adv = x.copy()
    momentum = np.zeros_like(x)
    for _ in range(int(steps)):
        leaf = T.Tensor(x_adv, requires_grad=True, dtype=np.float32)
        obj, _ = ensemble_objective(ensemble, ones, leaf, tar_embeds=tar_embeds)
        raw = T.backward(obj, [leaf])[0]
        l1 = np.abs(raw).sum()
        momentum = mu * momentum + raw / (l1 + 1e-12)
        x_adv = x_adv + np.float32(step_size) * np.sign(momentum)
        x_adv = np.clip(x_adv, x - eps_budget, x + eps_budget)
        x_adv = np.clip(x_adv, 0.0, 1.0).astype(np.float32)
    return x_adv
