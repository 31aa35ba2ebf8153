"""Noise schedules, forward noising, reverse samplers, and noise predictors.

Two interchangeable epsilon sources exist: a small trainable convolutional
predictor, and a closed-form Gaussian oracle whose scores are exact. Both
expose ``predict_eps(x_t, t, sched)`` so samplers and the attack loop do
not care which one they drive.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .atns import read_atns, write_atns


class ScheduleError(ValueError):
    """Invalid schedule parameters or timestep index."""


@dataclass(frozen=True)
class NoiseSchedule:
    """beta/alpha/alpha-bar tables for T steps, 1-indexed by timestep."""

    betas: np.ndarray          # length T, float64
    beta_start: float
    beta_end: float

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size < 1:
            raise ScheduleError("betas must be a non-empty vector")
        if not ((b > 0) & (b < 1)).all():
            raise ScheduleError("betas must lie strictly in (0, 1)")
        object.__setattr__(self, "betas", b)
        object.__setattr__(self, "_alphas", 1.0 - b)
        object.__setattr__(self, "_alpha_bars", np.cumprod(1.0 - b))

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ScheduleError(f"timestep {t} outside 1..{self.T}")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self._check_t(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self._alphas[self._check_t(t) - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative product of alphas; alpha_bar(0) = 1 by convention."""
        if t == 0:
            return 1.0
        return float(self._alpha_bars[self._check_t(t) - 1])


def make_linear_schedule(T: int, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas from beta_start to beta_end inclusive."""
    if T < 1:
        raise ScheduleError("T must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule(betas=betas, beta_start=beta_start, beta_end=beta_end)


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray,
                  sched: NoiseSchedule) -> np.ndarray:
    """q(x_t | x_0) realized with the given noise draw."""
    if x0.shape != eps.shape:
        raise ValueError(f"forward_noise: x0 {x0.shape} vs eps {eps.shape}")
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def ddpm_step(x_t: np.ndarray, score: np.ndarray, t: int, sched: NoiseSchedule,
              noise: np.ndarray | None = None) -> np.ndarray:
    """One reverse step x_{t-1} = (x_t + (1 - alpha_t) * score) / sqrt(alpha_t).

    By default the step is the posterior mean only; passing ``noise`` adds
    the stochastic term sqrt(beta_t) * noise.
    """
    if x_t.shape != score.shape:
        raise ValueError(f"ddpm_step: x_t {x_t.shape} vs score {score.shape}")
    a = sched.alpha(t)
    out = (x_t + (1.0 - a) * score) / math.sqrt(a)
    if noise is not None:
        out = out + math.sqrt(sched.beta(t)) * noise
    return out


def eps_to_score(eps_hat: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
    """Noise prediction to score: score = -eps_hat / sqrt(1 - alpha_bar_t)."""
    return -eps_hat / math.sqrt(1.0 - sched.alpha_bar(t))


def ddim_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int,
              sched: NoiseSchedule, eta: float = 0.0,
              noise: np.ndarray | None = None) -> np.ndarray:
    """Deterministic (eta=0) or partially stochastic DDIM update."""
    if not 0 <= t_prev < t:
        raise ScheduleError(f"ddim_step needs 0 <= t_prev < t, got {t_prev}, {t}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError("ddim_step: eta must be in [0, 1]")
    ab_t = sched.alpha_bar(t)
    ab_p = sched.alpha_bar(t_prev)
    x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    sigma = eta * math.sqrt((1.0 - ab_p) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_p)
    out = math.sqrt(ab_p) * x0_hat + math.sqrt(max(1.0 - ab_p - sigma ** 2, 0.0)) * eps_hat
    if sigma > 0.0:
        if noise is None:
            raise ValueError("ddim_step: eta > 0 requires a noise draw")
        out = out + sigma * noise
    return out


@dataclass(frozen=True)
class GaussianOracle:
    """Diagonal Gaussian data distribution with closed-form noisy scores.

    With p_0 = N(mu0, var0) per coordinate, the noised marginal is
    p_t = N(sqrt(ab_t) * mu0, ab_t * var0 + (1 - ab_t)), so the score and
    the equivalent noise prediction are exact.
    """

    mu0: np.ndarray
    var0: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu0, dtype=np.float64)
        var = np.asarray(self.var0, dtype=np.float64)
        if not (var > 0).all():
            raise ValueError("GaussianOracle: var0 must be positive")
        object.__setattr__(self, "mu0", mu)
        object.__setattr__(self, "var0", var)

    def score(self, x_t: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
        ab = sched.alpha_bar(t)
        var_t = ab * self.var0 + (1.0 - ab)
        return np.asarray(-(x_t - math.sqrt(ab) * self.mu0) / var_t, dtype=x_t.dtype)

    def predict_eps(self, x_t: np.ndarray, t: int, sched: NoiseSchedule) -> np.ndarray:
        return analytic_eps(self, sched, x_t, t)


def analytic_eps(oracle: GaussianOracle, sched: NoiseSchedule,
                 x_t: np.ndarray, t: int) -> np.ndarray:
    """Exact noise prediction -sqrt(1 - ab_t) * score_t(x_t)."""
    ab = sched.alpha_bar(t)
    return np.asarray(-math.sqrt(1.0 - ab) * oracle.score(x_t, t, sched),
                      dtype=x_t.dtype)


def reverse_ddpm(x_start: np.ndarray, t_start: int, eps_source,
                 sched: NoiseSchedule, rng: np.random.Generator | None = None,
                 inject_noise: bool = False) -> np.ndarray:
    """Unguided reverse chain from step t_start down to 0."""
    x = x_start
    for t in range(int(t_start), 0, -1):
        eps_hat = eps_source.predict_eps(x, t, sched)
        score = eps_to_score(eps_hat, t, sched)
        noise = None
        if inject_noise and t > 1:
            if rng is None:
                raise ValueError("reverse_ddpm: noise injection needs an rng")
            noise = rng.standard_normal(x.shape).astype(x.dtype)
        x = ddpm_step(x, score, t, sched, noise=noise)
    return x


def sinusoidal_embedding(t: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(np.float64)


DENOISER_ARCH = "conv4_c32"
_EMB_DIM = 32


class DenoiserModel:
    """Four-layer convolutional noise predictor with timestep conditioning.

    Channels 3 -> 32 -> 32 -> 32 -> 3, ReLU activations, a learned
    projection of a sinusoidal timestep embedding added per-channel after
    the first layer. Output shape always equals input shape.
    """

    def __init__(self, seed: int = 0, channels: int = 32):
        self.arch = DENOISER_ARCH
        self.seed = int(seed)
        self.channels = int(channels)
        rng = np.random.default_rng(self.seed)
        c = self.channels

        def he(shape, fan_in):
            return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float64)

        self.params: dict[str, np.ndarray] = {
            "conv1_w": he((c, 3, 3, 3), 3 * 9),
            "conv1_b": np.zeros(c),
            "emb_w": he((_EMB_DIM, c), _EMB_DIM),
            "emb_b": np.zeros(c),
            "conv2_w": he((c, c, 3, 3), c * 9),
            "conv2_b": np.zeros(c),
            "conv3_w": he((c, c, 3, 3), c * 9),
            "conv3_b": np.zeros(c),
            "conv4_w": he((3, c, 3, 3), c * 9) * 0.1,
            "conv4_b": np.zeros(3),
        }

    def _forward(self, x: T.Tensor, t: int, params: dict[str, T.Tensor]) -> T.Tensor:
        emb = T.Tensor(sinusoidal_embedding(t, _EMB_DIM).reshape(1, -1), dtype=x.dtype)
        emb = T.add(T.matmul(emb, params["emb_w"]), T.reshape(params["emb_b"], (1, -1)))
        emb = T.reshape(emb, (self.channels,))

        h = T.conv2d(x, params["conv1_w"], stride=1, padding=1)
        h = T.add_channel_bias(h, params["conv1_b"])
        h = T.add_channel_bias(h, emb)
        h = T.relu(h)
        h = T.conv2d(h, params["conv2_w"], stride=1, padding=1)
        h = T.relu(T.add_channel_bias(h, params["conv2_b"]))
        h = T.conv2d(h, params["conv3_w"], stride=1, padding=1)
        h = T.relu(T.add_channel_bias(h, params["conv3_b"]))
        h = T.conv2d(h, params["conv4_w"], stride=1, padding=1)
        return T.add_channel_bias(h, params["conv4_b"])

    def _tensor_params(self, dtype, requires_grad: bool) -> dict[str, T.Tensor]:
        return {k: T.Tensor(v, requires_grad=requires_grad, dtype=dtype)
                for k, v in self.params.items()}

    def predict_eps(self, x_t: np.ndarray, t: int, sched: NoiseSchedule | None = None
                    ) -> np.ndarray:
        """Noise prediction for a (3, H, W) image at timestep t."""
        x = T.Tensor(x_t[None], dtype=x_t.dtype)
        out = self._forward(x, t, self._tensor_params(x.dtype, False))
        return out.numpy()[0]


@dataclass
class TrainResult:
    model: DenoiserModel
    loss_trace: list[float] = field(default_factory=list)


def denoiser_loss(model: DenoiserModel, params: dict[str, T.Tensor],
                  x0_batch: np.ndarray, t: int, eps: np.ndarray,
                  sched: NoiseSchedule) -> T.Tensor:
    """L_simple on one batch: mean squared error of the noise prediction."""
    x_t = forward_noise(x0_batch, t, eps, sched).astype(np.float32)
    pred = model._forward(T.Tensor(x_t), t, params)
    diff = T.sub(pred, T.Tensor(eps.astype(np.float32)))
    return T.tmean(T.mul(diff, diff))


def train_denoiser(dataset: np.ndarray, sched: NoiseSchedule, steps: int = 300,
                   lr: float = 2e-3, seed: int = 0, batch_size: int = 8,
                   channels: int = 32) -> TrainResult:
    """Train the noise predictor with Adam on the simple regression objective."""
    data = np.asarray(dataset, dtype=np.float32)
    if data.ndim != 4 or data.shape[0] < 1:
        raise ValueError("train_denoiser: dataset must be a non-empty (M,C,H,W) array")

    model = DenoiserModel(seed=seed, channels=channels)
    rng = np.random.default_rng(seed + 1)
    m_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    v_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    b1, b2, adam_eps = 0.9, 0.999, 1e-8
    trace: list[float] = []

    for step in range(1, int(steps) + 1):
        idx = rng.integers(0, data.shape[0], size=min(batch_size, data.shape[0]))
        batch = data[idx]
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal(batch.shape).astype(np.float32)

        params = model._tensor_params(np.float32, True)
        loss = denoiser_loss(model, params, batch, t, eps, sched)
        if not math.isfinite(loss.item()):
            raise FloatingPointError("train_denoiser: loss diverged")
        trace.append(loss.item())

        grads = T.backward(loss, list(params.values()))
        for (name, _), g in zip(params.items(), grads):
            m_state[name] = b1 * m_state[name] + (1 - b1) * g
            v_state[name] = b2 * v_state[name] + (1 - b2) * g * g
            m_hat = m_state[name] / (1 - b1 ** step)
            v_hat = v_state[name] / (1 - b2 ** step)
            model.params[name] = model.params[name] - lr * m_hat / (np.sqrt(v_hat) + adam_eps)

    return TrainResult(model=model, loss_trace=trace)


def validation_loss(model: DenoiserModel, dataset: np.ndarray,
                    sched: NoiseSchedule, seed: int = 0, rounds: int = 8) -> float:
    """Average L_simple over seeded (t, eps) draws; used for regression checks."""
    data = np.asarray(dataset, dtype=np.float32)
    rng = np.random.default_rng(seed)
    params = model._tensor_params(np.float32, False)
    losses = []
    for _ in range(rounds):
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal(data.shape).astype(np.float32)
        losses.append(denoiser_loss(model, params, data, t, eps, sched).item())
    return float(np.mean(losses))


def save_denoiser(model: DenoiserModel, path, sched: NoiseSchedule | None = None) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in model.params.items():
        write_atns(out / f"{name}.atns", arr.astype(np.float32))
    manifest = {"arch": model.arch, "seed": model.seed, "channels": model.channels}
    if sched is not None:
        manifest["schedule"] = {"T": sched.T, "beta_start": sched.beta_start,
                                "beta_end": sched.beta_end}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def load_denoiser(path) -> tuple[DenoiserModel, dict]:
    src = Path(path)
    manifest = json.loads((src / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("arch") != DENOISER_ARCH:
        raise ValueError(f"unknown denoiser architecture {manifest.get('arch')!r}")
    model = DenoiserModel(seed=manifest["seed"], channels=manifest["channels"])
    for name in model.params:
        model.params[name] = read_atns(src / f"{name}.atns").astype(np.float64)
    return model, manifest
