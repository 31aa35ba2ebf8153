"""Class-activation-guided mask generation and latent blending.

A small convolutional classifier provides a gradient-weighted class
activation map for the clean image. The map is clipped to a value band,
normalized into a sampling distribution, and at every reverse step a k x k
patch center is drawn from it. Inside the patch the latent reverts to the
plainly re-noised original; outside it the guided latent persists.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .atns import read_atns, write_atns

CLASSIFIER_ARCH = "conv2_c16_32"


@dataclass
class MaskConfig:
    k: int = 8
    clip_lo: float = 0.3
    clip_hi: float = 0.7
    patches_per_step: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("MaskConfig: k must be >= 1")
        if not 0.0 <= self.clip_lo < self.clip_hi <= 1.0:
            raise ValueError("MaskConfig: need 0 <= clip_lo < clip_hi <= 1")
        if self.patches_per_step < 1:
            raise ValueError("MaskConfig: patches_per_step must be >= 1")


class ClassifierModel:
    """Toy convolutional classifier; second conv block feeds the activation map."""

    def __init__(self, n_classes: int = 8, seed: int = 0):
        self.arch = CLASSIFIER_ARCH
        self.n_classes = int(n_classes)
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)

        def he(shape, fan_in):
            return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in))

        self.params: dict[str, np.ndarray] = {
            "conv1_w": he((16, 3, 3, 3), 27),
            "conv1_b": np.zeros(16),
            "conv2_w": he((32, 16, 3, 3), 144),
            "conv2_b": np.zeros(32),
            "fc_w": he((32, self.n_classes), 32),
            "fc_b": np.zeros(self.n_classes),
        }

    def _tensor_params(self, dtype, requires_grad: bool = False) -> dict[str, T.Tensor]:
        return {k: T.Tensor(v, requires_grad=requires_grad, dtype=dtype)
                for k, v in self.params.items()}

    def forward(self, x: T.Tensor, params: dict[str, T.Tensor] | None = None
                ) -> tuple[T.Tensor, T.Tensor]:
        """Returns (logits (1, C), activation map (1, 32, H/2, W/2))."""
        params = params or self._tensor_params(x.dtype)
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        h = T.relu(T.add_channel_bias(
            T.conv2d(x, params["conv1_w"], stride=1, padding=1), params["conv1_b"]))
        acts = T.relu(T.add_channel_bias(
            T.conv2d(h, params["conv2_w"], stride=2, padding=1), params["conv2_b"]))
        pooled = T.global_avg_pool(acts)
        logits = T.add(T.matmul(pooled, params["fc_w"]),
                       T.reshape(params["fc_b"], (1, -1)))
        return logits, acts

    def logits(self, image: np.ndarray) -> np.ndarray:
        out, _ = self.forward(T.Tensor(image, dtype=image.dtype))
        return out.numpy()[0]

    def predict(self, image: np.ndarray) -> int:
        return int(np.argmax(self.logits(image)))


def train_classifier(images: np.ndarray, labels: np.ndarray, n_classes: int = 8,
                     steps: int = 200, lr: float = 5e-3, seed: int = 0,
                     batch_size: int = 16) -> ClassifierModel:
    """Fit the toy classifier by squared error against one-hot labels."""
    data = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if data.ndim != 4 or data.shape[0] != labels.shape[0] or data.shape[0] < 1:
        raise ValueError("train_classifier: images (M,C,H,W) with matching labels")
    model = ClassifierModel(n_classes=n_classes, seed=seed)
    rng = np.random.default_rng(seed + 1)
    m_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    v_state = {k: np.zeros_like(v) for k, v in model.params.items()}
    b1, b2, eps = 0.9, 0.999, 1e-8

    for step in range(1, int(steps) + 1):
        idx = rng.integers(0, data.shape[0], size=min(batch_size, data.shape[0]))
        onehot = np.eye(n_classes, dtype=np.float32)[labels[idx]]
        params = model._tensor_params(np.float32, requires_grad=True)
        # one image per graph keeps timestep-free batching simple; sum the terms
        total = None
        for j in range(idx.size):
            logits_j, _ = model.forward(T.Tensor(data[idx[j]:idx[j] + 1]), params)
            diff = T.sub(logits_j, T.Tensor(onehot[j:j + 1]))
            term = T.tmean(T.mul(diff, diff))
            total = term if total is None else T.add(total, term)
        loss = T.scale(total, 1.0 / idx.size)
        grads = T.backward(loss, list(params.values()))
        for (name, _), g in zip(params.items(), grads):
            m_state[name] = b1 * m_state[name] + (1 - b1) * g
            v_state[name] = b2 * v_state[name] + (1 - b2) * g * g
            m_hat = m_state[name] / (1 - b1 ** step)
            v_hat = v_state[name] / (1 - b2 ** step)
            model.params[name] = model.params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
    return model


def gradcam(classifier: ClassifierModel, x: np.ndarray, y: int) -> np.ndarray:
    """Gradient-weighted class activation map, normalized to [0, 1].

    Per-channel weights are the spatial mean of d(logit_y)/d(activations);
    the ReLU of the weighted activation sum is nearest-upsampled to the
    input resolution and min-max normalized. A constant map degenerates to
    all-0.5 so downstream sampling stays uniform.
    """
    if not 0 <= int(y) < classifier.n_classes:
        raise ValueError(f"gradcam: class {y} outside 0..{classifier.n_classes - 1}")
    leaf = T.Tensor(x, requires_grad=True, dtype=x.dtype)
    logits, acts = classifier.forward(leaf)
    onehot = np.zeros((1, classifier.n_classes), dtype=x.dtype)
    onehot[0, int(y)] = 1.0
    target_logit = T.tsum(T.mul(logits, T.Tensor(onehot, dtype=logits.dtype)))
    grad_acts = T.backward(target_logit, [acts])[0]

    weights = grad_acts[0].mean(axis=(1, 2))            # (C,)
    cam = np.maximum((weights[:, None, None] * acts.numpy()[0]).sum(axis=0), 0.0)
    h, w = x.shape[-2], x.shape[-1]
    factor = h // cam.shape[0]
    if factor * cam.shape[0] != h or factor * cam.shape[1] != w:
        raise ValueError("gradcam: activation grid does not divide the image size")
    cam = np.repeat(np.repeat(cam, factor, axis=0), factor, axis=1)

    lo, hi = float(cam.min()), float(cam.max())
    if hi - lo < 1e-12:
        return np.full((h, w), 0.5, dtype=np.float64)
    return ((cam - lo) / (hi - lo)).astype(np.float64)


def cam_to_prob(cam: np.ndarray, clip_lo: float = 0.3,
                clip_hi: float = 0.7) -> np.ndarray:
    """Clamp the map into [clip_lo, clip_hi] and normalize to a distribution."""
    if not 0.0 <= clip_lo < clip_hi <= 1.0:
        raise ValueError("cam_to_prob: need 0 <= clip_lo < clip_hi <= 1")
    clamped = np.clip(np.asarray(cam, dtype=np.float64), clip_lo, clip_hi)
    return clamped / clamped.sum()


def sample_centers(p: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw flat center indices according to the probability matrix."""
    flat = p.ravel()
    if abs(flat.sum() - 1.0) > 1e-6:
        raise ValueError("sample_centers: probabilities must sum to 1")
    return rng.choice(flat.size, size=count, p=flat)


def sample_mask(p: np.ndarray, k: int, rng: np.random.Generator,
                patches_per_step: int = 1) -> np.ndarray:
    """Binary H x W mask: k x k squares (border-truncated) around sampled centers."""
    h, w = p.shape
    mask = np.zeros((h, w), dtype=np.float64)
    centers = sample_centers(p, patches_per_step, rng)
    half = k // 2
    for c in centers:
        cy, cx = divmod(int(c), w)
        y0, x0 = max(0, cy - half), max(0, cx - half)
        mask[y0:cy - half + k, x0:cx - half + k] = 1.0
    return mask


def blend(x_t: np.ndarray, x_tilde_t: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Combine latents: mask picks the re-noised original, elsewhere keep x_tilde."""
    if x_t.shape != x_tilde_t.shape:
        raise ValueError(f"blend: {x_t.shape} vs {x_tilde_t.shape}")
    if m.shape == x_t.shape[-2:]:
        m = np.broadcast_to(m, x_t.shape)
    elif m.shape != x_t.shape:
        raise ValueError(f"blend: mask {m.shape} incompatible with {x_t.shape}")
    return m * x_t + (1.0 - m) * x_tilde_t


def save_classifier(model: ClassifierModel, path) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in model.params.items():
        write_atns(out / f"{name}.atns", arr.astype(np.float32))
    manifest = {"arch": model.arch, "seed": model.seed, "n_classes": model.n_classes}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def load_classifier(path) -> ClassifierModel:
    src = Path(path)
    manifest = json.loads((src / "manifest.json").read_text(encoding="utf-8"))
    model = ClassifierModel(n_classes=manifest["n_classes"], seed=manifest["seed"])
    for name in model.params:
        model.params[name] = read_atns(src / f"{name}.atns").astype(np.float64)
    return model
