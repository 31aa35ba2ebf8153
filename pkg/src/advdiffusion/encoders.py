"""Surrogate image-encoder ensemble and the held-out victim encoder.

Encoders are small fixed-weight convolutional feature extractors with five
distinct layouts. Four layouts serve as attack surrogates; the fifth is
reserved for the victim so that its architecture id never coincides with a
member's. Weights are seeded random draws (no contrastive training);
embeddings are unit-norm vectors, differentiable when the input is traced.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .atns import read_atns, write_atns

EMBED_DIM = 64

# layout: (out_channels, kernel, stride, padding) per conv layer
ARCHITECTURES: dict[str, list[tuple[int, int, int, int]]] = {
    "tiny_a": [(16, 3, 2, 1), (32, 3, 2, 1)],
    "tiny_b": [(24, 5, 2, 2), (24, 3, 1, 1)],
    "tiny_c": [(12, 3, 1, 1), (24, 3, 2, 1), (32, 3, 2, 1)],
    "tiny_d": [(32, 7, 2, 3), (16, 1, 1, 0)],
    "tiny_v": [(20, 5, 1, 2), (40, 3, 2, 1)],
}
MEMBER_ARCHS = ("tiny_a", "tiny_b", "tiny_c", "tiny_d")
VICTIM_ARCH = "tiny_v"


class EncoderConfigError(ValueError):
    """Bad ensemble configuration (duplicate seeds, victim overlap, ...)."""


class Encoder:
    """Fixed random convolutional encoder mapping images to unit vectors."""

    def __init__(self, arch: str, seed: int, embed_dim: int = EMBED_DIM):
        if arch not in ARCHITECTURES:
            raise EncoderConfigError(f"unknown architecture {arch!r}")
        self.arch = arch
        self.seed = int(seed)
        self.embed_dim = int(embed_dim)
        rng = np.random.default_rng(self.seed)
        self.params: dict[str, np.ndarray] = {}
        c_in = 3
        for i, (c_out, k, _, _) in enumerate(ARCHITECTURES[arch]):
            fan_in = c_in * k * k
            self.params[f"conv{i}_w"] = (
                rng.standard_normal((c_out, c_in, k, k)) * math.sqrt(2.0 / fan_in)
            )
            self.params[f"conv{i}_b"] = rng.standard_normal(c_out) * 0.1
            c_in = c_out
        self.params["proj_w"] = rng.standard_normal((c_in, embed_dim)) / math.sqrt(c_in)
        self.params["proj_b"] = rng.standard_normal(embed_dim) * 0.05
        self.params["center"] = self._probe_center(rng)

    def _probe_center(self, rng: np.random.Generator) -> np.ndarray:
        """Mean pooled feature over a seeded synthetic probe batch.

        Random feature extractors respond to every image with a large shared
        component; subtracting it before projection spreads embeddings over
        the sphere instead of collapsing them into a narrow cone.
        """
        self.params.setdefault("center", np.zeros(self.params["proj_w"].shape[0]))
        probes = [np.full((3, 16, 16), 0.0) + rng.uniform(0, 1, (3, 1, 1))
                  for _ in range(12)]
        probes += [rng.uniform(0, 1, (3, 16, 16)) for _ in range(4)]
        pooled = [self._pooled(T.Tensor(p, dtype=np.float64)).numpy()[0]
                  for p in probes]
        return np.mean(pooled, axis=0)

    def _pooled(self, x: T.Tensor) -> T.Tensor:
        if x.ndim == 3:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[0] != 1 or x.shape[1] != 3:
            raise T.ShapeError(f"encoder input shape {x.shape}")
        dtype = x.dtype
        layers = ARCHITECTURES[self.arch]
        h = x
        for i, (_, _, stride, pad) in enumerate(layers):
            w = T.Tensor(self.params[f"conv{i}_w"], dtype=dtype)
            b = T.Tensor(self.params[f"conv{i}_b"], dtype=dtype)
            h = T.add_channel_bias(T.conv2d(h, w, stride=stride, padding=pad), b)
            if i < len(layers) - 1:
                h = T.relu(h)
        # no activation on the last block: signed features vary more than
        # rectified ones once the shared probe response is subtracted
        return T.global_avg_pool(h)

    def embed(self, image: T.Tensor) -> T.Tensor:
        """Unit-norm embedding of a (3, H, W) or (1, 3, H, W) image tensor."""
        pooled = self._pooled(image)
        dtype = pooled.dtype
        centered = T.sub(pooled, T.reshape(
            T.Tensor(self.params["center"], dtype=dtype), (1, -1)))
        proj = T.add(T.matmul(centered, T.Tensor(self.params["proj_w"], dtype=dtype)),
                     T.reshape(T.Tensor(self.params["proj_b"], dtype=dtype), (1, -1)))
        return T.l2_normalize(T.reshape(proj, (self.embed_dim,)))

    def embed_array(self, image: np.ndarray) -> np.ndarray:
        """Untraced embedding of a plain (3, H, W) array."""
        return self.embed(T.Tensor(image, dtype=image.dtype)).numpy()


def cosine(e1, e2) -> float:
    """Cosine similarity of two embedding vectors, clamped to [-1, 1]."""
    a = e1.numpy() if isinstance(e1, T.Tensor) else np.asarray(e1)
    b = e2.numpy() if isinstance(e2, T.Tensor) else np.asarray(e2)
    if a.shape != b.shape:
        raise T.ShapeError(f"cosine: {a.shape} vs {b.shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na < 1e-12 or nb < 1e-12:
        raise T.NonFiniteError("cosine: zero-norm embedding")
    return float(np.clip(float(a.ravel() @ b.ravel()) / (na * nb), -1.0, 1.0))


@dataclass
class EnsembleConfig:
    n_members: int = 4
    embed_dim: int = EMBED_DIM


class EncoderEnsemble:
    """N_m surrogate encoders plus one held-out victim encoder.

    The victim's architecture id and seed differ from every member's; the
    attack path only ever embeds through members, so no gradient can reach
    victim parameters.
    """

    def __init__(self, members: list[Encoder], victim: Encoder):
        for m in members:
            if m.arch == victim.arch or m.seed == victim.seed:
                raise EncoderConfigError("victim must differ from members in "
                                         "architecture id and seed")
        if len({m.seed for m in members}) != len(members):
            raise EncoderConfigError("duplicate member seeds")
        self.members = list(members)
        self.victim = victim

    @property
    def n_members(self) -> int:
        return len(self.members)

    def member_embeds(self, image: T.Tensor) -> list[T.Tensor]:
        return [m.embed(image) for m in self.members]

    def victim_embed(self, image: np.ndarray) -> np.ndarray:
        # deliberately array-in/array-out: the victim is never traced
        return self.victim.embed_array(image)


def build_ensemble(config: EnsembleConfig | None = None,
                   seeds: list[int] | None = None,
                   victim_seed: int | None = None) -> EncoderEnsemble:
    """Deterministically build N_m members (cycling the four member layouts)
    and a victim on the fifth layout."""
    config = config or EnsembleConfig()
    if config.n_members < 1:
        raise EncoderConfigError("n_members must be >= 1")
    if seeds is None:
        seeds = [101 + 13 * i for i in range(config.n_members)]
    if len(seeds) != config.n_members:
        raise EncoderConfigError(f"need {config.n_members} seeds, got {len(seeds)}")
    if len(set(seeds)) != len(seeds):
        raise EncoderConfigError("duplicate seeds")
    if victim_seed is None:
        victim_seed = max(seeds) + 977
    if victim_seed in seeds:
        raise EncoderConfigError("victim seed collides with a member seed")
    members = [Encoder(MEMBER_ARCHS[i % len(MEMBER_ARCHS)], seed, config.embed_dim)
               for i, seed in enumerate(seeds)]
    victim = Encoder(VICTIM_ARCH, victim_seed, config.embed_dim)
    return EncoderEnsemble(members, victim)


def save_encoder(enc: Encoder, path) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in enc.params.items():
        write_atns(out / f"{name}.atns", arr.astype(np.float32))
    manifest = {"arch": enc.arch, "seed": enc.seed, "embed_dim": enc.embed_dim}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def load_encoder(path) -> Encoder:
    src = Path(path)
    manifest = json.loads((src / "manifest.json").read_text(encoding="utf-8"))
    enc = Encoder(manifest["arch"], manifest["seed"], manifest["embed_dim"])
    for name in enc.params:
        enc.params[name] = read_atns(src / f"{name}.atns").astype(np.float64)
    return enc
