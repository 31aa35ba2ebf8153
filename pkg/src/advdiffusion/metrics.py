"""Evaluation metrics: victim transfer similarity, embedding-space attack
success, and image quality (SSIM / PSNR / lp distances).

SSIM uses an 8x8 uniform sliding window over valid positions (no padding),
constants K1=0.01, K2=0.03 at unit dynamic range, averaged per channel.
Attack success is nearest-prototype classification in the victim's
embedding space: success when the adversarial embedding lands closest to
the target class prototype.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .encoders import Encoder, cosine

PSNR_SENTINEL = 999.0  # stands in for infinite PSNR in serialized reports


def transfer_similarity(victim: Encoder, x_adv: np.ndarray,
                        x_tar: np.ndarray) -> float:
    """Cosine similarity of the held-out victim's embeddings."""
    return cosine(victim.embed_array(x_adv), victim.embed_array(x_tar))


def build_prototypes(victim: Encoder, images: np.ndarray, labels: np.ndarray,
                     n_classes: int) -> np.ndarray:
    """Per-class mean victim embeddings (unit-normalized), shape (C, d)."""
    if images.shape[0] < 1:
        raise ValueError("build_prototypes: empty image set")
    protos = np.zeros((n_classes, victim.embed_dim))
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            raise ValueError(f"build_prototypes: class {c} has no images")
        embs = np.stack([victim.embed_array(images[i]) for i in idx])
        mean = embs.mean(axis=0)
        protos[c] = mean / np.linalg.norm(mean)
    return protos


def embed_asr(victim: Encoder, x_adv: np.ndarray, class_prototypes: np.ndarray,
              target_class: int) -> bool:
    """Success iff the victim embedding's nearest prototype is the target class."""
    if class_prototypes.ndim != 2 or class_prototypes.shape[0] < 1:
        raise ValueError("embed_asr: empty prototype set")
    emb = victim.embed_array(x_adv)
    sims = class_prototypes @ emb
    return int(np.argmax(sims)) == int(target_class)


def _window_stats(channel: np.ndarray, win: int) -> tuple[np.ndarray, np.ndarray]:
    views = sliding_window_view(channel, (win, win))
    mu = views.mean(axis=(-2, -1))
    sq = (views.astype(np.float64) ** 2).mean(axis=(-2, -1))
    return mu, sq - mu ** 2


def ssim(x: np.ndarray, y: np.ndarray, win: int = 8,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over valid sliding windows, per channel."""
    if x.shape != y.shape:
        raise ValueError(f"ssim: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    c1 = k1 ** 2
    c2 = k2 ** 2
    vals = []
    for ch in range(x.shape[0]):
        a = np.asarray(x[ch], dtype=np.float64)
        b = np.asarray(y[ch], dtype=np.float64)
        mu_a, var_a = _window_stats(a, win)
        mu_b, var_b = _window_stats(b, win)
        views_a = sliding_window_view(a, (win, win))
        views_b = sliding_window_view(b, (win, win))
        cov = (views_a * views_b).mean(axis=(-2, -1)) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
        vals.append((num / den).mean())
    return float(np.mean(vals))


def psnr(x: np.ndarray, y: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB at peak 1.0; +inf for identical inputs."""
    if x.shape != y.shape:
        raise ValueError(f"psnr: {x.shape} vs {y.shape}")
    mse = float(np.mean((np.asarray(x, dtype=np.float64) - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def lp_norms(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """(l-infinity, l2) distances."""
    if x.shape != y.shape:
        raise ValueError(f"lp_norms: {x.shape} vs {y.shape}")
    diff = np.asarray(x, dtype=np.float64) - y
    return float(np.abs(diff).max()), float(np.sqrt((diff ** 2).sum()))


_AGG_FIELDS = ("transfer_sim", "ssim", "psnr", "linf", "l2", "wall_time")


@dataclass
class EvalReport:
    """Per-image evaluation records plus recomputable aggregates.

    The ASR analog is nearest-prototype classification in embedding space
    (no captioner exists at this scale); the header notes record that and
    the SSIM constants.
    """

    records: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    notes: dict = field(default_factory=lambda: {
        "asr_definition": "nearest-prototype match in victim embedding space",
        "ssim_window": "8x8 uniform sliding window, K1=0.01, K2=0.03, peak 1.0",
    })

    def add_record(self, record: dict) -> None:
        self.records.append(record)

    def ok_records(self) -> list[dict]:
        return [r for r in self.records if "error" not in r]

    def aggregates(self) -> dict:
        recs = self.ok_records()
        out: dict = {"images": len(self.records), "failures":
                     len(self.records) - len(recs)}
        if not recs:
            return out
        for key in _AGG_FIELDS:
            vals = [r[key] for r in recs if key in r and r[key] is not None
                    and math.isfinite(r[key])]
            if vals:
                out[f"{key}_mean"] = float(np.mean(vals))
                out[f"{key}_std"] = float(np.std(vals))
        flags = [bool(r["embed_asr"]) for r in recs if "embed_asr" in r]
        if flags:
            out["asr"] = float(np.mean(flags))
        return out

    def to_json(self, include_timing: bool = True) -> str:
        records = self.records
        aggregates = self.aggregates()
        if not include_timing:
            records = [{k: v for k, v in r.items() if "time" not in k}
                       for r in records]
            aggregates = {k: v for k, v in aggregates.items() if "time" not in k}
        payload = {
            "notes": self.notes,
            "config": self.config,
            "records": [_jsonable(r) for r in records],
            "aggregates": _jsonable(aggregates),
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        keys: list[str] = []
        for r in self.records:
            for k in r:
                if k not in keys:
                    keys.append(k)
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=keys, restval="")
        writer.writeheader()
        for r in self.records:
            writer.writerow(_jsonable(r))
        return buf.getvalue()

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        payload = json.loads(text)
        report = cls(records=payload.get("records", []),
                     config=payload.get("config", {}))
        if "notes" in payload:
            report.notes = payload["notes"]
        return report


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        if math.isinf(f):
            return PSNR_SENTINEL if f > 0 else -PSNR_SENTINEL
        return f
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    return obj
