"""Experiment orchestration: dataset, models, attacks, defenses, report.

A run is fully determined by its config and seed. Per-image seeds derive
as seed + index, so batches are order-independent and safe to fan out
across threads; one failing image yields an error record instead of
aborting the batch.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attack import (AttackConfig, AttackResult, guided_diffusion_attack,
                     mifgsm_ensemble_attack, trace_to_csv)
from .cam_mask import ClassifierModel, load_classifier, train_classifier
from .data import N_CLASSES, ToyDataset, gen_toy_dataset
from .defenses import DefenseConfig, apply_defense
from .diffusion import (GaussianOracle, NoiseSchedule, load_denoiser,
                        make_linear_schedule, train_denoiser)
from .encoders import EncoderEnsemble, EnsembleConfig, build_ensemble
from .imaging import save_image
from .metrics import (EvalReport, build_prototypes, embed_asr, lp_norms, psnr,
                      ssim, transfer_similarity)


@dataclass
class ExperimentConfig:
    seed: int
    out_dir: str | None = None
    dataset_count: int = 32
    image_size: int = 32
    n_images: int = 4
    parallelism: int = 1
    attack: AttackConfig = field(default_factory=AttackConfig)
    defenses: list[DefenseConfig] = field(default_factory=list)
    baseline: bool = False
    baseline_steps: int = 100
    eps_source_kind: str = "oracle"
    denoiser_path: str | None = None
    denoiser_steps: int = 150
    classifier_path: str | None = None
    classifier_steps: int = 120
    n_members: int = 4
    ensemble_seeds: list[int] | None = None
    victim_seed: int | None = None
    save_images: bool = True

    def __post_init__(self):
        if self.seed is None:
            raise ValueError("ExperimentConfig: seed is mandatory")
        if self.parallelism < 1:
            raise ValueError("ExperimentConfig: parallelism must be >= 1")
        if self.eps_source_kind not in ("oracle", "denoiser"):
            raise ValueError("ExperimentConfig: eps_source_kind must be "
                             "'oracle' or 'denoiser'")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        dataset = raw.pop("dataset", {})
        attack = AttackConfig(**raw.pop("attack", {}))
        defenses = [DefenseConfig(**d) for d in raw.pop("defenses", [])]
        eps_src = raw.pop("eps_source", {})
        return cls(
            attack=attack,
            defenses=defenses,
            dataset_count=dataset.get("count", 32),
            image_size=dataset.get("size", 32),
            eps_source_kind=eps_src.get("kind", "oracle"),
            denoiser_path=eps_src.get("path"),
            denoiser_steps=eps_src.get("train_steps", 150),
            **raw,
        )

    @classmethod
    def from_json_file(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"] = asdict(self.attack)
        d["defenses"] = [asdict(x) for x in self.defenses]
        return d


def fit_oracle(images: np.ndarray, var_floor: float = 0.01) -> GaussianOracle:
    """Diagonal Gaussian fit to the dataset, with a variance floor."""
    mu = images.mean(axis=0)
    var = images.var(axis=0) + var_floor
    return GaussianOracle(mu0=mu, var0=var)


@dataclass
class ExperimentContext:
    """Everything a per-image pipeline needs; built once per run."""

    config: ExperimentConfig
    dataset: ToyDataset
    ensemble: EncoderEnsemble
    classifier: ClassifierModel
    eps_source: object
    sched: NoiseSchedule
    prototypes: np.ndarray


def build_context(cfg: ExperimentConfig) -> ExperimentContext:
    dataset = gen_toy_dataset(cfg.dataset_count, cfg.seed, cfg.image_size)
    ensemble = build_ensemble(EnsembleConfig(n_members=cfg.n_members),
                              seeds=cfg.ensemble_seeds,
                              victim_seed=cfg.victim_seed)
    sched = make_linear_schedule(cfg.attack.T)
    if cfg.classifier_path:
        classifier = load_classifier(cfg.classifier_path)
    else:
        classifier = train_classifier(dataset.images, dataset.labels,
                                      n_classes=N_CLASSES,
                                      steps=cfg.classifier_steps,
                                      seed=cfg.seed)
    if cfg.eps_source_kind == "denoiser":
        if cfg.denoiser_path:
            eps_source, _ = load_denoiser(cfg.denoiser_path)
        else:
            eps_source = train_denoiser(dataset.images, sched,
                                        steps=cfg.denoiser_steps,
                                        seed=cfg.seed).model
    else:
        eps_source = fit_oracle(dataset.images)
    prototypes = build_prototypes(ensemble.victim, dataset.images,
                                  dataset.labels, N_CLASSES)
    return ExperimentContext(config=cfg, dataset=dataset, ensemble=ensemble,
                             classifier=classifier, eps_source=eps_source,
                             sched=sched, prototypes=prototypes)


def pick_target(dataset: ToyDataset, source_label: int) -> tuple[int, np.ndarray]:
    """Deterministic cross-class target: half the class ring away."""
    target_class = (int(source_label) + N_CLASSES // 2) % N_CLASSES
    candidates = np.flatnonzero(dataset.labels == target_class)
    if candidates.size == 0:
        raise ValueError(f"no images of target class {target_class}")
    return target_class, dataset.images[int(candidates[0])]


def run_single_image(ctx: ExperimentContext, index: int
                     ) -> tuple[dict, AttackResult | None, np.ndarray | None]:
    cfg = ctx.config
    x = ctx.dataset.images[index]
    label = int(ctx.dataset.labels[index])
    target_class, x_tar = pick_target(ctx.dataset, label)
    rng = np.random.default_rng(cfg.seed + index)

    attack_cfg = AttackConfig(**{**asdict(cfg.attack),
                                 "seed": cfg.seed + index, "label": label})
    result = guided_diffusion_attack(x, x_tar, ctx.ensemble, ctx.classifier,
                                     ctx.eps_source, ctx.sched, attack_cfg, rng)
    x_adv = result.x_adv

    linf, l2 = lp_norms(x, x_adv)
    record: dict = {
        "index": index,
        "label": label,
        "target_class": target_class,
        "transfer_sim": transfer_similarity(ctx.ensemble.victim, x_adv, x_tar),
        "transfer_sim_floor": transfer_similarity(ctx.ensemble.victim, x, x_tar),
        "embed_asr": embed_asr(ctx.ensemble.victim, x_adv, ctx.prototypes,
                               target_class),
        "ssim": ssim(x, x_adv),
        "psnr": psnr(x, x_adv),
        "linf": linf,
        "l2": l2,
        "objective_first": result.trace[0].objective,
        "objective_last": result.trace[-1].objective,
        "max_linf_g": result.max_linf_g(),
        "wall_time": result.wall_time,
    }
    for d_cfg in cfg.defenses:
        defended = apply_defense(x_adv, d_cfg, eps_source=ctx.eps_source,
                                 sched=ctx.sched, rng=rng)
        record[f"transfer_sim_after_{d_cfg.label()}"] = transfer_similarity(
            ctx.ensemble.victim, defended, x_tar)
    if cfg.baseline:
        started = time.perf_counter()
        x_base = mifgsm_ensemble_attack(x, x_tar, ctx.ensemble,
                                        steps=cfg.baseline_steps)
        b_linf, b_l2 = lp_norms(x, x_base)
        record.update({
            "baseline_transfer_sim": transfer_similarity(ctx.ensemble.victim,
                                                         x_base, x_tar),
            "baseline_linf": b_linf,
            "baseline_l2": b_l2,
            "baseline_wall_time": time.perf_counter() - started,
        })
        for d_cfg in cfg.defenses:
            defended = apply_defense(x_base, d_cfg, eps_source=ctx.eps_source,
                                     sched=ctx.sched, rng=rng)
            record[f"baseline_transfer_sim_after_{d_cfg.label()}"] = \
                transfer_similarity(ctx.ensemble.victim, defended, x_tar)
    return record, result, x_adv


def run_experiment(cfg: ExperimentConfig) -> EvalReport:
    """Attack, defend, and evaluate a batch of source images."""
    ctx = build_context(cfg)
    indices = list(range(min(cfg.n_images, len(ctx.dataset))))
    report = EvalReport(config=cfg.to_dict())

    def job(i: int):
        try:
            return run_single_image(ctx, i)
        except Exception as exc:  # noqa: BLE001 - per-image isolation
            return {"index": i, "error": f"{type(exc).__name__}: {exc}"}, None, None

    if cfg.parallelism > 1 and len(indices) > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
            outcomes = list(pool.map(job, indices))
    else:
        outcomes = [job(i) for i in indices]

    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    for (record, result, x_adv) in outcomes:
        report.add_record(record)
        if out_dir and x_adv is not None:
            save_image(x_adv, out_dir / "images" / f"x_adv_{record['index']:03d}.png")
            (out_dir / "images" / f"trace_{record['index']:03d}.csv").write_text(
                trace_to_csv(result), encoding="utf-8")

    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
        (out_dir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    return report
