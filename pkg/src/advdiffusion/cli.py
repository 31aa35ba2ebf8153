"""Command-line surface.

Subcommands: attack, baseline, defend, evaluate, train-denoiser,
train-classifier, gen-data, report. Exit codes: 0 success, 1 usage error,
2 runtime failure. All randomness derives from --seed (or the config's
seed), so identical invocations produce identical artifacts.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .attack import AttackConfig, guided_diffusion_attack, mifgsm_ensemble_attack, trace_to_csv
from .cam_mask import save_classifier, train_classifier
from .data import gen_toy_dataset
from .defenses import DefenseConfig, apply_defense
from .diffusion import make_linear_schedule, save_denoiser, train_denoiser
from .imaging import load_image, save_image
from .metrics import EvalReport, lp_norms, psnr, ssim, transfer_similarity
from .runner import ExperimentConfig, build_context, run_experiment


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits with code 2
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="advdiffusion",
                     description="Guided diffusion attack toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_attack_overrides(p):
        p.add_argument("--s", type=float, default=None)
        p.add_argument("--delta", type=float, default=None)
        p.add_argument("--t-star", type=float, default=None, dest="t_star_frac")
        p.add_argument("--k", type=int, default=None)
        p.add_argument("--tau", type=float, default=None)
        p.add_argument("--N", type=int, default=None, dest="n_iters")
        p.add_argument("--T", type=int, default=None)
        p.add_argument("--sampler", choices=("ddpm-mean", "ddim"), default=None)

    p = sub.add_parser("attack", help="guided diffusion attack on one image")
    p.add_argument("--config", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    add_attack_overrides(p)

    p = sub.add_parser("baseline", help="momentum-FGSM ensemble baseline")
    p.add_argument("--config", default=None)
    p.add_argument("--image", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--eps", type=float, default=16.0 / 255.0)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--step-size", type=float, default=None)

    p = sub.add_parser("defend", help="purify an image")
    p.add_argument("--kind", required=True,
                   choices=("bit_reduction", "jpeg", "diffpure"))
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bits", type=int, default=4)
    p.add_argument("--quality", type=int, default=50)
    p.add_argument("--t-frac", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None,
                   help="experiment config supplying the diffusion backend")

    p = sub.add_parser("evaluate",
                       help="full experiment (--config) or one-image metrics")
    p.add_argument("--config", default=None)
    p.add_argument("--image", default=None)
    p.add_argument("--adv", default=None)
    p.add_argument("--target", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--parallelism", type=int, default=None)

    p = sub.add_parser("train-denoiser", help="train the toy noise predictor")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--T", type=int, default=200)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-classifier", help="train the mask classifier")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-data", help="write the procedural toy dataset")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=32)

    p = sub.add_parser("report", help="summarize an existing report.json")
    p.add_argument("--report", required=True)
    p.add_argument("--out-csv", default=None)
    return parser


def _experiment_config(path: str | None, seed_override: int | None = None
                       ) -> ExperimentConfig:
    if path:
        cfg = ExperimentConfig.from_json_file(path)
    else:
        cfg = ExperimentConfig(seed=0)
    if seed_override is not None:
        cfg.seed = seed_override
    return cfg


def _apply_attack_overrides(cfg: ExperimentConfig, args) -> None:
    attack = asdict(cfg.attack)
    for name in ("s", "delta", "t_star_frac", "k", "tau", "n_iters", "T", "sampler"):
        value = getattr(args, name, None)
        if value is not None:
            attack[name] = value
    cfg.attack = AttackConfig(**attack)


def _cmd_attack(args) -> int:
    cfg = _experiment_config(args.config, args.seed)
    _apply_attack_overrides(cfg, args)
    ctx = build_context(cfg)
    x = load_image(args.image)
    x_tar = load_image(args.target)
    rng = np.random.default_rng(cfg.seed)
    result = guided_diffusion_attack(x, x_tar, ctx.ensemble, ctx.classifier,
                                     ctx.eps_source, ctx.sched, cfg.attack, rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(result.x_adv, out / "x_adv.png")
    (out / "trace.csv").write_text(trace_to_csv(result), encoding="utf-8")
    linf, l2 = lp_norms(x, result.x_adv)
    report = EvalReport(config=cfg.to_dict())
    report.add_record({
        "image": str(args.image), "target": str(args.target),
        "transfer_sim": transfer_similarity(ctx.ensemble.victim, result.x_adv, x_tar),
        "transfer_sim_floor": transfer_similarity(ctx.ensemble.victim, x, x_tar),
        "ssim": ssim(x, result.x_adv), "psnr": psnr(x, result.x_adv),
        "linf": linf, "l2": l2,
        "objective_first": result.trace[0].objective,
        "objective_last": result.trace[-1].objective,
        "wall_time": result.wall_time,
    })
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    print(f"wrote {out / 'x_adv.png'}, trace.csv, report.json")
    return 0


def _cmd_baseline(args) -> int:
    cfg = _experiment_config(args.config, args.seed)
    ctx = build_context(cfg)
    x = load_image(args.image)
    x_tar = load_image(args.target)
    x_adv = mifgsm_ensemble_attack(x, x_tar, ctx.ensemble, steps=args.steps,
                                   eps_budget=args.eps, mu=args.mu,
                                   step_size=args.step_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(x_adv, out / "x_adv.png")
    linf, l2 = lp_norms(x, x_adv)
    report = EvalReport(config={"baseline": vars(args)})
    report.add_record({
        "image": str(args.image), "target": str(args.target),
        "transfer_sim": transfer_similarity(ctx.ensemble.victim, x_adv, x_tar),
        "ssim": ssim(x, x_adv), "psnr": psnr(x, x_adv), "linf": linf, "l2": l2,
    })
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    print(f"wrote {out / 'x_adv.png'} (linf={linf:.5f})")
    return 0


def _cmd_defend(args) -> int:
    x = load_image(args.image)
    d_cfg = DefenseConfig(kind=args.kind, bits=args.bits,
                          jpeg_quality=args.quality,
                          diffpure_t_frac=args.t_frac)
    if args.kind == "diffpure":
        cfg = _experiment_config(args.config, args.seed)
        ctx = build_context(cfg)
        rng = np.random.default_rng(args.seed)
        out_img = apply_defense(x, d_cfg, eps_source=ctx.eps_source,
                                sched=ctx.sched, rng=rng)
    else:
        out_img = apply_defense(x, d_cfg)
    save_image(out_img, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    if args.config:
        cfg = _experiment_config(args.config, args.seed)
        if args.parallelism is not None:
            cfg.parallelism = args.parallelism
        report = run_experiment(cfg)
        print(json.dumps(report.aggregates(), indent=2, sort_keys=True))
        if not cfg.out_dir and args.out:
            Path(args.out).write_text(report.to_json(), encoding="utf-8")
        return 0
    if not (args.image and args.adv and args.target):
        raise UsageError("evaluate: need --config, or --image/--adv/--target")
    cfg = _experiment_config(None, args.seed or 0)
    ctx = build_context(cfg)
    x, x_adv, x_tar = (load_image(p) for p in (args.image, args.adv, args.target))
    linf, l2 = lp_norms(x, x_adv)
    record = {
        "transfer_sim": transfer_similarity(ctx.ensemble.victim, x_adv, x_tar),
        "transfer_sim_floor": transfer_similarity(ctx.ensemble.victim, x, x_tar),
        "ssim": ssim(x, x_adv), "psnr": psnr(x, x_adv), "linf": linf, "l2": l2,
    }
    print(json.dumps({k: round(v, 6) if isinstance(v, float) else v
                      for k, v in record.items()}, indent=2, sort_keys=True))
    if args.out:
        report = EvalReport(config=cfg.to_dict())
        report.add_record(record)
        Path(args.out).write_text(report.to_json(), encoding="utf-8")
    return 0


def _cmd_train_denoiser(args) -> int:
    dataset = gen_toy_dataset(args.count, args.seed)
    sched = make_linear_schedule(args.T)
    result = train_denoiser(dataset.images, sched, steps=args.steps, seed=args.seed)
    save_denoiser(result.model, args.out, sched)
    print(f"loss {result.loss_trace[0]:.4f} -> {result.loss_trace[-1]:.4f}; "
          f"saved to {args.out}")
    return 0


def _cmd_train_classifier(args) -> int:
    dataset = gen_toy_dataset(args.count, args.seed)
    model = train_classifier(dataset.images, dataset.labels,
                             steps=args.steps, seed=args.seed)
    save_classifier(model, args.out)
    correct = sum(model.predict(dataset.images[i]) == dataset.labels[i]
                  for i in range(len(dataset)))
    print(f"train accuracy {correct / len(dataset):.2f}; saved to {args.out}")
    return 0


def _cmd_gen_data(args) -> int:
    dataset = gen_toy_dataset(args.count, args.seed, args.size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = []
    for i in range(len(dataset)):
        name = f"img_{i:04d}_c{int(dataset.labels[i])}.png"
        save_image(dataset.images[i], out / name)
        labels.append({"file": name, "label": int(dataset.labels[i]),
                       "split": dataset.splits[i]})
    (out / "labels.json").write_text(
        json.dumps({"seed": args.seed, "count": args.count,
                    "classes": dataset.class_names, "items": labels},
                   indent=2, sort_keys=True), encoding="utf-8")
    print(f"wrote {len(dataset)} images to {out}")
    return 0


def _cmd_report(args) -> int:
    report = EvalReport.from_json(Path(args.report).read_text(encoding="utf-8"))
    agg = report.aggregates()
    print(f"{'metric':<24} value")
    for key in sorted(agg):
        val = agg[key]
        print(f"{key:<24} {val:.6f}" if isinstance(val, float) else
              f"{key:<24} {val}")
    if args.out_csv:
        Path(args.out_csv).write_text(report.to_csv(), encoding="utf-8")
        print(f"wrote {args.out_csv}")
    return 0


_COMMANDS = {
    "attack": _cmd_attack,
    "baseline": _cmd_baseline,
    "defend": _cmd_defend,
    "evaluate": _cmd_evaluate,
    "train-denoiser": _cmd_train_denoiser,
    "train-classifier": _cmd_train_classifier,
    "gen-data": _cmd_gen_data,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
