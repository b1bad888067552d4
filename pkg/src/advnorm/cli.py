"""Command-line entry points tying the modules into reproducible experiments.

``advnorm synth|train|eval|theory|report --config <path> [overrides]``

Exit codes: 0 success, 1 runtime failure, 2 configuration or path error.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .config import (ConfigError, ExperimentConfig, apply_overrides, load_config,
                     save_config)
from .evalrun import (EvalError, evaluate_suite, make_suite, read_summary,
                      suite_from_disk, suite_to_disk)
from .fileio import VolumeIOError
from .nets import default_configs, init_parameters, load_checkpoint
from .theory import certify_instance
from .trainer import TrainerError, init_state, train


class CliError(RuntimeError):
    pass


def _parse_set(values) -> dict:
    out = {}
    for item in values or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            import ast
            out[key] = ast.literal_eval(raw)
        except (ValueError, SyntaxError):
            out[key] = raw
    return out


def _load_effective_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = _parse_set(getattr(args, "set", None))
    for flag, dotted in (("seed", "train.seed"), ("lam", "train.lam"),
                         ("epochs", "train.n_epochs"),
                         ("augment_prob", "train.augment_prob"),
                         ("bias_alpha", "eval.bias_alpha"),
                         ("out", "output_dir")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[dotted] = value
    return apply_overrides(cfg, overrides)


def _get_suite(cfg: ExperimentConfig):
    if cfg.data.dir:
        manifest = Path(cfg.data.dir) / "manifest.tsv"
        if manifest.exists():
            from .synth import profile_presets
            profiles = profile_presets().get(cfg.data.preset)
            return suite_from_disk(manifest, profiles)
    return make_suite(cfg)


def cmd_synth(args) -> int:
    cfg = _load_effective_config(args)
    out_dir = Path(cfg.data.dir or cfg.resolved_output_dir())
    if not out_dir.is_dir():
        print(f"error: output directory {out_dir} does not exist", file=sys.stderr)
        return 2
    suite = make_suite(cfg)
    manifest = suite_to_disk(suite, out_dir, fmt=cfg.data.format)
    save_config(cfg, out_dir / "synth_config.toml")
    print(f"wrote {len(suite.subjects)} subjects and {manifest}")
    return 0


def _build_bundle(cfg: ExperimentConfig, n_domains: int, channels: int):
    g_cfg, s_cfg, d_cfg = default_configs(
        in_channels=channels, domains=max(n_domains, 2),
        base_features=cfg.model.base_features)
    g_cfg.depth = s_cfg.depth = cfg.model.depth
    d_cfg.widths = tuple(cfg.model.disc_widths)
    use_gen = cfg.train.normalizer == "generator"
    use_disc = cfg.train.adversarial and n_domains >= 2
    return init_parameters(s_cfg,
                           g_cfg if use_gen else None,
                           d_cfg if use_disc else None,
                           seed=cfg.model.init_seed)


def cmd_train(args) -> int:
    cfg = _load_effective_config(args)
    out_dir = cfg.resolved_output_dir()
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.toml")
    suite = _get_suite(cfg)
    channels = suite.subjects[0].image.volume.channels
    start_epoch = 0
    state = None
    if getattr(args, "resume", None):
        bundle, payload = load_checkpoint(args.resume)
        state = init_state(bundle, cfg.train, suite.n_domains)
        for name, opt in state.optimizers.items():
            if payload["optimizers"] and name in payload["optimizers"]:
                opt.load_state_dict(payload["optimizers"][name])
        state.history = list(payload["extra"].get("history", []))
        start_epoch = payload["epoch"]
        state.epoch = start_epoch
    else:
        bundle = _build_bundle(cfg, suite.n_domains, channels)
    state = train(suite, cfg.train, bundle, out_dir=out_dir,
                  start_epoch=start_epoch, state=state)
    print(f"trained {state.epoch} epochs ({cfg.train.mode_label}); "
          f"history and checkpoints in {out_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_effective_config(args)
    out_dir = cfg.resolved_output_dir()
    if getattr(args, "recipe", None):
        from .experiments import recipe_base_config, run_recipe

        out_dir.mkdir(parents=True, exist_ok=True)
        base = cfg if args.config else recipe_base_config()
        result = run_recipe(args.recipe, base_cfg=base,
                            ledger_path=out_dir / "results.jsonl")
        for a in result.assertions:
            print(f"[{'pass' if a.passed else 'FAIL'}] {a.name}: {a.details}")
        print(f"recipe {result.name}:", "pass" if result.passed else "FAIL")
        return 0 if result.passed else 1
    ckpt = Path(args.checkpoint) if args.checkpoint else out_dir / "best.pt"
    if not ckpt.exists():
        print(f"error: checkpoint {ckpt} not found", file=sys.stderr)
        return 2
    bundle, payload = load_checkpoint(ckpt)
    if args.normalizer:
        from dataclasses import replace
        cfg.train = replace(cfg.train, normalizer=args.normalizer)
    suite = _get_suite(cfg)
    eval_dir = out_dir / "eval"
    results = evaluate_suite(bundle, suite, cfg, out_dir=eval_dir)
    save_config(cfg, eval_dir / "eval_config.toml")
    print(f"mean DSC {results['mean_dsc']:.4f} over split {results['split']}; "
          f"outputs in {eval_dir}")
    return 0


def cmd_theory(args) -> int:
    out_dir = Path(args.out or "theory_out")
    out_dir.mkdir(parents=True, exist_ok=True)
    prior = None
    if args.nonuniform_prior:
        weights = np.arange(1, args.domains + 1, dtype=float)
        prior = weights / weights.sum()
    all_passed = True
    for seed in range(args.seeds):
        cert = certify_instance(args.domains, args.atoms, seed, mode=args.mode,
                                steps=args.steps, threshold=args.threshold,
                                prior=prior)
        (out_dir / f"certificate_{seed}.txt").write_text(cert.to_text())
        status = ("disabled" if cert.assertion_disabled
                  else ("pass" if cert.passed else "FAIL"))
        print(f"seed {seed}: final KL {cert.final_kl:.2e} "
              f"D* gap {cert.dstar_numeric_gap:.2e} [{status}]")
        all_passed = all_passed and cert.passed
    print("overall:", "pass" if all_passed else "FAIL")
    return 0 if all_passed else 1


def cmd_report(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(args.run_dir)
    eval_dir = run_dir / "eval"
    missing = []
    if not eval_dir.is_dir():
        print(f"error: no eval outputs under {run_dir}", file=sys.stderr)
        return 2
    # histograms before/after normalization
    hist_path = eval_dir / "histograms.csv"
    if hist_path.exists():
        rows = list(csv.reader(open(hist_path)))[1:]
        data: dict = {}
        for kind, z, b, v in rows:
            data.setdefault(kind, {}).setdefault(int(z), []).append(float(v))
        fig, axes = plt.subplots(1, 2, figsize=(10, 4))
        for ax, kind in zip(axes, ("raw", "normalized")):
            for z, h in sorted(data.get(kind, {}).items()):
                ax.plot(np.linspace(0, 1, len(h)), h, label=f"domain {z + 1}")
            ax.set_title(f"{kind} foreground histograms")
            ax.set_xlabel("intensity")
            ax.legend()
        fig.tight_layout()
        fig.savefig(run_dir / "histograms.png")
        plt.close(fig)
    else:
        missing.append(hist_path.name)
    # intensity vs y curves
    curve_path = eval_dir / "intensity_vs_y.csv"
    if curve_path.exists():
        rows = list(csv.reader(open(curve_path)))[1:]
        by_alpha: dict = {}
        for alpha, y, deg, norm in rows:
            by_alpha.setdefault(float(alpha), []).append(
                (int(y), float(deg), float(norm)))
        fig, ax = plt.subplots(figsize=(6, 4))
        for alpha, pts in sorted(by_alpha.items()):
            pts.sort()
            ys = [p[0] for p in pts]
            ax.plot(ys, [p[1] for p in pts], "--", label=f"degraded a={alpha}")
            ax.plot(ys, [p[2] for p in pts], "-", label=f"normalized a={alpha}")
        ax.set_xlabel("y index")
        ax.set_ylabel("mean foreground intensity")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(run_dir / "intensity_vs_y.png")
        plt.close(fig)
    else:
        missing.append(curve_path.name)
    # confusion heatmap
    conf_path = eval_dir / "confusion.csv"
    if conf_path.exists():
        rows = list(csv.reader(open(conf_path)))[1:]
        mat = np.array([[float(v) for v in row] for row in rows])
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(mat, cmap="viridis", vmin=0)
        k1 = mat.shape[0]
        names = [f"d{z + 1}" for z in range(k1 - 1)] + ["gen"]
        ax.set_xticks(range(k1), names)
        ax.set_yticks(range(k1), names)
        for i in range(k1):
            for j in range(k1):
                ax.text(j, i, f"{mat[i, j]:.2f}", ha="center", va="center",
                        color="white", fontsize=8)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        fig.tight_layout()
        fig.savefig(run_dir / "confusion.png")
        plt.close(fig)
    else:
        missing.append(conf_path.name)
    # summary table
    summary_path = eval_dir / "summary.csv"
    if summary_path.exists():
        summary = read_summary(summary_path)
        if "jsd_raw" in summary and "jsd_normalized" in summary:
            raw = float(summary["jsd_raw"])
            if raw > 0:
                summary["jsd_ratio"] = float(summary["jsd_normalized"]) / raw
        with open(run_dir / "report_summary.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["key", "value"])
            for key in sorted(summary):
                writer.writerow([key, summary[key]])
    else:
        missing.append(summary_path.name)
        print("error: summary.csv is required for a report", file=sys.stderr)
        return 2
    if missing:
        print("warning: missing inputs, partial report:", ", ".join(missing))
    print(f"report written to {run_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advnorm",
        description="Adversarial multi-domain image normalization experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="TOML experiment configuration")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override any configuration key")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="training seed")

    p_synth = sub.add_parser("synth", help="generate a synthetic domain suite")
    common(p_synth)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train a model on a suite")
    common(p_train)
    p_train.add_argument("--lam", "--lambda", dest="lam", type=float,
                         help="realism trade-off (0 = pre-processor baseline)")
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--augment-prob", dest="augment_prob", type=float)
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", help="checkpoint path (default best.pt)")
    p_eval.add_argument("--bias-alpha", dest="bias_alpha", type=float,
                        help="degrade test inputs with this bias strength")
    p_eval.add_argument("--normalizer", choices=["generator", "standardize", "none"],
                        help="override the normalization path")
    p_eval.add_argument("--recipe", help="run a canned experiment recipe instead "
                                         "of a plain checkpoint evaluation")
    p_eval.set_defaults(func=cmd_eval)

    p_theory = sub.add_parser("theory", help="emit fixed-point certificates")
    p_theory.add_argument("--domains", "-K", type=int, default=2)
    p_theory.add_argument("--atoms", "-n", type=int, default=4)
    p_theory.add_argument("--seeds", type=int, default=10)
    p_theory.add_argument("--mode", choices=["best_response_d", "alternating"],
                          default="best_response_d")
    p_theory.add_argument("--steps", type=int, default=5000)
    p_theory.add_argument("--threshold", type=float, default=1e-3)
    p_theory.add_argument("--nonuniform-prior", action="store_true")
    p_theory.add_argument("--out")
    p_theory.set_defaults(func=cmd_theory)

    p_report = sub.add_parser("report", help="render plots and a summary table")
    p_report.add_argument("run_dir", help="run directory containing eval outputs")
    p_report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, VolumeIOError, FileNotFoundError, EvalError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainerError, CliError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
