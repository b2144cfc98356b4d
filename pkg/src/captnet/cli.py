"""``captnet`` command line: synth, train, eval, infer, gradcheck, flops, cluster."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, io, metrics, plots
from .config import ConfigError, RunConfig, load_config
from .degrade import PairedSample, make_balanced_dataset
from .model import build
from .train import TrainingDiverged, train

log = logging.getLogger("captnet")

HELDOUT_SEED_OFFSET = 1_000_003
FLOP_REFERENCE = (64, 64, 32)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.data.seed = args.seed
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg.io.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_samples(manifest: Path) -> tuple[list[str], list[PairedSample]]:
    ids, samples = [], []
    for row in io.read_manifest(manifest):
        ids.append(row.sample_id)
        samples.append(PairedSample(io.read_ppm(row.degraded_path), io.read_ppm(row.clean_path),
                                    row.label, row.seed))
    return ids, samples


def _dataset(args, cfg: RunConfig) -> list[PairedSample]:
    manifest = getattr(args, "manifest", None) or cfg.io.manifest
    if manifest:
        return _load_samples(Path(manifest))[1]
    d = cfg.data
    return make_balanced_dataset(d.n_per_task, (d.size, d.size), d.seed, d.noise_sigma)


def _model(cfg: RunConfig, checkpoint: str | None, prompts: bool = True):
    mcfg = cfg.model_config()
    if not prompts:
        mcfg = dataclasses.replace(mcfg, prompt_positions=frozenset())
    model = build(mcfg, seed=cfg.train.seed)
    if checkpoint:
        io.load_checkpoint(checkpoint, model)
    return model


def _heldout(cfg: RunConfig, n_per_label: int):
    d = cfg.data
    return analysis.held_out_samples(n_per_label, (d.size, d.size), d.seed + HELDOUT_SEED_OFFSET, d.noise_sigma)


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    (out / "clean").mkdir(exist_ok=True)
    (out / "degraded").mkdir(exist_ok=True)
    d = cfg.data
    rows = []
    for i, s in enumerate(make_balanced_dataset(d.n_per_task, (d.size, d.size), d.seed, d.noise_sigma)):
        sid = f"s{i:04d}"
        clean_rel, deg_rel = f"clean/{sid}.ppm", f"degraded/{sid}.ppm"
        io.write_ppm(out / clean_rel, s.clean)
        io.write_ppm(out / deg_rel, s.degraded)
        rows.append((sid, s.label.value, s.seed, clean_rel, deg_rel))
    io.write_csv(out / "manifest.csv", io.MANIFEST_FIELDS, rows)
    print(f"wrote {len(rows)} pairs to {out / 'manifest.csv'}")
    return 0


def _train_one(cfg, dataset, out: Path, suffix: str, prompts: bool, warm: str | None):
    model = _model(cfg, warm, prompts=prompts)
    trace = train(model, dataset, cfg.train_config(), checkpoint_path=out / f"model{suffix}.ckpt")
    io.write_csv(out / f"loss{suffix}.csv", io.LOSS_FIELDS,
                 ((r.iter, io.fmt(r.lr), io.fmt(r.loss_db)) for r in trace))
    return model, trace


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    dataset = _dataset(args, cfg)
    model, trace = _train_one(cfg, dataset, out, "", True, args.warm_start)
    traces = {"prompts": trace}
    if args.ablation:
        plain, plain_trace = _train_one(cfg, dataset, out, "_noprompt", False, None)
        traces["no prompts"] = plain_trace
        heldout = _heldout(cfg, args.heldout_per_label)
        rows = [
            ("degraded", io.fmt(analysis.mean_psnr(None, dataset)), io.fmt(analysis.mean_psnr(None, heldout))),
            ("prompts", io.fmt(analysis.mean_psnr(model, dataset)), io.fmt(analysis.mean_psnr(model, heldout))),
            ("no_prompts", io.fmt(analysis.mean_psnr(plain, dataset)), io.fmt(analysis.mean_psnr(plain, heldout))),
        ]
        io.write_csv(out / "ablation.csv", ("variant", "train_psnr_db", "heldout_psnr_db"), rows)
        for r in rows:
            print(f"{r[0]:>11}: train {float(r[1]):7.3f} dB  held-out {float(r[2]):7.3f} dB")
    plots.loss_curve(traces, out / "loss.png")
    if trace:
        print(f"final loss {trace[-1].loss_db:.4f} dB after {len(trace)} iterations")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    manifest = args.manifest or cfg.io.manifest
    if not manifest:
        raise ValueError("eval needs --manifest (or [io] manifest)")
    out = _out_dir(args, cfg)
    ids, samples = _load_samples(Path(manifest))
    model = _model(cfg, args.checkpoint or cfg.io.checkpoint or None)
    rows = analysis.evaluate(model, samples, ids)
    io.write_csv(out / "metrics.csv", io.METRIC_FIELDS,
                 ((r.image_id, r.label, io.fmt(r.psnr_db), io.fmt(r.ssim)) for r in rows))
    print(f"mean PSNR {np.mean([r.psnr_db for r in rows]):.3f} dB, mean SSIM {np.mean([r.ssim for r in rows]):.4f}")
    return 0


def cmd_infer(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    model = _model(cfg, args.checkpoint or cfg.io.checkpoint or None)
    for path in args.inputs:
        path = Path(path)
        restored = analysis.restore(model, io.read_ppm(path))
        io.write_ppm(out / path.name, restored)
        print(f"{path} -> {out / path.name}")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    results = analysis.gradient_suite(seed=cfg.train.seed)
    io.write_csv(out / "gradcheck.csv", ("block", "max_rel_error", "n_params", "passed"),
                 ((r.block, f"{r.max_rel_error:.3e}", r.n_params, int(r.passed)) for r in results))
    for r in results:
        print(f"{r.block:>10}  {r.max_rel_error:.3e}  {'ok' if r.passed else 'FAIL'}")
    return 0 if all(r.passed for r in results) else 1


def cmd_flops(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    dims = [FLOP_REFERENCE] + [(s, s, 32) for s in (8, 16, 32, 128)]
    reports = [metrics.flop_report(h, w, c, args.heads) for h, w, c in dims]
    io.write_csv(out / "flops.csv", io.FLOP_FIELDS,
                 ((r.H, r.W, r.C, r.analytic_sa, r.analytic_mrap, r.measured_mrap_core) for r in reports))
    plots.flops_scaling(reports, out / "flops.png")
    for r in reports:
        print(f"{r.H}x{r.W}x{r.C}: SA {r.analytic_sa}  MRAP {r.analytic_mrap}  core {r.measured_mrap_core}")
    return 0


def cmd_cluster(args, cfg: RunConfig) -> int:
    ckpt = args.checkpoint or cfg.io.checkpoint
    if not ckpt:
        raise ValueError("cluster needs a trained --checkpoint")
    out = _out_dir(args, cfg)
    model = _model(cfg, ckpt)
    samples = _heldout(cfg, args.per_label)
    enc, res = analysis.cluster_features(model, samples)
    labels = [s.label for s in samples]
    rep = analysis.cluster_report(model, samples)
    io.write_csv(out / "cluster.csv", io.CLUSTER_FIELDS,
                 [(io.fmt(rep.silhouette_encoder), io.fmt(rep.silhouette_output), len(samples))])
    plots.cluster_scatter(enc, res, labels, (rep.silhouette_encoder, rep.silhouette_output), out / "cluster.png")
    print(f"silhouette encoder {rep.silhouette_encoder:.4f}  output {rep.silhouette_output:.4f}  n={len(samples)}")
    return 0


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file")
    common.add_argument("--seed", type=int, help="override [train] and [data] seeds")
    common.add_argument("--out", help="output directory (default: [io] out)")

    parser = argparse.ArgumentParser(prog="captnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    sub.add_parser("synth", parents=[common], help="write a balanced synthetic dataset and manifest")

    p = sub.add_parser("train", parents=[common], help="train and write checkpoint + loss CSV")
    p.add_argument("--manifest", help="train on a manifest instead of synthesizing [data]")
    p.add_argument("--warm-start", help="initialize from this checkpoint")
    p.add_argument("--ablation", action="store_true", help="also train a prompt-free model and compare")
    p.add_argument("--heldout-per-label", type=int, default=10)

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM over a manifest")
    p.add_argument("--manifest")
    p.add_argument("--checkpoint")

    p = sub.add_parser("infer", parents=[common], help="restore PPM images")
    p.add_argument("--checkpoint")
    p.add_argument("inputs", nargs="+")

    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient table")

    p = sub.add_parser("flops", parents=[common], help="attention cost table")
    p.add_argument("--heads", type=int, default=4)

    p = sub.add_parser("cluster", parents=[common], help="silhouette of encoder vs output features")
    p.add_argument("--checkpoint")
    p.add_argument("--per-label", type=int, default=10)
    return parser


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
    "gradcheck": cmd_gradcheck, "flops": cmd_flops, "cluster": cmd_cluster,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, io.FormatError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


run_command = main

if __name__ == "__main__":
    sys.exit(main())
