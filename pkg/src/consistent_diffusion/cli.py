"""Command-line driver.

    consistent-diffusion gen-data --config C
    consistent-diffusion train    --config C [--mode M] [--resume CKPT] [--force]
    consistent-diffusion sample   --ckpt K --input IMG --out IMG
    consistent-diffusion eval     --ckpt K --data MANIFEST --out metrics.json
    consistent-diffusion analyze  --ckpt K --data MANIFEST --metric kl|mse --out report.csv
    consistent-diffusion compare  --reports a.csv b.csv --out delta.csv

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, config as config_mod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .diffusion import NetDenoiser, OracleDenoiser, RestorationPair, backward_chain, make_schedule, with_kappa
from .metrics import evaluate, write_metrics_json
from .tasks import ImageFormatError, load_image, make_dataset, read_manifest, save_image, write_dataset
from .tensor import NumericError, Rng, atomic_write, check_finite
from .training import LOSS_CSV_HEADER, TrainState, train_loop, TrainMode

log = logging.getLogger("consistent_diffusion")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(ValueError):
    pass


def _load_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config)
    if getattr(args, "mode", None):
        try:
            TrainMode.parse(args.mode)
        except ValueError as exc:
            raise config_mod.ConfigError(str(exc)) from exc
        cfg = cfg.with_value("train", "mode", args.mode)
    if getattr(args, "steps", None):
        cfg = cfg.with_value("train", "steps", args.steps)
    if getattr(args, "out_dir", None):
        cfg = cfg.with_value("io", "out_dir", args.out_dir)
    if getattr(args, "data_dir", None):
        cfg = cfg.with_value("io", "data_dir", args.data_dir)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_value("train", "seed", args.seed)
    return cfg


def _meta(cfg: config_mod.RunConfig) -> dict:
    tc = cfg.train_config()
    return {"schedule": {"T": tc.T, "kappa": tc.kappa, "power": tc.power},
            "train_hash": cfg.train_hash(), "seed": tc.seed, "mode": tc.mode.value,
            "config": config_mod.dumps(cfg)}


def _schedule_from(meta: dict):
    s = meta["schedule"]
    return make_schedule(s["T"], s["kappa"], s["power"])


# -- subcommands ------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    root = Path(cfg["io"]["data_dir"])
    for split in ("train", "eval"):
        spec = cfg.task_spec(split)
        path = write_dataset(make_dataset(spec), spec, root / split)
        print(f"{split}: {spec.count} pairs -> {path}")
    return EXIT_OK


def _train_dataset(cfg):
    manifest = Path(cfg["io"]["data_dir"]) / "train" / "manifest.json"
    if manifest.exists():
        return read_manifest(manifest)[1]
    return make_dataset(cfg.task_spec("train"))


def cmd_train(args) -> int:
    cfg = _load_config(args)
    tc = cfg.train_config()
    out = Path(cfg["io"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    dataset = _train_dataset(cfg)
    meta = _meta(cfg)

    state = None
    rows: list[str] = []
    loss_csv = out / "loss.csv"
    if args.resume:
        params, header = load_checkpoint(args.resume)
        if header.get("train_hash") != meta["train_hash"] and not args.force:
            raise config_mod.ConfigError(
                f"checkpoint {args.resume} was written by a different configuration "
                f"({header.get('train_hash')} != {meta['train_hash']}); pass --force to resume anyway")
        state = TrainState(params, tc, tc.schedule())
        if loss_csv.exists():
            old = loss_csv.read_text().splitlines()[1:]
            rows = [r for r in old if int(r.split(",", 1)[0]) <= params.step]

    timing = []

    def on_step(st, row):
        rows.append(row.csv())
        timing.append(f"{row.step},{row.seconds:.6f}")
        if row.step % 100 == 0:
            log.info("step %d loss %.5f lr %.3g", row.step, row.loss, row.lr)

    def checkpoint(st):
        save_checkpoint(out / f"ckpt_{st.params.step:06d}.cdif", st.params, meta)
        atomic_write(loss_csv, LOSS_CSV_HEADER + "\n" + "\n".join(rows) + "\n")

    params, _ = train_loop(tc, dataset, state, steps=args.stop_at, on_step=on_step,
                           checkpoint_every=cfg["train"]["checkpoint_every"], checkpoint_fn=checkpoint)
    final = out / ("final.cdif" if params.step >= tc.optim.total_steps else f"ckpt_{params.step:06d}.cdif")
    save_checkpoint(final, params, meta)
    atomic_write(loss_csv, LOSS_CSV_HEADER + "\n" + "\n".join(rows) + "\n")
    with open(out / "timing.csv", "a") as fh:
        fh.write("".join(line + "\n" for line in timing))
    atomic_write(out / "config.cfg", config_mod.dumps(cfg))
    print(f"trained {tc.mode.value} to step {params.step} -> {final}")
    return EXIT_OK


def cmd_sample(args) -> int:
    params, meta = load_checkpoint(args.ckpt)
    s = _schedule_from(meta)
    if args.kappa is not None:
        s = with_kappa(s, args.kappa)
    y0 = load_image(args.input)
    if args.oracle_gt:
        # test hook: exact GT_t predictor for this one pair
        denoiser = OracleDenoiser([RestorationPair(load_image(args.oracle_gt), y0)], s)
    else:
        denoiser = NetDenoiser(params, s.T, use_ema=True)
    out = check_finite(backward_chain(denoiser, s, y0, Rng(args.seed)), "restored image")
    save_image(args.out, out)
    return EXIT_OK


def restore_all(params, s, pairs, seed: int):
    y0 = np.stack([p.y0 for p in pairs])
    out = backward_chain(NetDenoiser(params, s.T, use_ema=True), s, y0, Rng(seed))
    return check_finite(out, "restored images")


def cmd_eval(args) -> int:
    params, meta = load_checkpoint(args.ckpt)
    s = _schedule_from(meta)
    spec, pairs = read_manifest(args.data)
    out = restore_all(params, s, pairs, args.seed)
    result = evaluate(out, [p.x0 for p in pairs])
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_json(path, result, spec.name, meta.get("mode", ""), args.seed)
    print(f"PSNR {result.psnr:.3f} dB  SSIM {result.ssim:.4f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    params, meta = load_checkpoint(args.ckpt)
    s = _schedule_from(meta)
    _, pairs = read_manifest(args.data)
    report = analysis.error_report(NetDenoiser(params, s.T, use_ema=True), pairs, s, args.metric,
                                   args.samples, args.items, args.seed, meta.get("mode", ""))
    if not all(np.isfinite(report.cumulative + report.modular + report.input)):
        raise NumericError("non-finite error report")
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    analysis.write_report(path, report)
    return EXIT_OK


def cmd_compare(args) -> int:
    a, b = (analysis.read_report_csv(p) for p in args.reports)
    atomic_write(args.out, analysis.compare_reports(a, b))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="consistent-diffusion", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write train/eval datasets and manifests")
    p.add_argument("--config", required=True)
    p.add_argument("--data-dir")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a denoiser")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", help=", ".join(m.value for m in TrainMode))
    p.add_argument("--resume", metavar="CKPT")
    p.add_argument("--force", action="store_true", help="resume despite a config mismatch")
    p.add_argument("--steps", type=int, help="override train.steps (also reshapes the LR schedule)")
    p.add_argument("--stop-at", type=int, metavar="STEP", help="stop early at STEP without changing the schedule")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--out-dir")
    p.add_argument("--data-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="restore one image with EMA weights")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--kappa", type=float, help="override the noise scale (0 allowed)")
    p.add_argument("--oracle-gt", metavar="IMG", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="PSNR/SSIM over a dataset manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="per-iteration error report")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metric", choices=["kl", "mse"], default="kl")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--items", type=int, default=16)
    p.add_argument("--seed", type=int, default=1)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compare", help="per-t differences of two reports")
    p.add_argument("--reports", nargs=2, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)
    return ap


def run_cli(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (NumericError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (config_mod.ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError, ImageFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run_cli())
