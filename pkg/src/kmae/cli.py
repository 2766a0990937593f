"""``kmae`` command line: gen, masks, pretrain, finetune, eval, compare.

Exit codes: 0 success, 1 usage error, 2 data/config validation error,
3 numerical failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import container
from .config import RunConfig, config_hash
from .dataset import load_cohort, mask_to_pgm, save_cohort, save_mask
from .kspace import SizeError
from .model import load_checkpoint, save_checkpoint
from .phantom import NORMAL, make_cohort
from .report import (
    compare_table,
    loss_curve_rows,
    plot_loss_curve,
    plot_mask,
    plot_metric_vs_R,
    sweep_table,
    write_csv,
    write_json,
)
from .sampling import make_mask, mask_stats
from .train import (
    FINETUNE_TASKS,
    KSpaceBank,
    NumericalError,
    finetune,
    metrics_from_predictions,
    predictions_to_arrays,
    pretrain,
    robustness_sweep,
)

log = logging.getLogger("kmae")

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _stem(path: str) -> str:
    root, ext = os.path.splitext(path)
    return root if ext else path


def _load_config(args) -> RunConfig:
    return RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()


def _bank(cohort, cfg: RunConfig) -> KSpaceBank:
    m = cfg.doc["mask"]
    return KSpaceBank(cohort, b0_amplitude=m["b0_amplitude"], b0_sigma=m["b0_sigma"], acs_count=m["acs_count"])


def _emit_training_outputs(report, cfg: RunConfig, out_ckpt: str, args, extra_meta: dict):
    rep = report.to_dict()
    rep["meta"].update(extra_meta)
    report_path = args.report or _stem(out_ckpt) + ".report.json"
    curve_path = args.loss_csv or cfg.doc["outputs"]["loss_csv"] or _stem(out_ckpt) + ".loss.csv"
    write_json(report_path, rep)
    write_csv(curve_path, ["step", "loss"], loss_curve_rows(report.curve))
    if cfg.doc["outputs"]["figures"]:
        plot_loss_curve(report.curve, _stem(out_ckpt) + ".loss.png", title=f"{report.task} loss")
    return report_path


def cmd_gen(args) -> int:
    cfg = _load_config(args).with_overrides(
        "data", subjects=args.subjects, size=args.size, frames=args.frames, slices=args.slices,
        mode=args.mode, seed=args.seed, class_balance=args.class_balance,
    )
    d = cfg.doc["data"]
    size = d["size"]
    if size < 8 or size & (size - 1):
        raise SizeError(f"--size must be a power of two >= 8, got {size}")
    cohort = make_cohort(d["subjects"], d["class_balance"], d["mode"] == "regress", d["seed"], cfg.phantom_base())
    save_cohort(args.out, cohort, {"config_hash": cfg.hash, "config": cfg.doc})
    labels = cohort.labels()
    split = "/".join(str(len(cohort.splits[k])) for k in ("train", "val", "test"))
    print(f"gen: {len(cohort)} subjects ({int((labels == NORMAL).sum())} normal, {int((labels != NORMAL).sum())} "
          f"dysfunction), mode {d['mode']}, splits {split}, grid {size}x{size}x{d['frames']}x{d['slices']}, "
          f"config {cfg.hash} -> {args.out}")
    return EXIT_OK


def cmd_masks(args) -> int:
    m = make_mask(args.H, args.T, args.R, args.acs, args.seed)
    params = {"H": args.H, "T": args.T, "R": args.R, "acs": m.acs_count, "seed": args.seed}
    h = config_hash(params)
    save_mask(args.out, m, {"config_hash": h, "params": params})
    pgm = args.pgm or _stem(args.out) + ".pgm"
    container.atomic_write_bytes(pgm, mask_to_pgm(m.lines))
    if args.figure:
        plot_mask(m.lines, args.figure, title=f"R={args.R:g}, ACS {m.acs_count}")
    st = mask_stats(m)
    print(f"masks: {args.T}x{args.H} R={args.R:g} achieved {st.achieved_R:.3f}, ACS {m.acs_count}, "
          f"union coverage {st.union_coverage:.3f}, config {h} -> {args.out}, {pgm}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_config(args).with_overrides("pretrain", epochs=args.epochs, lr_peak=args.lr, seed=args.seed)
    cohort, data_meta = load_cohort(args.data)
    init = None
    if args.resume:
        init = load_checkpoint(args.resume)
        if init.meta.get("config_hash") != cfg.hash:
            raise ValueError(f"resume checkpoint config hash {init.meta.get('config_hash')} "
                             f"does not match this run's {cfg.hash}")
    bank = _bank(cohort, cfg)
    ckpt, report = pretrain(cohort, cfg.model_config(), cfg.train_config(), bank, init=init)
    meta = {"config_hash": cfg.hash, "data_hash": data_meta.get("config_hash")}
    ckpt.meta.update(meta)
    save_checkpoint(args.out_ckpt, ckpt)
    path = _emit_training_outputs(report, cfg, args.out_ckpt, args, meta)
    print(f"pretrain: val PSNR {report.metrics['psnr_mean']:.2f} dB (zero-filled "
          f"{report.metrics['zero_filled_psnr_mean']:.2f}), {ckpt.step} steps, config {cfg.hash} -> "
          f"{args.out_ckpt}, {path}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    cohort, data_meta = load_cohort(args.data)
    spec = cfg.task_spec(task=args.task, input_R=args.R, freeze_encoder=args.freeze_encoder, epochs=args.epochs,
                         lr_peak=args.lr, seed=args.seed, arch=args.model)
    ckpt = None
    if spec.arch == "kmae":
        if not args.ckpt:
            raise UsageError("finetune: --ckpt is required for the kmae model")
        ckpt = load_checkpoint(args.ckpt)
    elif args.ckpt:
        log.warning("--ckpt ignored: the CNN baseline trains from scratch")
    run_hash = config_hash({"config": cfg.hash, "spec": spec.to_dict()})
    out, report = finetune(ckpt, cohort, spec, _bank(cohort, cfg))
    meta = {"config_hash": run_hash, "base_config_hash": cfg.hash, "data_hash": data_meta.get("config_hash")}
    out.meta.update(meta)
    save_checkpoint(args.out_ckpt, out)
    path = _emit_training_outputs(report, cfg, args.out_ckpt, args, meta)
    mode = "from scratch" if spec.arch == "cnn" else ("frozen" if spec.freeze_encoder else "unfrozen") + " encoder"
    print(f"finetune: {spec.task} ({spec.arch}, R={spec.input_R:g}, {mode}) best epoch {out.meta['best_epoch']}, "
          f"config {run_hash} -> {args.out_ckpt}, {path}")
    return EXIT_OK


def _parse_R(text: str):
    try:
        Rs = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--R expects comma-separated numbers, got {text!r}") from None
    if not Rs:
        raise UsageError("--R is empty")
    return Rs


def cmd_eval(args) -> int:
    Rs = _parse_R(args.R)
    cfg = _load_config(args)
    cohort, data_meta = load_cohort(args.data)
    ckpt = load_checkpoint(args.ckpt)
    rows, report, arrays = robustness_sweep(ckpt, cohort, _bank(cohort, cfg), args.split, Rs)
    rep = report.to_dict()
    rep["sweep"] = rows
    run_hash = config_hash({"config": cfg.hash, "ckpt": ckpt.meta.get("config_hash"),
                            "data": data_meta.get("config_hash"), "split": args.split, "R": Rs})
    rep["meta"].update({"config_hash": run_hash, "ckpt_config_hash": ckpt.meta.get("config_hash"),
                        "data_hash": data_meta.get("config_hash"), "encoder_hash": ckpt.meta.get("encoder_hash")})
    pred_path = args.predictions or _stem(args.report) + ".predictions.kmae"
    container.write(pred_path, predictions_to_arrays(arrays),
                    {"kind": "predictions", "task": report.task, "split": args.split, "config_hash": run_hash})
    write_json(args.report, rep)
    header, body = sweep_table(rows)
    write_csv(args.table or _stem(args.report) + ".csv", header, body)
    if cfg.doc["outputs"]["figures"]:
        plot_metric_vs_R(report.per_R, _stem(args.report) + ".png", title=f"{report.task} ({ckpt.arch})")
    summary = ", ".join(f"R={r['R']:g}: " + " ".join(f"{k} {v:.4g}" for k, v in r.items()
                                                     if k != "R" and not k.startswith("delta_")
                                                     and not isinstance(v, bool)) for r in rows)
    print(f"eval: {report.task} on {args.split} [{summary}], config {run_hash} -> {args.report}, {pred_path}")
    return EXIT_OK


def cmd_recompute(args) -> int:
    """Recompute report metrics from a predictions container and compare."""
    from .train import predictions_from_arrays

    arrays, meta = container.read(args.predictions)
    with open(args.report, encoding="utf-8") as fh:
        rep = json.load(fh)
    worst = 0.0
    for R, preds in predictions_from_arrays(arrays).items():
        fresh = metrics_from_predictions(preds, meta["task"])
        for k, v in fresh.items():
            stored = rep["per_R"][str(R)][k]
            worst = max(worst, abs(float(v) - float(stored)))
    print(f"recompute: max |report - recomputed| = {worst:.3g}")
    return EXIT_OK if worst <= 1e-9 else EXIT_INVALID


def cmd_compare(args) -> int:
    names = args.names.split(",") if args.names else None
    if names and len(names) != len(args.reports):
        raise UsageError("--names must list one name per report")
    reports = []
    for i, path in enumerate(args.reports):
        with open(path, encoding="utf-8") as fh:
            rep = json.load(fh)
        reports.append((names[i] if names else rep["meta"].get("arch", "model"), rep))
    header, rows = compare_table(reports)
    write_csv(args.out, header, rows)
    print(f"compare: {len(rows)} rows -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kmae", description="k-space masked autoencoder on cardiac phantoms")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="synthesize a phantom cohort")
    g.add_argument("--out", required=True)
    g.add_argument("--subjects", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--frames", type=int)
    g.add_argument("--slices", type=int)
    g.add_argument("--mode", choices=("classify", "regress"))
    g.add_argument("--seed", type=int)
    g.add_argument("--class-balance", type=float)
    g.add_argument("--config")
    g.set_defaults(fn=cmd_gen)

    m = sub.add_parser("masks", help="draw a sampling mask and its PGM picture")
    m.add_argument("--H", type=int, required=True)
    m.add_argument("--T", type=int, required=True)
    m.add_argument("--R", type=float, required=True)
    m.add_argument("--acs", type=int)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.add_argument("--pgm", help="graymap path (default: next to --out)")
    m.add_argument("--figure", help="optional PNG rendering")
    m.set_defaults(fn=cmd_masks)

    t = sub.add_parser("pretrain", help="masked k-space interpolation pre-training")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out-ckpt", required=True)
    t.add_argument("--report")
    t.add_argument("--loss-csv")
    t.add_argument("--resume", help="checkpoint to continue from (config hash must match)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.set_defaults(fn=cmd_pretrain)

    f = sub.add_parser("finetune", help="task fine-tuning")
    f.add_argument("--ckpt")
    f.add_argument("--data", required=True)
    f.add_argument("--task", required=True, choices=FINETUNE_TASKS)
    f.add_argument("--R", type=float)
    f.add_argument("--freeze-encoder", action=argparse.BooleanOptionalAction, default=None)
    f.add_argument("--out-ckpt", required=True)
    f.add_argument("--model", choices=("kmae", "cnn"))
    f.add_argument("--config")
    f.add_argument("--report")
    f.add_argument("--loss-csv")
    f.add_argument("--epochs", type=int)
    f.add_argument("--lr", type=float)
    f.add_argument("--seed", type=int)
    f.set_defaults(fn=cmd_finetune)

    e = sub.add_parser("eval", help="evaluate at several accelerations")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--R", default="1,4,8")
    e.add_argument("--report", required=True)
    e.add_argument("--predictions")
    e.add_argument("--table")
    e.add_argument("--config")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("recompute", help="check a report against its predictions")
    r.add_argument("--report", required=True)
    r.add_argument("--predictions", required=True)
    r.set_defaults(fn=cmd_recompute)

    c = sub.add_parser("compare", help="merge eval reports into one CSV table")
    c.add_argument("--reports", nargs="+", required=True)
    c.add_argument("--names")
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "fn", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        dump = _dump_path(args)
        if dump:
            try:
                write_json(dump, {"error": str(e), "context": e.context})
            except OSError:
                dump = None
        print(f"numerical failure: {e}" + (f" (step inputs in {dump})" if dump else ""), file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, OSError) as e:
        print(f"invalid input: {e}", file=sys.stderr)
        return EXIT_INVALID


def _dump_path(args):
    out = getattr(args, "out_ckpt", None)
    return _stem(out) + ".nonfinite.json" if out else None


if __name__ == "__main__":
    sys.exit(main())
