"""Command-line entry point: ``mscg <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical fault (including a failed gradient check).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import gradcheck
from .acw_loss import ClassFrequencyState, median_weights, update_frequency
from .checkpoint import CheckpointError
from .config import ConfigError, TrainConfig
from .data_io import DataError, PatchSampler, load_all, read_manifest, synth_generate
from .layers import NumericalFault
from .metrics import report_csv
from .numerics import ContractError, mten
from .trainer import Trainer, evaluate, load_model, weights_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("mscg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> TrainConfig:
    overrides = {"seed": args.seed}
    if args.config:
        return TrainConfig.from_file(args.config, **overrides)
    return TrainConfig.from_text("", **overrides)


def _data(args):
    if not args.manifest:
        raise UsageError("--manifest is required")
    manifest = read_manifest(args.manifest, args.data_root)
    if len(manifest) == 0:
        raise DataError(f"{args.manifest}: manifest lists no samples")
    return load_all(manifest)


def cmd_train(args) -> int:
    data = _data(args)
    out_dir = Path(args.out_dir)
    if args.resume:
        trainer = Trainer.from_checkpoint(args.resume, data, out_dir)
        if args.config and _config(args).digest() != trainer.cfg.digest():
            raise ConfigError(f"{args.config} differs from the configuration stored in {args.resume}")
        log.info("resumed at iteration %d", trainer.iteration)
    else:
        trainer = Trainer(_config(args), data, out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(trainer.cfg.to_text())

    def report(rec):
        if rec.iteration % args.log_every == 0:
            log.info("it %d lr %.3g %s total %.5f (acw %.5f kl %.5f dl %.5f)", rec.iteration, rec.lr,
                     rec.phase, rec.total, rec.acw, rec.kl, rec.dl)
    try:
        trainer.run(on_step=report)
    except NumericalFault as exc:
        last = out_dir / "checkpoint.zip"
        print(f"error: {exc}; last good checkpoint: {last if last.exists() else 'none'}", file=sys.stderr)
        return EXIT_NUMERIC
    if trainer.eval_reports:
        r = trainer.eval_reports[-1]
        print(f"epoch {r['epoch']}: mIoU {r['miou']:.4f}  mIoU* {r['miou_star']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, cfg = load_model(args.checkpoint)
    state = evaluate(model, _data(args), cfg.batch_size)
    text = report_csv(state)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run(args.select, seed=args.seed or 0)
    print(gradcheck.format_table(results))
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    try:
        manifest = synth_generate(out, args.seed or 0, args.count, args.size, args.class_mix, args.overlap_prob)
    except ValueError as exc:
        raise UsageError(f"synth: {exc}") from None
    print(f"wrote {len(manifest)} samples and {out / 'manifest.txt'}")
    return EXIT_OK


def cmd_dump_graph(args) -> int:
    model, _ = load_model(args.checkpoint)
    data = _data(args)
    if not 0 <= args.index < len(data):
        raise UsageError(f"--index {args.index} out of range for {len(data)} samples")
    out = model(data.images[args.index: args.index + 1], train=False)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for turn, g in zip(out.views.turns, out.views.graphs):
        mten.save(out_dir / f"a_hat_view{turn}.mten", g.a_hat.value[0])
        mten.save(out_dir / f"a_prime_view{turn}.mten", g.a_prime.value[0])
    print(f"wrote {2 * len(out.views.graphs)} adjacency files to {out_dir}")
    return EXIT_OK


def cmd_weights_log(args) -> int:
    """Replay the class-weight trajectory; it depends only on labels and the patch stream."""
    cfg = _config(args)
    data = _data(args)
    sampler = PatchSampler(data, cfg.patch_size or min(data.images.shape[-2:]), cfg.batch_size, cfg.seed,
                           cfg.flip_prob)
    iters = args.iters or cfg.max_iters or cfg.epochs * sampler.iters_per_epoch
    state = ClassFrequencyState(cfg.num_classes)
    rows, epoch_batches = [], None
    for it in range(iters):
        epoch, k = divmod(it, sampler.iters_per_epoch)
        if k == 0:
            epoch_batches = sampler.epoch(epoch)
        b = epoch_batches[k]
        if update_frequency(state, b.labels, b.valid):
            rows.append((it, median_weights(state)))
    text = weights_csv(rows)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "weights.csv").write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mscg", description="MSCG-Net segmentation head: train, evaluate and verify.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="key = value training config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir")
        if data:
            sp.add_argument("--manifest", help="one sample directory per line")
            sp.add_argument("--data-root", help="base for relative manifest entries")

    sp = sub.add_parser("train", help="train from a manifest")
    common(sp)
    sp.add_argument("--resume", help="checkpoint to resume from")
    sp.add_argument("--log-every", type=int, default=10)
    sp.set_defaults(fn=cmd_train, need_out=True)

    sp = sub.add_parser("eval", help="evaluate a checkpoint, print the per-class CSV report")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    sp.add_argument("--select", default="all", choices=gradcheck.SELECTORS)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("synth", help="write a synthetic dataset and its manifest")
    common(sp, data=False)
    sp.add_argument("--count", type=int, default=8)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--class-mix", default="0:26,1:1,2:1,3:1,4:1,5:1,6:1",
                    help="class:weight pairs, e.g. 0:0.8,3:0.2")
    sp.add_argument("--overlap-prob", type=float, default=0.1)
    sp.set_defaults(fn=cmd_synth, need_out=True)

    sp = sub.add_parser("dump-graph", help="export one sample's adjacency matrices as MTEN")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--index", type=int, default=0)
    sp.set_defaults(fn=cmd_dump_graph, need_out=True)

    sp = sub.add_parser("weights-log", help="class-weight trajectory as CSV")
    common(sp)
    sp.add_argument("--iters", type=int, default=0)
    sp.set_defaults(fn=cmd_weights_log)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "need_out", False) and not args.out_dir:
        parser.error(f"{args.command} needs --out-dir")
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, ContractError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFault as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
