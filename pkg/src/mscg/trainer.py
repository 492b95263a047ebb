"""Training loop, evaluation and checkpoint wiring.

Every random draw is keyed by ``(seed, purpose, counter)``: the patch stream by
epoch and the latent noise by iteration and view. Resuming therefore only needs
the iteration counter, and an interrupted run replays bit-for-bit.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .acw_loss import ClassFrequencyState, LossBreakdown, acw_total, cross_entropy_total, dice_total, \
    update_frequency
from .backbone import STRIDE
from .config import ConfigError, TrainConfig
from .data_io import DataError, PatchSampler, SegmentationBatch
from .layers import NumericalFault
from .metrics import ConfusionState, accumulate, miou, report_csv
from .model import MSCGNet
from .numerics import RngState, backward, ops
from .optim import PhasedOptimizer, build_param_groups, cosine_lr

log = logging.getLogger(__name__)


def build_model(cfg: TrainConfig) -> MSCGNet:
    return MSCGNet(num_classes=cfg.num_classes, feature_dim=cfg.feature_dim, hidden_dim=cfg.hidden_dim,
                   node_side=cfg.node_side, turns=cfg.views, seed=cfg.seed, dtype=np.dtype(cfg.dtype),
                   widths=cfg.backbone_widths)


def compute_loss(cfg: TrainConfig, out, batch: SegmentationBatch, freq: ClassFrequencyState) -> LossBreakdown:
    labels = batch.labels.astype(out.logits.dtype)
    if cfg.loss == "ce":
        return cross_entropy_total(labels, out.logits, out.kl, out.dl, batch.valid)
    probs = ops.softmax(out.logits, axis=1)
    if cfg.loss == "dice":
        return dice_total(labels, probs, out.kl, out.dl, batch.valid, skip_absent=cfg.dice_skip_absent)
    return acw_total(labels, probs, freq, out.kl, out.dl, batch.valid, skip_absent=cfg.dice_skip_absent)


def evaluate(model: MSCGNet, data: SegmentationBatch, batch_size: int = 4,
             state: ConfusionState | None = None) -> ConfusionState:
    """Eval-mode forward (no latent noise, running BN statistics) over ``data`` in order."""
    if len(data) == 0:
        raise DataError("cannot evaluate an empty dataset")
    num_classes = data.labels.shape[1]
    if num_classes != model.num_classes:
        raise DataError(f"data has {num_classes} label channels, model predicts {model.num_classes}")
    state = state or ConfusionState(num_classes)
    for start in range(0, len(data), batch_size):
        sl = slice(start, start + batch_size)
        out = model(data.images[sl], train=False)
        accumulate(state, out.logits.value, data.labels[sl], data.valid[sl])
    return state


@dataclass
class StepRecord:
    iteration: int
    epoch: int
    lr: float
    phase: str
    acw: float
    kl: float
    dl: float
    total: float
    skipped: bool = False

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


class Trainer:
    """Owns the model, optimiser and class-frequency state for one run."""

    def __init__(self, cfg: TrainConfig, data: SegmentationBatch, out_dir=None,
                 eval_data: SegmentationBatch | None = None):
        if len(data) == 0:
            raise DataError("training set is empty")
        if data.labels.shape[1] != cfg.num_classes:
            raise DataError(f"data has {data.labels.shape[1]} label channels, config says {cfg.num_classes}")
        self.cfg = cfg
        self.data = data
        self.eval_data = eval_data if eval_data is not None else data
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.model = build_model(cfg)
        groups = build_param_groups(self.model.named_parameters(), self.model.param_kinds(),
                                    cfg.weight_decay, cfg.bias_lr_multiplier)
        self.optimizer = PhasedOptimizer(groups, cfg.adam_iters, cfg.momentum)
        self.freq = ClassFrequencyState(cfg.num_classes)
        self.iteration = 0
        patch = cfg.patch_size or min(data.images.shape[-2:])
        if patch % STRIDE or cfg.node_side > patch // STRIDE:
            raise ConfigError(f"patch size {patch} gives a {patch // STRIDE}x{patch // STRIDE} feature map; "
                              f"need a multiple of {STRIDE} covering the {cfg.node_side}x{cfg.node_side} node grid")
        self.sampler = PatchSampler(data, patch, cfg.batch_size, cfg.seed, cfg.flip_prob)
        self.total_iters = cfg.max_iters or cfg.epochs * self.sampler.iters_per_epoch
        self.records: list[StepRecord] = []
        self.weights_log: list[tuple[int, np.ndarray]] = []
        self.eval_reports: list[dict] = []
        self._epoch_cache: tuple[int, list[SegmentationBatch]] | None = None

    # -------------------------------------------------------------- stepping

    def batch_for(self, iteration: int) -> tuple[int, SegmentationBatch]:
        ipe = self.sampler.iters_per_epoch
        epoch = iteration // ipe
        if self._epoch_cache is None or self._epoch_cache[0] != epoch:
            self._epoch_cache = (epoch, self.sampler.epoch(epoch))
        return epoch, self._epoch_cache[1][iteration % ipe]

    def train_step(self, batch: SegmentationBatch, epoch: int = 0) -> StepRecord:
        it = self.iteration
        lr = cosine_lr(it, self.total_iters, self.cfg.base_lr)
        if self.cfg.loss == "acw" and not update_frequency(self.freq, batch.labels, batch.valid):
            log.warning("iteration %d: no valid labelled pixels, step skipped", it)
            rec = StepRecord(it, epoch, lr, self.optimizer.phase, math.nan, math.nan, math.nan, math.nan, True)
            self.iteration += 1
            self.records.append(rec)
            return rec
        if self.cfg.loss != "acw" and not batch.valid.any():
            rec = StepRecord(it, epoch, lr, self.optimizer.phase, math.nan, math.nan, math.nan, math.nan, True)
            self.iteration += 1
            self.records.append(rec)
            return rec
        self.model.zero_grad()
        rng = RngState(self.cfg.seed).substream("noise", it)
        out = self.model(batch.images, train=True, rng=rng)
        loss = compute_loss(self.cfg, out, batch, self.freq)
        if not np.isfinite(loss.total.value):
            raise NumericalFault("total loss", f"iteration {it}")
        backward(loss.total)
        self.optimizer.step(lr)
        s = loss.scalars()
        rec = StepRecord(it, epoch, lr, self.optimizer.phase, s["acw"], s["kl"], s["dl"], s["total"])
        if self.cfg.loss == "acw":
            self.weights_log.append((it, loss.weights))
        self.records.append(rec)
        self.iteration += 1
        return rec

    def run(self, stop_after: int | None = None, on_step=None) -> list[StepRecord]:
        """Train up to ``total_iters`` (or ``stop_after`` further steps).

        Checkpoints at each epoch end and when stopping early; on a numerical
        fault the last checkpoint on disk is left untouched.
        """
        end = self.total_iters if stop_after is None else min(self.total_iters, self.iteration + stop_after)
        ipe = self.sampler.iters_per_epoch
        if self.out_dir is not None:
            self._prepare_logs()
        while self.iteration < end:
            epoch, batch = self.batch_for(self.iteration)
            rec = self.train_step(batch, epoch)
            if self.out_dir is not None:
                self._append_logs(rec)
            if on_step is not None:
                on_step(rec)
            epoch_done = self.iteration % ipe == 0 or self.iteration == self.total_iters
            if epoch_done:
                self._end_of_epoch(epoch)
        if self.out_dir is not None and self.iteration < self.total_iters:
            self.save_checkpoint()
        return self.records

    def _end_of_epoch(self, epoch: int) -> None:
        last = self.iteration == self.total_iters
        every = self.cfg.eval_every
        if last or (every and (epoch + 1) % every == 0):
            state = evaluate(self.model, self.eval_data, self.cfg.batch_size)
            if state.pixels == 0:
                log.warning("epoch %d: evaluation set has no valid pixels, no report", epoch)
                if self.out_dir is not None:
                    self.save_checkpoint()
                return
            _, m, m_star = miou(state)
            self.eval_reports.append({"epoch": epoch, "iteration": self.iteration, "miou": m, "miou_star": m_star})
            log.info("epoch %d: mIoU %.4f mIoU* %.4f", epoch, m, m_star)
            if self.out_dir is not None:
                (self.out_dir / f"eval_epoch{epoch:03d}.csv").write_text(report_csv(state))
        if self.out_dir is not None:
            self.save_checkpoint()

    # ----------------------------------------------------------- persistence

    def checkpoint(self) -> ckpt_io.Checkpoint:
        state = {
            "iteration": self.iteration,
            "freq_t": self.freq.t,
            "phase": self.optimizer.phase,
            "step_count": self.optimizer.step_count,
            "rng": {"seed": self.cfg.seed, "algorithm": RngState(self.cfg.seed).algorithm},
            "config": self.cfg.to_text(),
            "config_hash": self.cfg.digest(),
        }
        return ckpt_io.Checkpoint(dict(self.model.state_dict()), self.optimizer.state_arrays(),
                                  self.freq.f.copy(), state)

    def save_checkpoint(self, path=None) -> Path:
        path = Path(path) if path is not None else self.out_dir / "checkpoint.zip"
        return ckpt_io.save(path, self.checkpoint())

    def restore(self, ck: ckpt_io.Checkpoint) -> None:
        if ck.state["config_hash"] != self.cfg.digest():
            raise ConfigError("checkpoint was written with a different configuration")
        self.model.load_state_dict(ck.model)
        self.optimizer.load_state_arrays(ck.optimizer, ck.state["phase"], int(ck.state["step_count"]))
        self.freq = ClassFrequencyState(self.cfg.num_classes, int(ck.state["freq_t"]), np.array(ck.freq))
        self.iteration = ck.iteration

    @classmethod
    def from_checkpoint(cls, path, data: SegmentationBatch, out_dir=None, **kw) -> "Trainer":
        ck = ckpt_io.load(path)
        cfg = TrainConfig.from_text(ck.config_text)
        trainer = cls(cfg, data, out_dir, **kw)
        trainer.restore(ck)
        return trainer

    # ------------------------------------------------------------------ logs

    def _prepare_logs(self) -> None:
        """Drop log lines past the current iteration (left by a run that died after its last checkpoint)."""
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for name, header in (("train_log.jsonl", 0), ("weights.csv", 1)):
            path = self.out_dir / name
            if not path.exists():
                continue
            lines = path.read_text().splitlines(keepends=True)
            keep = lines[:header] + [ln for ln in lines[header:] if _log_iteration(ln) < self.iteration]
            path.write_text("".join(keep) if self.iteration else "")

    def _append_logs(self, rec: StepRecord) -> None:
        with open(self.out_dir / "train_log.jsonl", "a") as fh:
            fh.write(rec.to_json() + "\n")
        if self.weights_log and self.weights_log[-1][0] == rec.iteration:
            path = self.out_dir / "weights.csv"
            fresh = not path.exists() or path.stat().st_size == 0
            with open(path, "a") as fh:
                fh.write(weights_csv([self.weights_log[-1]], header=fresh))


def _log_iteration(line: str) -> int:
    line = line.strip()
    if line.startswith("{"):
        return json.loads(line)["iteration"]
    return int(line.split(",", 1)[0])


def weights_csv(rows, header: bool = True) -> str:
    lines = []
    if header and rows:
        lines.append("iteration," + ",".join(f"class_{j}" for j in range(len(rows[0][1]))))
    lines += [f"{it}," + ",".join(repr(float(w)) for w in ws) for it, ws in rows]
    return "".join(line + "\n" for line in lines)


def load_model(path) -> tuple[MSCGNet, TrainConfig]:
    ck = ckpt_io.load(path)
    cfg = TrainConfig.from_text(ck.config_text)
    model = build_model(cfg)
    model.load_state_dict(ck.model)
    return model, cfg
