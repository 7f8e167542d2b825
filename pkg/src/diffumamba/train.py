"""Training loop: SGD with Nesterov momentum, polynomial LR decay,
Dice + cross-entropy loss, per-step aggregation-weight tracing, and the
paired small-data comparison protocol.

Optimizer defaults follow the framework this architecture extends:
lr 0.01, momentum 0.99 (Nesterov), poly decay power 0.9, gradient-norm
clipping at 12.
"""

from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .metrics import evaluate_model
from .network import ModelConfig, Network, save_checkpoint
from .nnops import dice_ce_loss
from .tensor import NumericError, Rng, Tensor
from .util import build_id, write_json


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.99
    nesterov: bool = True
    poly_power: float = 0.9
    grad_clip: float = 12.0
    epochs: int = 100
    batch_size: int = 2
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_manifest: str = ""
    eval_manifest: str = ""
    out_dir: str = "out"

    def to_dict(self):
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "train_manifest": self.train_manifest,
                "eval_manifest": self.eval_manifest, "out_dir": self.out_dir}

    @classmethod
    def from_dict(cls, d):
        return cls(model=ModelConfig.from_dict(d.get("model", {})),
                   train=TrainConfig(**d.get("train", {})),
                   train_manifest=d.get("train_manifest", ""),
                   eval_manifest=d.get("eval_manifest", ""),
                   out_dir=d.get("out_dir", "out"))


class SGD:
    """SGD with (Nesterov) momentum over a named parameter table."""

    def __init__(self, params: dict, momentum=0.99, nesterov=True):
        self.params = params
        self.momentum = momentum
        self.nesterov = nesterov
        self.buffers = {name: np.zeros_like(t.data) for name, t in params.items()}

    def grad_norm(self):
        total = 0.0
        for t in self.params.values():
            if t.grad is not None:
                total += float((t.grad.astype(np.float64) ** 2).sum())
        return math.sqrt(total)

    def step(self, lr, grad_clip=None):
        scale = 1.0
        if grad_clip is not None and grad_clip > 0:
            norm = self.grad_norm()
            if norm > grad_clip:
                scale = grad_clip / norm
        for name, t in self.params.items():
            if t.grad is None:
                continue
            g = t.grad * scale if scale != 1.0 else t.grad
            buf = self.buffers[name]
            buf *= self.momentum
            buf += g
            update = g + self.momentum * buf if self.nesterov else buf
            if lr != 0.0:
                t.data = t.data - (lr * update).astype(t.dtype, copy=False)

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()


def poly_lr(lr0, epoch, total_epochs, power=0.9):
    return lr0 * (1.0 - epoch / max(1, total_epochs)) ** power


def _batches(samples, batch_size, order):
    for i in range(0, len(order), batch_size):
        chunk = [samples[j] for j in order[i:i + batch_size]]
        images = np.stack([s.image for s in chunk]).astype(np.float32)
        labels = np.stack([s.label for s in chunk]).astype(np.int64)
        yield images, labels


@dataclass
class TrainResult:
    epoch_log: list
    lambda_trace: np.ndarray | None
    final_path: str
    best_path: str
    best_epoch_loss: float
    steps: int


def train_run(model: Network, samples, tcfg: TrainConfig, out_dir,
              log_every=10, quiet=False) -> TrainResult:
    """Train ``model`` on ``samples``; write logs and checkpoints to out_dir.

    On a non-finite loss the run aborts with NumericError after writing
    a diagnostic snapshot (checkpoint + context JSON).
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = Rng(tcfg.seed, name="train")
    opt = SGD(model.named_parameters(), momentum=tcfg.momentum, nesterov=tcfg.nesterov)
    epoch_log = []
    best = (float("inf"), -1)
    final_path = os.path.join(out_dir, "final.ckpt")
    best_path = os.path.join(out_dir, "best.ckpt")
    steps = 0
    t_start = time.time()
    for epoch in range(tcfg.epochs):
        lr = poly_lr(tcfg.lr, epoch, tcfg.epochs, tcfg.poly_power)
        order = rng.derive(f"epoch{epoch}").permutation(len(samples))
        ep_total = ep_dice = ep_ce = 0.0
        n_batches = 0
        for images, labels in _batches(samples, tcfg.batch_size, order):
            opt.zero_grad()
            try:
                logits = model.forward(Tensor(images))
                loss = dice_ce_loss(logits, labels)
                total = float(loss.total.item())
                if not math.isfinite(total):
                    raise NumericError(f"non-finite loss {total}")
                loss.total.backward()
            except NumericError as err:
                snap = os.path.join(out_dir, "diagnostic.ckpt")
                save_checkpoint(model, snap, rng=rng, step=steps,
                                extra={"abort_epoch": epoch, "abort_error": str(err)})
                write_json(os.path.join(out_dir, "diagnostic.json"),
                           {"error": str(err), "epoch": epoch, "step": steps,
                            "snapshot": snap})
                raise
            opt.step(lr, tcfg.grad_clip)
            if model.nrm is not None:
                model.nrm.lam.log_step()
            steps += 1
            ep_total += total
            ep_dice += float(loss.dice_part.item())
            ep_ce += float(loss.ce_part.item())
            n_batches += 1
        row = {"epoch": epoch, "lr": lr, "loss": ep_total / n_batches,
               "dice_loss": ep_dice / n_batches, "ce_loss": ep_ce / n_batches}
        epoch_log.append(row)
        if row["loss"] < best[0]:
            best = (row["loss"], epoch)
            save_checkpoint(model, best_path, rng=rng, step=steps,
                            extra={"epoch": epoch, "build_id": build_id(),
                                   "seed": tcfg.seed})
        if not quiet and (epoch % log_every == 0 or epoch == tcfg.epochs - 1):
            print(f"epoch {epoch:4d}  lr {lr:.5f}  loss {row['loss']:.4f}  "
                  f"(dice {row['dice_loss']:.4f} ce {row['ce_loss']:.4f})", flush=True)

    save_checkpoint(model, final_path, optimizer_state=opt.buffers, rng=rng, step=steps,
                    extra={"epochs": tcfg.epochs, "build_id": build_id(),
                           "seed": tcfg.seed, "wall_seconds": time.time() - t_start})
    trace = model.nrm.lam.trace() if model.nrm is not None else None
    _write_epoch_log(os.path.join(out_dir, "train_log.csv"), epoch_log, tcfg.seed)
    if trace is not None and len(trace):
        _write_lambda_trace(os.path.join(out_dir, "lambda_trace.csv"), trace, tcfg.seed)
    return TrainResult(epoch_log=epoch_log, lambda_trace=trace, final_path=final_path,
                       best_path=best_path, best_epoch_loss=best[0], steps=steps)


def _write_epoch_log(path, rows, seed):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# seed={seed}\n# build_id={build_id()}\n")
        w = csv.writer(fh)
        w.writerow(["epoch", "lr", "loss", "dice_loss", "ce_loss"])
        for r in rows:
            w.writerow([r["epoch"], f"{r['lr']:.8f}", f"{r['loss']:.8f}",
                        f"{r['dice_loss']:.8f}", f"{r['ce_loss']:.8f}"])


def _write_lambda_trace(path, trace, seed):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# seed={seed}\n# build_id={build_id()}\n")
        w = csv.writer(fh)
        w.writerow(["step"] + [f"lambda_{i + 1}" for i in range(trace.shape[1])])
        for step, row in enumerate(trace):
            w.writerow([step] + [f"{v:.8f}" for v in row])


def run_experiment(cfg: ExperimentConfig, samples, quiet=False) -> TrainResult:
    os.makedirs(cfg.out_dir, exist_ok=True)
    write_json(os.path.join(cfg.out_dir, "config.json"),
               {**cfg.to_dict(), "build_id": build_id()})
    model = Network(cfg.model)
    return train_run(model, samples, cfg.train, cfg.out_dir, quiet=quiet)


# ----------------------------------------------------------------------
# paired small-data comparison protocol


def paired_comparison(train_samples, test_samples, model_cfg: ModelConfig,
                      tcfg: TrainConfig, seeds, out_dir, quiet=True):
    """Train the model and its baseline over several seeds; report DSCs.

    For each seed both variants (noise reduction module on / off) train
    on the same split and are scored on the held-out samples.  Returns
    the report dict; CSV and JSON land in ``out_dir``.
    """
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for variant, nrm_enabled in (("diff-umamba", True), ("umamba-bot", False)):
        for seed in seeds:
            mcfg = ModelConfig.from_dict({**model_cfg.to_dict(),
                                          "nrm_enabled": nrm_enabled, "seed": seed})
            run_t = TrainConfig(**{**tcfg.to_dict(), "seed": seed})
            run_dir = os.path.join(out_dir, f"{variant}-seed{seed}")
            model = Network(mcfg)
            t0 = time.time()
            train_run(model, train_samples, run_t, run_dir, quiet=quiet)
            report = evaluate_model(model, test_samples)
            rows.append({"variant": variant, "seed": seed,
                         "test_dsc": report.mean_dsc(),
                         "wall_seconds": time.time() - t0})
            if not quiet:
                print(f"{variant} seed {seed}: test DSC {report.mean_dsc():.4f}", flush=True)
    summary = {}
    for variant in ("diff-umamba", "umamba-bot"):
        vals = [r["test_dsc"] for r in rows if r["variant"] == variant]
        summary[variant] = {"mean_dsc": float(np.mean(vals)),
                            "std_dsc": float(np.std(vals)),
                            "per_seed": vals}
    summary["dsc_gap"] = summary["diff-umamba"]["mean_dsc"] - summary["umamba-bot"]["mean_dsc"]
    summary["seeds"] = list(seeds)
    summary["build_id"] = build_id()

    with open(os.path.join(out_dir, "comparison.csv"), "w", newline="",
              encoding="utf-8") as fh:
        fh.write(f"# build_id={build_id()}\n")
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "test_dsc", "wall_seconds"])
        for r in rows:
            w.writerow([r["variant"], r["seed"], f"{r['test_dsc']:.6f}",
                        f"{r['wall_seconds']:.1f}"])
    write_json(os.path.join(out_dir, "comparison.json"), summary)
    return summary
