"""Pretraining and distillation loops with AdamW and cosine decay."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .checkpoint import read_archive, save_model, write_archive
from .data import TokenizedCorpus, sample_batch, validation_batches
from .errors import DivergenceError, ParameterError, ValidationError
from .losses import DistillSpec, combined_loss

logger = logging.getLogger(__name__)

METRIC_HEADER = ("step", "tokens_seen", "train_loss", "ce_component", "kl_component", "val_ppl", "lr")


@dataclass
class TrainSpec:
    total_tokens: int = 200_000
    global_batch: int = 16
    micro_batch: int = 16
    seq_len: int = 32
    lr: float = 3e-4
    min_lr: float = 3e-5
    warmup_steps: int = 0
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 42
    eval_interval: int = 50
    eval_batches: int = 4
    eval_batch_size: int = 16
    save_interval: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.total_tokens <= 0:
            raise ParameterError("total_tokens must be > 0")
        if not 1 <= self.micro_batch <= self.global_batch:
            raise ParameterError("micro_batch must be in [1, global_batch]")
        if self.global_batch % self.micro_batch:
            raise ParameterError("global_batch must be a multiple of micro_batch")
        if self.seq_len < 1 or self.eval_interval < 1:
            raise ParameterError("seq_len and eval_interval must be >= 1")

    @property
    def tokens_per_step(self) -> int:
        return self.global_batch * self.seq_len

    @property
    def steps(self) -> int:
        return self.total_tokens // self.tokens_per_step

    @property
    def accum(self) -> int:
        return self.global_batch // self.micro_batch

    def lr_at(self, step: int) -> float:
        """Linear warmup, then cosine decay from ``lr`` to ``min_lr``."""
        if step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        span = max(1, self.steps - self.warmup_steps)
        progress = min(1.0, (step - self.warmup_steps) / span)
        return self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + math.cos(math.pi * progress))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown train fields: {sorted(unknown)}")
        return cls(**d)


class AdamW:
    """Decoupled weight decay; decay applies to matrices only."""

    def __init__(self, params: dict[str, ad.Tensor], betas=(0.9, 0.95), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.data.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam/m/{k}": v for k, v in self.m.items()}
        out.update({f"adam/v/{k}": v for k, v in self.v.items()})
        out["adam/t"] = np.asarray([self.t], dtype=np.int64)
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        for k in self.m:
            self.m[k] = tensors[f"adam/m/{k}"].copy()
            self.v[k] = tensors[f"adam/v/{k}"].copy()
        self.t = int(tensors["adam/t"][0])


def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and total > max_norm:
        s = max_norm / (total + 1e-6)
        for g in grads:
            g *= s
    return total


def evaluate_perplexity(model, corpus: TokenizedCorpus, batches: int = 4, batch_size: int = 16,
                        seq_len: int = 32) -> float:
    """exp(mean token cross-entropy) over a fixed validation schedule."""
    ces = []
    with ad.no_grad():
        for x, y in validation_batches(corpus, batches, batch_size, seq_len):
            ces.append(ad.cross_entropy(model(x), y).item())
    return float(math.exp(float(np.mean(ces))))


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(path: Path, rows: list[dict]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_HEADER)
        for r in rows:
            w.writerow([_fmt(r.get(k)) for k in METRIC_HEADER])
    tmp.replace(path)


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = []
        for r in csv.DictReader(fh):
            rows.append({k: (float(v) if v not in ("", None) else None) for k, v in r.items()})
        return rows


@dataclass
class TrainResult:
    model: object
    log: list[dict] = field(default_factory=list)

    @property
    def final_val_ppl(self) -> float:
        vals = [r["val_ppl"] for r in self.log if r.get("val_ppl") is not None]
        return vals[-1] if vals else float("nan")


def _batch_seed(seed: int, step: int, micro: int) -> list[int]:
    return [seed, step, micro]


def _save_state(out_dir: Path, model, opt: AdamW, step: int, log: list[dict], spec: TrainSpec) -> None:
    save_model(out_dir / "model.snfw", model, {"step": step})
    write_archive(out_dir / "optimizer.snfw",
                  {"step": step, "train": spec.to_dict(), "log": log}, opt.state())


def train_loop(model, corpus: TokenizedCorpus, spec: TrainSpec, loss_fn: Callable,
               out_dir: str | Path | None = None, resume: bool = False) -> TrainResult:
    """Shared loop. ``loss_fn(model, x, y) -> (loss, ce, kl)``."""
    out = Path(out_dir) if out_dir is not None else None
    opt = AdamW(model.params, spec.betas, spec.eps, spec.weight_decay)
    log: list[dict] = []
    start = 0
    if resume and out is not None and (out / "optimizer.snfw").is_file():
        cfg, tensors = read_archive(out / "optimizer.snfw")
        _, mtensors = read_archive(out / "model.snfw")
        model.load_state_dict(mtensors)
        opt.load_state(tensors)
        start = int(cfg["step"])
        log = cfg["log"]
        logger.info("resuming at step %d", start)

    def val_ppl():
        return evaluate_perplexity(model, corpus, spec.eval_batches, spec.eval_batch_size, spec.seq_len)

    if start == 0:
        log.append({"step": 0, "tokens_seen": 0, "val_ppl": val_ppl(), "lr": spec.lr_at(0)})
    steps = spec.steps
    for step in range(start, steps):
        lr = spec.lr_at(step)
        model.zero_grad()
        losses, ces, kls = [], [], []
        for micro in range(spec.accum):
            x, y = sample_batch(corpus, spec.micro_batch, spec.seq_len, _batch_seed(spec.seed, step, micro))
            loss, ce, kl = loss_fn(model, x, y)
            if not math.isfinite(loss.item()):
                if out is not None:
                    write_metrics(out / "metrics.csv", log)
                raise DivergenceError(f"non-finite loss at step {step}")
            (ad.scale(loss, 1.0 / spec.accum) if spec.accum > 1 else loss).backward()
            losses.append(loss.item())
            ces.append(ce)
            kls.append(kl)
        clip_grad_norm(model.parameters(), spec.grad_clip)
        opt.step(lr)
        done = step + 1
        row = {"step": done, "tokens_seen": done * spec.tokens_per_step,
               "train_loss": float(np.mean(losses)), "ce_component": float(np.mean(ces)),
               "kl_component": float(np.mean(kls)), "lr": lr}
        if done % spec.eval_interval == 0 or done == steps:
            row["val_ppl"] = val_ppl()
        log.append(row)
        if out is not None and spec.save_interval and done % spec.save_interval == 0 and done < steps:
            _save_state(out, model, opt, done, log, spec)
            write_metrics(out / "metrics.csv", log)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _save_state(out, model, opt, steps, log, spec)
        write_metrics(out / "metrics.csv", log)
    return TrainResult(model, log)


def _ce_loss(model, x, y):
    loss = ad.cross_entropy(model(x), y)
    v = loss.item()
    return loss, v, float("nan")


def pretrain(model, corpus: TokenizedCorpus, spec: TrainSpec, out_dir=None, init: str = "checkpoint",
             resume: bool = False) -> TrainResult:
    """Next-token cross-entropy training.

    ``init="random"`` re-initialises the weights (seeded by ``spec.seed``)
    before training; ``"checkpoint"`` keeps the given weights.
    """
    _prepare(model, corpus, init, spec)
    return train_loop(model, corpus, spec, _ce_loss, out_dir, resume)


def distill(student, teacher, corpus: TokenizedCorpus, spec: TrainSpec, dspec: DistillSpec,
            out_dir=None, init: str = "checkpoint", resume: bool = False) -> TrainResult:
    """Same loop as ``pretrain`` with the combined hard/soft objective.

    The teacher runs without graph recording.
    """
    _prepare(student, corpus, init, spec)
    t_vocab = teacher.config.vocab_size if hasattr(teacher, "config") else teacher.arch.vocab_size
    if t_vocab != student.arch.vocab_size:
        raise ValidationError(f"teacher vocab {t_vocab} != student vocab {student.arch.vocab_size}")

    def loss_fn(model, x, y):
        with ad.no_grad():
            zt = teacher(x).data
        return combined_loss(model(x), zt, y, dspec)

    return train_loop(student, corpus, spec, loss_fn, out_dir, resume)


def _prepare(model, corpus: TokenizedCorpus, init: str, spec: TrainSpec) -> None:
    if model.arch.vocab_size < corpus.vocab_size:
        raise ValidationError(f"model vocab {model.arch.vocab_size} < corpus vocab {corpus.vocab_size}")
    if init == "random":
        model.reinitialize(spec.seed)
    elif init != "checkpoint":
        raise ParameterError(f"init must be 'checkpoint' or 'random', got {init!r}")


def load_spec_file(path: str | Path | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())
