"""Mini-batch training with AdamW, cosine schedule and best-epoch selection."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .. import metrics
from ..bilateral import BilateralModel, forward_pair, slot_noise
from ..synthdata import Dataset, add_gaussian_noise, as_float, generate_dataset
from ..tensor import Rng, Tensor, no_grad
from .config import ExperimentConfig

log = logging.getLogger(__name__)

EVAL_BATCH = 50


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, record: dict):
        super().__init__(message, record)   # both in args so it survives pickling
        self.message = message
        self.record = record

    def __str__(self) -> str:
        return self.message


class AdamW:
    """Adam with decoupled weight decay on matrices; one learning rate per group."""

    def __init__(self, groups: list[tuple[list[Tensor], float]], weight_decay: float = 0.05,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.groups = [(list(ps), lr) for ps, lr in groups]
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.data) for ps, _ in self.groups for p in ps}
        self.v = {id(p): np.zeros_like(p.data) for ps, _ in self.groups for p in ps}

    def params(self) -> list[Tensor]:
        return [p for ps, _ in self.groups for p in ps]

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad = np.zeros_like(p.data)

    def step(self, scale: float = 1.0) -> None:
        """Update with every group's learning rate multiplied by ``scale``."""
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for ps, base_lr in self.groups:
            lr = base_lr * scale
            for p in ps:
                g = p.grad
                m = self.m[id(p)]
                v = self.v[id(p)]
                m *= self.b1
                m += (1 - self.b1) * g
                v *= self.b2
                v += (1 - self.b2) * g * g
                if p.data.ndim >= 2 and self.weight_decay:
                    p.data = p.data * (1 - lr * self.weight_decay)
                p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def lr_scale(step: int, total: int, warmup: int) -> float:
    """Linear warmup then cosine decay to zero; ``step`` is 0-based."""
    if warmup > 0 and step < warmup:
        return (step + 1) / warmup
    if total <= warmup:
        return 1.0
    frac = (step - warmup) / max(1, total - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * min(1.0, frac)))


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    norm = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params))
    if max_norm > 0 and norm > max_norm:
        for p in params:
            p.grad = p.grad * (max_norm / norm)
    return norm


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalOutput:
    logits: np.ndarray
    labels: np.ndarray
    pooled: np.ndarray
    competition: np.ndarray | None = None   # (M, 2, K, N) final slot-axis softmax
    attn: np.ndarray | None = None          # (M, 2, K, N) final token-renormalized attention
    corr: np.ndarray | None = None          # (M, 2, K, K) head-mean correspondence
    slots: np.ndarray | None = None         # (M, 2, K, D) slot-attention output

    @property
    def auc(self) -> float:
        return metrics.macro_auc(self.logits, self.labels)

    @property
    def f1(self) -> float:
        return metrics.macro_f1(self.logits, self.labels)


def _images(data: Dataset, idx: np.ndarray, sigma: float, eval_seed: int):
    left = as_float(data.left[idx])
    right = as_float(data.right[idx])
    if sigma > 0:
        left = np.stack([add_gaussian_noise(left[j], sigma, Rng(eval_seed, 41, (int(i), 0)))
                         for j, i in enumerate(idx)])
        right = np.stack([add_gaussian_noise(right[j], sigma, Rng(eval_seed, 41, (int(i), 1)))
                          for j, i in enumerate(idx)])
    return left, right


def evaluate(model: BilateralModel, data: Dataset, eval_seed: int, sigma: float = 0.0,
             collect: bool = False) -> EvalOutput:
    """Deterministic inference; slot-init and pixel noise are keyed by sample index."""
    c = model.config
    logits, pooled = [], []
    comp, attn, corr, slots = [], [], [], []
    for start in range(0, len(data), EVAL_BATCH):
        idx = np.arange(start, min(start + EVAL_BATCH, len(data)))
        left, right = _images(data, idx, sigma, eval_seed)
        noise = None
        if c.uses_slots:
            noise = (slot_noise(eval_seed, idx, c.num_slots, c.dim, 0),
                     slot_noise(eval_seed, idx, c.num_slots, c.dim, 1))
        with no_grad():
            out = forward_pair(model, left, right, training=False, noise=noise)
        logits.append(out.logits.data)
        pooled.append(out.pooled)
        if collect and out.states is not None:
            comp.append(np.stack([s.competition[-1] for s in out.states], axis=1))
            attn.append(np.stack([s.attn[-1] for s in out.states], axis=1))
            slots.append(np.stack([s.slots.data for s in out.states], axis=1))
            if out.corr is not None:
                corr.append(np.stack([cm.mean for cm in out.corr], axis=1))
    cat = lambda xs: np.concatenate(xs) if xs else None  # noqa: E731
    return EvalOutput(np.concatenate(logits), np.asarray(data.labels), np.concatenate(pooled),
                      cat(comp), cat(attn), cat(corr), cat(slots))


# ---------------------------------------------------------------------------
# training


@dataclass
class RunResult:
    config_hash: str
    dataset_hash: str
    variant: str
    seed: int
    curve: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    val_auc: float = float("nan")
    test_auc: float = float("nan")
    test_f1: float = float("nan")
    wall_time: float = 0.0
    diverged: bool = False
    model: BilateralModel | None = field(default=None, repr=False)

    def row(self) -> dict:
        return {"variant": self.variant, "seed": self.seed, "config_hash": self.config_hash,
                "dataset_hash": self.dataset_hash, "best_epoch": self.best_epoch,
                "val_auc": _r(self.val_auc), "test_auc": _r(self.test_auc),
                "test_f1": _r(self.test_f1)}


def _r(x: float) -> str:
    return f"{x:.6f}"


_DATA_CACHE: dict[str, dict[str, Dataset]] = {}


def load_splits(cfg: ExperimentConfig) -> dict[str, Dataset]:
    """Generate (once per process) the dataset described by ``cfg``."""
    key = cfg.dataset_hash()
    if key not in _DATA_CACHE:
        _DATA_CACHE[key] = generate_dataset(cfg.dataset_spec())
    return _DATA_CACHE[key]


def _run_epochs(model: BilateralModel, cfg: ExperimentConfig, train: Dataset, epochs: int,
                rng: Rng, opt: AdamW, warmup_epochs: int, on_epoch=None,
                recon_only: bool = False) -> list[dict]:
    n = len(train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = epochs * steps_per_epoch
    warmup = warmup_epochs * steps_per_epoch
    step = 0
    curve = []
    for epoch in range(epochs):
        order = rng.child(epoch).permutation(n)
        sums = {"loss": 0.0, "cls": 0.0, "recon": 0.0}
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            brng = rng.child(epoch, b)
            left, right = as_float(train.left[idx]), as_float(train.right[idx])
            opt.zero_grad()
            out = forward_pair(model, left, right, train.labels[idx], training=True, rng=brng)
            loss = out.l_recon if recon_only else out.loss
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise DivergenceError(f"non-finite loss at epoch {epoch} step {b}",
                                      {"epoch": epoch, "step": b, "loss": lv})
            loss.backward()
            if cfg.grad_clip > 0:
                clip_gradients(opt.params(), cfg.grad_clip)
            opt.step(lr_scale(step, total, warmup))
            step += 1
            sums["loss"] += lv * len(idx)
            sums["cls"] += float(out.l_cls.data) * len(idx)
            if out.l_recon is not None:
                sums["recon"] += float(out.l_recon.data) * len(idx)
        rec = {"epoch": epoch + 1, **{k: v / n for k, v in sums.items()}}
        if on_epoch is not None:
            rec.update(on_epoch(epoch))
        curve.append(rec)
    return curve


def train(cfg: ExperimentConfig, seed: int, splits: dict[str, Dataset] | None = None,
          train_data: Dataset | None = None, variant: str | None = None,
          keep_model: bool = True) -> RunResult:
    """Train one model; returns test metrics at the best validation-AUC epoch."""
    t0 = time.time()
    variant = variant or cfg.variant
    cfg = cfg.replace(variant=variant)
    splits = splits if splits is not None else load_splits(cfg)
    train_split = train_data if train_data is not None else splits["train"]
    model = BilateralModel.init(cfg.model_config(), seed)
    result = RunResult(cfg.config_hash(), cfg.dataset_hash(), variant, seed)
    rng = Rng(seed, stream_id=2)

    if cfg.pretrain_epochs and model.slots is not None:
        # reconstruction-only warm start of the slot module and decoder
        pre_opt = AdamW([(model.module_tensors(), cfg.lr_module)], cfg.weight_decay)
        _run_epochs(model, cfg, train_split, cfg.pretrain_epochs, rng.child(900), pre_opt,
                    cfg.warmup_epochs, recon_only=True)

    best = {"auc": -np.inf, "epoch": 0, "state": [a.copy() for a in model.state_arrays()]}

    def on_epoch(epoch: int) -> dict:
        val_auc = evaluate(model, splits["val"], cfg.eval_seed).auc
        if val_auc > best["auc"]:
            best.update(auc=val_auc, epoch=epoch + 1,
                        state=[a.copy() for a in model.state_arrays()])
        return {"val_auc": val_auc}

    opt = AdamW([(model.encoder_tensors(), cfg.lr_encoder),
                 (model.module_tensors(), cfg.lr_module)], cfg.weight_decay)
    try:
        result.curve = _run_epochs(model, cfg, train_split, cfg.epochs, rng, opt,
                                   cfg.warmup_epochs, on_epoch)
    except DivergenceError as exc:
        log.error("run diverged: %s", exc)
        result.diverged = True
        result.curve.append(exc.record)
        raise
    if cfg.epochs == 0:
        best["auc"] = evaluate(model, splits["val"], cfg.eval_seed).auc
    model.load_arrays(best["state"])
    result.best_epoch = best["epoch"]
    result.val_auc = float(best["auc"])
    test = evaluate(model, splits["test"], cfg.eval_seed)
    result.test_auc = test.auc
    result.test_f1 = test.f1
    result.wall_time = time.time() - t0
    if keep_model:
        result.model = model
    log.info("variant=%s seed=%d best_epoch=%d val_auc=%.4f test_auc=%.4f (%.1fs)", variant,
             seed, result.best_epoch, result.val_auc, result.test_auc, result.wall_time)
    return result
