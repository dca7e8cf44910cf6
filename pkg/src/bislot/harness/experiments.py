"""Experiment runners: ablation matrix, K sweep, disruption, stress, grounding,
correspondence.  Each returns plain row dicts ready for CSV output."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .. import metrics
from ..bilateral import BilateralModel
from ..encoder import grid_side, patch_targets
from ..synthdata import Dataset, as_float, disc_center_patch, shuffle_pairs
from ..tensor import Rng
from . import stats
from .config import ExperimentConfig
from .train import RunResult, evaluate, load_splits, train

log = logging.getLogger(__name__)

DISRUPTION_VARIANTS = ("full", "no_slots")
STRESS_VARIANTS = ("full", "no_slots")


def fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.6f}"
    return str(x)


def write_csv(path, rows: list[dict], columns: list[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c, "")) for c in columns])
    return path


def format_table(rows: list[dict], columns: list[str] | None = None) -> str:
    """Fixed-width plain-text table."""
    if not rows:
        return "(no rows)\n"
    columns = columns or list(rows[0])
    cells = [[fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    line = lambda vals: "  ".join(v.rjust(w) for v, w in zip(vals, widths))  # noqa: E731
    out = [line(columns), line(["-" * w for w in widths])]
    out += [line(row) for row in cells]
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# run cache and work queue


def _job(cfg_dict: dict, variant: str, seed: int, tag: str):
    cfg = ExperimentConfig(**cfg_dict)
    res = _train_tagged(cfg, variant, seed, tag, load_splits(cfg))
    arrays = [a.copy() for a in res.model.state_arrays()]
    res.model = None
    return res, arrays


def _train_tagged(cfg: ExperimentConfig, variant: str, seed: int, tag: str,
                  splits: dict[str, Dataset]) -> RunResult:
    train_data = None
    if tag == "train_shuffle":
        train_data = shuffle_pairs(splits["train"], "train_shuffle", Rng(seed, stream_id=52))
    elif tag:
        raise ValueError(f"unknown run tag {tag!r}")
    return train(cfg, seed, splits, train_data=train_data, variant=variant)


class Runner:
    """Trains (variant, seed) jobs once and memoizes them in memory and on disk."""

    def __init__(self, cfg: ExperimentConfig, cache_dir=None, workers: int | None = None):
        self.cfg = cfg
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.workers = workers if workers is not None else cfg.workers
        self._runs: dict[tuple, RunResult] = {}

    @property
    def splits(self) -> dict[str, Dataset]:
        return load_splits(self.cfg)

    def _cfg_for(self, variant: str, overrides: dict) -> ExperimentConfig:
        return self.cfg.replace(variant=variant, **overrides)

    def _key(self, variant, seed, tag, overrides) -> tuple:
        return (self._cfg_for(variant, overrides).config_hash(), seed, tag)

    def _path(self, key) -> Path | None:
        if self.cache_dir is None:
            return None
        h, seed, tag = key
        return self.cache_dir / f"{tag + '_' if tag else ''}{h}_s{seed}"

    def _load(self, key, cfg: ExperimentConfig) -> RunResult | None:
        p = self._path(key)
        if p is None or not p.with_suffix(".npz").exists():
            return None
        meta = json.loads(p.with_suffix(".json").read_text())
        with np.load(p.with_suffix(".npz")) as z:
            arrays = [z[f"a{i}"] for i in range(len(z.files))]
        meta.pop("model", None)
        res = RunResult(**meta)
        res.model = BilateralModel.init(cfg.model_config(), res.seed)
        res.model.load_arrays(arrays)
        return res

    def _store(self, key, res: RunResult) -> None:
        p = self._path(key)
        if p is None:
            return
        p.parent.mkdir(parents=True, exist_ok=True)
        meta = {k: v for k, v in asdict(res).items() if k != "model"}
        p.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True))
        arrays = res.model.state_arrays()
        np.savez(p.with_suffix(".npz"), **{f"a{i}": a for i, a in enumerate(arrays)})

    def run_many(self, jobs: list[tuple]) -> list[RunResult]:
        """``jobs`` holds ``(variant, seed)`` or ``(variant, seed, tag, overrides)`` tuples."""
        norm = []
        for j in jobs:
            variant, seed, tag, overrides = (tuple(j) + ("", {}))[:4]
            norm.append((variant, seed, tag, dict(overrides)))
        todo = []
        for variant, seed, tag, ov in norm:
            key = self._key(variant, seed, tag, ov)
            if key in self._runs or key in [k for k, *_ in todo]:
                continue
            cached = self._load(key, self._cfg_for(variant, ov))
            if cached is not None:
                self._runs[key] = cached
            else:
                todo.append((key, variant, seed, tag, ov))
        if self.workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=self.workers) as pool:
                futs = [(key, v, ov, pool.submit(_job, self._cfg_for(v, ov).to_dict(), v, s, t))
                        for key, v, s, t, ov in todo]
                for key, v, ov, fut in futs:
                    res, arrays = fut.result()
                    res.model = BilateralModel.init(self._cfg_for(v, ov).model_config(), res.seed)
                    res.model.load_arrays(arrays)
                    self._runs[key] = res
                    self._store(key, res)
        else:
            for key, v, s, t, ov in todo:
                cfg = self._cfg_for(v, ov)
                res = _train_tagged(cfg, v, s, t, load_splits(cfg))
                self._runs[key] = res
                self._store(key, res)
        return [self._runs[self._key(v, s, t, ov)] for v, s, t, ov in norm]

    def run(self, variant: str, seed: int, tag: str = "", **overrides) -> RunResult:
        return self.run_many([(variant, seed, tag, overrides)])[0]


def _seeds(cfg: ExperimentConfig) -> list[int]:
    return sorted(cfg.seeds)


# ---------------------------------------------------------------------------
# ablation matrix


def representation_stats(model: BilateralModel, data: Dataset, eval_seed: int) -> dict:
    """Fisher ratio of pooled features and, for slot models, mean slot cosine."""
    ev = evaluate(model, data, eval_seed, collect=model.config.uses_slots)
    out = {}
    keep, cls = metrics.single_label_subset(ev.labels)
    try:
        out["fisher_ratio"] = metrics.fisher_ratio(ev.pooled[keep], cls)
    except ValueError:
        out["fisher_ratio"] = float("nan")
    if ev.slots is not None:
        s = ev.slots.reshape(-1, *ev.slots.shape[-2:])
        out["slot_cosine"] = metrics.slot_cosine_similarity(s)
    return out


def ablation(runner: Runner, variants=None) -> tuple[list[dict], list[dict]]:
    """Returns ``(summary_rows, per_seed_rows)``."""
    cfg = runner.cfg
    variants = list(variants or cfg.ablation_variants)
    seeds = _seeds(cfg)
    runs = runner.run_many([(v, s) for v in variants for s in seeds])
    if len({r.dataset_hash for r in runs}) != 1:
        raise RuntimeError("ablation runs do not share one dataset")
    test = runner.splits["test"]
    per_seed = []
    by_variant: dict[str, list[RunResult]] = {v: [] for v in variants}
    for r in runs:
        by_variant[r.variant].append(r)
        row = r.row()
        row.update(representation_stats(r.model, test, cfg.eval_seed))
        row.setdefault("slot_cosine", "")
        per_seed.append(row)

    ref = "full" if "full" in variants else variants[0]
    ref_auc = np.array([r.test_auc for r in by_variant[ref]])
    summary = []
    for v in variants:
        auc = np.array([r.test_auc for r in by_variant[v]])
        f1 = np.array([r.test_f1 for r in by_variant[v]])
        m, s = stats.mean_std(auc)
        lo, hi = stats.normal_ci(auc)
        blo, bhi = stats.bootstrap_ci(auc, seed=cfg.eval_seed)
        diff = ref_auc - auc
        wx = stats.wilcoxon_signed_rank(ref_auc, auc)
        summary.append({"variant": v, "n": len(auc), "auc_mean": m, "auc_std": s,
                        "auc_ci_normal_lo": lo, "auc_ci_normal_hi": hi,
                        "auc_ci_boot_lo": blo, "auc_ci_boot_hi": bhi,
                        "f1_mean": stats.mean_std(f1)[0], "ref": ref,
                        "diff_vs_ref_mean": float(diff.mean()),
                        "ref_wins": int(np.sum(diff > 0)), "wilcoxon_w": wx.w,
                        "wilcoxon_p": wx.p_value})
    return summary, per_seed


ABLATION_COLUMNS = ["variant", "n", "auc_mean", "auc_std", "auc_ci_normal_lo", "auc_ci_normal_hi",
                    "auc_ci_boot_lo", "auc_ci_boot_hi", "f1_mean", "ref", "diff_vs_ref_mean",
                    "ref_wins", "wilcoxon_w", "wilcoxon_p"]
SEED_COLUMNS = ["variant", "seed", "config_hash", "dataset_hash", "best_epoch", "val_auc",
                "test_auc", "test_f1", "fisher_ratio", "slot_cosine"]


# ---------------------------------------------------------------------------
# K sweep


def k_sweep(runner: Runner, variant: str = "full") -> tuple[list[dict], list[dict]]:
    cfg = runner.cfg
    for k in cfg.k_values:
        if k < 2:
            raise ValueError("K must be at least 2")
    seeds = _seeds(cfg)
    jobs = [(variant, s, "", {"num_slots": k}) for k in cfg.k_values for s in seeds]
    runs = runner.run_many(jobs)
    curve, per_seed = [], []
    for i, k in enumerate(cfg.k_values):
        chunk = runs[i * len(seeds):(i + 1) * len(seeds)]
        auc = [r.test_auc for r in chunk]
        m, s = stats.mean_std(auc)
        curve.append({"K": k, "mean": m, "std": s, "n": len(auc)})
        per_seed += [{"K": k, "seed": r.seed, "test_auc": r.test_auc} for r in chunk]
    return curve, per_seed


# ---------------------------------------------------------------------------
# pairing disruption


def eval_shuffle_perm(n: int, eval_seed: int) -> np.ndarray:
    from ..synthdata import derangement
    return derangement(n, Rng(eval_seed, stream_id=51))


def disruption(runner: Runner, variants=DISRUPTION_VARIANTS,
               train_shuffle_variants=None) -> tuple[list[dict], list[dict]]:
    """Eval-shuffle and train-shuffle AUC drops per variant; returns (summary, per_seed).

    Shuffled-pair retraining is limited to ``train_shuffle_variants`` (default: all).
    """
    cfg = runner.cfg
    seeds = _seeds(cfg)
    test = runner.splits["test"]
    shuffled = shuffle_pairs(test, "eval_shuffle", None, perm=eval_shuffle_perm(len(test),
                                                                                 cfg.eval_seed))
    clean_runs = runner.run_many([(v, s) for v in variants for s in seeds])
    ts_variants = variants if train_shuffle_variants is None else train_shuffle_variants
    ts_runs = runner.run_many([(v, s, "train_shuffle", {}) for v in ts_variants for s in seeds])
    ts_auc = {(t.variant, t.seed): t.test_auc for t in ts_runs}
    per_seed = []
    for r in clean_runs:
        sh = evaluate(r.model, shuffled, cfg.eval_seed).auc
        t = ts_auc.get((r.variant, r.seed), float("nan"))
        per_seed.append({"variant": r.variant, "seed": r.seed, "clean_auc": r.test_auc,
                         "eval_shuffle_auc": sh, "eval_drop": r.test_auc - sh,
                         "train_shuffle_auc": t, "train_drop": r.test_auc - t})
    summary = []
    for v in variants:
        rows = [p for p in per_seed if p["variant"] == v]
        summary.append({"variant": v, "n": len(rows),
                        **{f"{c}_mean": float(np.mean([p[c] for p in rows]))
                           for c in ("clean_auc", "eval_shuffle_auc", "eval_drop",
                                     "train_shuffle_auc", "train_drop")}})
    means = {s["variant"]: s["eval_drop_mean"] for s in summary}
    if "full" in means and "no_slots" in means:
        ratio = means["full"] / means["no_slots"] if means["no_slots"] != 0 else float("inf")
        for s in summary:
            s["full_to_no_slots_drop_ratio"] = ratio
    return summary, per_seed


# ---------------------------------------------------------------------------
# noise stress


def stress(runner: Runner, variants=STRESS_VARIANTS) -> tuple[list[dict], list[dict]]:
    cfg = runner.cfg
    seeds = _seeds(cfg)
    test = runner.splits["test"]
    runs = runner.run_many([(v, s) for v in variants for s in seeds])
    per_seed = []
    for r in runs:
        for sigma in cfg.noise_sigmas:
            auc = r.test_auc if sigma == 0 else evaluate(r.model, test, cfg.eval_seed, sigma).auc
            per_seed.append({"variant": r.variant, "seed": r.seed, "sigma": float(sigma),
                             "auc": auc})
    summary = []
    for v in variants:
        for sigma in cfg.noise_sigmas:
            vals = [p["auc"] for p in per_seed if p["variant"] == v and p["sigma"] == sigma]
            m, s = stats.mean_std(vals)
            summary.append({"variant": v, "sigma": float(sigma), "auc_mean": m, "auc_std": s,
                            "n": len(vals)})
    if "full" in variants and "no_slots" in variants:
        base = {r["sigma"]: r["auc_mean"] for r in summary if r["variant"] == "no_slots"}
        for r in summary:
            r["gap_vs_no_slots"] = r["auc_mean"] - base[r["sigma"]]
    return summary, per_seed


def count_inversions(values, tol: float = 0.0) -> tuple[int, float]:
    """Number of increases along ``values`` and the largest one."""
    d = np.diff(np.asarray(values, dtype=np.float64))
    ups = d[d > tol]
    return int(len(ups)), float(ups.max()) if len(ups) else 0.0


# ---------------------------------------------------------------------------
# grounding


def kmeans_disc_overlap(data: Dataset, k: int, patch_size: int, seed: int):
    """Per-image k-means on patch mean-RGB; IoU/Dice of each image's best cluster.

    Returns ``(iou, dice)`` arrays over the ``2 * len(data)`` eye images.
    """
    rng = Rng(seed, stream_id=61)
    ious, dices = [], []
    for m in range(len(data)):
        for eye, (img, gt) in enumerate(((data.left[m], data.disc_mask_left[m]),
                                         (data.right[m], data.disc_mask_right[m]))):
            feats = patch_targets(as_float(img), patch_size)
            labels = metrics.kmeans_baseline(feats, k, rng.child(m, eye))
            iou, dice, _ = metrics.best_cluster_overlap(labels, gt, k)
            ious.append(iou)
            dices.append(dice)
    return np.array(ious), np.array(dices)


def slot_disc_iou(masks: np.ndarray, gt: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-image, per-slot IoU and Dice, each ``(P, k)``; ``masks``/``gt`` are ``(P, N)``."""
    vals = np.array([[metrics.miou_dice(m == j, g) for j in range(k)]
                     for m, g in zip(masks, gt)])
    return vals[..., 0], vals[..., 1]


def grounding_for(model: BilateralModel, data: Dataset, eval_seed: int, seed: int) -> dict:
    c = model.config
    if not c.uses_slots:
        raise ValueError(f"variant {c.variant!r} has no slots to ground")
    ev = evaluate(model, data, eval_seed, collect=True)
    masks = ev.competition.argmax(axis=-2).reshape(-1, c.num_tokens)     # (M*2, N)
    gt = np.stack([data.disc_mask_left, data.disc_mask_right], axis=1).reshape(-1, c.num_tokens)
    per_image_iou, per_image_dice = slot_disc_iou(masks, gt, c.num_slots)
    iou, dice = per_image_iou.mean(axis=0), per_image_dice.mean(axis=0)
    best = int(np.argmax(iou))
    km_iou, km_dice = kmeans_disc_overlap(data, c.num_slots, c.patch_size, seed)
    return {"seed": seed, "best_slot": best, "miou": iou[best], "dice": dice[best],
            "miou_std": float(per_image_iou[best].std()), "miou_all_slots": float(iou.mean()),
            "kmeans_miou": float(km_iou.mean()), "kmeans_dice": float(km_dice.mean()),
            "kmeans_miou_std": float(km_iou.std())}


def grounding(runner: Runner, variant: str = "full") -> list[dict]:
    cfg = runner.cfg
    test = runner.splits["test"]
    runs = runner.run_many([(variant, s) for s in _seeds(cfg)])
    return [grounding_for(r.model, test, cfg.eval_seed, r.seed) for r in runs]


GROUNDING_COLUMNS = ["seed", "best_slot", "miou", "miou_std", "dice", "miou_all_slots",
                     "kmeans_miou", "kmeans_miou_std", "kmeans_dice"]


# ---------------------------------------------------------------------------
# correspondence


def correspondence_for(model: BilateralModel, data: Dataset, eval_seed: int, spec) -> tuple:
    """Summary dict, per-slot rows and the aggregated head-mean matrix."""
    c = model.config
    if model.cross is None or not c.uses_slots:
        raise ValueError(f"variant {c.variant!r} has no slot correspondence")
    ev = evaluate(model, data, eval_seed, collect=True)
    k, g = c.num_slots, grid_side(c.image_side, c.patch_size)
    agg = ev.corr.mean(axis=(0, 1))
    ent = float(np.mean([metrics.attention_entropy(m) for m in ev.corr.reshape(-1, k, k)]))
    masks = ev.competition.argmax(axis=-2)                      # (M, 2, N)
    gt = np.stack([data.disc_mask_left, data.disc_mask_right], axis=1)
    iou = slot_disc_iou(masks.reshape(-1, c.num_tokens), gt.reshape(-1, c.num_tokens), k)[0]
    iou = iou.mean(axis=0)
    disc_slot = int(np.argmax(iou))
    params = (data.params_left, data.params_right)
    contra = []
    for m in range(len(data)):
        for eye in (0, 1):
            other = 1 - eye
            center = disc_center_patch(params[other][m], spec)
            contra.append(metrics.contralateral_mass(ev.corr[m, eye, disc_slot],
                                                     ev.attn[m, other], center, g))
    spatial = np.mean([metrics.spatial_variance(a, g) for a in ev.attn.reshape(-1, k, g * g)],
                      axis=0)
    flat_masks = masks.reshape(-1, c.num_tokens)
    per_slot = [{"slot": j, "spatial_variance": spatial[j],
                 "jaccard": metrics.jaccard_stability(flat_masks, j), "disc_iou": iou[j]}
                for j in range(k)]
    summary = {"rho": metrics.rho(agg), "rho_random": 1.0 / k,
               "off_diag_max": metrics.off_diag_row_max(agg), "entropy_bits": ent,
               "entropy_chance": float(np.log2(k)), "disc_slot": disc_slot,
               "contralateral_mass": float(np.mean(contra)),
               "contralateral_chance": 9.0 / (g * g)}
    return summary, per_slot, agg


def correspondence(runner: Runner, variant: str = "full") -> tuple[list[dict], list[dict], dict]:
    cfg = runner.cfg
    test = runner.splits["test"]
    spec = cfg.dataset_spec()
    rows, slot_rows, mats = [], [], {}
    for r in runner.run_many([(variant, s) for s in _seeds(cfg)]):
        untrained = BilateralModel.init(cfg.model_config(variant=variant), r.seed)
        s_un, _, _ = correspondence_for(untrained, test, cfg.eval_seed, spec)
        s_tr, per_slot, agg = correspondence_for(r.model, test, cfg.eval_seed, spec)
        rows.append({"seed": r.seed, **s_tr, "rho_untrained": s_un["rho"],
                     "entropy_untrained": s_un["entropy_bits"]})
        slot_rows += [{"seed": r.seed, **p} for p in per_slot]
        mats[r.seed] = agg
    return rows, slot_rows, mats


CORRESPONDENCE_COLUMNS = ["seed", "rho", "rho_untrained", "rho_random", "off_diag_max",
                          "entropy_bits", "entropy_untrained", "entropy_chance", "disc_slot",
                          "contralateral_mass", "contralateral_chance"]
