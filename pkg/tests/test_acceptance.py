"""Acceptance suite: exact property checks (1-5) and directional reproductions (6-11).

The directional criteria train a 5-seed matrix at the ``quick`` preset by default.
Environment overrides:
  BISLOT_ACCEPTANCE_PRESET  preset name (e.g. ``desk`` for the full-size matrix)
  BISLOT_ACCEPTANCE_CACHE   directory for the run cache, reused across sessions
  BISLOT_WORKERS            parallel training processes (default: CPU count)
"""
import dataclasses
import itertools
import os
import time

import numpy as np
import pytest

from bislot import bilateral as B
from bislot import metrics as M
from bislot import slots as S
from bislot import tensor as T
from bislot.harness import cli, stats
from bislot.harness import experiments as ex
from bislot.harness.config import preset
from bislot.tensor import GruParams, Rng, Tensor, grad_check, parameter
from test_tensor import OPS

SEEDS = [0, 1, 2, 3, 4]
MATRIX_VARIANTS = ["full", "no_bilateral", "no_slots", "lambda_zero"]
SIGMAS = [0.0, 0.05, 0.1, 0.2]


# ---------------------------------------------------------------------------
# 1-5: exact


def test_c1_gradient_correctness(verdict):
    t0 = time.time()
    worst = 0.0
    for seed in range(5):
        r = Rng(seed, stream_id=71)
        for f in OPS.values():
            a, b = parameter(r.normal((3, 4))), parameter(r.normal((3, 4)))
            worst = max(worst, grad_check(lambda: f(a, b), [a, b]))
        p = GruParams.init(3, r.child(0))
        u, h = parameter(r.normal((2, 3))), parameter(r.normal((2, 3)))
        w = r.normal((2, 3))
        worst = max(worst, grad_check(lambda: (T.gru_cell(u, h, p) * Tensor(w)).sum(),
                                      [u, h, *p.tensors()]))
        sp = S.SlotParams.init(2, 8, r.child(1))
        tokens = parameter(r.normal((16, 8)))
        init = Tensor(r.normal((2, 8)))
        worst = max(worst, grad_check(
            lambda: (S.slot_iteration(init, tokens, sp)[0] ** 2).sum(),
            [tokens, *sp.tensors()], max_coords=12, rng=r.child(2)))
        for vi, variant in enumerate(("full", "no_slots", "no_bilateral", "patch_cross_attn")):
            cfg = B.ModelConfig(variant=variant, num_slots=2, dim=8, heads=2, image_side=32,
                                patch_size=8, num_classes=3, mlp_hidden=8, decoder_hidden=4,
                                dropout=0.0)
            m = B.BilateralModel.init(cfg, seed)
            left, right = r.uniform((2, 3, 32, 32)), r.uniform((2, 3, 32, 32))
            labels = np.array([[1, 0, 1], [0, 1, 0]])
            noise = (r.normal((2, 2, 8)), r.normal((2, 2, 8)))
            worst = max(worst, grad_check(
                lambda: B.forward_pair(m, left, right, labels, training=True,
                                       noise=noise).loss,
                m.tensors(), max_coords=12, rng=r.child(3, vi)))
    dt = time.time() - t0
    ok = verdict(1, worst <= 1e-4 and dt <= 60,
                 f"max rel err {worst:.2e} (<= 1e-4), {dt:.1f}s (<= 60s)")
    assert ok


def test_c2_normalization_invariants(verdict):
    worst_slot, worst_tok, worst_cross = 0.0, 0.0, 0.0
    for trial in range(100):
        r = Rng(trial, stream_id=72)
        k, n, d = int(r.integers(1, 9)), int(r.integers(1, 33)), 8
        p = S.SlotParams.init(k, d, r.child(0))
        tokens = Tensor(r.normal((n, d), 3.0))
        init = Tensor(r.normal((k, d), 3.0))
        _, a_tilde, a = S.slot_iteration(init, tokens, p)
        worst_slot = max(worst_slot, np.abs(a.data.sum(axis=0) - 1).max())
        worst_tok = max(worst_tok, np.abs(a_tilde.data.sum(axis=1) - 1).max())
        cp = B.CrossAttnParams.init(d, 2, r.child(1))
        _, corr, _ = B.cross_attend(Tensor(r.normal((k, d), 3.0)), Tensor(r.normal((k, d), 3.0)),
                                    cp)
        worst_cross = max(worst_cross, np.abs(corr.per_head.sum(axis=-1) - 1).max())
    ok = verdict(2, max(worst_slot, worst_tok, worst_cross) <= 1e-9,
                 f"slot-axis {worst_slot:.1e}, token-axis {worst_tok:.1e}, "
                 f"cross-attn rows {worst_cross:.1e} (<= 1e-9)")
    assert ok


def test_c3_permutation_equivariance(verdict):
    worst_eq, worst_inv = 0.0, 0.0
    for trial in range(10):
        r = Rng(trial, stream_id=73)
        k, n, d = 5, 16, 8
        p = S.SlotParams.init(k, d, r.child(0))
        tokens = Tensor(r.normal((n, d)))
        eps = r.normal((k, d))
        perm = r.permutation(k)
        p2 = dataclasses.replace(p, mu=Tensor(p.mu.data[perm]),
                                 log_sigma=Tensor(p.log_sigma.data[perm]))
        a = S.run(tokens, p, 3, None, init=S.init_slots(p, None, eps=eps))
        b = S.run(tokens, p2, 3, None, init=S.init_slots(p2, None, eps=eps[perm]))
        worst_eq = max(worst_eq, np.abs(a.slots.data[perm] - b.slots.data).max(),
                       np.abs(a.attn[-1][perm] - b.attn[-1]).max())
        hp = B.HeadParams.init(2 * d, 8, 4, r.child(1), dropout_p=0.0)
        sl, sr = r.normal((k, d)), r.normal((k, d))
        z1 = B.pool_and_classify(Tensor(sl), Tensor(sr), hp, training=False).data
        z2 = B.pool_and_classify(Tensor(sl[perm]), Tensor(sr[r.permutation(k)]), hp,
                                 training=False).data
        worst_inv = max(worst_inv, np.abs(z1 - z2).max())
    ok = verdict(3, max(worst_eq, worst_inv) <= 1e-9,
                 f"equivariance {worst_eq:.1e}, logit invariance {worst_inv:.1e} (<= 1e-9)")
    assert ok


def test_c4_metric_oracles(verdict):
    checks = {
        "rho(uniform)": M.rho(np.full((8, 8), 1 / 8)) == 0.125,
        "entropy(uniform)": abs(M.attention_entropy(np.full((8, 8), 1 / 8)) - 3.0) <= 1e-12,
        "rho(identity)": M.rho(np.eye(8)) == 1.0,
        "auc hand case": M.macro_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75,
    }
    dice_ok = True
    for n in range(1, 7):
        for a, b in itertools.product(itertools.product([0, 1], repeat=n), repeat=2):
            iou, dice = M.miou_dice(a, b)
            dice_ok &= abs(dice - 2 * iou / (1 + iou)) <= 1e-12
    checks["dice identity"] = dice_ok
    w = stats.wilcoxon_signed_rank(np.arange(1, 11) * 0.01 + 0.1, np.zeros(10))
    checks["wilcoxon W=0 n=10"] = w.w == 0 and w.p_value == 2 / 1024 and round(w.p_value, 3) == 0.002
    wx_ok = True
    for n in range(1, 11):
        d = Rng(n, stream_id=74).normal(n)
        ranks = stats._midranks(np.abs(d))
        wmin = min(ranks[d > 0].sum(), ranks[d < 0].sum())
        hits = sum(1 for signs in itertools.product([0, 1], repeat=n)
                   if sum(r for r, s in zip(ranks, signs) if s) <= wmin + 1e-9)
        wx_ok &= abs(stats.wilcoxon_signed_rank(d).p_value - min(1.0, 2 * hits / 2 ** n)) <= 1e-12
    checks["wilcoxon enumeration n<=10"] = wx_ok
    failed = [k for k, v in checks.items() if not v]
    ok = verdict(4, not failed, "all oracles match" if not failed else f"failed: {failed}")
    assert ok


def test_c5_determinism(verdict, tmp_path):
    argv = ["--preset", "tiny", "--set", "k_values=2,3", "--set",
            "ablation_variants=full,no_slots,no_bilateral,lambda_zero", "--no-plots"]
    commands = ["gen-data", "train", "ablate", "sweep-k", "disrupt", "stress", "ground",
                "correspond"]
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        for cmd in commands:
            assert cli.main([cmd, *argv, "--out-dir", str(out)]) == 0
    names = sorted(p.name for p in outs[0].glob("*.csv"))
    diff = [n for n in names if (outs[0] / n).read_bytes() != (outs[1] / n).read_bytes()]
    ok = verdict(5, not diff and len(names) >= 8,
                 f"{len(names)} CSVs compared, {len(diff)} differ")
    assert ok


# ---------------------------------------------------------------------------
# 6-11: directional reproductions on the synthetic task


@pytest.fixture(scope="session")
def matrix():
    name = os.environ.get("BISLOT_ACCEPTANCE_PRESET", "quick")
    workers = int(os.environ.get("BISLOT_WORKERS", os.cpu_count() or 1))
    cfg = preset(name, seeds=SEEDS, noise_sigmas=SIGMAS, workers=workers)
    runner = ex.Runner(cfg, cache_dir=os.environ.get("BISLOT_ACCEPTANCE_CACHE"))
    # schedule every training job up front so a process pool sees the whole queue
    runner.run_many([(v, s) for v in MATRIX_VARIANTS for s in SEEDS]
                    + [("full", s, "train_shuffle", {}) for s in SEEDS])
    return runner


def _by(rows, variant, key):
    return {r["seed"]: float(r[key]) for r in rows if r["variant"] == variant}


@pytest.mark.slow
def test_c6_ablation_ordering(matrix, verdict):
    _, per_seed = ex.ablation(matrix, MATRIX_VARIANTS)
    full, nb, ns = (_by(per_seed, v, "test_auc") for v in ("full", "no_bilateral", "no_slots"))
    d_nb = np.mean([full[s] - nb[s] for s in SEEDS])
    d_ns = np.mean([full[s] - ns[s] for s in SEEDS])
    wins = sum(full[s] > nb[s] and full[s] > ns[s] for s in SEEDS)
    ok = verdict(6, d_nb >= 0.05 and d_ns >= 0.02 and wins >= 4,
                 f"full-no_bilateral {d_nb:+.4f} (>= 0.05), full-no_slots {d_ns:+.4f} "
                 f"(>= 0.02), beats both on {wins}/5 (>= 4)")
    assert ok


@pytest.mark.slow
def test_c7_pairing_disruption(matrix, verdict):
    summary, per_seed = ex.disruption(matrix, ("full", "no_slots"),
                                      train_shuffle_variants=("full",))
    drop = {r["variant"]: r["eval_drop_mean"] for r in summary}
    full = [p for p in per_seed if p["variant"] == "full"]
    degraded = sum(p["train_shuffle_auc"] < p["clean_auc"] for p in full)
    ratio_ok = drop["full"] > 0 and drop["full"] >= 2 * drop["no_slots"]
    ok = verdict(7, ratio_ok and degraded == len(SEEDS),
                 f"eval drop full {drop['full']:+.4f} vs no_slots {drop['no_slots']:+.4f} "
                 f"(>= 2x), train-shuffle degrades {degraded}/5 (all)")
    assert ok


@pytest.mark.slow
def test_c8_slot_collapse(matrix, verdict):
    _, per_seed = ex.ablation(matrix, ["full", "lambda_zero"])
    cos_full, cos_l0 = _by(per_seed, "full", "slot_cosine"), _by(per_seed, "lambda_zero",
                                                                  "slot_cosine")
    auc_full, auc_l0 = _by(per_seed, "full", "test_auc"), _by(per_seed, "lambda_zero",
                                                               "test_auc")
    higher_cos = sum(cos_l0[s] > cos_full[s] for s in SEEDS)
    lower_auc = sum(auc_l0[s] < auc_full[s] for s in SEEDS)
    ok = verdict(8, higher_cos == 5 and lower_auc >= 4,
                 f"lambda=0 cosine higher on {higher_cos}/5 (all), AUC lower on "
                 f"{lower_auc}/5 (>= 4); mean cosine {np.mean(list(cos_l0.values())):.3f} vs "
                 f"{np.mean(list(cos_full.values())):.3f}")
    assert ok


@pytest.mark.slow
def test_c9_grounding(matrix, verdict):
    rows = ex.grounding(matrix)
    beats_km = sum(r["miou"] > r["kmeans_miou"] for r in rows)
    special = sum(r["miou_all_slots"] < r["miou"] for r in rows)
    ok = verdict(9, beats_km >= 4 and special == 5,
                 f"best slot beats k-means on {beats_km}/5 (>= 4), all-slot < best on "
                 f"{special}/5 (all); mIoU {np.mean([r['miou'] for r in rows]):.3f} vs "
                 f"k-means {np.mean([r['kmeans_miou'] for r in rows]):.3f}")
    assert ok


@pytest.mark.slow
def test_c10_noise_stress(matrix, verdict):
    summary, _ = ex.stress(matrix)
    mean = {(r["variant"], r["sigma"]): r["auc_mean"] for r in summary}
    gap_ok = all(mean[("full", s)] >= mean[("no_slots", s)] for s in SIGMAS[1:])
    inv = {v: ex.count_inversions([mean[(v, s)] for s in SIGMAS]) for v in ("full", "no_slots")}
    mono_ok = all(n == 0 or (n == 1 and mag <= 0.005) for n, mag in inv.values())
    gaps = ", ".join(f"{mean[('full', s)] - mean[('no_slots', s)]:+.4f}" for s in SIGMAS[1:])
    ok = verdict(10, gap_ok and mono_ok,
                 f"full-no_slots gap at sigma 0.05/0.1/0.2: {gaps} (>= 0); inversions "
                 f"full {inv['full']}, no_slots {inv['no_slots']} (<= 1 of <= 0.005)")
    assert ok


@pytest.mark.slow
def test_c11_correspondence(matrix, verdict):
    rows, _, _ = ex.correspondence(matrix)
    k = matrix.cfg.num_slots
    above = sum(r["rho"] > r["rho_untrained"] for r in rows)
    ent = float(np.mean([r["entropy_bits"] for r in rows]))
    bound = np.log2(k) - 0.5
    ok = verdict(11, above == 5 and ent < bound,
                 f"trained rho > untrained on {above}/5 (all); mean rho "
                 f"{np.mean([r['rho'] for r in rows]):.3f} vs untrained "
                 f"{np.mean([r['rho_untrained'] for r in rows]):.3f}; entropy {ent:.3f} bits "
                 f"(< {bound:.3f})")
    assert ok
