"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The end-to-end criteria (8-10) train arms c, d and f for three seeds on the
default synthetic corpus (about 50 minutes on one CPU core). Runs are shared
through a session cache so every arm/seed pair trains once.
"""

import math
import time
from contextlib import contextmanager

import numpy as np
import pytest
import torch

from mcrlab.alignment import Projection, align
from mcrlab.config import ExperimentConfig
from mcrlab.encoders import TokenFeatures
from mcrlab.evaluation import RetrievalIndex, brute_force_recall, recall_at_k
from mcrlab.experiments import default_corpus, run_arm
from mcrlab.masking import mask_count, sample_mask
from mcrlab.metrics import CiderStats, bleu4, cider, rouge_l
from mcrlab.objectives import contrastive_loss, mim_loss, mrm_loss
from mcrlab.training import lr_at, resource_report, steps_per_epoch, token_counts

from helpers import ACCEPTANCE, fd_relative_errors

SEEDS = (0, 1, 2)


@contextmanager
def criterion(n, title):
    """Record PASS/FAIL for criterion ``n``; ``notes`` collects the reported numbers."""
    notes = []
    t0 = time.perf_counter()
    try:
        yield notes
    except BaseException as exc:
        detail = "; ".join(notes + [f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"])
        ACCEPTANCE[n] = f"[FAIL] {n:>2}. {title} ({time.perf_counter() - t0:.1f}s) {detail}"
        print(ACCEPTANCE[n])
        raise
    ACCEPTANCE[n] = f"[PASS] {n:>2}. {title} ({time.perf_counter() - t0:.1f}s) {'; '.join(notes)}"
    print(ACCEPTANCE[n])


# 1 ---------------------------------------------------------------------------------

def test_c01_loss_exactness():
    with criterion(1, "loss exactness") as notes:
        t0 = time.perf_counter()
        f64 = dict(dtype=torch.float64)
        v1 = torch.tensor([[0.3, -1.2, 0.5]], **f64)
        assert contrastive_loss(v1, torch.tensor([[1.0, 2.0, 0.1]], **f64), 0.07).item() == 0.0
        ones = torch.ones(4, 3, **f64)
        b4 = contrastive_loss(ones, ones, 0.07).item()
        assert abs(b4 - 4 * math.log(4)) <= 1e-6, b4
        e = torch.eye(2, **f64)
        b2 = contrastive_loss(e, e, 1.0).item()
        assert abs(b2 - 2 * math.log(1 + math.exp(-1))) <= 1e-6, b2
        vocab = 100
        masked = torch.zeros(3, 10, dtype=torch.bool)
        masked[0, 2] = masked[1, [1, 4, 7]] = masked[2, 9] = True
        mrm = mrm_loss(torch.zeros(3, 10, vocab, **f64), torch.randint(0, vocab, (3, 10)), masked).item()
        assert abs(mrm - math.log(vocab)) <= 1e-9, mrm
        delta = 0.125
        target = torch.randn(2, 16, 48, generator=torch.Generator().manual_seed(0), **f64)
        pmask = torch.zeros(2, 16, dtype=torch.bool)
        pmask[:, ::2] = True
        mim = mim_loss(target + delta, target, pmask).item()
        assert abs(mim - delta ** 2) <= 1e-12, mim
        elapsed = time.perf_counter() - t0
        notes.append(f"B=4 {b4:.9f}, B=2 {b2:.9f}, mrm {mrm:.12f}, mim {mim:.15f}, {elapsed * 1e3:.0f} ms")
        assert elapsed < 1.0


# 2 ---------------------------------------------------------------------------------

def _rand_params(module, seed):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64))
    return module


def test_c02_gradient_suite():
    with criterion(2, "finite-difference gradients") as notes:
        t0 = time.perf_counter()
        g = torch.Generator().manual_seed(11)
        f64 = dict(dtype=torch.float64)
        worst = {}

        sv = torch.randn(3, 4, generator=g, **f64, requires_grad=True)
        sr = torch.randn(3, 4, generator=g, **f64, requires_grad=True)
        log_tau = torch.tensor(math.log(0.3), **f64, requires_grad=True)
        worst["contrastive+log_tau"] = max(fd_relative_errors(
            lambda: contrastive_loss(sv, sr, log_tau.exp(), 0.75, 0.25), [sv, sr, log_tau]))

        pred = torch.randn(2, 5, 4, generator=g, **f64, requires_grad=True)
        tgt = torch.randn(2, 5, 4, generator=g, **f64)
        pm = torch.tensor([[True, False, True, False, False], [False, True, False, False, True]])
        worst["mim"] = max(fd_relative_errors(lambda: mim_loss(pred, tgt, pm), [pred]))

        logits = torch.randn(2, 5, 7, generator=g, **f64, requires_grad=True)
        ids = torch.randint(0, 7, (2, 5), generator=g)
        worst["mrm"] = max(fd_relative_errors(lambda: mrm_loss(logits, ids, pm), [logits]))

        for strategy in ("MbA", "AbM"):
            for mode in ("max", "mean"):
                proj = _rand_params(Projection(4, 3, hidden=5), seed=3).double()
                x = torch.randn(2, 4, 4, generator=g, **f64, requires_grad=True)
                valid = torch.tensor([[True, True, True, False], [True, True, True, True]])
                toks = TokenFeatures(x, valid, torch.arange(4).expand(2, 4), "text")
                w = torch.randn(2, 3, generator=g, **f64)
                errs = fd_relative_errors(
                    lambda: (align(toks.with_features(x), proj, strategy, mode) * w).sum(),
                    [x, *proj.parameters()])
                worst[f"{strategy}/{mode}"] = max(errs)

        # the full chain feeding the contrastive loss, through both projections
        pv = _rand_params(Projection(4, 3, hidden=5), 5).double()
        pr = _rand_params(Projection(4, 3, hidden=5), 6).double()
        xv = torch.randn(3, 4, 4, generator=g, **f64, requires_grad=True)
        xr = torch.randn(3, 5, 4, generator=g, **f64, requires_grad=True)
        tv = TokenFeatures(xv, torch.ones(3, 4, dtype=torch.bool), torch.arange(4).expand(3, 4), "vision")
        tr = TokenFeatures(xr, torch.ones(3, 5, dtype=torch.bool), torch.arange(5).expand(3, 5), "text")
        worst["chain+contrastive"] = max(fd_relative_errors(
            lambda: contrastive_loss(align(tv, pv), align(tr, pr), log_tau.exp()),
            [xv, xr, log_tau, *pv.parameters()]))

        elapsed = time.perf_counter() - t0
        notes.append(", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f}s")
        assert max(worst.values()) < 1e-4, worst
        assert elapsed < 30


# 3 ---------------------------------------------------------------------------------

def test_c03_masking_exactness():
    with criterion(3, "masking exactness") as notes:
        for n in range(2, 300):
            for rate in (0.001, 0.1, 0.25, 0.5, 0.75, 0.999):
                assert mask_count(n, rate) == min(max(math.floor(rate * n), 1), n - 1)
        rng = np.random.Generator(np.random.PCG64(0))
        hits = np.zeros(64)
        for _ in range(10_000):
            hits[sample_mask(64, 0.5, rng)] += 1
        freq = hits / 10_000
        dev = np.abs(freq - 0.5).max()
        notes.append(f"max |freq - 0.5| = {dev:.4f}")
        assert dev <= 0.02

        g = torch.Generator().manual_seed(4)
        f64 = dict(dtype=torch.float64)
        pred = torch.randn(4, 64, 64, generator=g, **f64)
        tgt = torch.randn(4, 64, 64, generator=g, **f64)
        im = torch.zeros(4, 64, dtype=torch.bool)
        for b in range(4):
            im[b, torch.from_numpy(sample_mask(64, 0.5, rng))] = True
        noise = torch.randn(pred.shape, generator=g, **f64) * 10 * (~im)[..., None]
        d_mim = abs(mim_loss(pred + noise, tgt, im).item() - mim_loss(pred, tgt, im).item())
        logits = torch.randn(4, 34, 512, generator=g, **f64)
        ids = torch.randint(0, 512, (4, 34), generator=g)
        tm = torch.zeros(4, 34, dtype=torch.bool)
        for b in range(4):
            tm[b, torch.from_numpy(sample_mask(32, 0.25, rng) + 1)] = True
        lnoise = torch.randn(logits.shape, generator=g, **f64) * 10 * (~tm)[..., None]
        d_mrm = abs(mrm_loss(logits + lnoise, ids, tm).item() - mrm_loss(logits, ids, tm).item())
        notes.append(f"mim change {d_mim:.1e}, mrm change {d_mrm:.1e}")
        assert d_mim <= 1e-12 and d_mrm <= 1e-12


# 4 ---------------------------------------------------------------------------------

def test_c04_mba_abm_commutation():
    with criterion(4, "MbA/AbM commutation") as notes:
        g = torch.Generator().manual_seed(8)
        proj = _rand_params(Projection(16, 8, kind="linear"), 8).double()
        x = torch.randn(5, 12, 16, generator=g, dtype=torch.float64)
        valid = torch.ones(5, 12, dtype=torch.bool)
        valid[2, 7:] = False
        toks = TokenFeatures(x, valid, torch.arange(12).expand(5, 12), "text")
        mean_diff = (align(toks, proj, "MbA", "mean") - align(toks, proj, "AbM", "mean")).abs().max().item()
        # max pooling: two tokens whose projections disagree on the argmax
        p2 = Projection(2, 2, kind="linear").double()
        with torch.no_grad():
            p2.net.weight.copy_(torch.tensor([[1.0, -1.0], [1.0, 1.0]]))
            p2.net.bias.zero_()
        t2 = TokenFeatures(torch.tensor([[[1.0, 0.0], [0.0, 1.0]]], dtype=torch.float64),
                           torch.ones(1, 2, dtype=torch.bool), torch.arange(2)[None], "vision")
        max_diff = (align(t2, p2, "MbA", "max") - align(t2, p2, "AbM", "max")).norm().item()
        notes.append(f"mean/linear max diff {mean_diff:.1e}, max-agg counterexample {max_diff:.3f}")
        assert mean_diff <= 1e-6
        assert max_diff > 0.1


# 5 ---------------------------------------------------------------------------------

def test_c05_efficiency_accounting():
    with criterion(5, "efficiency accounting") as notes:
        cfg = ExperimentConfig()
        n = cfg.num_patches
        mi, mt = token_counts(cfg, "masked_only")
        di, dt = token_counts(cfg, "dual_input")
        assert mi / di == (0.5 * n + 1) / (1.5 * n + 2) == 33 / 98
        assert mt / dt == 0.5
        t0 = time.perf_counter()
        masked = resource_report(cfg, "masked_only", n_probe_steps=20)
        dual = resource_report(cfg, "dual_input", n_probe_steps=20)
        ratio = masked.wall_seconds_per_step / dual.wall_seconds_per_step
        notes.append(f"image tokens {mi}/{di}, text {mt}/{dt}, median step "
                     f"{masked.wall_seconds_per_step * 1e3:.0f} ms vs {dual.wall_seconds_per_step * 1e3:.0f} ms "
                     f"(ratio {ratio:.2f}), activation proxy ratio "
                     f"{masked.peak_allocation_proxy / dual.peak_allocation_proxy:.2f}")
        assert masked.wall_seconds_per_step < dual.wall_seconds_per_step
        assert time.perf_counter() - t0 < 300


# 6 ---------------------------------------------------------------------------------

def test_c06_retrieval_oracle():
    with criterion(6, "retrieval oracle") as notes:
        t0 = time.perf_counter()
        checked = 0
        for n in (10, 50, 100):
            rng = np.random.default_rng(n)
            views = rng.integers(1, 4, size=n)  # planted multi-view reports
            owner = np.repeat(np.arange(n), views)
            rep = rng.normal(size=(n, 8))
            img = rep[owner] + rng.normal(scale=1.2, size=(len(owner), 8))
            img[::7] = np.round(img[::7])  # some exact ties
            index = RetrievalIndex(img, owner, rep, [f"s{i}" for i in range(n)])
            for d in ("i2r", "r2i"):
                for k in (1, 5, 10):
                    fast, ref = recall_at_k(index, d, k), brute_force_recall(index, d, k)
                    assert fast == pytest.approx(ref, abs=1e-12), (n, d, k, fast, ref)
                    checked += 1
        # a hand-checked min(K, m_r) case
        rep = np.array([[1.0, 0.0], [0.0, 1.0]])
        img = np.array([[1.0, 0.0], [0.9, 0.1], [-1.0, 0.0], [0.0, 1.0]])
        index = RetrievalIndex(img, [0, 0, 0, 1], rep, ["a", "b"])
        assert recall_at_k(index, "r2i", 3) == pytest.approx(100 * (2 / 3 + 1) / 2)
        elapsed = time.perf_counter() - t0
        notes.append(f"{checked} (n, direction, K) cases agree, {elapsed:.1f}s")
        assert elapsed < 30


# 7 ---------------------------------------------------------------------------------

NLG_FIXTURES = [
    ("bleu4", ("the cat sat on the mat", "the cat is on the mat", True), 0.48549177170732344),
    ("bleu4", ("the cat sat on the mat today", "the cat sat on the mat", False), 0.8091067115702212),
    ("bleu4", ("the cat sat on the", "the cat sat on the mat", False), 0.8187307530779819),
    ("bleu4", ("the cat sat on the mat", "the cat is on the mat", False), 0.0),
    ("rouge_l", ("police killed the gunman", "the gunman was killed by police"), 0.3860759493670886),
    ("rouge_l", ("the lungs are clear bilaterally", "lungs clear without effusion"), 0.4535315985130111),
    ("cider", ("the lungs are clear today", "the lungs are clear"), 6.850632048859241),
]


def test_c07_nlg_metric_oracles():
    with criterion(7, "NLG metric oracles") as notes:
        stats = CiderStats(["the lungs are clear", "the heart is normal", "lungs are clear today"])
        worst = 0.0
        for name, args, expected in NLG_FIXTURES:
            if name == "bleu4":
                got = bleu4(args[0], args[1], smoothing=args[2])
            elif name == "rouge_l":
                got = rouge_l(*args)
            else:
                got = cider(*args, stats)
            worst = max(worst, abs(got - expected))
            assert abs(got - expected) <= 1e-6, (name, args, got, expected)
        ident = "the heart is normal"
        assert bleu4(ident, ident) == 1.0
        assert rouge_l(ident, ident) == 1.0
        assert cider(ident, ident, stats) == pytest.approx(10.0, abs=1e-12)
        notes.append(f"{len(NLG_FIXTURES)} fixtures, max abs error {worst:.1e}; identities 1/1/10")


# 8-10: trained runs ------------------------------------------------------------------

class RunCache:
    def __init__(self):
        self.corpus = None
        self.runs = {}

    def get(self, arm, seed):
        if self.corpus is None:
            self.corpus = default_corpus()
        key = (arm, seed)
        if key not in self.runs:
            train_pairs, test_pairs = self.corpus
            out = run_arm(arm, ExperimentConfig(), train_pairs, test_pairs, seed=seed)
            self.runs[key] = {k: out[k] for k in ("recall", "gap", "train_seconds")}
        return self.runs[key]


@pytest.fixture(scope="session")
def runs():
    return RunCache()


def _seed_table(runs, arms):
    rows = []
    for arm in arms:
        for s in SEEDS:
            r = runs.runs.get((arm, s))
            if r:
                rows.append(f"{arm}/s{s}: i2r@10 {r['recall']['i2r_R@10']:.2f} "
                            f"r2i@10 {r['recall']['r2i_R@10']:.2f} gap {r['gap']:.4f}")
    return " | ".join(rows)


def test_c08_end_to_end_learnability(runs):
    with criterion(8, "end-to-end learnability (arm f, 30 epochs)") as notes:
        corpus_train, corpus_test = default_corpus()
        assert (len(corpus_train), len(corpus_test)) == (2000, 200)
        res = runs.get("f", 0)
        rec = res["recall"]
        notes.append(f"I->R R@1 {rec['i2r_R@1']:.2f}%, R->I R@1 {rec['r2i_R@1']:.2f}% "
                     f"(chance 0.5%), train {res['train_seconds'] / 60:.1f} min")
        assert rec["i2r_R@1"] >= 5.0 and rec["r2i_R@1"] >= 5.0
        assert res["train_seconds"] <= 20 * 60


def _mean(runs, arm, key):
    vals = [runs.get(arm, s) for s in SEEDS]
    if key == "gap":
        return float(np.mean([v["gap"] for v in vals]))
    return float(np.mean([v["recall"][key] for v in vals]))


def test_c09_directional_ablation(runs):
    with criterion(9, "directional ablation (3 seeds, Recall@10)") as notes:
        means = {(arm, d): _mean(runs, arm, f"{d}_R@10") for arm in "cdf" for d in ("i2r", "r2i")}
        notes.append(", ".join(f"{a} {d} {v:.2f}" for (a, d), v in means.items()))
        failures = [f"{hi} < {lo} on {d}" for hi, lo in (("f", "d"), ("d", "c"))
                    for d in ("i2r", "r2i") if means[(hi, d)] < means[(lo, d)]]
        if failures:
            notes.append("seed table: " + _seed_table(runs, "cdf"))
        assert not failures, failures


def test_c10_modality_gap(runs):
    with criterion(10, "modality gap MbA < AbM (3 seeds)") as notes:
        mba, abm = _mean(runs, "f", "gap"), _mean(runs, "d", "gap")
        notes.append(f"mean gap MbA (f) {mba:.4f}, AbM (d) {abm:.4f}")
        if not mba < abm:
            notes.append("seed table: " + _seed_table(runs, "df"))
        assert mba < abm


# 11 ----------------------------------------------------------------------------------

def test_c11_schedule():
    with criterion(11, "learning-rate schedule") as notes:
        cfg = ExperimentConfig()
        spe = steps_per_epoch(2000, cfg.batch_size)
        warm_end = cfg.warmup_epochs * spe
        final = cfg.epochs * spe - 1
        for group, peak in (("encoders", cfg.peak_lr_encoders), ("rest", cfg.peak_lr_rest)):
            assert lr_at(0, cfg, spe, group) == 0.0
            assert lr_at(warm_end, cfg, spe, group) == peak
            assert abs(lr_at(final, cfg, spe, group) - peak / 100) <= 1e-9
        notes.append(f"steps/epoch {spe}, warm-up end step {warm_end}, final step {final}")
