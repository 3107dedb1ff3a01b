"""Acceptance criteria, one test per criterion (criterion 1 has two parts).

Each test records a PASS/FAIL line that is repeated in the terminal summary.
Tolerances and runtimes are the stated ones; nothing here is loosened to
make a line pass.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest

from gapkit.activation import (
    PeakBoundInput,
    construct_peaked_pair,
    cosine_upper_bound_finite,
    cosine_upper_bound_limit,
    monte_carlo_bound_check,
)
from gapkit.bnlayer import BatchNormParams, BnState, RunningStats, update_running_stats
from gapkit.cli import main
from gapkit.embstore import (
    ClassTemplateSet,
    HumanJudgmentSet,
    Judgment,
    PairedDataset,
    save_class_templates,
    save_embeddings,
    save_judgments,
)
from gapkit.evaltasks import ScoreConfig, kendall_tau_b, pair_scores, retrieval_r1, score_matrix
from gapkit.gapmetrics import SEVERE_AT, Severity, centroid_distance, centroid_gap, classify_severity, \
    min_cosine_distance
from gapkit.losses import LossConfig, LossKind, bn_loss, c_cyclic_loss, gaussian_augment, i_cyclic_loss, \
    loss_and_grad_bn
from gapkit.synthetic import two_cluster_dataset
from gapkit.trainer import TrainerConfig, train_bn
from gapkit.transforms import MgShiftConfig, center, compute_modality_stats, i0t_post_pair, mg_shift_raw

import oracles
from conftest import unit

P, Q = -0.5, 1 / 3


@pytest.fixture(scope="module")
def severe():
    return two_cluster_dataset(n=2000, d=256, seed=0)


def test_c01a_bound_limit(criterion):
    t0 = time.perf_counter()
    limit = cosine_upper_bound_limit(P, Q)
    dt = time.perf_counter() - t0
    criterion("1a bound limit", abs(limit - 0.7638) <= 0.005 and dt < 1.0,
              f"limit={limit:.6f} (target 0.7638 +/- 0.005), {dt:.3f}s")


def test_c01b_finite_bound_at_one_million(criterion):
    t0 = time.perf_counter()
    gap = cosine_upper_bound_finite(PeakBoundInput(P, Q, 10**6)) - cosine_upper_bound_limit(P, Q)
    dt = time.perf_counter() - t0
    criterion("1b finite bound at d=1e6", abs(gap) < 1e-3 and dt < 1.0,
              f"finite - limit = {gap:.6e} (target < 1e-3), {dt:.3f}s")


def test_c02_bound_dominance(criterion):
    t0 = time.perf_counter()
    inp = PeakBoundInput(P, Q, 512)
    res = monte_carlo_bound_check(inp, trials=1000, seed=0)
    # all-positive fill with positive peaks of the same magnitudes
    pos = PeakBoundInput(abs(P), abs(Q), 512)
    x, y = construct_peaked_pair(pos, aligned=True)
    all_positive = bool(np.all(x > 0) and np.all(y > 0))
    eq_pos = abs(float(x @ y) - cosine_upper_bound_finite(pos))
    # sign-aligned fill for the signed peaks
    xs, ys = construct_peaked_pair(inp, aligned=True)
    eq_signed = abs(float(xs @ ys) - res["bound"])
    dt = time.perf_counter() - t0
    ok = res["violations"] == 0 and all_positive and eq_pos < 1e-9 and eq_signed < 1e-9 and dt < 5.0
    criterion("2 bound dominance", ok,
              f"violations={res['violations']}/1000, max|cos|={res['max_abs_cos']:.4f} <= {res['bound']:.4f}, "
              f"equality gap {eq_pos:.1e} (all-positive) / {eq_signed:.1e} (sign-aligned), {dt:.2f}s")


# (row, printed centroid distance, printed severity cell)
SEVERITY_CELLS = [
    ("Long-CLIP", 0.9904, "severe"), ("LCO", 0.9965, "severe"), ("LCCO", 1.0070, "severe"),
    ("LCCOM", 0.9682, "severe"), ("+LN", 1.0068, "severe"), ("+LN*", 0.9696, "severe"),
    ("+BN", 0.5285, "moderate"), ("+BN*", 0.4795, "moderate"),
    ("CLIP", 0.7642, "severe"), ("MG_0.375", 0.0291, "low"), ("MG_0.5", 0.2493, "moderate"),
    ("MG_-0.5", 1.3799, "severe"), ("CLOOB", 0.4832, "moderate"), ("Unif-Align", 0.4636, "moderate"),
    ("PAC-S", 0.7583, "severe"), ("I0T_async", 0.4795, "moderate"), ("I0T_post", 0.0102, "low"),
]


def test_c03_severity_table(criterion):
    wrong = [row for row, cd, band in SEVERITY_CELLS if classify_severity(cd) is not Severity(band)]
    criterion("3 severity table", not wrong,
              f"{len(SEVERITY_CELLS) - len(wrong)}/{len(SEVERITY_CELLS)} printed cells reproduced"
              + (f"; mismatched {wrong}" if wrong else ""))


def test_c04_i0t_post(criterion, severe):
    t0 = time.perf_counter()
    before = centroid_distance(severe)
    after = centroid_distance(i0t_post_pair(severe))
    col = max(float(np.abs(center(m, compute_modality_stats(m)).mean(axis=0)).max())
              for m in (severe.images, severe.texts))
    dt = time.perf_counter() - t0
    ok = before >= 0.8 and after <= 0.05 and col < 1e-9 and dt < 2.0
    criterion("4 I0T_post effectiveness", ok,
              f"CD {before:.4f} -> {after:.4f} ({100 * (1 - after / before):.1f}% reduction), "
              f"max |column mean| {col:.1e}, {dt:.2f}s")


def test_c05_mg_identity(criterion):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        ds = PairedDataset(unit(r.standard_normal((50, 16)) + 0.5), unit(r.standard_normal((50, 16)) - 0.5))
        cd = centroid_gap(ds.images.data, ds.texts.data)
        for lam in (0.25, 0.375, 0.5, -0.5):
            x, y = mg_shift_raw(ds, MgShiftConfig(lam))
            worst = max(worst, abs(centroid_gap(x, y) - abs(1 - 2 * lam) * cd))
    dt = time.perf_counter() - t0
    criterion("5 MG identity", worst < 1e-9 and dt < 1.0, f"max deviation {worst:.1e} over 20 datasets x 4 lambdas, "
                                                           f"{dt:.2f}s")


def test_c06_running_stats_ratio(criterion):
    t0 = time.perf_counter()
    r = np.random.default_rng(0)
    v = r.standard_normal(16)
    batch = np.stack([v, -v])  # column means are exactly 0, so the error is the running mean itself
    rs = RunningStats(r.standard_normal(16), np.ones(16), alpha=0.1)
    prev = np.abs(rs.mean)
    worst = 0.0
    for _ in range(200):
        rs = update_running_stats(rs, batch)
        err = np.abs(rs.mean)
        worst = max(worst, float(np.max(np.abs(err / prev - 0.9))))
        prev = err
    dt = time.perf_counter() - t0
    criterion("6 running-stats convergence", worst < 1e-12 and dt < 1.0,
              f"max |ratio - 0.9| = {worst:.1e} over 200 steps, {dt:.3f}s")


def _grad_check(kind, seed):
    r = np.random.default_rng(seed)
    m, d = 8, 16
    x, y = unit(r.standard_normal((m, d))), unit(r.standard_normal((m, d)))
    states = {k: BnState(RunningStats(0.05 * r.standard_normal(d), r.uniform(0.5, 1.5, d)),
                         BatchNormParams(r.uniform(0.5, 1.5, d), 0.1 * r.standard_normal(d)))
              for k in ("img", "txt")}
    cfg = LossConfig(loss_kind=kind)
    kw = {}
    if cfg.loss_kind.is_mcsie:
        kw = dict(images_aug=gaussian_augment(x, 0.1, seed + 100), texts_aug=gaussian_augment(y, 0.1, seed + 200))
    _, grads = loss_and_grad_bn(x, y, states["img"], states["txt"], cfg, **kw)
    worst = 0.0
    for name, g in grads.items():
        mod, fld = name[2:], "weight" if name[0] == "w" else "bias"
        base = getattr(states[mod].params, fld)
        for j in range(d):
            def f(t):
                vec = base.copy()
                vec[j] = t
                s = dict(states)
                s[mod] = BnState(states[mod].stats, replace(states[mod].params, **{fld: vec}))
                return bn_loss(x, y, s["img"], s["txt"], cfg, **kw).total
            num = oracles.central_difference(f, base[j], 1e-5)
            worst = max(worst, abs(num - g[j]) / max(abs(num), abs(g[j]), 1e-12))
    return worst


def test_c07_gradient_checks(criterion):
    t0 = time.perf_counter()
    worst = {k: max(_grad_check(k, s) for s in range(5)) for k in (LossKind.CLIP, LossKind.CYCLIP,
                                                                   LossKind.MCSIE_CYCLIP)}
    dt = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and dt < 30.0
    criterion("7 gradient checks", ok,
              ", ".join(f"{k.value} {v:.1e}" for k, v in worst.items()) + f" max rel. error (5 seeds), {dt:.2f}s")


def test_c08_bn_training(criterion, severe):
    t0 = time.perf_counter()
    cfg = TrainerConfig(learning_rate=1e-2, max_steps=500, loss_kind=LossKind.CYCLIP, probe_every=100)
    _, _, log = train_bn(severe, cfg)
    dt = time.perf_counter() - t0
    final = log.final_probe_cd
    criterion("8 BN training effect", final < SEVERE_AT and dt < 60.0,
              f"probe CD {log.initial_probe_cd:.4f} -> {final:.4f} ({classify_severity(final).value}) "
              f"after 500 steps, {dt:.1f}s")


def test_c09_oracle_equivalence(criterion):
    t0 = time.perf_counter()
    mismatches = {"retrieval_r1": 0, "min_cosine_distance": 0, "i_cyclic": 0, "c_cyclic": 0, "kendall_tau_b": 0}
    worst_float = 0.0
    for seed in range(25):
        r = np.random.default_rng(seed)
        n = int(r.integers(5, 51))
        x = r.standard_normal((n, 6))
        y = x + r.standard_normal((n, 6))
        got = retrieval_r1(PairedDataset(x, y))
        mismatches["retrieval_r1"] += (got.r_at_1_i2t, got.r_at_1_t2i) != oracles.retrieval_r1(x.tolist(), y.tolist())
        ux, uy = unit(x), unit(y)
        for name, mine, ref in (
            ("min_cosine_distance", min_cosine_distance(PairedDataset(x, y)),
             oracles.min_cosine_distance(x.tolist(), y.tolist())),
            ("i_cyclic", i_cyclic_loss(ux, uy), oracles.i_cyclic(ux.tolist(), uy.tolist())),
            ("c_cyclic", c_cyclic_loss(ux, uy), oracles.c_cyclic(ux.tolist(), uy.tolist())),
        ):
            # summation order differs from the loops, so agreement is to rounding
            diff = abs(mine - ref)
            worst_float = max(worst_float, diff)
            mismatches[name] += diff > 1e-12
        a = r.integers(0, 5, n).tolist()
        b = r.integers(0, 5, n).tolist()
        mismatches["kendall_tau_b"] += kendall_tau_b(a, b) != oracles.kendall_tau_b(a, b)
    dt = time.perf_counter() - t0
    ok = not any(mismatches.values()) and dt < 10.0
    criterion("9 oracle equivalence", ok,
              f"25 instances each; mismatches {mismatches}; integer/tau results identical, "
              f"float results within {worst_float:.1e}; {dt:.2f}s")


def test_c10_scoring_semantics(criterion):
    t0 = time.perf_counter()
    r = np.random.default_rng(0)
    x, y = unit(r.standard_normal((200, 8))), unit(r.standard_normal((200, 8)))
    cos = np.sum(unit(x) * unit(y), axis=1)
    clip_s = pair_scores(x, y, ScoreConfig.clip_s())
    clip_exact = bool(np.array_equal(clip_s, 2.5 * np.maximum(cos, 0.0)))

    ds = two_cluster_dataset(n=400, d=32, noise=1.5, seed=3)
    stats = (compute_modality_stats(ds.images), compute_modality_stats(ds.texts))
    m = score_matrix(ds.images, ds.texts, ScoreConfig.i0t_s(), stats=stats)
    pos = np.diag(m)
    neg = m[~np.eye(ds.n, dtype=bool)]
    dt = time.perf_counter() - t0
    ok = clip_exact and pos.mean() > neg.mean() and pos.min() < 0 < pos.max() and dt < 5.0
    criterion("10 scoring semantics", ok,
              f"CLIP-S == 2.5*max(cos,0) exactly: {clip_exact}; I0T-S true-pair mean {pos.mean():.3f} > "
              f"mismatched {neg.mean():.3f}; true-pair range [{pos.min():.3f}, {pos.max():.3f}]; {dt:.2f}s")


@pytest.fixture(scope="module")
def cli_files(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    ds = two_cluster_dataset(n=256, d=16, noise=0.8, seed=0)
    save_embeddings(ds.images, root / "img.emb1")
    save_embeddings(ds.texts, root / "txt.emb1")
    templates = ClassTemplateSet(("a", "b", "c"), tuple(ds.texts.data[i::3][:4] for i in range(3)),
                                 np.arange(256) % 3)
    save_class_templates(templates, root / "cls.json")
    js = HumanJudgmentSet(tuple(Judgment(str(i), (i + k) % 256, float(3 - k)) for i in range(30) for k in range(3)))
    save_judgments(js, root / "j.jsonl")
    return root


def _commands(root):
    pair = ["--images", root / "img.emb1", "--texts", root / "txt.emb1"]
    return {
        "gap": ["gap", *pair],
        "transform i0t_post": ["transform", *pair, "--method", "i0t_post"],
        "transform clip": ["transform", *pair, "--method", "clip"],
        "transform mg": ["transform", *pair, "--method", "mg", "--lambda", "0.375"],
        "profile": ["profile", "--embeddings", root / "img.emb1"],
        "bound": ["bound", "--p", "-0.5", "--q", "0.3333333333333333", "--d", "512", "--verify", "100"],
        "bnfit": ["bnfit", *pair, "--steps", "30"],
        "eval retrieve": ["eval", "retrieve", *pair, "--transform", "i0t_post"],
        "eval classify": ["eval", "classify", "--images", root / "img.emb1", "--templates", root / "cls.json"],
        "eval correlate": ["eval", "correlate", *pair, "--judgments", root / "j.jsonl",
                           "--candidates", root / "txt.emb1"],
        "eval score": ["eval", "score", *pair, "--negatives"],
        "rank": ["rank", "--table", "table2"],
    }


def test_c11_cli_determinism(criterion, cli_files, tmp_path, capsys):
    differing = []
    for name, argv in _commands(cli_files).items():
        first, second = tmp_path / "first.json", tmp_path / "second.json"
        code1 = main(["--report", str(first), *map(str, argv)])
        code2 = main(["--report", str(second), "--replay", str(first)])
        if code1 or code2:
            differing.append(f"{name} (exit {code1}/{code2})")
            continue
        a, b = json.loads(first.read_text()), json.loads(second.read_text())
        a.pop("timing"), b.pop("timing")
        if a != b:
            differing.append(name)
    capsys.readouterr()
    n = len(_commands(cli_files))
    criterion("11 CLI determinism", not differing,
              f"{n - len(differing)}/{n} commands replay bit-for-bit" + (f"; differing {differing}" if differing else ""))
