"""Acceptance criteria A1-A8. Each test prints one PASS/FAIL line before asserting.

A4, A5, A7 and A8 share one run of the default copyright pipeline (five seeds)
and take several minutes on a laptop CPU.
"""

import math
import time
from collections import defaultdict
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from codeunlearn import experiment as ex
from codeunlearn.lm import load_checkpoint, nll_loss
from codeunlearn.metrics import EvalPoint, bleu, pass_rate, pdr
from codeunlearn.surgery import (CachedTargets, StaleCacheError, SurgeryConfig, forget_eliminate, forget_mask,
                                 nucleus_set, target_for_position)
from codeunlearn.trainers import METHODS, method_loss, to_examples, unlearn

from conftest import max_fd_rel_error, random_examples, tiny_model
from test_metrics import GOLDEN, brute_pdr

BASELINES = ("ga", "npo")


def verdict(capsys, code, ok, detail):
    with capsys.disabled():
        print(f"\n{code} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"{code}: {detail}"


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    cfg = ex.ExperimentConfig().with_root(root).validate()
    t0 = time.perf_counter()
    times = ex.run_pipeline(cfg)
    return cfg, root, times, time.perf_counter() - t0


def curves(cfg):
    rows = ex.read_csv(Path(cfg.report_dir) / cfg.task / "checkpoints.csv", ex.REPORT_COLUMNS)
    by = defaultdict(list)
    for r in rows:
        by[(r["method"], int(r["epoch"]))].append(r)
    mean = {k: (float(np.mean([float(r["forget_quality"]) for r in v])),
                float(np.mean([float(r["model_utility"]) for r in v]))) for k, v in by.items()}
    return rows, mean


def first_hit(mean, method, threshold=0.9):
    for e in range(1, 11):
        if (method, e) in mean and mean[(method, e)][0] >= threshold:
            return e
    return None


def test_a1_surgery_properties(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    bad = []
    for i in range(1000):
        v = int(rng.integers(2, 40))
        h = rng.normal(scale=float(rng.uniform(0.5, 6.0)), size=v)
        f = int(rng.integers(v))
        top_p = float(rng.choice([0.2, 0.8, 1.0]))
        alpha = float(rng.choice([0.0, 0.5]))
        _, p_n = forget_eliminate(h, forget_mask(v, f))
        kept = nucleus_set(p_n, top_p)
        tgt = target_for_position(h, f, SurgeryConfig(top_p=top_p, alpha=alpha))
        p = np.exp(h - h.max())
        p_f = p[f] / p.sum()
        checks = [abs(p_n.sum() - 1) <= 1e-12, p_n[f] == 0.0, p_n[kept].sum() >= top_p - 1e-12]
        if alpha == 0:
            checks.append(abs(tgt.sum() - 1) <= 1e-12)
        else:
            checks += [abs(tgt.sum() - (1 - alpha * p_f)) <= 1e-9, int((tgt < 0).sum()) == 1]
        if not all(checks):
            bad.append(i)
    dt = time.perf_counter() - t0
    verdict(capsys, "A1", not bad and dt < 10, f"{1000 - len(bad)}/1000 cases hold, {dt:.2f}s (limit 10s)")


def test_a2_gradients(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    worst = defaultdict(float)
    for i in range(100):
        start = tiny_model(seed=i, scale=float(rng.uniform(0.5, 2.0)))
        ex_ = random_examples(rng, n=int(rng.integers(1, 4)))
        cache = CachedTargets.build(start, ex_, SurgeryConfig(top_p=float(rng.choice([0.2, 0.8, 1.0])),
                                                              alpha=float(rng.choice([0.0, 0.5]))))
        m = tiny_model(seed=1000 + i, scale=float(rng.uniform(0.5, 2.0)))
        fns = {"nll": lambda: nll_loss(m, ex_[0].prompt, ex_[0].continuation)}
        for meth in METHODS:
            fns[meth] = lambda meth=meth: method_loss(meth, m, ex_, ref=start, cache=cache)
        for name, fn in fns.items():
            worst[name] = max(worst[name], max_fd_rel_error(fn, m.parameters(), rng, n_probe=6, h=1e-5))
    dt = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in worst.values()) and dt < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(capsys, "A2", ok, f"max rel err {detail}; {dt:.1f}s (limit 120s)")


def test_a3_metric_oracles(capsys):
    g = np.random.default_rng(3)
    pts = [EvalPoint(f"m{int(g.integers(4))}", i, float(g.integers(0, 21)) / 20, float(g.integers(0, 21)) / 20)
           for i in range(200)]
    got = pdr(pts)
    exact = {}
    for m in got:
        own = [p for p in pts if p.method == m]
        others = [q for q in pts if q.method != m]
        hits = sum(1 for p in own for q in others
                   if p.forget_quality >= q.forget_quality and p.model_utility >= q.model_utility
                   and (p.forget_quality > q.forget_quality or p.model_utility > q.model_utility))
        exact[m] = float(Fraction(hits, len(own) * len(others)))
    pdr_ok = got == exact and got.keys() == brute_pdr(pts).keys()
    pr_ok = all(pass_rate(n, c) == c / n for n in range(1, 21) for c in range(1, n + 1))
    bleu_err = max(abs(bleu(c["candidate"], c["reference"]) - c["bleu"]) for c in GOLDEN)
    ok = pdr_ok and pr_ok and bleu_err <= 1e-9
    verdict(capsys, "A3", ok, f"PDR exact={pdr_ok}, PassRate exact={pr_ok}, "
                             f"BLEU max diff {bleu_err:.1e} over {len(GOLDEN)} golden cases")


@pytest.mark.slow
def test_a4_copyright_pipeline(pipeline, capsys):
    cfg, root, times, wall = pipeline
    man = ex.Manifest(cfg.manifest)
    pre_util = man.latest("pretrain")["model_utility"]
    mem = man.latest("memorize")
    _, mean = curves(cfg)
    start_util = mean[("prod", 0)][1]
    prod_ok = [e for e in range(1, 11)
               if mean[("prod", e)][0] >= 0.9 and mean[("prod", e)][1] >= 0.7 * start_util]
    hit = {m: first_hit(mean, m) for m in cfg.methods}
    util_at = {m: mean[(m, e)][1] if e else float("nan") for m, e in hit.items()}
    directional = hit["prod"] is not None and all(
        hit[b] is None or util_at["prod"] > util_at[b] for b in BASELINES)
    checks = {
        "pretrain utility>=0.8": pre_util >= 0.8,
        "memorized FQ<=0.05": mem["forget_quality"] <= 0.05,
        "PROD FQ>=0.9 with utility>=0.7x": bool(prod_ok),
        "PROD beats GA/NPO at first FQ>=0.9": directional,
        "runtime<10min": wall < 600,
    }
    e = hit["prod"]
    detail = (f"pretrain utility {pre_util:.3f}; memorized FQ {mem['forget_quality']:.3f} "
              f"(recall {mem['recall']:.2f}); "
              f"PROD first FQ>=0.9 at epoch {e} with utility {util_at['prod']:.3f} vs start {start_util:.3f} "
              f"(need >= {0.7 * start_util:.3f}); GA {util_at['ga']:.3f} @ {hit['ga']}, "
              f"NPO {util_at['npo']:.3f} @ {hit['npo']}; runtime {wall:.0f}s; "
              f"failed: {[k for k, v in checks.items() if not v] or 'none'}")
    verdict(capsys, "A4", all(checks.values()), detail)


@pytest.mark.slow
def test_a5_attack_robustness(pipeline, capsys):
    cfg = pipeline[0]
    rows, _ = curves(cfg)
    scores = defaultdict(list)
    for r in rows:
        if int(r["epoch"]) >= 1 and r["attack_bleu_mean"] != "":
            scores[r["method"]].append(float(r["attack_bleu_mean"]))
    means = {m: float(np.mean(v)) for m, v in scores.items()}
    prod = means.get("prod", float("nan"))
    others = {m: v for m, v in means.items() if m != "prod"}
    ok = not math.isnan(prod) and prod <= 0.15 and all(prod < v for v in others.values())
    detail = ", ".join(f"{m} {v:.3f} (n={len(scores[m])})" for m, v in sorted(means.items()))
    verdict(capsys, "A5", ok, f"mean attack BLEU on floor-passing checkpoints: {detail}; PROD needs <=0.15 "
                             f"and below every baseline")


@pytest.mark.slow
def test_a6_target_stability(pipeline, capsys):
    cfg = pipeline[0]
    man = ex.Manifest(cfg.manifest)
    ds, _ = ex._dataset(cfg, man)
    examples = to_examples(ds.forget)
    ckroot = Path(cfg.checkpoint_dir) / cfg.task
    start, _ = load_checkpoint(ckroot / "base" / "memorized.ckpt")
    start_hash = start.fingerprint()
    saved = CachedTargets.load(ckroot / "prod" / "targets.jsonl", expected_hash=start_hash)
    epoch0 = CachedTargets.build(start, examples, saved.config)
    same0 = all(saved.table(e.id).tobytes() == epoch0.table(e.id).tobytes() for e in examples)
    frozen = {e.id: epoch0.table(e.id).tobytes() for e in examples}
    seen = {}

    def probe(epoch, model):
        seen[epoch] = all(epoch0.table(e.id).tobytes() == frozen[e.id] for e in examples)
        return {}
    lr = man.latest("grid-search", method="prod")["selected_lr"]
    model = start.clone()
    tc = replace(cfg.train, method="prod", lr=lr, epochs=10)
    unlearn(model, examples, tc, cache=epoch0, start_hash=start_hash, on_epoch=probe)
    rebuilt = CachedTargets.build(model, examples, saved.config)
    differs = any(rebuilt.table(e.id).tobytes() != saved.table(e.id).tobytes() for e in examples)
    try:
        unlearn(start.clone(), examples, replace(tc, epochs=1), cache=rebuilt, start_hash=start_hash)
        refused = False
    except StaleCacheError:
        refused = True
    ok = same0 and seen.get(10) is True and all(seen.values()) and differs and refused
    verdict(capsys, "A6", ok, f"saved==epoch0 bytes {same0}; unchanged through epoch 10 {seen.get(10)}; "
                             f"rebuilt-from-current differs {differs}; trainer refuses it {refused}")


@pytest.mark.slow
def test_a7_ablation(pipeline, capsys):
    cfg = pipeline[0]
    path = ex.stage_ablation(cfg)
    rows = ex.read_csv(path, ex.ABLATION_COLUMNS)
    per_seed = defaultdict(list)
    for r in rows:
        per_seed[int(r["seed"])].append(r)
    complete = all(len(v) == 27 for v in per_seed.values()) and sorted(per_seed) == list(cfg.seeds)
    wins = 0
    for seed, rs in per_seed.items():
        ok_rows = [r for r in rs if r["status"] == "ok"]
        best = max(float(r["pdr"]) for r in ok_rows)
        ref = next(r for r in ok_rows if r["loss"] == "ce" and float(r["top_p"]) == 0.8 and float(r["alpha"]) == 0)
        wins += float(ref["pdr"]) >= best
    n_err = sum(r["status"] == "config-error" for r in rows)
    ok = complete and wins >= 3
    verdict(capsys, "A7", ok, f"{len(rows)} rows over {len(per_seed)} seeds (27 cells each: {complete}; "
                             f"{n_err} config-error cells); CE/top_p 0.8/alpha 0 has the highest PDR on "
                             f"{wins}/5 seeds (need 3)")


@pytest.mark.slow
def test_a8_determinism(pipeline, tmp_path_factory, capsys):
    cfg, root, _, _ = pipeline
    root2 = tmp_path_factory.mktemp("accept_rerun")
    cfg2 = ex.ExperimentConfig().with_root(root2).validate()
    ex.run_pipeline(cfg2)
    rep1, rep2 = Path(cfg.report_dir), Path(cfg2.report_dir)
    names = sorted(p.relative_to(rep2) for p in rep2.rglob("*.csv"))
    diff = [str(n) for n in names if (rep1 / n).read_bytes() != (rep2 / n).read_bytes()]
    ok = bool(names) and not diff
    verdict(capsys, "A8", ok, f"{len(names)} report CSVs compared bytewise; differing: {diff or 'none'}")
