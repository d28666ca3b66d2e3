"""Acceptance criteria 1-7, one printed PASS/FAIL line each.

Criterion 6 reuses the session-wide three-seed experiment (several minutes
on one core); everything else is fast.
"""

import hashlib

import numpy as np
import pytest

import oracles
from conftest import tiny_config
from g2d import cli, losses, metrics as M, synthesis as S, training
from g2d.diffkernel import Graph, Parameter
from g2d.gradcheck import TOLERANCE, run_suite


def verdict(capsys, number, name, ok, detail=""):
    with capsys.disabled():
        print(f"\nCRITERION {number} {'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else ""))
    assert ok, detail


def val(node):
    return float(node.value)


# 1 ---------------------------------------------------------------------------

def test_criterion_1_gradient_suite(capsys):
    results, elapsed = run_suite(n_points=10, seed=20240601)
    worst = max(results, key=lambda r: r.max_rel_err)
    ok = all(r.ok and r.points >= 10 for r in results) and TOLERANCE <= 1e-5 and elapsed < 60
    verdict(capsys, 1, "finite-difference gradient suite",
            ok, f"{len(results)} checks, worst {worst.name} {worst.max_rel_err:.2e}, {elapsed:.1f} s")


# 2 ---------------------------------------------------------------------------

def test_criterion_2_invariances(capsys):
    rng = np.random.default_rng(2)
    gaps = {"distance": 0.0, "angle": 0.0, "huber": 0.0, "fdr": 0.0}
    for _ in range(20):
        n, d = int(rng.integers(3, 9)), int(rng.integers(1, 6))
        T, Sb = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        c = float(rng.uniform(0.01, 50))
        for delta in (0.5, 1.0):
            base = val(losses.rkd_distance_loss(Graph(), T, Sb, delta))
            for tt, ss in ((c * T, Sb), (T, c * Sb)):
                gaps["distance"] = max(gaps["distance"], abs(val(losses.rkd_distance_loss(Graph(), tt, ss, delta)) - base))
            base = val(losses.rkd_angle_loss(Graph(), T, Sb, delta))
            shift = rng.normal(size=d)
            for cc in (c, -c):
                moved = val(losses.rkd_angle_loss(Graph(), cc * T + shift, cc * Sb - shift, delta))
                gaps["angle"] = max(gaps["angle"], abs(moved - base))
        ss_ = M.ScoreSet(rng.uniform(-1, 1, 50), np.arange(50) % 3 == 0)
        a = float(rng.uniform(0.1, 10)) * (-1 if rng.random() < 0.5 else 1)
        f0 = M.fdr(ss_)
        gaps["fdr"] = max(gaps["fdr"], abs(M.fdr(M.ScoreSet(a * ss_.scores + rng.normal(), ss_.genuine)) - f0)
                          / max(1.0, f0))
    h = 1e-7
    for delta in (0.25, 1.0, 3.0):
        left = (losses.huber(0.0, delta, delta) - losses.huber(0.0, delta - h, delta)) / h
        right = (losses.huber(0.0, delta + h, delta) - losses.huber(0.0, delta, delta)) / h
        gaps["huber"] = max(gaps["huber"], abs(left - right))
    ok = (gaps["distance"] <= 1e-10 and gaps["angle"] <= 1e-10 and gaps["fdr"] <= 1e-10
          and gaps["huber"] <= 1e-6)
    verdict(capsys, 2, "loss and FDR invariances", ok, ", ".join(f"{k} {v:.1e}" for k, v in gaps.items()))


# 3 ---------------------------------------------------------------------------

def test_criterion_3_oracle_equivalence(capsys):
    worst = 0.0
    for batch in range(50):
        rng = np.random.default_rng(np.random.SeedSequence([33, batch]))
        n, dt, ds = int(rng.integers(3, 7)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        T, Sb, S2 = rng.normal(size=(n, dt)), rng.normal(size=(n, ds)), rng.normal(size=(n, dt))
        W, b = rng.normal(size=(ds, dt)), rng.normal(size=dt)
        delta, alpha, beta = (float(x) for x in rng.uniform(0.2, 2.0, 3))
        Tl, Sl, S2l = T.tolist(), Sb.tolist(), S2.tolist()
        pairs = [
            (val(losses.rkd_distance_loss(Graph(), T, S2, delta)), oracles.rkd_distance(Tl, S2l, delta)),
            (val(losses.rkd_angle_loss(Graph(), T, S2, delta)), oracles.rkd_angle(Tl, S2l, delta)),
            (val(losses.l1_embed_loss(Graph(), T, Sb, Parameter("W", W), Parameter("b", b))),
             oracles.l1_embed(Tl, Sl, W.tolist(), b.tolist())),
            (val(losses.distill_loss(Graph(), T, S2, Parameter("W", np.eye(dt)), None,
                                     losses.DistillWeights(alpha, beta, delta)).total),
             oracles.distill(Tl, S2l, np.eye(dt).tolist(), None, alpha, beta, delta)),
            (val(losses.reconstruction_loss(Graph(), T, S2)), oracles.reconstruction(Tl, S2l)),
        ]
        z, y = rng.normal(size=(n, 4)) * 3, rng.integers(0, 4, size=n)
        pairs.append((val(losses.classification_loss_node(Graph(), z, y)), oracles.cross_entropy(z.tolist(), y.tolist())))
        worst = max(worst, max(abs(a - r) / max(1.0, abs(r)) for a, r in pairs))
    mismatches = 0
    for k in range(100):
        rng = np.random.default_rng(np.random.SeedSequence([34, k]))
        n = int(rng.integers(2, 501))
        scores = rng.uniform(-1, 1, n)
        if k % 2:
            scores = np.round(scores, 2)
        genuine = rng.random(n) < 0.5
        genuine[:2] = True, False
        ss = M.ScoreSet(scores, genuine)
        gen, imp = ss.genuine_scores.tolist(), ss.impostor_scores.tolist()
        t = float(np.median(scores))
        mine = (M.accuracy_best_threshold(ss), M.eer(ss)[0], M.fmr_n(ss, 0.01), M.fmr_n(ss, 0.001),
                M.fmr_fnmr_at(ss, t))
        ref = (oracles.best_accuracy(gen, imp), oracles.equal_error_rate(gen, imp),
               oracles.fnmr_at_fmr(gen, imp, 0.01), oracles.fnmr_at_fmr(gen, imp, 0.001),
               oracles.rates(gen, imp, t))
        mismatches += mine != ref
    verdict(capsys, 3, "oracle equivalence (losses 1e-12, metrics exact)",
            worst <= 1e-12 and mismatches == 0,
            f"worst loss rel err {worst:.1e} over 50 batches, {mismatches}/100 metric mismatches")


# 4 ---------------------------------------------------------------------------

def test_criterion_4_hand_fixtures(capsys):
    hand = M.ScoreSet.from_lists([0.9, 0.8, 0.3], [0.7, 0.2, 0.1])
    acc = M.accuracy_best_threshold(hand)[0]
    eer = M.eer(hand)[0]
    fmr100 = M.fmr_n(hand, 0.01)[0]
    fdr = M.fdr(M.ScoreSet.from_lists([0.9, 0.7], [0.3, 0.1]))
    ok = (acc == 5 / 6 and abs(eer - 1 / 3) <= 1e-15 and abs(fmr100 - 1 / 3) <= 1e-15
          and abs(fdr - 18.0) <= 1e-12)
    verdict(capsys, 4, "hand-worked metric fixtures", ok,
            f"ACC {acc:.6f}, EER {eer:.6f}, FMR100 {fmr100:.6f}, FDR {fdr:.6f}")


# 5 ---------------------------------------------------------------------------

def _g2d(*argv):
    return cli.main([str(a) for a in argv])


def test_criterion_5_protocol_and_freeze(capsys, tmp_path, tiny_ds, tiny_stages):
    cfg, teacher, enc, _ = tiny_stages
    hashes = [(teacher.teacher.digest(), enc.encoder.digest())]
    ref = training.train_reformer(tiny_ds, teacher.teacher, enc.encoder, cfg.reformer)
    hashes.append((teacher.teacher.digest(), enc.encoder.digest()))
    ref_digest = ref.reformer.digest()
    training.finetune_classifier(tiny_ds, enc.encoder, ref.reformer, cfg.classifier)
    hashes.append((teacher.teacher.digest(), enc.encoder.digest()))
    buffers_ok = len(set(hashes)) == 1 and ref.reformer.digest() == ref_digest
    ini = tmp_path / "tiny.ini"
    ini.write_text(tiny_config().to_ini())
    common = ("--config", ini)
    order_ok = _g2d("train", "teacher", *common, "--out", tmp_path / "a") == 2
    digests = {}
    freeze_ok = True
    for run in ("a", "b"):
        out = tmp_path / run
        steps = [("synth",), ("train", "teacher"), ("train", "encoder")]
        for step in steps:
            assert _g2d(*step, *common, "--out", out) == 0
        # stage k+1 before stage k must be refused
        if run == "a":
            order_ok &= _g2d("train", "classifier", *common, "--out", out) == 2
        frozen = {n: (out / "models" / f"{n}.g2dm").read_bytes() for n in ("teacher", "encoder")}
        for step in (("train", "reformer"), ("train", "classifier")):
            assert _g2d(*step, *common, "--out", out) == 0
            freeze_ok &= all((out / "models" / f"{n}.g2dm").read_bytes() == b for n, b in frozen.items())
        for name in ("teacher", "encoder", "reformer", "classifier"):
            digests.setdefault(name, []).append(hashlib.sha256((out / "models" / f"{name}.g2dm").read_bytes()).hexdigest())
    repro_ok = all(a == b for a, b in digests.values())
    ok = order_ok and buffers_ok and freeze_ok and repro_ok
    verdict(capsys, 5, "stage order, freeze hashes, bit reproducibility", ok,
            f"order {order_ok}, frozen buffers {buffers_ok}, model files {freeze_ok}, reproducible {repro_ok}")


# 6 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_toy_reproduction(capsys, toy_experiment):
    res, out = toy_experiment
    crit = res.criteria(budget=600.0)
    lines = [f"({'abcde'[i]}) {'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}" for i, c in enumerate(crit)]
    with capsys.disabled():
        print("\n" + "\n".join("    " + line for line in lines))
    verdict(capsys, 6, "toy-scale qualitative reproduction", all(c.passed for c in crit),
            "; ".join(c.name for c in crit if not c.passed) or "all parts")


# 7 ---------------------------------------------------------------------------

def test_criterion_7_synthesis_contract(capsys):
    templates = S.builtin_templates(5)
    ids = S.generate_identities(25, seed=7)
    fracs, outside_ok = [], True
    for ident in ids:
        for view in range(40):
            t, frac = S.make_item(ident, view, templates, master_seed=7)
            fracs.append(frac)
            keep = t.mask == 0
            outside_ok &= bool(np.array_equal(t.masked[:, keep], t.groundtruth[:, keep]))
    mean = float(np.mean(fracs))
    ok = len(fracs) == 1000 and 0.15 <= mean <= 0.25 and outside_ok
    verdict(capsys, 7, "synthesis contract", ok,
            f"{len(fracs)} overlays, mean area fraction {mean:.4f}, masked == groundtruth outside mask: {outside_ok}")
