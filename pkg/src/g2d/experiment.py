"""End-to-end toy reproduction over several seeds.

Per seed: synthesise, train teacher and encoder, then three reformers
(distilled, L1-only, cross-entropy-only), finetune the classifier on the
distilled one and score both verification protocols on the held-out split.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics, training
from .config import ExperimentConfig, echo_config
from .modelio import EmbeddingRow
from .synthesis import Dataset, synthesize_dataset

log = logging.getLogger(__name__)

VARIANTS = ("full", "dis", "ce")
PROTOCOL_ORDER = ("MR-MP", "UMR-MP")


def cluster_gap(vectors: np.ndarray, identity: np.ndarray) -> tuple[float, float]:
    """(mean intra-identity cosine, mean inter-identity cosine) over distinct items."""
    v = np.asarray(vectors, dtype=np.float64).reshape(len(vectors), -1)
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0):
        raise metrics.MetricError("zero embedding")
    u = v / norms[:, None]
    c = u @ u.T
    same = identity[:, None] == identity[None, :]
    off = ~np.eye(len(v), dtype=bool)
    return float(c[same & off].mean()), float(c[~same].mean())


def eval_rows(part: Dataset) -> list[EmbeddingRow]:
    """Masked rows first, then the unmasked originals in the same order."""
    paths = part.paths or [""] * len(part)
    rows = [EmbeddingRow(int(i), str(p), True, int(v)) for i, v, p in zip(part.identity, part.view, paths)]
    rows += [EmbeddingRow(int(i), str(p), False, int(v)) for i, v, p in zip(part.identity, part.view, paths)]
    return rows


def embed_split(encoder, reformer, part: Dataset) -> np.ndarray:
    return np.concatenate([training.embed(encoder, reformer, part.masked, part.masks),
                           training.embed(encoder, reformer, part.faces)])


def verify(vectors, rows, protocol: str, n_genuine: int, n_impostor: int, seed: int, bins: int = 40):
    pairs = metrics.build_pairs(rows, protocol, n_genuine, n_impostor, seed)
    ss = metrics.score_pairs(vectors, pairs)
    return metrics.report(ss, bins), ss


@dataclass
class SeedResult:
    seed: int
    accuracy: dict            # (variant, protocol) -> ACC
    eer: dict                 # (variant, protocol) -> EER
    intra_inter: dict         # variant or "pixels" -> (intra, inter)
    teacher_val_acc: float
    encoder_val_rec: tuple
    encoder_unmasked_mae: float
    classifier_train_acc: float
    classifier_val_acc: float
    timings: dict = field(default_factory=dict)

    def gap(self, key: str) -> float:
        intra, inter = self.intra_inter[key]
        return intra - inter


def run_seed(cfg: ExperimentConfig, seed: int, out_dir=None) -> SeedResult:
    cfg = cfg.with_seed(seed)
    times = {}
    t0 = time.perf_counter()

    def lap(name):
        nonlocal t0
        now = time.perf_counter()
        times[name] = now - t0
        t0 = now

    s = cfg.synthesis
    ds = synthesize_dataset(s.identities, s.views, s.templates, seed, threads=max(1, cfg.run.threads))
    lap("synthesis")
    teacher = training.train_teacher(ds, cfg.teacher)
    lap("teacher")
    enc = training.pretrain_encoder(ds, cfg.encoder, teacher.teacher)
    lap("encoder")
    full = training.train_reformer(ds, teacher.teacher, enc.encoder, replace(cfg.reformer, ablation="full"))
    lap("reformer")
    dis = training.train_reformer(ds, teacher.teacher, enc.encoder, replace(cfg.reformer, ablation="dis"))
    lap("reformer_dis")
    ce = training.train_ce_baseline(ds, enc.encoder, cfg.reformer, cfg.classifier)
    lap("classifier_ce")
    clf = training.finetune_classifier(ds, enc.encoder, full.reformer, cfg.classifier)
    lap("classifier")

    part = ds if cfg.eval.split == "all" else ds.subset(cfg.eval.split)
    rows = eval_rows(part)
    reformers = {"full": full.reformer, "dis": dis.reformer, "ce": ce.reformer}
    acc, eer, clusters = {}, {}, {}
    for name, reformer in reformers.items():
        z = embed_split(enc.encoder, reformer, part)
        clusters[name] = cluster_gap(z[:len(part)], part.identity)
        for protocol in PROTOCOL_ORDER:
            rep, ss = verify(z, rows, protocol, cfg.eval.n_genuine, cfg.eval.n_impostor, seed, cfg.eval.bins)
            acc[name, protocol] = rep.acc
            eer[name, protocol] = rep.eer
            if out_dir is not None:
                metrics.emit(rep, ss, Path(out_dir) / f"seed{seed}" / f"{name}_{protocol}")
    clusters["pixels"] = cluster_gap(part.masked, part.identity)
    lap("evaluation")
    if out_dir is not None:
        echo_config(cfg, Path(out_dir) / f"seed{seed}")
    return SeedResult(seed, acc, eer, clusters, teacher.val_acc,
                      (enc.val_rec_initial, enc.val_rec_final), enc.val_unmasked_mae,
                      clf.train_acc, clf.val_acc, times)


@dataclass
class Criterion:
    name: str
    passed: bool
    detail: str


@dataclass
class ExperimentResult:
    seeds: list
    runtime: float

    def criteria(self, budget: float = 600.0) -> list[Criterion]:
        out = []
        mr = [r.accuracy["full", "MR-MP"] for r in self.seeds]
        out.append(Criterion("full MR-MP ACC >= 0.90", min(mr) >= 0.90,
                             "per seed " + ", ".join(f"{a:.4f}" for a in mr)))
        parts = []
        ok = True
        for r in self.seeds:
            f, d, c = (r.accuracy[v, "MR-MP"] for v in VARIANTS)
            ok &= f > d > c
            parts.append(f"seed {r.seed}: {f:.4f} / {d:.4f} / {c:.4f}")
        out.append(Criterion("ACC order full > dis > ce on every seed", ok, "; ".join(parts)))
        gaps = [(r.gap("full"), r.gap("pixels")) for r in self.seeds]
        out.append(Criterion("intra-inter cosine gap >= 0.1 and above raw pixels",
                             all(g >= 0.1 and g > p for g, p in gaps),
                             ", ".join(f"{g:.3f} vs {p:.3f}" for g, p in gaps)))
        diffs = [abs(r.accuracy["full", "UMR-MP"] - r.accuracy["full", "MR-MP"]) for r in self.seeds]
        out.append(Criterion("|UMR-MP - MR-MP| ACC <= 0.05", max(diffs) <= 0.05,
                             ", ".join(f"{d:.4f}" for d in diffs)))
        out.append(Criterion(f"total runtime < {budget:.0f} s", self.runtime < budget,
                             f"{self.runtime:.1f} s"))
        return out

    def summary_csv(self) -> str:
        head = ["seed", "variant", "protocol", "accuracy", "eer", "intra_cos", "inter_cos"]
        lines = [",".join(head)]
        for r in self.seeds:
            for v in VARIANTS:
                intra, inter = r.intra_inter[v]
                for p in PROTOCOL_ORDER:
                    lines.append(",".join([str(r.seed), v, p, repr(r.accuracy[v, p]),
                                           repr(r.eer[v, p]), repr(intra), repr(inter)]))
            intra, inter = r.intra_inter["pixels"]
            lines.append(",".join([str(r.seed), "pixels", "", "", "", repr(intra), repr(inter)]))
        return "\n".join(lines) + "\n"


def run_experiment(cfg: ExperimentConfig, seeds=(0, 1, 2), out_dir=None) -> ExperimentResult:
    start = time.perf_counter()
    results = []
    for seed in seeds:
        r = run_seed(cfg, seed, out_dir)
        log.info("seed %d: %s", seed, {k: round(v, 1) for k, v in r.timings.items()})
        results.append(r)
    res = ExperimentResult(results, time.perf_counter() - start)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.csv").write_text(res.summary_csv(), encoding="utf-8")
        lines = ["criterion,passed,detail"]
        lines += [f"{c.name},{int(c.passed)},\"{c.detail}\"" for c in res.criteria()]
        (out / "criteria.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return res
