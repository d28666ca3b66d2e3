"""Verification protocols and biometric metrics.

The decision rule throughout is "match iff score >= threshold". Candidate
thresholds are the midpoints between adjacent distinct scores plus one
sentinel below the minimum and one above the maximum, so every metric is
an exact function of the score multiset.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PROTOCOLS = ("MR-MP", "UMR-MP")
_trapezoid = getattr(np, "trapezoid", None) or np.trapz


class MetricError(ValueError):
    pass


# -- similarity and pairs ----------------------------------------------------

def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"cosine: dims {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise MetricError("zero embedding")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_rows(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(A, axis=1)
    nb = np.linalg.norm(B, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise MetricError("zero embedding")
    return np.clip(np.sum(A * B, axis=1) / (na * nb), -1.0, 1.0)


@dataclass
class PairSet:
    reference: np.ndarray  # row indices
    probe: np.ndarray
    genuine: np.ndarray    # bool
    protocol: str
    seed: int

    def __len__(self):
        return len(self.genuine)


def build_pairs(rows, protocol: str, n_genuine: int, n_impostor: int, seed: int) -> PairSet:
    """Sample verification pairs from embedding manifest rows.

    ``rows`` are records with ``identity``, ``view`` and ``masked``
    attributes. An item is an (identity, view) pair; reference and probe
    are always distinct items. Probes are masked rows; references are
    masked rows under MR-MP and unmasked rows under UMR-MP. Pairs are drawn
    uniformly without replacement from all admissible candidates.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    masked_row, plain_row = {}, {}
    for i, r in enumerate(rows):
        key = (int(r.identity), int(r.view))
        (masked_row if r.masked else plain_row)[key] = i
    probes = sorted(masked_row)
    refs = sorted(masked_row if protocol == "MR-MP" else plain_row)
    ref_rows = np.array([(masked_row if protocol == "MR-MP" else plain_row)[k] for k in refs])
    probe_rows = np.array([masked_row[k] for k in probes])
    ref_id = np.array([k[0] for k in refs])
    probe_id = np.array([k[0] for k in probes])
    item_no = {k: n for n, k in enumerate(sorted(set(refs) | set(probes)))}
    ref_key = np.array([item_no[k] for k in refs])
    probe_key = np.array([item_no[k] for k in probes])
    if len(refs) == 0 or len(probes) == 0:
        raise MetricError("insufficient items: no admissible references or probes")
    ri, pi = np.meshgrid(np.arange(len(refs)), np.arange(len(probes)), indexing="ij")
    ri, pi = ri.ravel(), pi.ravel()
    ok = ref_key[ri] != probe_key[pi]
    if protocol == "MR-MP":
        ok &= ri < pi  # symmetric protocol: each unordered item pair once
    ri, pi = ri[ok], pi[ok]
    same = ref_id[ri] == probe_id[pi]
    gen_idx, imp_idx = np.flatnonzero(same), np.flatnonzero(~same)
    if len(gen_idx) < n_genuine or len(imp_idx) < n_impostor:
        raise MetricError(f"insufficient items: {len(gen_idx)} genuine / {len(imp_idx)} impostor "
                          f"candidates for {n_genuine} / {n_impostor} requested")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFA1]))
    pick = np.concatenate([rng.choice(gen_idx, n_genuine, replace=False),
                           rng.choice(imp_idx, n_impostor, replace=False)])
    return PairSet(ref_rows[ri[pick]], probe_rows[pi[pick]], same[pick], protocol, seed)


@dataclass
class ScoreSet:
    scores: np.ndarray
    genuine: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.genuine = np.asarray(self.genuine, dtype=bool)
        if self.scores.shape != self.genuine.shape or self.scores.ndim != 1:
            raise MetricError("scores and labels must be equal-length vectors")
        if len(self.scores) == 0:
            raise MetricError("empty score set")

    @classmethod
    def from_lists(cls, genuine, impostor) -> "ScoreSet":
        g, i = list(genuine), list(impostor)
        return cls(np.array(g + i, dtype=np.float64), np.array([True] * len(g) + [False] * len(i)))

    @property
    def genuine_scores(self) -> np.ndarray:
        return self.scores[self.genuine]

    @property
    def impostor_scores(self) -> np.ndarray:
        return self.scores[~self.genuine]

    def require_both(self) -> None:
        if not self.genuine.any() or self.genuine.all():
            raise MetricError("need at least one genuine and one impostor score")


def score_pairs(vectors: np.ndarray, pairs: PairSet) -> ScoreSet:
    return ScoreSet(cosine_rows(vectors[pairs.reference], vectors[pairs.probe]), pairs.genuine)


# -- threshold sweep ---------------------------------------------------------

def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    u = np.unique(scores)
    return np.concatenate([[u[0] - 1.0], (u[:-1] + u[1:]) / 2.0, [u[-1] + 1.0]])


@dataclass
class Sweep:
    thresholds: np.ndarray
    gen_rejected: np.ndarray  # genuine scores < t
    imp_accepted: np.ndarray  # impostor scores >= t
    n_gen: int
    n_imp: int

    @property
    def fmr(self) -> np.ndarray:
        return self.imp_accepted / self.n_imp

    @property
    def fnmr(self) -> np.ndarray:
        return self.gen_rejected / self.n_gen


def sweep(ss: ScoreSet) -> Sweep:
    ss.require_both()
    t = candidate_thresholds(ss.scores)
    gen = np.sort(ss.genuine_scores)
    imp = np.sort(ss.impostor_scores)
    gen_rej = np.searchsorted(gen, t, side="left")
    imp_acc = len(imp) - np.searchsorted(imp, t, side="left")
    return Sweep(t, gen_rej, imp_acc, len(gen), len(imp))


def fmr_fnmr_at(ss: ScoreSet, threshold: float) -> tuple[float, float]:
    ss.require_both()
    imp, gen = ss.impostor_scores, ss.genuine_scores
    return int(np.sum(imp >= threshold)) / len(imp), int(np.sum(gen < threshold)) / len(gen)


def accuracy_best_threshold(ss: ScoreSet, sw: Sweep | None = None) -> tuple[float, float]:
    """Highest accuracy over candidate thresholds, with the lowest threshold achieving it."""
    sw = sw or sweep(ss)
    correct = (sw.n_gen - sw.gen_rejected) + (sw.n_imp - sw.imp_accepted)
    k = int(np.argmax(correct))
    return int(correct[k]) / (sw.n_gen + sw.n_imp), float(sw.thresholds[k])


def eer(ss: ScoreSet, sw: Sweep | None = None) -> tuple[float, float]:
    """Equal error rate and the candidate threshold closest to it.

    An exact FMR == FNMR operating point returns that common rate.
    Otherwise the crossing is interpolated linearly between the last
    point with FMR > FNMR and the next one, returning the mean of the
    interpolated FMR and FNMR.
    """
    sw = sw or sweep(ss)
    fmr, fnmr = sw.fmr, sw.fnmr
    d = fmr - fnmr
    k_best = int(np.argmin(np.abs(d)))
    exact = np.flatnonzero(d == 0)
    if len(exact):
        return float(fmr[exact[0]]), float(sw.thresholds[exact[0]])
    k = int(np.flatnonzero(d > 0)[-1])
    lam = d[k] / (d[k] - d[k + 1])
    at_fmr = fmr[k] + lam * (fmr[k + 1] - fmr[k])
    at_fnmr = fnmr[k] + lam * (fnmr[k + 1] - fnmr[k])
    return float((at_fmr + at_fnmr) / 2.0), float(sw.thresholds[k_best])


def fmr_n(ss: ScoreSet, ceiling: float, sw: Sweep | None = None) -> tuple[float, float]:
    """Lowest FNMR with FMR <= ceiling, and the lowest threshold attaining it."""
    sw = sw or sweep(ss)
    ok = np.flatnonzero(sw.fmr <= ceiling)
    fnmr = sw.fnmr[ok]
    k = ok[int(np.argmin(fnmr))]
    return float(sw.fnmr[k]), float(sw.thresholds[k])


def fdr(ss: ScoreSet) -> float:
    """Fisher discriminant ratio with population variances."""
    ss.require_both()
    g, i = ss.genuine_scores, ss.impostor_scores
    den = g.var() + i.var()
    if den == 0:
        raise MetricError("degenerate FDR: both score variances are zero")
    return float((g.mean() - i.mean()) ** 2 / den)


def roc_points(sw: Sweep) -> tuple[np.ndarray, np.ndarray]:
    """(FMR, 1 - FNMR) over all candidates, ordered by increasing FMR."""
    order = np.argsort(-sw.thresholds, kind="stable")
    return sw.fmr[order], 1.0 - sw.fnmr[order]


def histogram(ss: ScoreSet, bins: int, lo: float = -1.0, hi: float = 1.0):
    edges = np.linspace(lo, hi, bins + 1)
    s = np.clip(ss.scores, lo, hi)
    g, _ = np.histogram(s[ss.genuine], bins=edges)
    i, _ = np.histogram(s[~ss.genuine], bins=edges)
    return edges, g, i


# -- report ------------------------------------------------------------------

@dataclass
class OperatingPoint:
    threshold: float
    fmr: float
    fnmr: float

    @property
    def avg(self) -> float:
        return (self.fmr + self.fnmr) / 2.0


@dataclass
class VerificationReport:
    acc: float
    acc_threshold: float
    eer: float
    eer_threshold: float
    fdr: float
    fmr100: float
    fmr1000: float
    at_fmr100: OperatingPoint
    at_fmr1000: OperatingPoint
    auc: float
    roc_fmr: np.ndarray = field(repr=False)
    roc_tpr: np.ndarray = field(repr=False)
    hist_edges: np.ndarray = field(repr=False)
    hist_genuine: np.ndarray = field(repr=False)
    hist_impostor: np.ndarray = field(repr=False)
    n_genuine: int = 0
    n_impostor: int = 0

    def rows(self) -> list[tuple[str, float, float | str]]:
        na = ""
        return [
            ("acc", self.acc, self.acc_threshold),
            ("eer", self.eer, self.eer_threshold),
            ("fdr", self.fdr, na),
            ("fmr100", self.fmr100, self.at_fmr100.threshold),
            ("fmr1000", self.fmr1000, self.at_fmr1000.threshold),
            ("fmr100_th_fmr", self.at_fmr100.fmr, self.at_fmr100.threshold),
            ("fmr100_th_fnmr", self.at_fmr100.fnmr, self.at_fmr100.threshold),
            ("fmr100_th_avg", self.at_fmr100.avg, self.at_fmr100.threshold),
            ("fmr1000_th_fmr", self.at_fmr1000.fmr, self.at_fmr1000.threshold),
            ("fmr1000_th_fnmr", self.at_fmr1000.fnmr, self.at_fmr1000.threshold),
            ("fmr1000_th_avg", self.at_fmr1000.avg, self.at_fmr1000.threshold),
            ("auc", self.auc, na),
            ("n_genuine", self.n_genuine, na),
            ("n_impostor", self.n_impostor, na),
        ]


def report(ss: ScoreSet, bins: int = 40) -> VerificationReport:
    sw = sweep(ss)
    acc, acc_t = accuracy_best_threshold(ss, sw)
    e, e_t = eer(ss, sw)
    f100, t100 = fmr_n(ss, 0.01, sw)
    f1000, t1000 = fmr_n(ss, 0.001, sw)
    rf, rt = roc_points(sw)
    edges, hg, hi = histogram(ss, bins)
    return VerificationReport(
        acc=acc, acc_threshold=acc_t, eer=e, eer_threshold=e_t, fdr=fdr(ss),
        fmr100=f100, fmr1000=f1000,
        at_fmr100=OperatingPoint(t100, *fmr_fnmr_at(ss, t100)),
        at_fmr1000=OperatingPoint(t1000, *fmr_fnmr_at(ss, t1000)),
        auc=float(_trapezoid(rt, rf)), roc_fmr=rf, roc_tpr=rt,
        hist_edges=edges, hist_genuine=hg, hist_impostor=hi,
        n_genuine=sw.n_gen, n_impostor=sw.n_imp,
    )


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def emit(rep: VerificationReport, ss: ScoreSet, out_dir) -> dict[str, Path]:
    """Write scores / report / ROC / histogram CSVs; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "scores": out / "scores.csv",
        "report": out / "report.csv",
        "roc": out / "roc.csv",
        "histogram": out / "histogram.csv",
    }
    paths["scores"].write_text(_csv_text(
        ["score", "genuine"], [(s, int(g)) for s, g in zip(ss.scores, ss.genuine)]))
    paths["report"].write_text(_csv_text(["metric", "value", "threshold"], rep.rows()))
    paths["roc"].write_text(_csv_text(["fmr", "tpr"], zip(rep.roc_fmr, rep.roc_tpr)))
    e = rep.hist_edges
    paths["histogram"].write_text(_csv_text(
        ["bin_low", "bin_high", "genuine_count", "impostor_count"],
        [(e[k], e[k + 1], int(rep.hist_genuine[k]), int(rep.hist_impostor[k])) for k in range(len(e) - 1)]))
    return paths


def read_scores(path) -> ScoreSet:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return ScoreSet(np.array([float(r["score"]) for r in rows]),
                    np.array([r["genuine"] == "1" for r in rows]))


def read_report(path) -> dict[str, tuple[float, str]]:
    with open(path, newline="") as fh:
        return {r["metric"]: (float(r["value"]), r["threshold"]) for r in csv.DictReader(fh)}
