"""Training objectives as differentiable graph operations.

Each loss takes graph nodes for the quantities being optimised and plain
arrays for constants (teacher embeddings, targets). Reductions are sums
unless stated otherwise, so magnitudes follow the written objectives:

* reconstruction: sum of squared per-image L2 distances,
* relational distance: Huber over all ordered pairs of mean-normalised
  squared distances,
* relational angle: Huber over all ordered triples of vertex cosines,
* L1 embedding: sum of Euclidean residual norms after a linear map,
* classification: mean negative log-probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffkernel import Graph, Node, ShapeError

COS_FLOOR = 1e-12
COINCIDENT = 1e-12


class DegenerateBatchError(ValueError):
    """Raised when a batch carries no relational information."""


@dataclass(frozen=True)
class DistillWeights:
    alpha: float = 0.01
    beta: float = 0.02
    huber_delta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.huber_delta <= 0:
            raise ValueError("huber_delta must be positive")


def huber(a, b, delta: float = 1.0):
    """Quadratic within ``delta`` of zero residual, linear beyond."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    r = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    out = np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def huber_grad_b(a, b, delta: float = 1.0):
    """Derivative of huber(a, b) with respect to b."""
    return np.clip(np.asarray(b) - np.asarray(a), -delta, delta)


# -- reconstruction ----------------------------------------------------------

def reconstruction_loss(g: Graph, pred, target) -> Node:
    pred = g._node(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"reconstruction: {pred.shape} vs {target.shape}")
    diff = pred.value - target
    return g.custom("reconstruction", [pred], np.sum(diff * diff), lambda gr: [2.0 * float(gr) * diff])


# -- relational distillation ---------------------------------------------------

def _offdiag(n: int) -> np.ndarray:
    return ~np.eye(n, dtype=bool)


def _sq_dists(v: np.ndarray) -> np.ndarray:
    diff = v[:, None, :] - v[None, :, :]
    return np.einsum("ijd,ijd->ij", diff, diff)


def _check_pair(t: np.ndarray, s: np.ndarray, min_n: int):
    if t.ndim != 2 or s.ndim != 2 or t.shape[0] != s.shape[0]:
        raise ShapeError(f"teacher {t.shape} and student {s.shape} batches must align")
    if t.shape[0] < min_n:
        raise ShapeError(f"need at least {min_n} rows, got {t.shape[0]}")


def rkd_distance_loss(g: Graph, teacher, student, delta: float = 1.0) -> Node:
    """Huber between mean-normalised squared pairwise distances, all ordered pairs."""
    s = g._node(student)
    t = np.asarray(teacher, dtype=np.float64)
    sv = s.value
    _check_pair(t, sv, 2)
    n = sv.shape[0]
    off = _offdiag(n)
    n_pairs = n * (n - 1)
    Dt, Ds = _sq_dists(t), _sq_dists(sv)
    mu_t = Dt[off].sum() / n_pairs
    mu_s = Ds[off].sum() / n_pairs
    if mu_s <= 0:
        raise DegenerateBatchError("degenerate student batch")
    if mu_t <= 0:
        raise DegenerateBatchError("degenerate teacher batch")
    a, b = Dt / mu_t, Ds / mu_s
    value = np.sum(huber(a, b, delta)[off])

    def backward(gr):
        G = np.where(off, huber_grad_b(a, b, delta), 0.0)
        # through the normalisation: d b_kl / d D_ij = 1/mu - D_kl / (mu^2 N)
        dD = G / mu_s - np.sum(G * Ds) / (mu_s * mu_s * n_pairs)
        dD = np.where(off, dD, 0.0)
        sym = dD + dD.T
        grad = 2.0 * (sym.sum(axis=1)[:, None] * sv - sym @ sv)
        return [float(gr) * grad]

    return g.custom("rkd_distance", [s], value, backward)


def _unit_diffs(v: np.ndarray):
    """e[j, i] = (v_i - v_j) / |v_i - v_j| and the norms."""
    diff = v[None, :, :] - v[:, None, :]
    norm = np.sqrt(np.einsum("jid,jid->ji", diff, diff))
    e = diff / np.maximum(norm, COS_FLOOR)[:, :, None]
    return e, norm


def _angle_valid(n: int, *norms) -> np.ndarray:
    """valid[j, i, k]: i, j, k pairwise distinct and no coincident vertex pair."""
    idx = np.arange(n)
    valid = ((idx[None, :, None] != idx[:, None, None])
             & (idx[None, None, :] != idx[:, None, None])
             & (idx[None, :, None] != idx[None, None, :]))
    for norm in norms:
        ok = norm >= COINCIDENT
        valid &= ok[:, :, None] & ok[:, None, :]
    return valid


def rkd_angle_loss(g: Graph, teacher, student, delta: float = 1.0, stats: dict | None = None) -> Node:
    """Huber between vertex cosines of teacher and student, all ordered triples.

    For each ordered triple (i, j, k) the cosine is taken between
    ``v_i - v_j`` and ``v_k - v_j``. Triples with a coincident pair (in
    either batch) are skipped; more than half skipped is an error.
    """
    s = g._node(student)
    t = np.asarray(teacher, dtype=np.float64)
    sv = s.value
    _check_pair(t, sv, 3)
    n = sv.shape[0]
    et, nt = _unit_diffs(t)
    es, ns = _unit_diffs(sv)
    valid = _angle_valid(n, nt, ns)
    total = n * (n - 1) * (n - 2)
    skipped = total - int(valid.sum())
    if stats is not None:
        stats["skipped_triples"] = skipped
    if skipped > total / 2:
        raise DegenerateBatchError(f"{skipped} of {total} triples have coincident points")
    # C[j, i, k] = <e_ji, e_jk>
    Ct = et @ et.transpose(0, 2, 1)
    Cs = es @ es.transpose(0, 2, 1)
    value = np.sum(np.where(valid, huber(Ct, Cs, delta), 0.0))

    def backward(gr):
        W = np.where(valid, huber_grad_b(Ct, Cs, delta), 0.0)
        Wsym = W + W.transpose(0, 2, 1)
        # d/d u_ji of sum_k W[j,i,k] C[j,i,k] + sum_k W[j,k,i] C[j,k,i]
        proj = Wsym @ es - np.sum(Wsym * Cs, axis=2)[:, :, None] * es
        gu = proj / np.maximum(ns, COS_FLOOR)[:, :, None]
        # u_ji = s_i - s_j
        grad = gu.sum(axis=0) - gu.sum(axis=1)
        return [float(gr) * grad]

    return g.custom("rkd_angle", [s], value, backward)


def l1_embed_loss(g: Graph, teacher, student, weight, bias=None) -> Node:
    """Sum over rows of |t_i - ell0(s_i)| with ell0 the linear map (weight, bias)."""
    t = np.asarray(teacher, dtype=np.float64)
    mapped = g.linear(student, weight, bias)
    if mapped.shape != t.shape:
        raise ShapeError(f"mapped student {mapped.shape} vs teacher {t.shape}")
    r = mapped.value - t
    norm = np.sqrt(np.sum(r * r, axis=1))
    # subgradient 0 at a zero residual
    unit = np.where(norm[:, None] > 0, r / np.where(norm > 0, norm, 1.0)[:, None], 0.0)
    return g.custom("l1_embed", [mapped], norm.sum(), lambda gr: [float(gr) * unit])


@dataclass
class DistillTerms:
    total: Node
    l1: float
    l2: float
    l3: float


def distill_loss(g: Graph, teacher, student, weight, bias=None,
                 weights: DistillWeights = DistillWeights()) -> DistillTerms:
    """L1 + alpha * L2 + beta * L3; relational terms are skipped at zero weight."""
    s = g._node(student)
    l1 = l1_embed_loss(g, teacher, s, weight, bias)
    terms = [(l1, 1.0)]
    l2v = l3v = 0.0
    if weights.alpha > 0:
        l2 = rkd_distance_loss(g, teacher, s, weights.huber_delta)
        terms.append((l2, weights.alpha))
        l2v = float(l2.value)
    if weights.beta > 0:
        l3 = rkd_angle_loss(g, teacher, s, weights.huber_delta)
        terms.append((l3, weights.beta))
        l3v = float(l3.value)
    total = g.combine(terms)
    return DistillTerms(total, float(l1.value), l2v, l3v)


# -- classification ----------------------------------------------------------

def classification_loss(probs, labels) -> float:
    """Mean negative log-probability of the true class from probability rows."""
    p = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if p.ndim != 2 or labels.shape != (p.shape[0],):
        raise ShapeError(f"probs {p.shape} vs labels {labels.shape}")
    if not np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-9):
        raise ValueError("probability rows must sum to 1")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= p.shape[1]:
        raise ValueError(f"labels must be integers in [0, {p.shape[1]})")
    picked = p[np.arange(len(labels)), labels]
    with np.errstate(divide="ignore"):
        return float(-np.mean(np.log(picked)))


def classification_loss_node(g: Graph, logits, labels) -> Node:
    """Fused softmax + cross-entropy, the form used for training."""
    return g.softmax_cross_entropy(logits, labels)


# -- adversarial (WGAN-GP) ---------------------------------------------------

def gradient_penalty(g: Graph, critic, interp: np.ndarray, centered: bool = False) -> Node:
    """Penalty on the critic's input gradient at interpolates, differentiable in its weights.

    The input gradient ``v_i`` is computed by one backward pass. The weight
    gradient of ``|v_i|^2`` equals twice the weight gradient of the
    directional derivative of the critic along the fixed direction
    ``v_i``; that directional derivative is built by pushing ``v_i``
    forward through the critic's linear pieces (activation patterns held
    fixed) and is differentiated by the ordinary backward pass.

    ``centered=False`` gives ``mean |v|^2``; ``centered=True`` gives
    ``mean (|v| - 1)^2``.
    """
    v = critic.input_gradient(interp)
    B = v.shape[0]
    sq = np.sum(v.reshape(B, -1) ** 2, axis=1)
    direc = critic.directional(g, interp, v)  # B-vector node, value == sq
    norm = np.sqrt(sq)
    if centered:
        value = np.mean((norm - 1.0) ** 2)
        seed = np.where(norm > 0, 2.0 * (norm - 1.0) / np.where(norm > 0, norm, 1.0), 0.0) / B
    else:
        value = np.mean(sq)
        seed = np.full(B, 2.0 / B)
    return g.custom("gradient_penalty", [direc], value,
                    lambda gr: [float(gr) * seed.reshape(direc.shape)])


def critic_loss(g: Graph, critic, real: np.ndarray, fake: np.ndarray, gp_weight: float,
                rng: np.random.Generator, centered: bool = False) -> Node:
    """mean critic(fake) - mean critic(real) + gp_weight * penalty at interpolates."""
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if real.shape != fake.shape:
        raise ShapeError(f"real {real.shape} vs fake {fake.shape}")
    if gp_weight < 0:
        raise ValueError("gp_weight must be non-negative")
    f_out = critic.forward(g, g.input(fake))
    r_out = critic.forward(g, g.input(real))
    B = real.shape[0]
    if f_out.shape != (B, 1):
        raise ShapeError(f"critic must output one score per sample, got {f_out.shape}")
    terms = [(g.mean(f_out), 1.0), (g.mean(r_out), -1.0)]
    u = rng.random(B).reshape((B,) + (1,) * (real.ndim - 1))
    if gp_weight > 0:
        interp = u * real + (1.0 - u) * fake
        terms.append((gradient_penalty(g, critic, interp, centered), gp_weight))
    return g.combine(terms)


def generator_loss(g: Graph, critic, fake) -> Node:
    out = critic.forward(g, g._node(fake))
    return g.combine([(g.mean(out), -1.0)])


def adversarial_losses(critic, real, fake, gp_weight: float, rng: np.random.Generator,
                       centered: bool = False) -> tuple[float, float]:
    """Evaluate (critic_loss, generator_loss) for fixed batches."""
    c = critic_loss(Graph(), critic, real, fake, gp_weight, rng, centered)
    gl = generator_loss(Graph(), critic, fake)
    return float(c.value), float(gl.value)
