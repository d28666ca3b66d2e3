"""Straight-line reference implementations used as test oracles.

Plain Python loops over floats; nothing here imports from g2d, so an
agreement between the two is evidence rather than a tautology.
"""

import math


# -- convolution ---------------------------------------------------------------

def conv2d_loops(x, k, bias=None, stride=1, pad=0):
    """x: B x C x H x W nested lists or array, k: K x C x kh x kw."""
    B, C, H, W = len(x), len(x[0]), len(x[0][0]), len(x[0][0][0])
    K, kh, kw = len(k), len(k[0][0]), len(k[0][0][0])
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = [[[[0.0] * Wo for _ in range(Ho)] for _ in range(K)] for _ in range(B)]
    for b in range(B):
        for o in range(K):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if bias is None else float(bias[o])
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                y = i * stride + u - pad
                                z = j * stride + v - pad
                                if 0 <= y < H and 0 <= z < W:
                                    acc += float(x[b][c][y][z]) * float(k[o][c][u][v])
                    out[b][o][i][j] = acc
    return out


# -- losses --------------------------------------------------------------------

def huber(a, b, delta=1.0):
    r = abs(a - b)
    if r <= delta:
        return 0.5 * r * r
    return delta * (r - 0.5 * delta)


def sqdist(u, v):
    return sum((p - q) ** 2 for p, q in zip(u, v))


def rkd_distance(T, S, delta=1.0):
    n = len(T)
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    mu_t = sum(sqdist(T[i], T[j]) for i, j in pairs) / len(pairs)
    mu_s = sum(sqdist(S[i], S[j]) for i, j in pairs) / len(pairs)
    total = 0.0
    for i, j in pairs:
        total += huber(sqdist(T[i], T[j]) / mu_t, sqdist(S[i], S[j]) / mu_s, delta)
    return total


def vertex_cos(P, i, j, k):
    a = [p - q for p, q in zip(P[i], P[j])]
    b = [p - q for p, q in zip(P[k], P[j])]
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def rkd_angle(T, S, delta=1.0):
    n = len(T)
    total = 0.0
    for i in range(n):
        for j in range(n):
            for k in range(n):
                if i == j or j == k or i == k:
                    continue
                total += huber(vertex_cos(T, i, j, k), vertex_cos(S, i, j, k), delta)
    return total


def l1_embed(T, S, Wm, bvec=None):
    """sum_i |t_i - (s_i W + b)|; W is d_s x d_t."""
    total = 0.0
    for t, s in zip(T, S):
        sq = 0.0
        for c in range(len(t)):
            m = sum(s[r] * Wm[r][c] for r in range(len(s)))
            if bvec is not None:
                m += bvec[c]
            sq += (t[c] - m) ** 2
        total += math.sqrt(sq)
    return total


def distill(T, S, Wm, bvec, alpha, beta, delta=1.0):
    return l1_embed(T, S, Wm, bvec) + alpha * rkd_distance(T, S, delta) + beta * rkd_angle(T, S, delta)


def reconstruction(pred, target):
    total = 0.0
    for p, t in zip(pred, target):
        total += sum((a - b) ** 2 for a, b in zip(p, t))
    return total


def cross_entropy(logits, labels):
    total = 0.0
    for row, y in zip(logits, labels):
        m = max(row)
        lse = m + math.log(sum(math.exp(z - m) for z in row))
        total += lse - row[y]
    return total / len(labels)


# -- threshold metrics ---------------------------------------------------------

def candidates(scores):
    u = sorted(set(scores))
    out = [u[0] - 1.0]
    for a, b in zip(u, u[1:]):
        out.append((a + b) / 2.0)
    out.append(u[-1] + 1.0)
    return out


def rates(gen, imp, t):
    fmr = sum(1 for s in imp if s >= t) / len(imp)
    fnmr = sum(1 for s in gen if s < t) / len(gen)
    return fmr, fnmr


def best_accuracy(gen, imp):
    best, best_t = -1, None
    for t in candidates(gen + imp):
        correct = sum(1 for s in gen if s >= t) + sum(1 for s in imp if s < t)
        if correct > best:
            best, best_t = correct, t
    return best / (len(gen) + len(imp)), best_t


def equal_error_rate(gen, imp):
    ts = candidates(gen + imp)
    pts = [rates(gen, imp, t) for t in ts]
    for fmr, fnmr in pts:
        if fmr - fnmr == 0:
            return fmr
    last = max(i for i, (fmr, fnmr) in enumerate(pts) if fmr - fnmr > 0)
    (f0, n0), (f1, n1) = pts[last], pts[last + 1]
    d0, d1 = f0 - n0, f1 - n1
    lam = d0 / (d0 - d1)
    return ((f0 + lam * (f1 - f0)) + (n0 + lam * (n1 - n0))) / 2.0


def fnmr_at_fmr(gen, imp, ceiling):
    best, best_t = None, None
    for t in candidates(gen + imp):
        fmr, fnmr = rates(gen, imp, t)
        if fmr <= ceiling and (best is None or fnmr < best):
            best, best_t = fnmr, t
    return best, best_t


def fisher_ratio(gen, imp):
    mg, mi = sum(gen) / len(gen), sum(imp) / len(imp)
    vg = sum((s - mg) ** 2 for s in gen) / len(gen)
    vi = sum((s - mi) ** 2 for s in imp) / len(imp)
    return (mg - mi) ** 2 / (vg + vi)
