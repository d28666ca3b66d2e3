"""Finite-difference checks for every differentiable op and loss.

Each check draws ``n_points`` random float64 points and reports the worst
relative error ``|analytic - numeric| / max(1, |numeric|)`` of central
differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses
from .diffkernel import Graph, Parameter, grad_check
from .networks import Critic

TOLERANCE = 1e-5


@dataclass
class Check:
    name: str
    run: Callable[[np.random.Generator, float], float]  # (rng, corrupt factor) -> max rel err


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    points: int

    @property
    def ok(self) -> bool:
        return bool(self.max_rel_err <= TOLERANCE)


def _corrupt(g: Graph, node, factor: float):
    """Identity in value; scales the gradient flowing back through it."""
    if factor == 1.0:
        return node
    return g.custom("corrupted", [node], node.value, lambda gr: [gr * factor])


def _project(g: Graph, out, rng):
    """Scalar <out, R> with a fixed random R, so non-scalar ops can be checked."""
    r = rng.normal(size=out.shape)
    return g.sum(g.mul_const(out, r))


def input_check(shape, op, pos_scale: float = 1.0):
    """Check d/dx of ``op(g, x)`` projected to a scalar."""
    def run(rng, factor):
        x0 = rng.normal(size=shape) * pos_scale
        proj_seed = int(rng.integers(2**63))

        def build(g, x):
            # same projection on every re-evaluation of this point
            out = _corrupt(g, op(g, x), factor)
            return out if out.value.ndim == 0 else _project(g, out, np.random.default_rng(proj_seed))
        return grad_check(build, x0)
    return run


def param_check(make, step: float = 1e-6):
    """Check the gradient accumulated into a Parameter.

    ``make(rng)`` returns (param, loss_fn) where ``loss_fn(g, factor)``
    builds a scalar loss on a fresh graph.
    """
    def run(rng, factor):
        p, loss_fn = make(rng)
        p.zero_grad()
        g = Graph()
        g.backward(loss_fn(g, factor))
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            up = float(loss_fn(Graph(), 1.0).value)
            flat[i] = keep - step
            down = float(loss_fn(Graph(), 1.0).value)
            flat[i] = keep
            numeric.reshape(-1)[i] = (up - down) / (2 * step)
        return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
    return run


# -- the suite -----------------------------------------------------------------

def _linear_weight(rng):
    w = Parameter("w", rng.normal(size=(4, 3)))
    x = rng.normal(size=(5, 4))
    r = rng.normal(size=(5, 3))
    return w, lambda g, f: g.sum(g.mul_const(_corrupt(g, g.linear(x, w), f), r))


def _conv_kernel(rng):
    k = Parameter("k", rng.normal(size=(3, 2, 3, 3)))
    b = Parameter("b", rng.normal(size=3))
    x = rng.normal(size=(2, 2, 5, 5))
    r = rng.normal(size=(2, 3, 3, 3))
    return k, lambda g, f: g.sum(g.mul_const(_corrupt(g, g.conv2d(x, k, b, 2, 1), f), r))


def _critic_for(rng, centered):
    critic = Critic(width=2, image_size=8, seed=int(rng.integers(1 << 30)))
    interp = rng.normal(size=(3, 3, 8, 8))
    p = critic.params["c2.w"]

    def loss(g, f):
        return _corrupt(g, losses.gradient_penalty(g, critic, interp, centered), f)
    return p, loss


def _critic_head(rng):
    critic = Critic(width=2, image_size=8, seed=int(rng.integers(1 << 30)))
    interp = rng.normal(size=(3, 3, 8, 8))
    p = critic.params["head.w"]
    return p, lambda g, f: _corrupt(g, losses.gradient_penalty(g, critic, interp), f)


def _l1_map(rng):
    w = Parameter("w", rng.normal(size=(3, 4)))
    b = Parameter("b", rng.normal(size=4))
    s = rng.normal(size=(5, 3))
    t = rng.normal(size=(5, 4))
    return w, lambda g, f: _corrupt(g, losses.l1_embed_loss(g, t, s, w, b), f)


def _with_teacher(fn, n, d):
    """Build a loss of the student with a teacher batch fixed per point."""
    def op_factory(rng):
        t = rng.normal(size=(n, d))
        return lambda g, x: fn(g, t, x)
    return op_factory


def _fixed(factory, shape):
    def run(rng, factor):
        op = factory(rng)
        return input_check(shape, op)(rng, factor)
    return run


def _generator_loss_check(rng, factor):
    critic = Critic(width=2, image_size=8, seed=int(rng.integers(1 << 30)))
    return input_check((2, 3, 8, 8), lambda g, x: losses.generator_loss(g, critic, x))(rng, factor)


def suite() -> list[Check]:
    labels = np.array([0, 2, 1, 2])
    m = np.random.default_rng(5).random((2, 3, 4, 4)) < 0.5
    tgt = np.random.default_rng(6).normal(size=(2, 3, 4, 4))
    w = Parameter("w", np.random.default_rng(7).normal(size=(4, 3)))
    return [
        Check("linear", input_check((5, 4), lambda g, x: g.linear(x, w))),
        Check("linear.weight", param_check(_linear_weight)),
        Check("conv2d", input_check((2, 2, 5, 5), lambda g, x: g.conv2d(
            x, Parameter("k", np.linspace(-1, 1, 54).reshape(3, 2, 3, 3)), None, 1, 1))),
        Check("conv2d.stride2", input_check((2, 2, 6, 6), lambda g, x: g.conv2d(
            x, Parameter("k", np.linspace(-1, 1, 54).reshape(3, 2, 3, 3)), None, 2, 1))),
        Check("conv2d.kernel", param_check(_conv_kernel)),
        Check("relu", input_check((3, 7), lambda g, x: g.relu(x))),
        Check("sigmoid", input_check((3, 7), lambda g, x: g.sigmoid(x))),
        Check("mean_pool", input_check((2, 3, 3, 3), lambda g, x: g.mean_pool(x))),
        Check("upsample2x", input_check((2, 2, 3, 3), lambda g, x: g.upsample2x(x))),
        Check("residual_add", input_check((3, 4), lambda g, x: g.residual_add(x, g.relu(x)))),
        Check("flatten", input_check((2, 3, 2, 2), lambda g, x: g.flatten(x))),
        Check("mul_const", input_check((2, 3, 4, 4), lambda g, x: g.mul_const(x, m))),
        Check("sum", input_check((3, 4), lambda g, x: g.sum(g.sigmoid(x)))),
        Check("mean", input_check((3, 4), lambda g, x: g.mean(g.sigmoid(x)))),
        Check("combine", input_check((3, 4), lambda g, x: g.combine(
            [(g.sum(g.sigmoid(x)), 0.7), (g.mean(g.relu(x)), -1.3)]))),
        Check("softmax_cross_entropy", input_check((4, 3), lambda g, x: g.softmax_cross_entropy(x, labels))),
        Check("reconstruction_loss", input_check((2, 3, 4, 4), lambda g, x: losses.reconstruction_loss(g, x, tgt))),
        Check("rkd_distance_loss", _fixed(_with_teacher(losses.rkd_distance_loss, 5, 3), (5, 3))),
        Check("rkd_angle_loss", _fixed(_with_teacher(losses.rkd_angle_loss, 5, 3), (5, 3))),
        Check("l1_embed_loss", _fixed(_with_teacher(
            lambda g, t, x: losses.l1_embed_loss(g, t, x, Parameter("m", np.eye(3))), 5, 3), (5, 3))),
        Check("l1_embed_loss.map", param_check(_l1_map)),
        Check("distill_loss", _fixed(_with_teacher(
            lambda g, t, x: losses.distill_loss(g, t, x, Parameter("m", np.eye(3)),
                                                weights=losses.DistillWeights(0.3, 0.5)).total, 5, 3), (5, 3))),
        Check("classification_loss", input_check((4, 3), lambda g, x: losses.classification_loss_node(g, x, labels))),
        Check("generator_loss", _generator_loss_check),
        Check("gradient_penalty", param_check(lambda rng: _critic_for(rng, False))),
        Check("gradient_penalty.centered", param_check(lambda rng: _critic_for(rng, True))),
        Check("gradient_penalty.head", param_check(_critic_head)),
    ]


def run_suite(n_points: int = 10, seed: int = 0, corrupt: str | None = None,
              checks: list[Check] | None = None) -> tuple[list[CheckResult], float]:
    """Run every check at ``n_points`` random points; ``corrupt`` names a check whose
    backward is scaled by 1.01 (a fixture for exercising the failure path)."""
    checks = suite() if checks is None else checks
    names = [c.name for c in checks]
    if corrupt is not None and corrupt not in names:
        raise KeyError(f"no gradient check named {corrupt!r}")
    start = time.perf_counter()
    out = []
    for c in checks:
        rng = np.random.default_rng(np.random.SeedSequence([seed, names.index(c.name)]))
        factor = 1.01 if c.name == corrupt else 1.0
        worst = max(c.run(rng, factor) for _ in range(n_points))
        out.append(CheckResult(c.name, worst, n_points))
    return out, time.perf_counter() - start


def format_table(results: list[CheckResult]) -> str:
    lines = ["op,max_rel_err,status"]
    lines += [f"{r.name},{r.max_rel_err:.3e},{'pass' if r.ok else 'FAIL'}" for r in results]
    return "\n".join(lines)
