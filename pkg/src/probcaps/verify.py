"""Self-checks shipped with the library: a finite-difference gradient suite
and brute-force enumeration oracles.

The oracles here re-derive the quantities they check with plain numpy
loops (explicit realized-matrix products, explicit sums over every
selection assignment) instead of calling into the model code.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.integrate import trapezoid

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import ConcreteParams, relaxed_bernoulli_log_prob
from .inference import VariationalState, draw_noise, elbo_estimate
from .model import (
    LayerTensors,
    LatentState,
    LayerParams,
    ModelParams,
    child_conditional_log_prob,
    log_joint,
    log_joint_terms,
    model_tensors,
    render_latents,
)
from .poses import compose_offsets, make_offsets
from .renderer import Frame, image_log_likelihood, render

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return math.isfinite(self.value) and self.value < self.tolerance


# ---------------------------------------------------------------------------
# small random models
# ---------------------------------------------------------------------------

def random_layer(rng: np.random.Generator, n_parents: int, n_children: int, pose_scale: float = 0.3) -> LayerParams:
    rho = rng.uniform(0.1, 2.0, (n_parents + 1, n_children))
    gamma = rng.uniform(0.05, 0.95, (n_parents + 1, n_children))
    M = rng.normal(0.0, pose_scale, (n_parents + 1, n_children, 2, 3))
    M[0] = 0.0
    c = rng.uniform(0.2, 1.0, (n_parents + 1, n_children))
    c[0] = 10.0
    return LayerParams(rho, gamma, M, c)


def random_model(
    rng: np.random.Generator,
    n_parents: int = 2,
    n_children: int = 2,
    template_hw=(5, 5),
    canvas_hw=(7, 7),
    sigma: float = 0.3,
) -> ModelParams:
    n = n_children
    params = ModelParams(
        layers=[random_layer(rng, n_parents, n_children)],
        template_color=rng.uniform(0.1, 0.9, (n,) + tuple(template_hw)),
        template_alpha=rng.uniform(0.2, 0.9, (n,) + tuple(template_hw)),
        canvas_hw=canvas_hw,
        frame_scale=template_hw[0] / 2.0,
        sigma=sigma,
    )
    params.validate()
    return params


# ---------------------------------------------------------------------------
# finite-difference suite
# ---------------------------------------------------------------------------

def _primitive_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[Tensor], Tensor], np.ndarray]]:
    def vec(n=6, lo=-2.0, hi=2.0):
        return rng.uniform(lo, hi, n)

    mat = rng.normal(size=(3, 4))
    other = rng.normal(size=(4, 2))
    w = rng.normal(size=6)
    idx = np.array([0, 2, 2, 5, 1])
    src = rng.uniform(0, 1, (2, 5, 6))
    probe = rng.normal(size=(3, 6))
    return [
        ("add", lambda x: ad.sum_(ad.add(x, w) * w), vec()),
        ("subtract", lambda x: ad.sum_(ad.subtract(w, x) * x), vec()),
        ("multiply", lambda x: ad.sum_(x * x * w), vec()),
        ("divide", lambda x: ad.sum_(ad.divide(w, x) + x / 3.0), vec(lo=0.5, hi=2.0)),
        ("matmul", lambda x: ad.sum_(ad.matmul(ad.reshape(x, (3, 4)), other) * 0.7), mat.reshape(-1)),
        ("exp", lambda x: ad.sum_(ad.exp(x) * w), vec()),
        ("log", lambda x: ad.sum_(ad.log(x) * w), vec(lo=0.2, hi=3.0)),
        ("sigmoid", lambda x: ad.sum_(ad.sigmoid(x) * w), vec()),
        ("softmax", lambda x: ad.sum_(ad.softmax(ad.reshape(x, (2, 3)), axis=1) * ad.reshape(Tensor(w), (2, 3))), vec()),
        ("logsumexp", lambda x: ad.sum_(ad.logsumexp(ad.reshape(x, (2, 3)), axis=0) * w[:3]), vec()),
        ("sum", lambda x: ad.sum_(ad.sum_(ad.reshape(x, (2, 3)), axis=1) ** 2), vec()),
        ("mean", lambda x: ad.mean(x * x), vec()),
        ("broadcast", lambda x: ad.sum_(ad.broadcast_to(ad.reshape(x, (1, 6)), (3, 6)) * probe), vec()),
        ("gather", lambda x: ad.sum_(ad.gather(x, idx) ** 2), vec()),
        ("clamp", lambda x: ad.sum_(ad.clamp(x, -1.0, 1.0) * w), np.array([-1.7, -0.4, 0.3, 0.9, 1.5, 0.05])),
        ("square", lambda x: ad.sum_(ad.square(x) * w), vec()),
        ("sqrt", lambda x: ad.sum_(ad.sqrt(x) * w), vec(lo=0.2, hi=3.0)),
        ("softplus", lambda x: ad.sum_(ad.softplus(x) * w), vec()),
        ("log_sigmoid", lambda x: ad.sum_(ad.log_sigmoid(x) * w), vec()),
        (
            "grid_sample",
            lambda x: ad.sum_(ad.grid_sample(src, ad.reshape(x[:6], (2, 3)), ad.reshape(x[6:], (2, 3))) ** 2),
            np.concatenate([rng.uniform(0.1, 4.9, 6) + 0.013, rng.uniform(0.1, 3.9, 6) + 0.017]),
        ),
        (
            "grid_sample.source",
            lambda x: ad.sum_(ad.grid_sample(ad.reshape(x, (1, 5, 6)), Tensor(np.array([[1.3, 2.6], [4.2, 0.4]])), Tensor(np.array([[0.7, 3.1], [2.5, 1.9]]))) * 1.3),
            rng.uniform(0, 1, 30),
        ),
    ]


def gradcheck_suite(seed: int = 0, eps: float = 1e-5) -> list[CheckResult]:
    """Finite-difference checks for every differentiable component.

    Covers the autodiff primitives, pose composition, the renderer and
    pixel likelihood, the selection-marginalised child conditional (every
    argument and every layer parameter) and the ELBO with frozen noise
    (every variational array and every trainable model parameter group).
    """
    rng = np.random.default_rng(seed)
    results: list[CheckResult] = []

    def check(name, f, x):
        results.append(CheckResult(name, ad.finite_difference_check(f, x, eps), GRAD_TOL))

    for name, f, x in _primitive_cases(rng):
        check(f"primitive.{name}", f, x)

    # poses
    left = rng.normal(0, 0.3, (2, 3))
    right = rng.normal(0, 0.3, (2, 3))
    probe = rng.normal(size=(2, 3))
    check("poses.compose.parent", lambda x: ad.sum_(compose_offsets(ad.reshape(x, (2, 3)), right) * probe), left.reshape(-1))
    check("poses.compose.child", lambda x: ad.sum_(compose_offsets(left, ad.reshape(x, (2, 3))) * probe), right.reshape(-1))

    # renderer + likelihood
    params = random_model(rng, 2, 2)
    sources = params.sources()
    frame = params.frame
    offsets = make_offsets(rng.uniform(-0.3, 0.3, 2), rng.uniform(-0.3, 0.3, 2), rng.uniform(-0.3, 0.3, 2), rng.uniform(0.8, 1.2, 2))
    offsets = offsets + rng.normal(0, 0.02, offsets.shape)
    pres = rng.uniform(0.2, 0.9, 2)
    image = rng.uniform(0, 1, params.canvas_hw)

    def lik(src, off, t):
        mean, _ = render(src, off, t, frame)
        return image_log_likelihood(image, mean, 0.3)

    check("renderer.poses", lambda x: lik(sources, ad.reshape(x, (2, 2, 3)), pres), offsets.reshape(-1))
    check("renderer.presences", lambda x: lik(sources, offsets, x), pres)
    check("renderer.templates", lambda x: lik(ad.reshape(x, sources.shape), offsets, pres), sources.reshape(-1))

    # child conditional
    layer = params.layers[0]
    B, P, C = 2, layer.n_parents, layer.n_children
    pt = rng.uniform(0.1, 0.9, (B, P))
    pA = rng.normal(0, 0.3, (B, P, 2, 3))
    ct = rng.uniform(0.1, 0.9, (B, C))
    cA = rng.normal(0, 0.3, (B, C, 2, 3))
    weights = rng.normal(size=(B, C))

    def cond(**kw):
        args = dict(child_t=ct, child_A=cA, parent_t=pt, parent_A=pA)
        lay = kw.pop("layer", layer)
        args.update(kw)
        return ad.sum_(child_conditional_log_prob(args["child_t"], args["child_A"], args["parent_t"], args["parent_A"], lay) * weights)

    check("child_conditional.child_A", lambda x: cond(child_A=ad.reshape(x, cA.shape)), cA.reshape(-1))
    check("child_conditional.parent_A", lambda x: cond(parent_A=ad.reshape(x, pA.shape)), pA.reshape(-1))
    check("child_conditional.child_t", lambda x: cond(child_t=ad.reshape(x, ct.shape)), ct.reshape(-1))
    check("child_conditional.parent_t", lambda x: cond(parent_t=ad.reshape(x, pt.shape)), pt.reshape(-1))

    def with_layer(name, x):
        parts = {k: Tensor(getattr(layer, k)) for k in ("rho", "gamma", "M", "c")}
        parts[name] = ad.reshape(x, getattr(layer, name).shape)
        return cond(layer=LayerTensors(parts["rho"], parts["gamma"], parts["M"], parts["c"], layer.lambda_off))

    for name in ("rho", "gamma", "M", "c"):
        check(f"child_conditional.{name}", lambda x, name=name: with_layer(name, x), getattr(layer, name).reshape(-1))

    # ELBO with frozen noise: variational arrays
    q = VariationalState(
        logits=[rng.normal(0, 1, (B, P)), rng.normal(0, 1, (B, C))],
        pose_means=[rng.normal(0, 0.2, (B, P, 2, 3)), rng.normal(0, 0.2, (B, C, 2, 3))],
        mode="full",
        pose_log_scales=[rng.uniform(-3, -1.5, (B, P, 2, 3)), rng.uniform(-3, -1.5, (B, C, 2, 3))],
        coupling=[rng.normal(0, 0.5, (B, P, C))],
    )
    images = rng.uniform(0, 1, (B,) + params.canvas_hw)
    noise = draw_noise(q, 2, rng)
    arrays = q.arrays()
    for name, arr in arrays.items():
        def f(x, name=name, shape=arr.shape):
            leaves = {name: ad.reshape(x, shape)}
            return elbo_estimate(params, q, images, noise=noise, leaves=leaves).objective
        check(f"elbo.q.{name}", f, arr.reshape(-1))

    # ELBO with frozen noise: model parameter groups (unconstrained leaves)
    for group in ("rho", "gamma", "M", "c", "templates", "sigma"):
        mt = model_tensors(params, trainable=(group,))
        for leaf_name, leaf in mt.leaves.items():
            def f(x, group=group, leaf_name=leaf_name, shape=leaf.shape):
                view = model_tensors(params, trainable=(group,))
                _replace_leaf(view, leaf_name, ad.reshape(x, shape))
                return elbo_estimate(view, q, images, noise=noise).objective
            check(f"elbo.theta.{leaf_name}", f, leaf.data.reshape(-1))
    return results


def _replace_leaf(view, leaf_name: str, value: Tensor) -> None:
    """Rebuild the constrained tensor of ``view`` from a new raw value."""
    params = view.params
    if leaf_name == "templates":
        view.sources = ad.sigmoid(value)
    elif leaf_name == "sigma":
        view.sigma = ad.softplus(value) + params.sigma_min
    else:
        k, name = leaf_name.split(".")
        k = int(k.removeprefix("layer"))
        layer, lt = params.layers[k], view.layers[k]
        if name == "rho":
            lt.rho = ad.concatenate([Tensor(layer.rho[:1]), ad.softplus(value)], axis=0)
        elif name == "gamma":
            lt.gamma = ad.sigmoid(value)
        elif name == "M":
            lt.M = ad.concatenate([Tensor(layer.M[:1]), value], axis=0)
        elif name == "c":
            lt.c = ad.concatenate([Tensor(layer.c[:1]), ad.softplus(value) + params.c_min], axis=0)
    view.leaves[leaf_name] = value


# ---------------------------------------------------------------------------
# enumeration oracles
# ---------------------------------------------------------------------------

def _np_log_normal(x, mean, scale) -> float:
    z = (np.asarray(x) - mean) / scale
    return float(np.sum(-0.5 * z * z - np.log(scale) - 0.5 * math.log(2 * math.pi)))


def _np_log_bern(x, p, eps=1e-7) -> float:
    p = min(max(p, eps), 1 - eps)
    return x * math.log(p) + (1 - x) * math.log(1 - p)


def _h(offset) -> np.ndarray:
    m = np.eye(3)
    m[:2] += offset
    return m


def brute_force_layer_log_prob(child_t, child_A, parent_t, parent_A, layer: LayerParams) -> float:
    """log sum over every joint selection vector of the unmarginalised joint.

    One image, unbatched arrays.  Enumerates all (P+1)^C assignments and
    multiplies the per-child factors explicitly.
    """
    P, C = layer.n_parents, layer.n_children
    full_t = np.concatenate([[1.0], parent_t])
    full_A = np.concatenate([np.zeros((1, 2, 3)), parent_A])
    log_terms = []
    for s in itertools.product(range(P + 1), repeat=C):
        total = 0.0
        for j, i in enumerate(s):
            w = layer.rho[:, j] * full_t
            if w[i] <= 0:
                total = -math.inf
                break
            total += math.log(w[i] / w.sum())
            total += _np_log_bern(child_t[j], layer.gamma[i, j])
            mean = (_h(full_A[i]) @ _h(layer.M[i, j]))[:2] - np.eye(2, 3)
            total += child_t[j] * _np_log_normal(child_A[j], mean, layer.c[i, j])
            total += (1 - child_t[j]) * _np_log_normal(child_A[j], 0.0, layer.lambda_off)
        log_terms.append(total)
    return float(np.logaddexp.reduce(log_terms))


def brute_force_prior_terms(params: ModelParams, latents: LatentState, index: int = 0) -> float:
    """Top prior plus enumerated child conditionals for one image (no pixels)."""
    t0 = np.asarray(latents.presences[0])[index]
    A0 = np.asarray(latents.poses[0])[index]
    total = sum(_np_log_bern(t, params.p) for t in t0) + _np_log_normal(A0, 0.0, 1.0)
    for k, layer in enumerate(params.layers):
        total += brute_force_layer_log_prob(
            np.asarray(latents.presences[k + 1])[index],
            np.asarray(latents.poses[k + 1])[index],
            np.asarray(latents.presences[k])[index],
            np.asarray(latents.poses[k])[index],
            layer,
        )
    return total


def marginalization_oracle(n_seeds: int = 100, max_parents: int = 3, max_children: int = 3, seed: int = 0) -> CheckResult:
    """Worst |analytic - enumerated| over random models of size <= 3x3.

    Every size pair is visited; half the draws use hard presences and half
    relaxed ones.  Latents are drawn near the model so both branches of
    every factor carry weight.
    """
    worst = 0.0
    sizes = [(P, C) for P in range(1, max_parents + 1) for C in range(1, max_children + 1)]
    for n in range(n_seeds):
        rng = np.random.default_rng([seed, n])
        P, C = sizes[n % len(sizes)]
        params = random_model(rng, P, C, template_hw=(3, 3), canvas_hw=(4, 4))
        B = 2
        if n % 2 == 0:
            ts = [(rng.random((B, P)) < 0.6).astype(float), (rng.random((B, C)) < 0.6).astype(float)]
        else:
            ts = [rng.uniform(0.01, 0.99, (B, P)), rng.uniform(0.01, 0.99, (B, C))]
        As = [rng.normal(0, 0.5, (B, P, 2, 3)), rng.normal(0, 0.5, (B, C, 2, 3))]
        latents = LatentState(ts, As)
        image = rng.uniform(0, 1, (B,) + params.canvas_hw)
        terms = log_joint_terms(params, latents, image)
        analytic = (log_joint(params, latents, image) - terms["likelihood"]).data
        for b in range(B):
            worst = max(worst, abs(analytic[b] - brute_force_prior_terms(params, latents, b)))
    return CheckResult("oracle.marginalization", worst, 1e-9)


# ---------------------------------------------------------------------------
# enumerable ELBO toys
# ---------------------------------------------------------------------------

@dataclass
class Toy:
    """A model whose presences can be enumerated, with poses held fixed."""

    params: ModelParams
    image: np.ndarray
    poses: list[np.ndarray]

    @property
    def sizes(self) -> list[int]:
        return self.params.layer_sizes

    def configurations(self):
        sizes = self.sizes
        for bits in itertools.product([0.0, 1.0], repeat=sum(sizes)):
            out, pos = [], 0
            for n in sizes:
                out.append(np.array(bits[pos:pos + n]).reshape(1, n))
                pos += n
            yield out

    def log_joints(self) -> list[tuple[list[np.ndarray], float]]:
        return [(ts, float(log_joint(self.params, LatentState(ts, self.poses), self.image).data[0])) for ts in self.configurations()]

    def log_evidence(self) -> float:
        return float(np.logaddexp.reduce([v for _, v in self.log_joints()]))

    def posterior_state(self) -> VariationalState:
        """The exact discrete posterior written as q(t^1) q(t^0 | t^1).

        Needs exactly one top capsule and one template capsule.
        """
        if self.sizes != [1, 1]:
            raise ValueError("posterior_state needs a 1 + 1 capsule toy")
        table = {(int(ts[0][0, 0]), int(ts[1][0, 0])): v for ts, v in self.log_joints()}
        logz = self.log_evidence()
        post = {k: math.exp(v - logz) for k, v in table.items()}

        def logit(a, b):  # log(a / b), allowing either to underflow a little
            return math.log(max(a, 1e-300)) - math.log(max(b, 1e-300))

        l1 = logit(post[0, 1] + post[1, 1], post[0, 0] + post[1, 0])
        l0_off = logit(post[1, 0], post[0, 0])
        l0_on = logit(post[1, 1], post[0, 1])
        return VariationalState(
            [np.array([[l0_off]]), np.array([[l1]])],
            [p.copy() for p in self.poses],
            coupling=[np.array([[[l0_on - l0_off]]])],
        )


def make_toy(rng: np.random.Generator, sigma: float = 0.5) -> Toy:
    """One top capsule and one template capsule with fixed random poses."""
    params = random_model(rng, 1, 1, template_hw=(5, 5), canvas_hw=(6, 6), sigma=sigma)
    A0 = rng.normal(0, 0.2, (1, 1, 2, 3))
    A1 = compose_offsets(A0, params.layers[0].M[1:2]).data + rng.normal(0, 0.2, (1, 1, 2, 3))
    t = [(rng.random((1, 1)) < 0.5).astype(float), (rng.random((1, 1)) < 0.7).astype(float)]

    clean = render_latents(params, LatentState(t, [A0, A1]))
    image = clean + sigma * rng.standard_normal(clean.shape)
    return Toy(params, image, [A0, A1])


def elbo_bound_oracle(n_q: int = 50, n_samples: int = 2000, seed: int = 0) -> tuple[CheckResult, CheckResult]:
    """ELBO <= log evidence for random q's, and equality at the exact posterior.

    Presences are drawn as hard Bernoulli variables so the estimator is an
    unbiased estimate of a bound on the discrete evidence.  Returns the
    worst normalised violation ``(ELBO - logZ) / (3 SE)`` across random q's
    (must stay below 1), and the worst ``|ELBO - logZ| - 3 SE`` at the
    exact posterior (must stay below a round-off tolerance).
    """
    rng = np.random.default_rng(seed)
    worst_bound = -math.inf
    worst_eq = -math.inf
    for n in range(n_q):
        toy = make_toy(rng)
        logz = toy.log_evidence()
        q = VariationalState(
            [rng.normal(0, 2, (1, 1)), rng.normal(0, 2, (1, 1))],
            [p.copy() for p in toy.poses],
            coupling=[rng.normal(0, 2, (1, 1, 1))] if n % 2 else None,
        )
        est = elbo_estimate(toy.params, q, toy.image, n_samples=n_samples, rng=rng, presence="discrete")
        se = float(est.std_error[0])
        gap = (est.value - logz) / (3 * se) if se > 0 else (0.0 if est.value <= logz + 1e-9 else math.inf)
        worst_bound = max(worst_bound, gap)
        exact = toy.posterior_state()
        est = elbo_estimate(toy.params, exact, toy.image, n_samples=n_samples, rng=rng, presence="discrete")
        se = float(est.std_error[0])
        worst_eq = max(worst_eq, abs(est.value - logz) - 3 * se)
    return (
        CheckResult("oracle.elbo_bound (max (ELBO-logZ)/3SE)", worst_bound, 1.0),
        CheckResult("oracle.elbo_equality (max |ELBO-logZ|-3SE)", worst_eq, 1e-8),
    )


def concrete_quadrature(tau: float, logit: float, n: int = 200001) -> float:
    """Integral of the binary Concrete density over (0, 1) (trapezoid in logit space)."""
    y = np.linspace(-40, 40, n)
    x = 1.0 / (1.0 + np.exp(-y))
    log_p = relaxed_bernoulli_log_prob(Tensor(np.clip(x, 1e-300, 1 - 1e-16)), ConcreteParams(logit, tau)).data
    jac = x * (1 - x)
    return float(trapezoid(np.exp(log_p) * jac, y))


def oracle_suite(seed: int = 0) -> list[CheckResult]:
    out = [marginalization_oracle(seed=seed)]
    out.extend(elbo_bound_oracle(seed=seed))
    for tau, logit in ((1.0, 0.0), (0.5, 1.3), (2.0, -1.0)):
        out.append(CheckResult(f"oracle.concrete_normalisation(tau={tau}, L={logit})", abs(concrete_quadrature(tau, logit) - 1.0), 1e-3))
    return out


# ---------------------------------------------------------------------------
# parameter recovery
# ---------------------------------------------------------------------------

@dataclass
class RecoveryReport:
    """Errors of learned parameters against the generating ones.

    Learned parents are matched to true parents by a minimum-cost
    assignment.  Errors are reported on the support pairs (true
    ``rho_ij`` above ``support_threshold``), the pairs whose parameters
    the data actually constrain.  ``rho`` is compared as the attachment
    probability ``rho_ij / (rho_ij + rho_0j)`` against the dummy, because
    a common rescaling of a child's column leaves the model unchanged.
    """

    matching: np.ndarray
    support: np.ndarray
    rho_error: np.ndarray
    gamma_error: np.ndarray
    M_error: np.ndarray

    @property
    def max_rho_error(self) -> float:
        return float(self.rho_error[self.support].max())

    @property
    def max_gamma_error(self) -> float:
        return float(self.gamma_error[self.support].max())

    @property
    def max_M_error(self) -> float:
        return float(self.M_error[self.support].max())

    def within(self, rho_tol: float = 0.15, gamma_tol: float = 0.15, M_tol: float = 0.1) -> bool:
        return self.max_rho_error <= rho_tol and self.max_gamma_error <= gamma_tol and self.max_M_error <= M_tol


def attachment_probability(layer: LayerParams) -> np.ndarray:
    """``rho_ij / (rho_ij + rho_0j)`` for the real parents, shape ``(P, C)``."""
    return layer.rho[1:] / (layer.rho[1:] + layer.rho[:1])


def parameter_recovery(learned: ModelParams, truth: ModelParams, support_threshold: float = 0.5) -> RecoveryReport:
    from scipy.optimize import linear_sum_assignment

    L, T = learned.layers[0], truth.layers[0]
    if L.rho.shape != T.rho.shape:
        raise ValueError("learned and true models have different layer shapes")
    support = T.rho[1:] > support_threshold
    rho_err = np.abs(attachment_probability(L)[:, None] - attachment_probability(T)[None])  # (learned, true, C)
    gamma_err = np.abs(L.gamma[1:, None] - T.gamma[None, 1:])
    M_err = np.linalg.norm(L.M[1:, None] - T.M[None, 1:], axis=(-2, -1))
    cost = np.where(support[None], rho_err + gamma_err + M_err, 0.0).sum(axis=-1)
    rows, cols = linear_sum_assignment(cost)
    order = rows[np.argsort(cols)]  # learned parent matched to each true parent
    pick = lambda e: e[order, np.arange(len(order))]
    return RecoveryReport(order, support, pick(rho_err), pick(gamma_err), pick(M_err))
