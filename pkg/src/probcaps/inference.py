"""Per-image variational inference with the selection variables summed out.

The variational family follows the layerwise structure of the bound:
presences get binary Concrete factors, poses get either point masses
(``"delta"`` mode, a partially variational bound) or diagonal Gaussians
(``"full"`` mode).  Optional coupling weights let the presence logits of
layer ``k`` depend linearly on the sampled presences of layer ``k + 1``,
i.e. ``q(t^k | t^{k+1})``; they default to zero.

All routines are batched: a state holds ``B`` images' parameters and the
objective is the sum of independent per-image bounds.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import signal, special

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import (
    ConcreteParams,
    GaussianParams,
    logistic_noise,
    normal_log_prob,
    relaxed_bernoulli_log_prob_presample,
)
from .model import (
    LatentState,
    ModelParams,
    ModelTensors,
    child_conditional_log_prob,
    log_joint_terms,
    model_tensors,
    top_prior_log_prob,
)
from .poses import compose_offsets, invert_offsets, make_offsets
from .renderer import Canvas, Frame, render, safe_divide, warp_sources

POSE_MODES = ("delta", "full")
PRESENCE_MODES = ("relaxed", "discrete")


class ElboError(FloatingPointError):
    def __init__(self, term: str, message: str = ""):
        self.term = term
        super().__init__(f"non-finite ELBO term {term!r}" + (f": {message}" if message else ""))


class FitDivergedError(FloatingPointError):
    def __init__(self, step: int, trace: "ElboTrace"):
        self.step = step
        self.trace = trace
        super().__init__(f"free-form fit diverged at step {step}")


# ---------------------------------------------------------------------------
# variational state
# ---------------------------------------------------------------------------

@dataclass
class VariationalState:
    """Variational parameters for a batch of images.

    ``logits[k]``: ``(B, n_k)`` Concrete logits; ``pose_means[k]``:
    ``(B, n_k, 2, 3)`` point values (delta) or Gaussian means (full);
    ``pose_log_scales[k]``: same shape, used in full mode only;
    ``coupling[k]`` for ``k < n_layers - 1``: ``(B, n_k, n_{k+1})``.
    """

    logits: list[np.ndarray]
    pose_means: list[np.ndarray]
    mode: str = "delta"
    pose_log_scales: list[np.ndarray] | None = None
    coupling: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.mode not in POSE_MODES:
            raise ValueError(f"pose mode must be one of {POSE_MODES}, got {self.mode!r}")
        self.logits = [np.asarray(v, dtype=np.float64) for v in self.logits]
        self.pose_means = [np.asarray(v, dtype=np.float64) for v in self.pose_means]
        if self.mode == "full":
            if self.pose_log_scales is None:
                self.pose_log_scales = [np.full(m.shape, math.log(0.05)) for m in self.pose_means]
            self.pose_log_scales = [np.asarray(v, dtype=np.float64) for v in self.pose_log_scales]

    @property
    def batch_size(self) -> int:
        return self.logits[0].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.logits)

    def arrays(self) -> dict[str, np.ndarray]:
        """Named optimisable arrays."""
        out = {}
        for k in range(self.n_layers):
            out[f"logits{k}"] = self.logits[k]
            out[f"pose{k}"] = self.pose_means[k]
            if self.mode == "full":
                out[f"log_scale{k}"] = self.pose_log_scales[k]
        if self.coupling is not None:
            for k, w in enumerate(self.coupling):
                out[f"coupling{k}"] = w
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], mode: str) -> "VariationalState":
        n = sum(1 for k in arrays if k.startswith("logits"))
        coupling = None
        if any(k.startswith("coupling") for k in arrays):
            coupling = [arrays[f"coupling{k}"] for k in range(n - 1)]
        return cls(
            logits=[arrays[f"logits{k}"] for k in range(n)],
            pose_means=[arrays[f"pose{k}"] for k in range(n)],
            mode=mode,
            pose_log_scales=[arrays[f"log_scale{k}"] for k in range(n)] if mode == "full" else None,
            coupling=coupling,
        )

    def copy(self) -> "VariationalState":
        return VariationalState.from_arrays({k: v.copy() for k, v in self.arrays().items()}, self.mode)

    def select(self, index) -> "VariationalState":
        return VariationalState.from_arrays({k: v[index] for k, v in self.arrays().items()}, self.mode)

    def with_mode(self, mode: str, log_scale: float = math.log(0.05)) -> "VariationalState":
        arrays = {k: v.copy() for k, v in self.arrays().items() if not k.startswith("log_scale")}
        if mode == "full":
            for k in range(self.n_layers):
                if self.mode == "full":
                    arrays[f"log_scale{k}"] = self.pose_log_scales[k].copy()
                else:
                    arrays[f"log_scale{k}"] = np.full(self.pose_means[k].shape, log_scale)
        return VariationalState.from_arrays(arrays, mode)

    def mean_presences(self) -> list[np.ndarray]:
        """sigmoid(logit) per layer, ignoring any coupling."""
        return [special.expit(l) for l in self.logits]

    def to_document(self) -> dict:
        arrays = self.arrays()
        return {
            "version": 1,
            "kind": "variational_state",
            "shapes": {"n_layers": self.n_layers, "arrays": {k: list(v.shape) for k, v in arrays.items()}},
            "hyperparams": {"mode": self.mode},
            "arrays": arrays,
        }

    @classmethod
    def from_document(cls, doc: dict) -> "VariationalState":
        shapes = doc["shapes"]["arrays"]
        arrays = {k: np.asarray(v, dtype=np.float64).reshape(shapes[k]) for k, v in doc["arrays"].items()}
        return cls.from_arrays(arrays, doc["hyperparams"]["mode"])

    @classmethod
    def from_latents(cls, latents: LatentState, presence_logit: float = 6.0, mode: str = "delta") -> "VariationalState":
        """Point the state at given latents: logits +/-presence_logit, poses at the values."""
        logits = [np.where(np.asarray(t) > 0.5, presence_logit, -presence_logit).astype(np.float64) for t in latents.presences]
        return cls(logits, [np.array(a, dtype=np.float64) for a in latents.poses], mode=mode)


def empty_state(params: ModelParams, batch: int, mode: str = "delta") -> VariationalState:
    sizes = params.layer_sizes
    return VariationalState([np.zeros((batch, n)) for n in sizes], [np.zeros((batch, n, 2, 3)) for n in sizes], mode=mode)


# ---------------------------------------------------------------------------
# initialisation
# ---------------------------------------------------------------------------

def _rotated_kernels(params: ModelParams, angles: Sequence[float]):
    """Premultiplied templates rotated about their centre: ``(A, C, h', w')``."""
    h, w = params.template_hw
    side = int(math.ceil(math.hypot(h, w))) | 1
    local = Frame(params.frame.scale, (h, w), (side, side))
    sources = params.sources()
    C = params.n_templates
    out = []
    for angle in angles:
        rot = make_offsets(0.0, 0.0, angle, 1.0)
        warped = warp_sources(sources, np.broadcast_to(rot, (C, 2, 3)), local).data
        out.append(warped[:, 0] * warped[:, 1])
    return np.stack(out)


def match_templates(params: ModelParams, images, angles: Sequence[float] = (0.0,), min_score: float = 0.3):
    """Greedy matching pursuit of single-template placements.

    Each round scores every unused template, rotated by each angle in
    ``angles`` (radians), at every integer translation by the
    log-likelihood gain of drawing it on the current residual,
    ``sum(r * k) - sum(k^2) / 2`` for the premultiplied template ``k``.
    The placement with the largest gain is taken and, once its gain
    normalised by ``sum(k^2) / 2`` (1 for a perfect noise-free match)
    exceeds ``min_score``, subtracted from the residual.  Returns model-frame offsets ``(B, C, 2, 3)``
    and the normalised scores ``(B, C)``.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    B, H, W = images.shape
    frame = params.frame
    C = params.n_templates
    kernels = _rotated_kernels(params, angles)  # (A, C, s, s)
    s = kernels.shape[-1]
    pad = s // 2
    energy = 0.5 * np.sum(kernels**2, axis=(-2, -1))  # (A, C)
    residual = np.pad(images, ((0, 0), (pad, pad), (pad, pad)))
    flipped = kernels[..., ::-1, ::-1]
    best_pose = np.zeros((B, C, 2, 3))
    best_score = np.full((B, C), -np.inf)
    used = np.zeros((B, C), dtype=bool)
    rows = np.arange(B)
    for _ in range(C):
        # (B, A, C, H, W) normalised gains of placing each template centre at each pixel
        cross = signal.fftconvolve(residual[:, None, None], flipped[None], mode="valid", axes=(-2, -1))
        gain = cross - energy[None, :, :, None, None]
        gain = np.where(used[:, None, :, None, None], -np.inf, gain)
        flat = gain.reshape(B, -1)
        pick = np.argmax(flat, axis=1)
        a, j, y, x = np.unravel_index(pick, gain.shape[1:])
        score = flat[rows, pick] / np.maximum(energy[a, j], 1e-12)
        # record the first (best) placement found for each template
        for b in range(B):
            if score[b] == -np.inf:
                continue
            used[b, j[b]] = True
            best_score[b, j[b]] = score[b]
            tx = (x[b] - frame.canvas_center[0]) / frame.scale
            ty = (y[b] - frame.canvas_center[1]) / frame.scale
            best_pose[b, j[b]] = make_offsets(tx, ty, angles[a[b]], 1.0)
            if score[b] > min_score:
                residual[b, y[b]:y[b] + s, x[b]:x[b] + s] -= kernels[a[b], j[b]]
    return best_pose, best_score


def init_state(
    params: ModelParams,
    images,
    rng: np.random.Generator,
    mode: str = "delta",
    angles: Sequence[float] = (0.0,),
    jitter: float = 0.01,
    coupled: bool = False,
) -> VariationalState:
    """Data-driven starting point for free-form inference.

    Template capsules start at their best correlation match with presence
    logits derived from the match quality.  Each parent starts at the
    average of the poses its likely children predict for it
    (``A_child (I + M)^-1``), weighted by affinity and child presence.  A
    parent's presence logit is its marginal gain in the prior terms of the
    log joint under greedy forward selection (children at their matched
    poses and mean presences), clipped to [-4, 4].  ``jitter`` adds
    small Gaussian noise to every pose.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    B = images.shape[0]
    if len(params.layers) != 1:
        raise ValueError("init_state supports one capsule layer above the templates")
    child_pose, score = match_templates(params, images, angles)
    child_logit = np.clip(6.0 * (score - 0.5), -4.0, 4.0)
    layer = params.layers[0]
    inv_M = invert_offsets(layer.M[1:]).data  # (P, C, 2, 3)
    predicted = compose_offsets(child_pose[:, None], inv_M[None]).data  # (B, P, C, 2, 3)
    weight = layer.rho[1:][None] * layer.gamma[1:][None] / (1.0 + np.exp(-child_logit[:, None, :]))
    weight = weight / np.maximum(weight.sum(axis=2, keepdims=True), 1e-12)
    parent_pose = np.einsum("bpc,bpcij->bpij", weight, predicted)
    P = layer.n_parents
    parent_logit = _greedy_parent_gain(params, parent_pose, child_logit, child_pose)
    logits = [np.clip(parent_logit, -4.0, 4.0), child_logit]
    poses = [parent_pose + jitter * rng.standard_normal(parent_pose.shape), child_pose + jitter * rng.standard_normal(child_pose.shape)]
    coupling = [np.zeros((B, P, params.n_templates))] if coupled else None
    return VariationalState(logits, poses, mode=mode, coupling=coupling)


def _greedy_parent_gain(params: ModelParams, parent_pose, child_logit, child_pose) -> np.ndarray:
    """Marginal prior gain of each parent under greedy forward selection.

    Starting from every parent off, the parent whose activation most
    increases log p(t, A) is switched on while that increase is positive.
    A selected parent keeps the gain it had when added; the others get
    their (non-positive) gain against the final active set.
    """
    B, P = parent_pose.shape[:2]
    mt = model_tensors(params)
    child_t = 1.0 / (1.0 + np.exp(-child_logit))
    tile = lambda a: np.broadcast_to(a, (P + 1,) + a.shape).reshape((-1,) + a.shape[1:])
    t_child, A_child, A_parent = tile(child_t), tile(child_pose), tile(parent_pose)
    active = np.zeros((B, P))
    gain = np.full((B, P), -np.inf)
    open_ = np.ones(B, dtype=bool)
    for _ in range(P):
        # configuration 0 is the current set, configuration i + 1 flips parent i on
        top_t = np.concatenate([active[None], np.maximum(active[None], np.eye(P)[:, None])]).reshape(-1, P)
        cond = child_conditional_log_prob(t_child, A_child, top_t, A_parent, mt.layers[0])
        prior = (top_prior_log_prob(mt, top_t, A_parent) + ad.sum_(cond, axis=-1)).data.reshape(P + 1, B)
        delta = (prior[1:] - prior[:1]).T
        delta[active > 0] = -np.inf
        best = np.argmax(delta, axis=1)
        rows = np.arange(B)
        add = open_ & (delta[rows, best] > 0)
        off = active == 0
        gain[off & open_[:, None]] = delta[off & open_[:, None]]
        active[rows[add], best[add]] = 1.0
        open_ &= add
        if not open_.any():
            break
    return gain


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------

@dataclass
class ElboNoise:
    """Pre-drawn base noise for ``n_samples`` reparameterised draws.

    ``uniform[k]``: ``(S, B, n_k)`` in (0, 1); ``normal[k]``:
    ``(S, B, n_k, 2, 3)`` standard normal.
    """

    uniform: list[np.ndarray]
    normal: list[np.ndarray]

    @property
    def n_samples(self) -> int:
        return self.uniform[0].shape[0]


def draw_noise(state: VariationalState, n_samples: int, rng: np.random.Generator) -> ElboNoise:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    B = state.batch_size
    uniform, normal = [], []
    for logits in state.logits:
        n = logits.shape[1]
        u = rng.random((n_samples, B, n))
        uniform.append(np.clip(u, 1e-12, 1 - 1e-12))
        normal.append(rng.standard_normal((n_samples, B, n, 2, 3)))
    return ElboNoise(uniform, normal)


def per_image_noise(state: VariationalState, n_samples: int, seeds: Sequence[int]) -> ElboNoise:
    """Noise drawn from one independent stream per image.

    Makes results for an image independent of how a dataset is batched.
    """
    parts = [draw_noise(state.select(slice(i, i + 1)), n_samples, np.random.default_rng(seed)) for i, seed in enumerate(seeds)]
    return ElboNoise(
        [np.concatenate([p.uniform[k] for p in parts], axis=1) for k in range(state.n_layers)],
        [np.concatenate([p.normal[k] for p in parts], axis=1) for k in range(state.n_layers)],
    )


# ---------------------------------------------------------------------------
# ELBO
# ---------------------------------------------------------------------------

@dataclass
class ElboEstimate:
    """Monte Carlo ELBO for a batch of images.

    ``per_image`` holds each image's sample mean; ``terms`` breaks it into
    the likelihood and one ``E[log p_k - log q_k]`` entry per layer, so the
    terms sum to ``per_image``.  ``objective`` is the differentiable sum
    over images; it carries gradients when any input requires them.
    """

    per_image: np.ndarray
    terms: dict[str, np.ndarray]
    num_samples: int
    std_error: np.ndarray
    samples: np.ndarray
    objective: Tensor

    @property
    def value(self) -> float:
        return float(np.sum(self.per_image))


def _sample_layer(logit, state_mode, pose_mean, pose_log_scale, u, eps, tau, presence):
    """One layer's draws: (t, A, log q) with shapes (N, n), (N, n, 2, 3), (N,)."""
    if presence == "relaxed":
        y = (logit + logistic_noise(u)) / tau
        t = ad.sigmoid(y)
        log_q = ad.sum_(relaxed_bernoulli_log_prob_presample(y, ConcreteParams(logit, tau)), axis=-1)
    else:
        prob = 1.0 / (1.0 + np.exp(-logit.data))
        t = Tensor((u < prob).astype(np.float64))
        log_q = ad.sum_(t * ad.log_sigmoid(logit) + (1.0 - t) * ad.log_sigmoid(-logit), axis=-1)
    if state_mode == "delta":
        A = pose_mean
    else:
        scale = ad.exp(pose_log_scale)
        A = pose_mean + scale * eps
        log_q = log_q + ad.sum_(normal_log_prob(A, GaussianParams(pose_mean, scale)), axis=(-3, -2, -1))
    return t, A, log_q


def _tile(x: Tensor, S: int) -> Tensor:
    """(B, ...) -> (S*B, ...) by repeating the batch S times."""
    shape = x.shape
    return ad.reshape(ad.broadcast_to(x, (S,) + shape), (S * shape[0],) + shape[1:])


def elbo_estimate(
    params,
    q: VariationalState,
    image,
    n_samples: int = 1,
    rng: np.random.Generator | None = None,
    noise: ElboNoise | None = None,
    presence: str = "relaxed",
    leaves: dict[str, Tensor] | None = None,
) -> ElboEstimate:
    """Reparameterised estimate of E_q[log p(t, A, X) - log q(t, A)].

    ``params`` may be :class:`ModelParams` or a :class:`ModelTensors` view
    (to get parameter gradients).  ``leaves`` optionally supplies tensors
    for the variational arrays (see :meth:`VariationalState.arrays`); when
    given, ``objective`` carries gradients to them.  ``presence="discrete"``
    draws hard Bernoulli presences (no reparameterisation), which gives an
    exact bound on the evidence of the discrete model.
    """
    if presence not in PRESENCE_MODES:
        raise ValueError(f"presence must be one of {PRESENCE_MODES}")
    mt = params if isinstance(params, ModelTensors) else model_tensors(params)
    if noise is None:
        if rng is None:
            raise ValueError("elbo_estimate needs either rng or noise")
        noise = draw_noise(q, n_samples, rng)
    S = noise.n_samples
    B = q.batch_size
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.shape[0] != B:
        raise ValueError(f"state holds {B} images but {image.shape[0]} were given")
    arrays = q.arrays()
    tensors = {name: (leaves[name] if leaves and name in leaves else Tensor(arr)) for name, arr in arrays.items()}
    n = q.n_layers
    tau = mt.tau

    ts: list = [None] * n
    As: list = [None] * n
    log_qs: list = [None] * n
    for k in reversed(range(n)):
        logit = _tile(tensors[f"logits{k}"], S)
        if q.coupling is not None and k < n - 1:
            w = _tile(tensors[f"coupling{k}"], S)
            below = ad.reshape(ts[k + 1], ts[k + 1].shape + (1,))
            logit = logit + ad.reshape(ad.matmul(w, below), logit.shape)
        mean = _tile(tensors[f"pose{k}"], S)
        log_scale = _tile(tensors[f"log_scale{k}"], S) if q.mode == "full" else None
        u = noise.uniform[k].reshape(S * B, -1)
        eps = noise.normal[k].reshape((S * B,) + noise.normal[k].shape[2:])
        ts[k], As[k], log_qs[k] = _sample_layer(logit, q.mode, mean, log_scale, u, eps, tau, presence)

    tiled_image = np.broadcast_to(image, (S,) + image.shape).reshape((S * B,) + image.shape[1:])
    joint = log_joint_terms(mt, LatentState(ts, As), tiled_image)
    per_term = {"likelihood": joint["likelihood"]}
    for k in range(n):
        per_term[f"layer{k}"] = joint[f"layer{k}"] - log_qs[k]
    total = None
    for name, value in per_term.items():
        if not np.all(np.isfinite(value.data)):
            raise ElboError(name)
        total = value if total is None else total + value
    samples = total.data.reshape(S, B)
    per_image = samples.mean(axis=0)
    std_error = samples.std(axis=0, ddof=1) / math.sqrt(S) if S > 1 else np.full(B, np.nan)
    terms = {name: value.data.reshape(S, B).mean(axis=0) for name, value in per_term.items()}
    objective = ad.sum_(total) / S
    return ElboEstimate(per_image, terms, S, std_error, samples, objective)


def elbo_and_grads(params, q: VariationalState, image, noise: ElboNoise, presence: str = "relaxed"):
    """ELBO estimate plus gradients of its image-sum w.r.t. every q array."""
    leaves = {name: ad.parameter(arr) for name, arr in q.arrays().items()}
    est = elbo_estimate(params, q, image, noise=noise, presence=presence, leaves=leaves)
    ad.backward(est.objective)
    grads = {name: (np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad) for name, leaf in leaves.items()}
    return est, grads


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamConfig:
    """Per-coordinate moment-based ascent rule.

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;
    x <- x + lr * m_hat / (sqrt(v_hat) + eps) with bias-corrected moments.
    """

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Gradient *ascent* with Adam moments over a dict of arrays."""

    def __init__(self, arrays: dict[str, np.ndarray], config: AdamConfig = AdamConfig()):
        self.config = config
        self.m = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.t = 0

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None) -> dict[str, np.ndarray]:
        cfg = self.config
        lr = cfg.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - cfg.beta1**self.t
        c2 = 1.0 - cfg.beta2**self.t
        out = {}
        for k, x in arrays.items():
            g = grads.get(k)
            if g is None:
                out[k] = x
                continue
            self.m[k] = cfg.beta1 * self.m[k] + (1 - cfg.beta1) * g
            self.v[k] = cfg.beta2 * self.v[k] + (1 - cfg.beta2) * g * g
            out[k] = x + lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + cfg.eps)
        return out


@dataclass
class ElboTrace:
    """Per-step, per-image ELBO values recorded during a fit."""

    elbo: list[np.ndarray] = field(default_factory=list)
    terms: list[dict[str, np.ndarray]] = field(default_factory=list)

    def append(self, est: ElboEstimate) -> None:
        self.elbo.append(est.per_image.copy())
        self.terms.append({k: v.copy() for k, v in est.terms.items()})

    def as_array(self) -> np.ndarray:
        """(steps, B) ELBO values."""
        return np.array(self.elbo)

    def rows(self, image: int = 0):
        for step, (e, t) in enumerate(zip(self.elbo, self.terms)):
            kl = {k: float(v[image]) for k, v in t.items() if k != "likelihood"}
            yield step, float(e[image]), float(t["likelihood"][image]), kl

    def write_csv(self, path, image: int = 0) -> None:
        """Columns: step, elbo, likelihood_term, then one kl_<layer> column per layer."""
        with open(path, "w", newline="") as fh:
            writer = None
            for step, elbo, lik, kl in self.rows(image):
                if writer is None:
                    writer = csv.writer(fh)
                    writer.writerow(["step", "elbo", "likelihood_term"] + [f"kl_{k}" for k in kl])
                writer.writerow([step, repr(elbo), repr(lik)] + [repr(v) for v in kl.values()])


def fit_free_form(
    params,
    image,
    init: VariationalState,
    steps: int,
    step_size: float = 1e-2,
    rng: np.random.Generator | None = None,
    n_samples: int = 1,
    frozen_noise: bool = False,
    noise_seeds: Sequence[int] | None = None,
    optimizer: AdamConfig | None = None,
    trainable: Sequence[str] | None = None,
    final_step_size: float | None = None,
) -> tuple[VariationalState, ElboTrace]:
    """Optimise per-image variational parameters by gradient ascent on the ELBO.

    Each step samples the continuous latents from q and sums the selection
    variables out analytically inside the log-joint, so every iteration
    performs an implicit E-step followed by a gradient step on q.

    ``noise_seeds`` (one per image) draws each image's noise from its own
    stream so results do not depend on batching; otherwise ``rng`` is
    used.  With ``frozen_noise`` the same draw is reused at every step.
    ``trainable`` restricts which state arrays move (default: all).
    ``final_step_size`` decays the step size geometrically from
    ``step_size`` to that value over the run.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    mt = params if isinstance(params, ModelTensors) else model_tensors(params)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    cfg = optimizer or AdamConfig(lr=step_size)
    state = init.copy()
    arrays = state.arrays()
    names = list(arrays) if trainable is None else [n for n in arrays if any(n.startswith(p) for p in trainable)]
    opt = Adam({n: arrays[n] for n in names}, cfg)
    streams = None
    if noise_seeds is not None:
        streams = [np.random.default_rng(s) for s in noise_seeds]
    elif rng is None:
        raise ValueError("fit_free_form needs rng or noise_seeds")

    def next_noise():
        if streams is None:
            return draw_noise(state, n_samples, rng)
        parts = [draw_noise(state.select(slice(i, i + 1)), n_samples, s) for i, s in enumerate(streams)]
        return ElboNoise(
            [np.concatenate([p.uniform[k] for p in parts], axis=1) for k in range(state.n_layers)],
            [np.concatenate([p.normal[k] for p in parts], axis=1) for k in range(state.n_layers)],
        )

    noise = next_noise() if frozen_noise else None
    trace = ElboTrace()
    for step in range(steps):
        current = noise if frozen_noise else next_noise()
        try:
            est, grads = elbo_and_grads(mt, state, image, current)
        except ElboError:
            raise FitDivergedError(step, trace) from None
        trace.append(est)
        lr = cfg.lr
        if final_step_size is not None and steps > 1:
            lr = cfg.lr * (final_step_size / cfg.lr) ** (step / (steps - 1))
        updated = opt.step({n: arrays[n] for n in names}, {n: grads[n] for n in names}, lr=lr)
        arrays.update(updated)
        if not all(np.all(np.isfinite(v)) for v in arrays.values()):
            raise FitDivergedError(step, trace)
        state = VariationalState.from_arrays(arrays, state.mode)
    return state, trace


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------

def reconstruct(params, q: VariationalState) -> Canvas:
    """Composite the templates at q's pose means with presence sigmoid(logit)."""
    mt = params if isinstance(params, ModelTensors) else model_tensors(params)
    presence = q.mean_presences()[-1]
    pre, acc = render(mt.sources, q.pose_means[-1], presence, mt.frame)
    return Canvas(safe_divide(pre, acc).data, acc.data)


def reconstruction_error(params, q: VariationalState, clean) -> np.ndarray:
    """Per-image L2 norm between the reconstruction and a clean image."""
    recon = reconstruct(params, q).flatten().data
    clean = np.asarray(clean, dtype=np.float64)
    return np.sqrt(np.sum((recon - clean.reshape(recon.shape)) ** 2, axis=(-2, -1)))
