"""The capsule generative model: priors, selection-marginalised child
conditionals, ancestral sampling, log-joint and routing responsibilities.

Shapes follow one convention throughout.  A layer with ``P`` real parents
and ``C`` children stores parameters over ``P + 1`` parent rows; row 0 is
the dummy clutter parent, which is always on and sits at the identity
pose.  Latents carry a leading batch axis ``B`` and never include the
dummy entry.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import (
    GaussianParams,
    bernoulli_log_prob,
    categorical_from_presence,
    normal_log_prob,
)
from .poses import compose_offsets
from .renderer import SIGMA_MIN, Frame, image_log_likelihood, render

FORMAT_VERSION = 1
C_MIN = 0.1
LOG_FLOOR = 1e-300


class ModelConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class LayerParams:
    """Parameters linking one parent layer (plus dummy) to its children.

    Attributes
    ----------
    rho : (P+1, C) positive affinities; row 0 belongs to the dummy parent.
    gamma : (P+1, C) conditional presence probabilities.
    M : (P+1, C, 2, 3) pose offsets; the dummy row is kept at zero.
    c : (P+1, C) pose noise scales; the dummy row holds the wide clutter scale.
    lambda_off : scale of the pose Gaussian for switched-off children.
    """

    rho: np.ndarray
    gamma: np.ndarray
    M: np.ndarray
    c: np.ndarray
    lambda_off: float = 10.0

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=np.float64)
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        self.M = np.asarray(self.M, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)

    @property
    def n_parents(self) -> int:
        return self.rho.shape[0] - 1

    @property
    def n_children(self) -> int:
        return self.rho.shape[1]

    @property
    def c_dummy(self) -> np.ndarray:
        return self.c[0]

    def validate(self, c_min: float = C_MIN) -> None:
        P1, C = self.rho.shape
        if P1 < 1:
            raise ModelConfigError("layer must include the dummy parent row")
        for name, arr, shape in (("gamma", self.gamma, (P1, C)), ("M", self.M, (P1, C, 2, 3)), ("c", self.c, (P1, C))):
            if arr.shape != shape:
                raise ModelConfigError(f"{name} has shape {arr.shape}, expected {shape}")
        if np.any(self.rho < 0) or np.any(self.rho[0] <= 0):
            raise ModelConfigError("rho must be non-negative with strictly positive dummy affinities")
        if np.any(self.gamma < 0) or np.any(self.gamma > 1):
            raise ModelConfigError("gamma must lie in [0, 1]")
        if np.any(self.c < c_min - 1e-12):
            raise ModelConfigError(f"pose scales must be >= c_min={c_min}")
        if self.lambda_off <= 0:
            raise ModelConfigError("lambda_off must be positive")

    def copy(self) -> "LayerParams":
        return LayerParams(self.rho.copy(), self.gamma.copy(), self.M.copy(), self.c.copy(), self.lambda_off)


@dataclass
class ModelParams:
    """Global parameters of a capsule hierarchy ending in a template layer."""

    layers: list[LayerParams]
    template_color: np.ndarray
    template_alpha: np.ndarray
    canvas_hw: tuple[int, int]
    frame_scale: float
    p: float = 0.5
    sigma: float = SIGMA_MIN
    tau: float = 1.0
    c_min: float = C_MIN
    sigma_min: float = SIGMA_MIN

    def __post_init__(self):
        self.template_color = np.asarray(self.template_color, dtype=np.float64)
        self.template_alpha = np.asarray(self.template_alpha, dtype=np.float64)
        self.canvas_hw = tuple(int(v) for v in self.canvas_hw)

    # shapes ---------------------------------------------------------------
    @property
    def n_top(self) -> int:
        return self.layers[0].n_parents

    @property
    def layer_sizes(self) -> list[int]:
        return [self.n_top] + [layer.n_children for layer in self.layers]

    @property
    def n_templates(self) -> int:
        return self.layers[-1].n_children

    @property
    def template_hw(self) -> tuple[int, int]:
        return tuple(self.template_color.shape[1:])

    @property
    def frame(self) -> Frame:
        return Frame(self.frame_scale, self.template_hw, self.canvas_hw)

    def validate(self) -> None:
        if not self.layers:
            raise ModelConfigError("model needs at least one capsule layer")
        for k, layer in enumerate(self.layers):
            layer.validate(self.c_min)
            if k > 0 and layer.n_parents != self.layers[k - 1].n_children:
                raise ModelConfigError(f"layer {k} expects {layer.n_parents} parents, previous layer has {self.layers[k - 1].n_children} children")
        if self.template_color.shape != self.template_alpha.shape or self.template_color.ndim != 3:
            raise ModelConfigError("template color/alpha must both be (n_templates, h, w)")
        if self.template_color.shape[0] != self.n_templates:
            raise ModelConfigError("one template is needed per lowest-level capsule")
        if np.any(self.template_alpha < 0) or np.any(self.template_alpha > 1):
            raise ModelConfigError("template alpha must lie in [0, 1]")
        if not 0.0 <= self.p <= 1.0:
            raise ModelConfigError("p must lie in [0, 1]")
        if self.sigma < self.sigma_min - 1e-12:
            raise ModelConfigError(f"sigma must be >= {self.sigma_min}")
        if self.tau <= 0:
            raise ModelConfigError("temperature must be positive")

    def copy(self) -> "ModelParams":
        return replace(
            self,
            layers=[layer.copy() for layer in self.layers],
            template_color=self.template_color.copy(),
            template_alpha=self.template_alpha.copy(),
        )

    def sources(self) -> np.ndarray:
        """Stacked (C, 2, h, w) color/alpha planes for the renderer."""
        return np.stack([self.template_color, self.template_alpha], axis=1)

    # serialization ----------------------------------------------------------
    def to_document(self) -> dict:
        arrays = {"template_color": self.template_color, "template_alpha": self.template_alpha}
        layer_shapes = []
        for k, layer in enumerate(self.layers):
            layer_shapes.append({"n_parents": layer.n_parents, "n_children": layer.n_children, "lambda_off": layer.lambda_off})
            for name in ("rho", "gamma", "M", "c"):
                arrays[f"layer{k}.{name}"] = getattr(layer, name)
        return {
            "version": FORMAT_VERSION,
            "kind": "model_params",
            "shapes": {
                "layers": layer_shapes,
                "template_hw": list(self.template_hw),
                "canvas_hw": list(self.canvas_hw),
                "arrays": {name: list(arr.shape) for name, arr in arrays.items()},
            },
            "hyperparams": {
                "p": self.p,
                "sigma": self.sigma,
                "tau": self.tau,
                "c_min": self.c_min,
                "sigma_min": self.sigma_min,
                "frame_scale": self.frame_scale,
            },
            "arrays": {name: arr for name, arr in arrays.items()},
        }

    @classmethod
    def from_document(cls, doc: dict) -> "ModelParams":
        if doc.get("version") != FORMAT_VERSION:
            raise ModelConfigError(f"unsupported model document version {doc.get('version')!r}")
        shapes = doc["shapes"]
        arrays = {
            name: np.asarray(values, dtype=np.float64).reshape(shapes["arrays"][name])
            for name, values in doc["arrays"].items()
        }
        layers = [
            LayerParams(
                arrays[f"layer{k}.rho"], arrays[f"layer{k}.gamma"], arrays[f"layer{k}.M"], arrays[f"layer{k}.c"],
                lambda_off=float(info["lambda_off"]),
            )
            for k, info in enumerate(shapes["layers"])
        ]
        hp = doc["hyperparams"]
        params = cls(
            layers=layers,
            template_color=arrays["template_color"],
            template_alpha=arrays["template_alpha"],
            canvas_hw=tuple(shapes["canvas_hw"]),
            frame_scale=float(hp["frame_scale"]),
            p=float(hp["p"]),
            sigma=float(hp["sigma"]),
            tau=float(hp["tau"]),
            c_min=float(hp["c_min"]),
            sigma_min=float(hp["sigma_min"]),
        )
        params.validate()
        return params

    def to_json(self) -> str:
        return dump_document(self.to_document())

    @classmethod
    def from_json(cls, text: str) -> "ModelParams":
        return cls.from_document(json.loads(text))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "ModelParams":
        with open(path) as fh:
            return cls.from_json(fh.read())


def _format_number(v: float) -> str:
    v = float(v)
    if not math.isfinite(v):
        raise ValueError("cannot serialise non-finite values")
    return format(v, ".17g")


def _encode(obj, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if isinstance(obj, np.ndarray):
        return "[" + ", ".join(_format_number(v) for v in obj.reshape(-1)) + "]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_encode(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if all(isinstance(v, (int, float, np.floating, np.integer)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(_encode(v, indent, level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _encode(v, indent, level + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _format_number(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dump_document(doc: dict) -> str:
    """JSON text with every float written at 17 significant digits.

    Arrays are written flat in row-major order; their shapes live under
    ``shapes.arrays`` so readers can restore them.
    """
    return _encode(doc, 2, 0) + "\n"


# ---------------------------------------------------------------------------
# differentiable views of the parameters
# ---------------------------------------------------------------------------

def inverse_softplus(y) -> np.ndarray:
    y = np.maximum(np.asarray(y, dtype=np.float64), 1e-12)
    return np.where(y > 30, y, np.log(np.expm1(np.minimum(y, 30))))


def logit(p) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-9, 1 - 1e-9)
    return np.log(p) - np.log1p(-p)


@dataclass
class LayerTensors:
    rho: Tensor
    gamma: Tensor
    M: Tensor
    c: Tensor
    lambda_off: float

    @property
    def n_parents(self) -> int:
        return self.rho.shape[0] - 1


@dataclass
class ModelTensors:
    """Tensor-valued view of :class:`ModelParams` used inside objectives.

    ``leaves`` maps parameter names to the unconstrained leaf tensors that
    receive gradients; it is empty for a constant view.
    """

    params: ModelParams
    layers: list[LayerTensors]
    sources: Tensor
    sigma: Tensor
    leaves: dict[str, Tensor] = field(default_factory=dict)

    @property
    def p(self) -> float:
        return self.params.p

    @property
    def tau(self) -> float:
        return self.params.tau

    @property
    def frame(self) -> Frame:
        return self.params.frame

    def to_params(self) -> ModelParams:
        """Constrained numpy values of the current tensors."""
        out = self.params.copy()
        for layer, lt in zip(out.layers, self.layers):
            layer.rho = lt.rho.data.copy()
            layer.gamma = lt.gamma.data.copy()
            layer.M = lt.M.data.copy()
            layer.c = lt.c.data.copy()
        out.template_color = self.sources.data[:, 0].copy()
        out.template_alpha = self.sources.data[:, 1].copy()
        out.sigma = float(self.sigma.data)
        return out


TRAINABLE = ("rho", "gamma", "M", "c", "templates", "sigma")


def raw_parameters(params: ModelParams, trainable: Sequence[str]) -> dict[str, np.ndarray]:
    """Unconstrained values whose constrained images are ``params``."""
    raw = {}
    for k, layer in enumerate(params.layers):
        if "rho" in trainable:
            raw[f"layer{k}.rho"] = inverse_softplus(layer.rho[1:])
        if "gamma" in trainable:
            raw[f"layer{k}.gamma"] = logit(layer.gamma)
        if "M" in trainable:
            raw[f"layer{k}.M"] = layer.M[1:].copy()
        if "c" in trainable:
            raw[f"layer{k}.c"] = inverse_softplus(layer.c[1:] - params.c_min)
    if "templates" in trainable:
        raw["templates"] = logit(params.sources())
    if "sigma" in trainable:
        raw["sigma"] = inverse_softplus(np.array(params.sigma - params.sigma_min))
    return raw


def model_tensors(params: ModelParams, trainable: Sequence[str] = (), raw: dict[str, np.ndarray] | None = None) -> ModelTensors:
    """Build a tensor view; names in ``trainable`` get unconstrained leaves.

    Constraints are enforced by construction: rho = softplus(raw),
    gamma = sigmoid(raw), c = c_min + softplus(raw), sigma = sigma_min +
    softplus(raw), template planes = sigmoid(raw).  The dummy rows of rho,
    M and c stay fixed.  ``raw`` supplies leaf values directly (as kept by
    an optimiser); otherwise they are recovered from ``params``.
    """
    unknown = set(trainable) - set(TRAINABLE)
    if unknown:
        raise ModelConfigError(f"unknown trainable groups {sorted(unknown)}")
    values = raw_parameters(params, trainable)
    if raw is not None:
        values.update({k: v for k, v in raw.items() if k in values})
    leaves: dict[str, Tensor] = {}
    layers = []
    for k, layer in enumerate(params.layers):
        if "rho" in trainable:
            leaf = ad.parameter(values[f"layer{k}.rho"])
            leaves[f"layer{k}.rho"] = leaf
            rho = ad.concatenate([Tensor(layer.rho[:1]), ad.softplus(leaf)], axis=0)
        else:
            rho = Tensor(layer.rho)
        if "gamma" in trainable:
            leaf = ad.parameter(values[f"layer{k}.gamma"])
            leaves[f"layer{k}.gamma"] = leaf
            gamma = ad.sigmoid(leaf)
        else:
            gamma = Tensor(layer.gamma)
        if "M" in trainable:
            leaf = ad.parameter(values[f"layer{k}.M"])
            leaves[f"layer{k}.M"] = leaf
            M = ad.concatenate([Tensor(layer.M[:1]), leaf], axis=0)
        else:
            M = Tensor(layer.M)
        if "c" in trainable:
            leaf = ad.parameter(values[f"layer{k}.c"])
            leaves[f"layer{k}.c"] = leaf
            c = ad.concatenate([Tensor(layer.c[:1]), ad.softplus(leaf) + params.c_min], axis=0)
        else:
            c = Tensor(layer.c)
        layers.append(LayerTensors(rho, gamma, M, c, layer.lambda_off))
    if "templates" in trainable:
        leaf = ad.parameter(values["templates"])
        leaves["templates"] = leaf
        sources = ad.sigmoid(leaf)
    else:
        sources = Tensor(params.sources())
    if "sigma" in trainable:
        leaf = ad.parameter(values["sigma"])
        leaves["sigma"] = leaf
        sigma = ad.softplus(leaf) + params.sigma_min
    else:
        sigma = Tensor(params.sigma)
    return ModelTensors(params, layers, sources, sigma, leaves)


def _as_model_tensors(params) -> ModelTensors:
    return params if isinstance(params, ModelTensors) else model_tensors(params)


def _as_layer_tensors(layer) -> LayerTensors:
    if isinstance(layer, LayerTensors):
        return layer
    return LayerTensors(Tensor(layer.rho), Tensor(layer.gamma), Tensor(layer.M), Tensor(layer.c), layer.lambda_off)


# ---------------------------------------------------------------------------
# latents
# ---------------------------------------------------------------------------

@dataclass
class LatentState:
    """Per-image presences and pose offsets for every non-dummy capsule.

    ``presences[k]`` has shape ``(B, n_k)`` and ``poses[k]`` shape
    ``(B, n_k, 2, 3)``; layer 0 is the top layer, the last layer holds the
    template capsules.  Entries may be numpy arrays or tensors.
    """

    presences: list
    poses: list

    @property
    def batch_size(self) -> int:
        return int(np.shape(_data(self.presences[0]))[0])

    def numpy(self) -> "LatentState":
        return LatentState([np.array(_data(t)) for t in self.presences], [np.array(_data(a)) for a in self.poses])

    def select(self, index) -> "LatentState":
        return LatentState([np.array(_data(t))[index] for t in self.presences], [np.array(_data(a))[index] for a in self.poses])

    def to_document(self) -> dict:
        arrays = {}
        for k, (t, a) in enumerate(zip(self.presences, self.poses)):
            arrays[f"layer{k}.t"] = np.asarray(_data(t), dtype=np.float64)
            arrays[f"layer{k}.A"] = np.asarray(_data(a), dtype=np.float64)
        return {
            "version": FORMAT_VERSION,
            "kind": "latents",
            "shapes": {"n_layers": len(self.presences), "arrays": {n: list(v.shape) for n, v in arrays.items()}},
            "hyperparams": {},
            "arrays": arrays,
        }

    @classmethod
    def from_document(cls, doc: dict) -> "LatentState":
        shapes = doc["shapes"]["arrays"]
        n = doc["shapes"]["n_layers"]
        get = lambda name: np.asarray(doc["arrays"][name], dtype=np.float64).reshape(shapes[name])
        return cls([get(f"layer{k}.t") for k in range(n)], [get(f"layer{k}.A") for k in range(n)])


def _data(x):
    return x.data if isinstance(x, Tensor) else x


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------

def _with_dummy(parent_t, parent_A):
    parent_t, parent_A = ad.as_tensor(parent_t), ad.as_tensor(parent_A)
    B = parent_t.shape[0]
    full_t = ad.concatenate([Tensor(np.ones((B, 1))), parent_t], axis=1)
    full_A = ad.concatenate([Tensor(np.zeros((B, 1, 2, 3))), parent_A], axis=1)
    return full_t, full_A


def child_terms(child_t, child_A, parent_t, parent_A, layer):
    """Per-parent log terms inside the selection sum, and the off-pose term.

    Returns ``(per_parent, off)`` with shapes ``(B, P+1, C)`` and ``(B, C)``:
    ``per_parent[b, i, j] = log p(s_j=i | t) + log Bern(t_j; gamma_ij)
    + t_j log N(A_j; A_i M_ij, c_ij)`` and ``off[b, j] = (1 - t_j) log
    N(A_j; 0, lambda_off)``.
    """
    layer = _as_layer_tensors(layer)
    child_t, child_A = ad.as_tensor(child_t), ad.as_tensor(child_A)
    if parent_t.shape[-1] != layer.n_parents:
        raise ModelConfigError(f"layer expects {layer.n_parents} parents, got {parent_t.shape[-1]}")
    full_t, full_A = _with_dummy(parent_t, parent_A)
    sel = categorical_from_presence(layer.rho[None], ad.reshape(full_t, full_t.shape + (1,)), axis=1)
    log_sel = ad.log(ad.clamp(sel, LOG_FLOOR))
    mean = compose_offsets(ad.reshape(full_A, (full_A.shape[0], full_A.shape[1], 1, 2, 3)), layer.M[None])
    scale = ad.reshape(layer.c, (1,) + layer.c.shape + (1, 1))
    on_pose = ad.sum_(normal_log_prob(ad.reshape(child_A, (child_A.shape[0], 1) + child_A.shape[1:]), GaussianParams(mean, scale)), axis=(-2, -1))
    ct = ad.reshape(child_t, (child_t.shape[0], 1, child_t.shape[1]))
    presence = bernoulli_log_prob(ct, layer.gamma[None])
    per_parent = log_sel + presence + ct * on_pose
    off_pose = ad.sum_(normal_log_prob(child_A, GaussianParams(0.0, layer.lambda_off)), axis=(-2, -1))
    off = (1.0 - child_t) * off_pose
    return per_parent, off


def child_conditional_log_prob(child_t, child_A, parent_t, parent_A, layer) -> Tensor:
    """log p(t_j, A_j | parents) with the selection variable summed out.

    Returns per-image, per-child values of shape ``(B, C)``.  The parent
    arrays exclude the dummy, which is always appended internally.
    """
    per_parent, off = child_terms(child_t, child_A, parent_t, parent_A, layer)
    return ad.logsumexp(per_parent, axis=1) + off


def responsibilities(child_t, child_A, parent_t, parent_A, layer) -> np.ndarray:
    """Posterior p(s_j = i | ...) as a ``(B, P+1, C)`` array; row 0 is the dummy."""
    per_parent, _ = child_terms(child_t, child_A, parent_t, parent_A, layer)
    return ad.softmax(per_parent.detach(), axis=1).data


def expected_attached_children(resp) -> np.ndarray:
    """Expected number of children attached to each parent (sum over children)."""
    resp = np.asarray(resp, dtype=np.float64)
    return resp.sum(axis=-1)


def top_prior_log_prob(params, t0, A0) -> Tensor:
    """Bern(p) presence and N(0, I) pose prior for the top layer, per image."""
    mt = _as_model_tensors(params)
    pres = ad.sum_(bernoulli_log_prob(t0, mt.p), axis=-1)
    pose = ad.sum_(normal_log_prob(A0, GaussianParams(0.0, 1.0)), axis=(-3, -2, -1))
    return pres + pose


def render_mean(params, child_t, child_A) -> Tensor:
    mt = _as_model_tensors(params)
    image, _ = render(mt.sources, child_A, child_t, mt.frame)
    return image


def log_joint_terms(params, latents: LatentState, image) -> dict[str, Tensor]:
    """Per-image (shape ``(B,)``) log-joint contributions by layer.

    Keys are ``"layer0"`` (top prior), ``"layer1"`` ... (child conditionals)
    and ``"likelihood"``.
    """
    mt = _as_model_tensors(params)
    ts = [ad.as_tensor(t) for t in latents.presences]
    As = [ad.as_tensor(a) for a in latents.poses]
    if len(ts) != len(mt.layers) + 1:
        raise ModelConfigError(f"latents have {len(ts)} layers, model needs {len(mt.layers) + 1}")
    terms = {"layer0": top_prior_log_prob(mt, ts[0], As[0])}
    for k, layer in enumerate(mt.layers):
        cond = child_conditional_log_prob(ts[k + 1], As[k + 1], ts[k], As[k], layer)
        terms[f"layer{k + 1}"] = ad.sum_(cond, axis=-1)
    mean_image = render_mean(mt, ts[-1], As[-1])
    terms["likelihood"] = image_log_likelihood(image, mean_image, mt.sigma, mt.params.sigma_min)
    return terms


def log_joint(params, latents: LatentState, image) -> Tensor:
    """log p(t, A, X) with every selection variable marginalised; shape ``(B,)``."""
    terms = log_joint_terms(params, latents, image)
    total = None
    for value in terms.values():
        total = value if total is None else total + value
    return total


# ---------------------------------------------------------------------------
# ancestral sampling
# ---------------------------------------------------------------------------

def sample_latents(params: ModelParams, rng: np.random.Generator, batch: int = 1, top_presence=None, top_poses=None) -> LatentState:
    """Ancestral sample of hard presences and poses.

    ``top_presence``/``top_poses`` override the top-layer prior draws
    (arrays of shape ``(batch, n_top)`` / ``(batch, n_top, 2, 3)``).
    """
    t0 = (rng.random((batch, params.n_top)) < params.p).astype(np.float64)
    A0 = rng.standard_normal((batch, params.n_top, 2, 3))
    if top_presence is not None:
        t0 = np.asarray(top_presence, dtype=np.float64).reshape(batch, params.n_top)
    if top_poses is not None:
        A0 = np.asarray(top_poses, dtype=np.float64).reshape(batch, params.n_top, 2, 3)
    ts, As = [t0], [A0]
    for layer in params.layers:
        parent_t, parent_A = ts[-1], As[-1]
        C = layer.n_children
        full_t = np.concatenate([np.ones((batch, 1)), parent_t], axis=1)
        full_A = np.concatenate([np.zeros((batch, 1, 2, 3)), parent_A], axis=1)
        weights = layer.rho[None] * full_t[:, :, None]
        probs = weights / weights.sum(axis=1, keepdims=True)
        cum = np.cumsum(probs, axis=1)
        u = rng.random((batch, 1, C))
        s = np.minimum((u > cum).sum(axis=1), layer.n_parents)
        cols = np.arange(C)[None, :]
        rows = np.arange(batch)[:, None]
        t = (rng.random((batch, C)) < layer.gamma[s, cols]).astype(np.float64)
        eps = rng.standard_normal((batch, C, 2, 3))
        parent_pose = full_A[rows, s]
        mean = compose_offsets(parent_pose, layer.M[s, cols]).data
        on = mean + layer.c[s, cols][..., None, None] * eps
        off = layer.lambda_off * eps
        A = np.where(t[..., None, None] > 0, on, off)
        ts.append(t)
        As.append(A)
    return LatentState(ts, As)


def render_latents(params: ModelParams, latents: LatentState) -> np.ndarray:
    """Noise-free mean image for each latent sample, shape ``(B, H, W)``."""
    return render_mean(params, np.asarray(_data(latents.presences[-1])), np.asarray(_data(latents.poses[-1]))).data


def sample_scene(params: ModelParams, rng: np.random.Generator, batch: int = 1, **overrides):
    """Draw latents ancestrally and a noisy image around their rendering."""
    latents = sample_latents(params, rng, batch, **overrides)
    clean = render_latents(params, latents)
    image = clean + params.sigma * rng.standard_normal(clean.shape)
    return latents, image
