"""Synthetic scenes from planted models, the binary dataset format, the
linear latent readout and evaluation metrics.

Dataset file layout (little-endian)::

    b"CAPS" | u32 version=1 | u32 count | u32 H | u32 W | u32 n_classes
    then per record: u32 label | H*W float32 pixels, row-major

Ground-truth latents go to an optional sidecar JSON document (the same
text format as model parameters, ``kind: "latents"``).
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .model import FORMAT_VERSION, LatentState, LayerParams, ModelParams, dump_document, render_latents, sample_latents
from .poses import compose_offsets, make_offsets

MAGIC = b"CAPS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class DatasetFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# benchmark model
# ---------------------------------------------------------------------------

def _shape_masks(size: int) -> list[np.ndarray]:
    """Six asymmetric binary part shapes on a ``size`` x ``size`` grid."""
    g = np.zeros((size, size))
    r = np.arange(size)[:, None] * np.ones((1, size))
    c = np.ones((size, 1)) * np.arange(size)[None, :]
    lo, hi, mid = 1, size - 2, size // 2
    shapes = []
    # L shape
    m = g.copy(); m[lo:hi + 1, lo:lo + 2] = 1; m[hi - 1:hi + 1, lo:hi] = 1; shapes.append(m)
    # T shape, stem off-centre
    m = g.copy(); m[lo:lo + 2, lo:hi + 1] = 1; m[lo:hi + 1, mid - 2:mid] = 1; shapes.append(m)
    # right triangle
    shapes.append((((c - lo) <= (r - lo)) & (r <= hi) & (c >= lo)).astype(float))
    # bar with a knob
    m = g.copy(); m[mid - 1:mid + 1, lo:hi + 1] = 1; m[lo:mid, hi - 1:hi + 1] = 1; shapes.append(m)
    # open square (C shape)
    m = g.copy(); m[lo:hi + 1, lo:lo + 2] = 1; m[lo:lo + 2, lo:hi + 1] = 1; m[hi - 1:hi + 1, lo:hi + 1] = 1; shapes.append(m)
    # F shape
    m = g.copy(); m[lo:hi + 1, lo:lo + 2] = 1; m[lo:lo + 2, lo:hi + 1] = 1; m[mid:mid + 2, lo:hi - 2] = 1; shapes.append(m)
    return shapes


def benchmark_templates(size: int = 11, blur: float = 0.7) -> tuple[np.ndarray, np.ndarray]:
    """Color and alpha planes ``(6, size, size)`` for the benchmark parts.

    Shapes are slightly blurred so bilinear pose gradients are informative;
    color varies across templates so overlapping parts stay distinguishable.
    """
    masks = _shape_masks(size)
    alpha = np.stack([np.clip(ndimage.gaussian_filter(m, blur), 0.0, 1.0) for m in masks])
    alpha = np.clip(alpha * 1.3, 0.0, 1.0)
    levels = np.linspace(1.0, 0.55, len(masks))
    color = np.broadcast_to(levels[:, None, None], alpha.shape).copy()
    return color, alpha


# Parent i uses these templates; each template serves two parents.
BENCHMARK_PARTS = ((0, 1, 2), (2, 3, 4), (4, 5, 0), (1, 3, 5))


def benchmark_model(
    template_size: int = 11,
    canvas_hw=(24, 24),
    support_rho: float = 2.0,
    background_rho: float = 0.01,
    dummy_rho: float = 0.1,
    support_gamma: float = 0.9,
    background_gamma: float = 0.1,
    dummy_gamma: float = 1e-3,
    c_support: float = 0.1,
    seed: int = 7,
) -> ModelParams:
    """The 4-parent / 6-template model used by the desk-scale benchmarks.

    Each parent owns three parts (see ``BENCHMARK_PARTS``) arranged around
    its origin; one model unit is half a template width.
    """
    rng = np.random.default_rng(seed)
    P, C = len(BENCHMARK_PARTS), 6
    rho = np.full((P + 1, C), background_rho)
    gamma = np.full((P + 1, C), background_gamma)
    M = np.zeros((P + 1, C, 2, 3))
    c = np.full((P + 1, C), 0.5)
    rho[0] = dummy_rho
    gamma[0] = dummy_gamma
    c[0] = 10.0
    slots = np.array([[-0.9, -0.6], [0.9, -0.5], [0.0, 0.9]])
    for i, parts in enumerate(BENCHMARK_PARTS, start=1):
        angles = rng.uniform(-0.6, 0.6, len(parts))
        for slot, j in enumerate(parts):
            rho[i, j] = support_rho
            gamma[i, j] = support_gamma
            c[i, j] = c_support
            M[i, j] = make_offsets(slots[slot, 0], slots[slot, 1], angles[slot], 1.0)
        # non-support pairs still get a plausible offset
        for j in set(range(C)) - set(parts):
            M[i, j] = make_offsets(*rng.uniform(-0.8, 0.8, 2), 0.0, 1.0)
    color, alpha = benchmark_templates(template_size)
    params = ModelParams(
        layers=[LayerParams(rho, gamma, M, c, lambda_off=10.0)],
        template_color=color,
        template_alpha=alpha,
        canvas_hw=canvas_hw,
        frame_scale=template_size / 2.0,
        # the generator turns on exactly one class parent per scene
        p=1.0 / P,
        sigma=0.2,
    )
    params.validate()
    return params


def randomized_init(params: ModelParams, rng: np.random.Generator, keep_templates: bool = True) -> ModelParams:
    """Random gamma, rho and M (and optionally templates) around neutral values.

    Dummy rows and scalar hyperparameters are kept.  Pose scales start
    wide (1.0) so early responsibilities are not all absorbed by the dummy.
    """
    out = params.copy()
    for layer in out.layers:
        shape = layer.rho[1:].shape
        layer.rho[1:] = rng.uniform(0.5, 1.5, shape)
        layer.gamma[1:] = rng.uniform(0.3, 0.7, shape)
        layer.M[1:] = make_offsets(rng.uniform(-1, 1, shape), rng.uniform(-1, 1, shape), rng.uniform(-0.3, 0.3, shape), 1.0)
        layer.c[1:] = 1.0
    if not keep_templates:
        out.template_color = rng.uniform(0.3, 0.7, out.template_color.shape)
        out.template_alpha = rng.uniform(0.3, 0.7, out.template_alpha.shape)
    out.validate()
    return out


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """How to draw a labelled synthetic dataset from a model.

    Class ``k`` forces top-level parent ``k`` on at a jittered pose; every
    other parent is switched on independently with ``clutter_rate``.
    Translation jitter is in model units, rotation in degrees, scale as a
    multiplicative range.  Child capsules are sampled from the model.
    """

    n_classes: int = 4
    samples_per_class: int = 25
    translation: float = 0.4
    rotation: float = 10.0
    scale: tuple[float, float] = (0.95, 1.05)
    clutter_rate: float = 0.0
    noise_sigma: float = 0.2
    seed: int = 0
    model: str = "benchmark"

    def validate(self, params: ModelParams | None = None) -> None:
        if self.n_classes < 1 or self.samples_per_class < 1:
            raise ValueError("need at least one class and one sample per class")
        if params is not None and self.n_classes > params.n_top:
            raise ValueError(f"n_classes={self.n_classes} exceeds the {params.n_top} top-level capsules")
        if not 0.0 <= self.clutter_rate <= 1.0:
            raise ValueError("clutter_rate must lie in [0, 1]")
        lo, hi = self.scale
        if not 0.0 < lo <= hi:
            raise ValueError("scale range must be positive and ordered")
        if self.translation < 0 or self.rotation < 0 or self.noise_sigma < 0:
            raise ValueError("jitter ranges and noise must be non-negative")

    def to_document(self) -> dict:
        hp = asdict(self)
        hp["scale"] = list(self.scale)
        return {"version": FORMAT_VERSION, "kind": "synthetic_spec", "shapes": {}, "hyperparams": hp, "arrays": {}}

    @classmethod
    def from_document(cls, doc: dict) -> "SyntheticSpec":
        if doc.get("kind") != "synthetic_spec":
            raise ValueError("document is not a synthetic_spec")
        hp = dict(doc["hyperparams"])
        if "scale" in hp:
            hp["scale"] = tuple(hp["scale"])
        unknown = set(hp) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown synthetic_spec fields {sorted(unknown)}")
        spec = cls(**hp)
        spec.validate()
        return spec


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    n_classes: int
    latents: LatentState | None = None
    clean: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def hw(self) -> tuple[int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(
            self.images[index],
            self.labels[index],
            self.n_classes,
            None if self.latents is None else self.latents.select(index),
            None if self.clean is None else self.clean[index],
        )

    def split(self, n_train: int) -> tuple["Dataset", "Dataset"]:
        idx = np.arange(len(self))
        return self.subset(idx[:n_train]), self.subset(idx[n_train:])


def planted_top_poses(spec: SyntheticSpec, rng: np.random.Generator, n: int, n_top: int) -> np.ndarray:
    tx = rng.uniform(-spec.translation, spec.translation, (n, n_top))
    ty = rng.uniform(-spec.translation, spec.translation, (n, n_top))
    ang = np.deg2rad(rng.uniform(-spec.rotation, spec.rotation, (n, n_top)))
    sc = rng.uniform(spec.scale[0], spec.scale[1], (n, n_top))
    return make_offsets(tx, ty, ang, sc)


def generate_dataset(spec: SyntheticSpec, params: ModelParams, rng: np.random.Generator | None = None) -> Dataset:
    """Labelled scenes, interleaved by class, with ground-truth latents."""
    spec.validate(params)
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    n = spec.n_classes * spec.samples_per_class
    labels = np.tile(np.arange(spec.n_classes), spec.samples_per_class)
    top_t = (rng.random((n, params.n_top)) < spec.clutter_rate).astype(np.float64)
    top_t[np.arange(n), labels] = 1.0
    top_A = planted_top_poses(spec, rng, n, params.n_top)
    latents = sample_latents(params, rng, n, top_presence=top_t, top_poses=top_A)
    clean = render_latents(params, latents)
    images = np.clip(clean + spec.noise_sigma * rng.standard_normal(clean.shape), 0.0, 1.0)
    # the file stores float32 pixels; keep the in-memory copy identical
    images = images.astype(np.float32).astype(np.float64)
    return Dataset(images, labels.astype(np.int64), spec.n_classes, latents, clean)


def to_bytes(ds: Dataset) -> bytes:
    H, W = ds.hw
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, DATASET_VERSION, len(ds), H, W, ds.n_classes))
    rec = np.empty(len(ds), dtype=[("label", "<u4"), ("pixels", "<f4", (H * W,))])
    rec["label"] = ds.labels
    rec["pixels"] = ds.images.reshape(len(ds), -1)
    buf.write(rec.tobytes())
    return buf.getvalue()


def from_bytes(raw: bytes) -> Dataset:
    if len(raw) < _HEADER.size:
        raise DatasetFormatError("file too short for a dataset header")
    magic, version, count, H, W, n_classes = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    dtype = np.dtype([("label", "<u4"), ("pixels", "<f4", (H * W,))])
    body = raw[_HEADER.size:]
    if len(body) != count * dtype.itemsize:
        raise DatasetFormatError(f"expected {count} records of {dtype.itemsize} bytes, found {len(body)} bytes")
    rec = np.frombuffer(body, dtype=dtype, count=count)
    images = rec["pixels"].astype(np.float64).reshape(count, H, W)
    return Dataset(images, rec["label"].astype(np.int64), int(n_classes))


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".latents.json")


def save_dataset(ds: Dataset, path, with_latents: bool = True) -> None:
    Path(path).write_bytes(to_bytes(ds))
    if with_latents and ds.latents is not None:
        Path(sidecar_path(path)).write_text(dump_document(ds.latents.to_document()))


def load_dataset(path, with_latents: bool = True) -> Dataset:
    ds = from_bytes(Path(path).read_bytes())
    side = sidecar_path(path)
    if with_latents and side.exists():
        ds.latents = LatentState.from_document(json.loads(side.read_text()))
    return ds


# ---------------------------------------------------------------------------
# readout
# ---------------------------------------------------------------------------

@dataclass
class ReadoutModel:
    """Multinomial logistic regression ``softmax(x W + b)``."""

    weights: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    iterations: int = 0
    grad_norm: float = math.nan

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]

    def logits(self, features) -> np.ndarray:
        x = (np.asarray(features, dtype=np.float64) - self.mean) / self.scale
        return x @ self.weights + self.bias

    def predict(self, features) -> np.ndarray:
        return np.argmax(self.logits(features), axis=1)

    def accuracy(self, features, labels) -> float:
        return float(np.mean(self.predict(features) == np.asarray(labels)))


def train_readout(features, labels, l2: float = 1e-3, tol: float = 1e-5, max_iter: int = 10_000) -> ReadoutModel:
    """Fit a multinomial logistic readout by full-batch gradient descent.

    Features are standardised first; a small L2 penalty keeps the optimum
    finite on separable data.  Stops once the gradient norm drops below
    ``tol`` or after ``max_iter`` Nesterov-accelerated steps.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("train_readout needs at least two classes")
    n_classes = int(y.max()) + 1
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    z = (x - mean) / scale
    n, d = z.shape
    onehot = np.eye(n_classes)[y]
    theta = np.zeros((d + 1, n_classes))
    design = np.hstack([z, np.ones((n, 1))])
    # Lipschitz bound of the averaged softmax loss gradient
    lip = 0.5 * np.linalg.norm(design, 2) ** 2 / n + l2
    step = 1.0 / lip
    penalty = np.ones((d + 1, 1))
    penalty[-1] = 0.0

    def gradient(th):
        logits = design @ th
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        return design.T @ (p - onehot) / n + l2 * penalty * th

    prev = theta.copy()
    g = gradient(theta)
    it = 0
    for it in range(1, max_iter + 1):
        look = theta + (it - 1) / (it + 2) * (theta - prev)
        prev = theta
        theta = look - step * gradient(look)
        g = gradient(theta)
        if np.linalg.norm(g) < tol:
            break
    return ReadoutModel(theta[:-1], theta[-1], mean, scale, it, float(np.linalg.norm(g)))


FEATURE_MODES = ("t", "tA")


def latent_features(q_or_latents, mode: str = "t") -> np.ndarray:
    """Top-level readout features in capsule order.

    ``mode="t"``: mean presences (``n_top`` values); ``mode="tA"``: each
    capsule's presence followed by its six pose-offset numbers
    (``7 * n_top`` values).  Accepts a :class:`VariationalState` or
    :class:`LatentState`.
    """
    if mode not in FEATURE_MODES:
        raise ValueError(f"mode must be one of {FEATURE_MODES}")
    if hasattr(q_or_latents, "mean_presences"):
        t0 = q_or_latents.mean_presences()[0]
        A0 = q_or_latents.pose_means[0]
    else:
        t0 = np.asarray(q_or_latents.presences[0], dtype=np.float64)
        A0 = np.asarray(q_or_latents.poses[0], dtype=np.float64)
    if mode == "t":
        return t0.copy()
    B, n = t0.shape
    return np.concatenate([t0[..., None], A0.reshape(B, n, 6)], axis=-1).reshape(B, 7 * n)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    accuracy: float
    per_class_accuracy: dict[int, float]
    reconstruction_l2: float = math.nan
    mean_elbo: float = math.nan
    n: int = 0
    extra: dict[str, float] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float]]:
        out = [("n", float(self.n)), ("accuracy", self.accuracy)]
        out += [(f"accuracy_class_{k}", v) for k, v in sorted(self.per_class_accuracy.items())]
        out += [("reconstruction_l2", self.reconstruction_l2), ("mean_elbo", self.mean_elbo)]
        out += sorted(self.extra.items())
        return out

    def table(self) -> str:
        rows = self.rows()
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v:.6f}" for k, v in rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for k, v in self.rows():
            writer.writerow([k, repr(float(v))])
        return buf.getvalue()


def eval_metrics(pred, true, reconstructions=None, clean=None, elbos=None) -> Metrics:
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"prediction/label length mismatch: {pred.shape} vs {true.shape}")
    per_class = {int(k): float(np.mean(pred[true == k] == k)) for k in np.unique(true)}
    recon = math.nan
    if reconstructions is not None or clean is not None:
        if reconstructions is None or clean is None:
            raise ValueError("reconstructions and clean images must be given together")
        r = np.asarray(reconstructions, dtype=np.float64)
        c = np.asarray(clean, dtype=np.float64)
        if r.shape != c.shape or len(r) != len(true):
            raise ValueError(f"reconstruction/clean mismatch: {r.shape} vs {c.shape} for {len(true)} labels")
        recon = float(np.mean(np.sqrt(np.sum((r - c) ** 2, axis=(-2, -1)))))
    mean_elbo = math.nan if elbos is None else float(np.mean(elbos))
    acc = float(np.mean(pred == true)) if len(true) else math.nan
    return Metrics(acc, per_class, recon, mean_elbo, int(len(true)))
