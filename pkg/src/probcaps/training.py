"""Fitting global model parameters by stochastic ascent on the bound.

Each batch runs free-form inference for every image (the E-like step on
the per-image variational parameters), then takes one gradient step on
the global parameters.  The final step of every batch differentiates the
ELBO once with respect to both parameter sets, so the two updates come
from the same scalar objective and the same backward pass.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .inference import (
    Adam,
    AdamConfig,
    ElboEstimate,
    FitDivergedError,
    VariationalState,
    elbo_estimate,
    fit_free_form,
    init_state,
    per_image_noise,
    PRESENCE_MODES,
)
from .model import FORMAT_VERSION, ModelParams, model_tensors, raw_parameters

POSE_MODES = ("delta", "full")


class TrainingError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, message: str):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"epoch {epoch}, batch {batch}: {message}")


@dataclass
class TrainConfig:
    """Hyperparameters of :func:`fit_parameters`.

    ``trainable`` lists the global parameter groups that move (see
    ``model.TRAINABLE``).  When ``learning_rate_theta_final`` is set the
    global step size decays geometrically to it over the run.
    ``theta_presence`` picks the presence estimator of the global step and
    of the held-out evaluation: ``"relaxed"`` (Concrete samples, the
    inference objective) or ``"discrete"`` (hard Bernoulli samples, the
    exact bound, whose optimum in gamma and rho is not shifted by the
    relaxation).  ``init_angles_deg`` is the rotation grid used by
    the template-matching initialiser.  ``eval_steps``/``eval_samples``
    control the held-out ELBO evaluation after every epoch.
    """

    epochs: int = 20
    batch_size: int = 50
    inner_inference_steps: int = 20
    learning_rate_theta: float = 1e-2
    learning_rate_theta_final: float | None = None
    learning_rate_phi: float = 3e-2
    n_samples: int = 1
    seed: int = 0
    pose_mode: str = "delta"
    sigma_min: float = 0.2
    c_min: float = 0.1
    temperature: float = 1.0
    theta_presence: str = "relaxed"
    trainable: tuple[str, ...] = ("rho", "gamma", "M", "c", "templates", "sigma")
    init_angles_deg: tuple[float, ...] = tuple(range(-60, 61, 15))
    eval_steps: int = 60
    eval_samples: int = 8
    threads: int = 1

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.inner_inference_steps < 0:
            raise ValueError("epochs and batch_size must be >= 1, inner_inference_steps >= 0")
        if self.pose_mode not in POSE_MODES:
            raise ValueError(f"pose_mode must be one of {POSE_MODES}")
        if self.sigma_min < 0.2 - 1e-12 or self.c_min < 0.1 - 1e-12:
            raise ValueError("floors may not go below sigma_min=0.2 and c_min=0.1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.theta_presence not in PRESENCE_MODES:
            raise ValueError(f"theta_presence must be one of {PRESENCE_MODES}")
        if self.learning_rate_theta <= 0 or self.learning_rate_phi <= 0:
            raise ValueError("learning rates must be positive")
        if self.n_samples < 1 or self.eval_samples < 1 or self.threads < 1:
            raise ValueError("sample and thread counts must be >= 1")

    def to_document(self) -> dict:
        hp = asdict(self)
        hp["trainable"] = list(self.trainable)
        hp["init_angles_deg"] = list(self.init_angles_deg)
        return {"version": FORMAT_VERSION, "kind": "train_config", "shapes": {}, "hyperparams": hp, "arrays": {}}

    @classmethod
    def from_document(cls, doc: dict) -> "TrainConfig":
        if doc.get("kind") != "train_config":
            raise ValueError("document is not a train_config")
        hp = dict(doc["hyperparams"])
        unknown = set(hp) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train_config fields {sorted(unknown)}")
        for key in ("trainable", "init_angles_deg"):
            if key in hp:
                hp[key] = tuple(hp[key])
        cfg = cls(**hp)
        cfg.validate()
        return cfg

    @property
    def init_angles(self) -> np.ndarray:
        return np.deg2rad(np.asarray(self.init_angles_deg, dtype=np.float64))


@dataclass
class TrainReport:
    """Per-epoch mean ELBO per image on the training batches and held-out set.

    ``snapshots`` holds a SHA-256 digest of the serialised parameters after
    each epoch; ``joint_passes`` counts the backward passes that produced
    both the global and the per-image gradients (one per batch).
    """

    epochs: list[int] = field(default_factory=list)
    train_elbo: list[float] = field(default_factory=list)
    heldout_elbo: list[float] = field(default_factory=list)
    snapshots: list[str] = field(default_factory=list)
    joint_passes: int = 0

    def record(self, epoch: int, train: float, heldout: float, params: ModelParams) -> None:
        if self.epochs and epoch != self.epochs[-1] + 1:
            raise ValueError("epochs must be recorded consecutively")
        self.epochs.append(epoch)
        self.train_elbo.append(train)
        self.heldout_elbo.append(heldout)
        self.snapshots.append(hashlib.sha256(params.to_json().encode()).hexdigest())

    def to_document(self) -> dict:
        """Serialisable form; ``heldout_elbo`` is omitted when training ran without a held-out set."""
        arrays = {
            "epoch": np.asarray(self.epochs, dtype=np.float64),
            "train_elbo": np.asarray(self.train_elbo, dtype=np.float64),
        }
        held = np.asarray(self.heldout_elbo, dtype=np.float64)
        if np.all(np.isfinite(held)):
            arrays["heldout_elbo"] = held
        return {
            "version": FORMAT_VERSION,
            "kind": "train_report",
            "shapes": {"epochs": len(self.epochs)},
            "hyperparams": {"joint_passes": self.joint_passes, "snapshots": list(self.snapshots)},
            "arrays": arrays,
        }


def smoothed(values: Sequence[float], window: int = 5) -> np.ndarray:
    """Means over consecutive non-overlapping windows of ``window`` epochs."""
    v = np.asarray(values, dtype=np.float64)
    n = len(v) // window
    return v[: n * window].reshape(n, window).mean(axis=1)


# ---------------------------------------------------------------------------
# per-image inference, optionally split across threads
# ---------------------------------------------------------------------------

def _image_seeds(seed: int, tag: int, epoch: int, indices: np.ndarray) -> list:
    return [[seed, tag, epoch, int(i)] for i in indices]


def _chunks(n: int, threads: int) -> list[slice]:
    bounds = np.linspace(0, n, min(threads, n) + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def infer_batch(
    params,
    images: np.ndarray,
    init: VariationalState,
    steps: int,
    step_size: float,
    seeds: Sequence,
    n_samples: int = 1,
    threads: int = 1,
    final_step_size: float | None = None,
    return_traces: bool = False,
):
    """Free-form inference for a batch; images are split across threads.

    Every image draws noise from its own stream and the update rule is
    elementwise, so the result does not depend on ``threads``.  With
    ``return_traces`` the result is ``(state, traces)`` where ``traces[i]``
    is ``(trace, column)`` locating image ``i`` inside a per-thread trace.
    """
    if steps == 0:
        return (init.copy(), []) if return_traces else init.copy()
    parts = _chunks(len(images), threads)

    def run(sl: slice):
        return fit_free_form(
            params, images[sl], init.select(sl), steps, step_size,
            noise_seeds=seeds[sl], n_samples=n_samples, final_step_size=final_step_size,
        )

    if len(parts) == 1:
        results = [run(parts[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(parts)) as pool:
            results = list(pool.map(run, parts))
    states = [r[0] for r in results]
    if len(states) == 1:
        state = states[0]
    else:
        arrays = {k: np.concatenate([s.arrays()[k] for s in states], axis=0) for k in states[0].arrays()}
        state = VariationalState.from_arrays(arrays, init.mode)
    if not return_traces:
        return state
    traces = [(trace, i) for (_, trace), sl in zip(results, parts) for i in range(sl.stop - sl.start)]
    return state, traces


def evaluate_elbo(
    params: ModelParams,
    images: np.ndarray,
    config: TrainConfig,
    tag: int = 1,
    epoch: int = 0,
    return_state: bool = False,
):
    """Mean per-image ELBO after fitting q from the standard initialiser.

    Deterministic given ``config.seed``, ``tag`` and ``epoch``.
    """
    images = np.asarray(images, dtype=np.float64)
    idx = np.arange(len(images))
    rng = np.random.default_rng([config.seed, tag, epoch, 0])
    q0 = init_state(params, images, rng, mode=config.pose_mode, angles=config.init_angles)
    seeds = _image_seeds(config.seed, tag, epoch, idx)
    q = infer_batch(params, images, q0, config.eval_steps, config.learning_rate_phi, seeds,
                    threads=config.threads, final_step_size=config.learning_rate_phi / 10)
    noise = per_image_noise(q, config.eval_samples, [[config.seed, tag + 1000, epoch, int(i)] for i in idx])
    est = elbo_estimate(params, q, images, noise=noise, presence=config.theta_presence)
    if return_state:
        return est, q
    return float(np.mean(est.per_image))


# ---------------------------------------------------------------------------
# joint step
# ---------------------------------------------------------------------------

def joint_gradients(params: ModelParams, trainable: Sequence[str], raw: dict, q: VariationalState, images, noise, presence: str = "relaxed"):
    """One backward pass of the batch-mean ELBO.

    Returns ``(estimate, theta_grads, phi_grads)`` where both gradient
    dicts come from the same tape.
    """
    view = model_tensors(params, trainable, raw=raw)
    phi_leaves = {k: ad.parameter(v) for k, v in q.arrays().items()}
    est = elbo_estimate(view, q, images, noise=noise, leaves=phi_leaves, presence=presence)
    objective = est.objective / len(images)
    ad.backward(objective)
    theta = {k: (np.zeros_like(v.data) if v.grad is None else v.grad) for k, v in view.leaves.items()}
    phi = {k: (np.zeros_like(v.data) if v.grad is None else v.grad) for k, v in phi_leaves.items()}
    return est, theta, phi


def _apply_config(params: ModelParams, config: TrainConfig) -> ModelParams:
    out = params.copy()
    out.c_min = config.c_min
    out.sigma_min = config.sigma_min
    out.tau = config.temperature
    out.sigma = max(out.sigma, config.sigma_min)
    for layer in out.layers:
        layer.c[1:] = np.maximum(layer.c[1:], config.c_min)
    out.validate()
    return out


def fit_parameters(
    dataset,
    config: TrainConfig,
    init: ModelParams,
    rng: np.random.Generator | None = None,
    heldout=None,
    callback: Callable[[int, ModelParams, TrainReport], None] | None = None,
) -> tuple[ModelParams, TrainReport]:
    """Stochastic maximisation of the bound over the global parameters.

    ``dataset``/``heldout`` are image arrays ``(N, H, W)`` or objects with
    an ``images`` attribute.  Per-image variational parameters are
    re-initialised for every batch from the template-matching heuristic
    (:func:`inference.init_state`) and refined by
    ``inner_inference_steps`` free-form steps; then one joint backward pass
    yields the global gradient for an Adam step.  Constrained parameters
    are updated through their unconstrained parameterisations, so floors
    hold after every update.  All randomness derives from ``config.seed``
    (``rng`` is accepted for interface symmetry and only used to draw the
    shuffling seed when given).
    """
    config.validate()
    images = np.asarray(getattr(dataset, "images", dataset), dtype=np.float64)
    if len(images) == 0:
        raise ValueError("fit_parameters needs a non-empty dataset")
    held = None if heldout is None else np.asarray(getattr(heldout, "images", heldout), dtype=np.float64)
    params = _apply_config(init, config)
    trainable = tuple(config.trainable)
    raw = raw_parameters(params, trainable)
    opt = Adam(raw, AdamConfig(lr=config.learning_rate_theta))
    report = TrainReport()
    shuffle_seed = config.seed if rng is None else int(rng.integers(2**31))
    N = len(images)
    n_batches = math.ceil(N / config.batch_size)
    total_steps = config.epochs * n_batches
    for epoch in range(config.epochs):
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(N)
        batch_elbos = []
        for b, start in enumerate(range(0, N, config.batch_size)):
            idx = order[start:start + config.batch_size]
            x = images[idx]
            view = model_tensors(params)
            q = init_state(params, x, np.random.default_rng([config.seed, 2, epoch, b]), mode=config.pose_mode, angles=config.init_angles)
            seeds = _image_seeds(config.seed, 3, epoch, idx)
            try:
                q = infer_batch(view, x, q, config.inner_inference_steps, config.learning_rate_phi, seeds,
                                n_samples=config.n_samples, threads=config.threads)
                noise = per_image_noise(q, config.n_samples, _image_seeds(config.seed, 4, epoch, idx))
                est, g_theta, _ = joint_gradients(params, trainable, raw, q, x, noise, config.theta_presence)
            except (FitDivergedError, FloatingPointError) as exc:
                raise TrainingError(epoch, b, str(exc)) from exc
            report.joint_passes += 1
            if not all(np.all(np.isfinite(g)) for g in g_theta.values()):
                raise TrainingError(epoch, b, "non-finite parameter gradient")
            lr = config.learning_rate_theta
            if config.learning_rate_theta_final is not None and total_steps > 1:
                frac = (epoch * n_batches + b) / (total_steps - 1)
                lr = lr * (config.learning_rate_theta_final / lr) ** frac
            raw = opt.step(raw, g_theta, lr=lr)
            params = model_tensors(params, trainable, raw=raw).to_params()
            batch_elbos.append(est.per_image)
        train = float(np.mean(np.concatenate(batch_elbos)))
        if not math.isfinite(train):
            raise TrainingError(epoch, -1, "non-finite training ELBO")
        held_value = math.nan if held is None else evaluate_elbo(params, held, config, tag=5, epoch=0)
        report.record(epoch, train, held_value, params)
        if callback is not None:
            callback(epoch, params, report)
    return params, report


def warm_start_full_posterior(params: ModelParams, dataset, config: TrainConfig, heldout=None, callback=None):
    """Continue training in full (Gaussian pose) mode from delta-mode parameters."""
    full = replace(config, pose_mode="full")
    return fit_parameters(dataset, full, params, heldout=heldout, callback=callback)
