"""Template warping, alpha compositing and the Gaussian pixel likelihood.

Poses passed to :func:`warp_template` and :func:`composite_scene` map
template pixel coordinates ``(col, row)`` to canvas pixel coordinates.
The model works in a centred frame instead (see :class:`Frame`); the
batched :func:`render` routine converts on the fly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import GaussianParams, normal_log_prob
from .poses import PoseTransform, SingularPoseError, check_invertible

SIGMA_MIN = 0.2


class RenderShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Template:
    color: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        color = np.asarray(self.color, dtype=np.float64)
        alpha = np.asarray(self.alpha, dtype=np.float64)
        if color.shape != alpha.shape or color.ndim != 2:
            raise RenderShapeError(f"template color {color.shape} and alpha {alpha.shape} must be equal 2D shapes")
        if np.any(alpha < 0) or np.any(alpha > 1):
            raise ValueError("template alpha must lie in [0, 1]")
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "alpha", alpha)

    @classmethod
    def from_raw(cls, raw_color, raw_alpha) -> "Template":
        """Squash unconstrained values through a sigmoid into [0, 1]."""
        return cls(ad.sigmoid(raw_color).data, ad.sigmoid(raw_alpha).data)

    @property
    def shape(self) -> tuple[int, int]:
        return self.color.shape


@dataclass
class Canvas:
    """Straight (non-premultiplied) color plane plus alpha plane."""

    color: Tensor
    alpha: Tensor

    def __post_init__(self):
        self.color = ad.as_tensor(self.color)
        self.alpha = ad.as_tensor(self.alpha)
        if self.color.shape != self.alpha.shape:
            raise RenderShapeError(f"canvas color {self.color.shape} and alpha {self.alpha.shape} differ")

    @classmethod
    def blank(cls, H: int, W: int) -> "Canvas":
        return cls(np.zeros((H, W)), np.zeros((H, W)))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.color.shape

    def flatten(self) -> Tensor:
        """The canvas composited over an opaque black background."""
        return self.color * self.alpha


@dataclass(frozen=True)
class Frame:
    """Centred model frame: one unit is ``scale`` pixels.

    A model pose offset ``A`` is drawn on the canvas by the pixel transform
    ``C @ (I + A) @ T^-1`` where ``T`` and ``C`` map model units onto the
    template and canvas pixel grids, both centred.
    """

    scale: float
    template_hw: tuple[int, int]
    canvas_hw: tuple[int, int]
    centered: bool = True

    @classmethod
    def pixel(cls, template_hw, canvas_hw) -> "Frame":
        """Uncentred unit frame: model poses are pixel-space poses."""
        return cls(1.0, tuple(template_hw), tuple(canvas_hw), centered=False)

    @property
    def template_center(self) -> tuple[float, float]:
        if not self.centered:
            return 0.0, 0.0
        h, w = self.template_hw
        return (w - 1) / 2.0, (h - 1) / 2.0

    @property
    def canvas_center(self) -> tuple[float, float]:
        if not self.centered:
            return 0.0, 0.0
        H, W = self.canvas_hw
        return (W - 1) / 2.0, (H - 1) / 2.0

    def to_pixel(self, offset: np.ndarray) -> np.ndarray:
        """Pixel-space pose offset equivalent to a model-frame offset."""
        offset = np.asarray(offset, dtype=np.float64)
        lin = offset[..., :, :2] + np.eye(2)
        ct = np.array(self.template_center)
        cc = np.array(self.canvas_center)
        trans = self.scale * offset[..., :, 2] + cc - np.einsum("...ij,j->...i", lin, ct)
        out = np.concatenate([lin - np.eye(2), trans[..., None]], axis=-1)
        return out

    def from_pixel(self, pixel_offset: np.ndarray) -> np.ndarray:
        pixel_offset = np.asarray(pixel_offset, dtype=np.float64)
        lin = pixel_offset[..., :, :2] + np.eye(2)
        ct = np.array(self.template_center)
        cc = np.array(self.canvas_center)
        trans = (pixel_offset[..., :, 2] - cc + np.einsum("...ij,j->...i", lin, ct)) / self.scale
        return np.concatenate([lin - np.eye(2), trans[..., None]], axis=-1)

    def pixel_translation(self, offset: np.ndarray) -> np.ndarray:
        """Canvas pixel position of the template centre."""
        offset = np.asarray(offset, dtype=np.float64)
        return self.scale * offset[..., :, 2] + np.array(self.canvas_center)


def sample_coordinates(offsets, frame: Frame):
    """Template sampling coordinates for every canvas pixel.

    ``offsets`` has shape ``(..., 2, 3)``; returns ``(u, v)`` tensors with
    shape ``(..., H, W)``.
    """
    offsets = ad.as_tensor(offsets)
    H, W = frame.canvas_hw
    ctx, cty = frame.template_center
    ccx, ccy = frame.canvas_center
    s = frame.scale
    a = offsets[..., 0, 0] + 1.0
    b = offsets[..., 0, 1]
    c = offsets[..., 1, 0]
    d = offsets[..., 1, 1] + 1.0
    det = a * d - b * c
    ox = offsets[..., 0, 2] * s + ccx
    oy = offsets[..., 1, 2] * s + ccy
    xs = np.arange(W, dtype=np.float64)[None, :]
    ys = np.arange(H, dtype=np.float64)[:, None]

    def grid(t):
        return ad.reshape(t, t.shape + (1, 1))

    dx = xs - grid(ox)
    dy = ys - grid(oy)
    u = (grid(d / det) * dx - grid(b / det) * dy) + ctx
    v = (grid(a / det) * dy - grid(c / det) * dx) + cty
    return u, v


def warp_sources(sources, offsets, frame: Frame) -> Tensor:
    """Inverse-warp stacked templates.

    ``sources``: ``(C, K, h, w)``; ``offsets``: ``(..., C, 2, 3)``.
    Returns ``(..., C, K, H, W)``.
    """
    u, v = sample_coordinates(offsets, frame)
    return ad.grid_sample(sources, u, v)


def warp_template(tpl: Template, pose: PoseTransform, H: int, W: int) -> Canvas:
    """Warp a template onto an H x W canvas by a pixel-space pose."""
    try:
        check_invertible(pose.offset)
    except SingularPoseError:
        raise SingularPoseError("warp_template: pose is singular") from None
    src = np.stack([tpl.color, tpl.alpha])[None]
    frame = Frame.pixel(tpl.shape, (H, W))
    out = warp_sources(src, pose.offset[None], frame)
    return Canvas(out[0, 0], out[0, 1])


def safe_divide(num, den) -> Tensor:
    """num / den where den > 0, else 0 (num is 0 there by construction)."""
    den = ad.as_tensor(den)
    positive = den.data > 0
    return ad.where(positive, ad.as_tensor(num) / ad.where(positive, den, 1.0), 0.0)


def over(top: Canvas, bottom: Canvas) -> Canvas:
    """Draw ``top`` over ``bottom`` (straight-alpha over operator)."""
    if top.shape != bottom.shape:
        raise RenderShapeError(f"over: canvas shapes differ {top.shape} vs {bottom.shape}")
    below = bottom.alpha * (1.0 - top.alpha)
    alpha_o = top.alpha + below
    # colour as a weighted sum, so fully opaque or fully transparent tops
    # reproduce the visible canvas bit for bit (w / w is exactly 1)
    color = top.color * safe_divide(top.alpha, alpha_o) + bottom.color * safe_divide(below, alpha_o)
    return Canvas(color, alpha_o)


def composite_premultiplied(colors, alphas, presences):
    """Fold the over operator across the capsule axis in premultiplied form.

    ``colors``/``alphas``: ``(..., C, H, W)`` warped planes, ``presences``:
    ``(..., C)``.  Capsule 0 is drawn first, so higher indices end up on top.
    Returns ``(premultiplied color, alpha)``, each ``(..., H, W)``.
    """
    colors, alphas, presences = ad.as_tensor(colors), ad.as_tensor(alphas), ad.as_tensor(presences)
    n = colors.shape[-3]
    pre = None
    acc = None
    for i in range(n):
        a_i = alphas[..., i, :, :] * ad.reshape(presences[..., i], presences.shape[:-1] + (1, 1))
        c_i = colors[..., i, :, :] * a_i
        if pre is None:
            pre, acc = c_i, a_i
        else:
            keep = 1.0 - a_i
            pre = c_i + pre * keep
            acc = a_i + acc * keep
    if pre is None:
        shape = colors.shape[:-3] + colors.shape[-2:]
        return Tensor(np.zeros(shape)), Tensor(np.zeros(shape))
    return pre, acc


def composite_scene(templates: Sequence[Template], poses: Sequence[PoseTransform], presences, H: int, W: int) -> Canvas:
    """Alpha-composite pixel-posed templates in ascending index order."""
    presences = ad.as_tensor(presences)
    if not (len(templates) == len(poses) == presences.shape[-1]):
        raise RenderShapeError("composite_scene: templates, poses and presences must have equal length")
    if not templates:
        return Canvas.blank(H, W)
    for p in poses:
        check_invertible(p.offset)
    shapes = {t.shape for t in templates}
    if len(shapes) != 1:
        raise RenderShapeError("composite_scene: templates must share one size")
    src = np.stack([np.stack([t.color, t.alpha]) for t in templates])
    offsets = np.stack([p.offset for p in poses])
    frame = Frame.pixel(templates[0].shape, (H, W))
    warped = warp_sources(src, offsets, frame)
    pre, acc = composite_premultiplied(warped[:, 0], warped[:, 1], presences)
    return Canvas(safe_divide(pre, acc), acc)


def render(sources, offsets, presences, frame: Frame):
    """Batched model-frame rendering; returns (premultiplied image, alpha)."""
    warped = warp_sources(sources, offsets, frame)
    return composite_premultiplied(warped[..., 0, :, :], warped[..., 1, :, :], presences)


def image_log_likelihood(x, scene, sigma: float = SIGMA_MIN, sigma_min: float = SIGMA_MIN) -> Tensor:
    """Sum of per-pixel Gaussian log-densities of ``x`` around the scene mean.

    ``scene`` is a :class:`Canvas` (flattened over black) or a mean-image
    tensor.  Leading batch dimensions are kept; the last two are summed.
    ``sigma`` is clamped from below at ``sigma_min``.
    """
    mean = scene.flatten() if isinstance(scene, Canvas) else ad.as_tensor(scene)
    x = ad.as_tensor(x)
    if x.shape[-2:] != mean.shape[-2:]:
        raise RenderShapeError(f"image_log_likelihood: image {x.shape} vs scene {mean.shape}")
    sig = ad.maximum(ad.as_tensor(sigma), sigma_min)
    lp = normal_log_prob(x, GaussianParams(mean, sig))
    return ad.sum_(lp, axis=(-2, -1))


# ---------------------------------------------------------------------------
# PGM export
# ---------------------------------------------------------------------------

def to_bytes(image) -> np.ndarray:
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, image) -> None:
    """Write an 8-bit binary PGM (P5) from values in [0, 1]."""
    data = to_bytes(image)
    if data.ndim != 2:
        raise RenderShapeError(f"write_pgm: expected 2D image, got {data.shape}")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    if int(parts[2]) != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w) / 255.0
