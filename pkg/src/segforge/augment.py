"""Geometric data augmentation: scale/rotate/flip plus B-spline elastic warps.

One random transform is drawn per (image, label) pair and applied to
both: the image is sampled bilinearly with border clamping, the label
with nearest neighbor and zero fill, so labels stay binary. Random draws
consume the generator in a fixed order (scale?, rotate?, flip?,
elastic?), making results a pure function of (inputs, seed).
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError


@dataclass
class AugmentPolicy:
    scale_range: tuple = (0.8, 1.2)
    scale_prob: float = 0.5
    rot_max_deg: float = 30.0
    rot_prob: float = 0.3
    flip_prob: float = 0.3
    elastic_grid: int = 32
    elastic_max_disp: float = 10.0
    elastic_prob: float = 0.3

    def __post_init__(self):
        for p in (self.scale_prob, self.rot_prob, self.flip_prob, self.elastic_prob):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"probability {p} outside [0, 1]")
        if self.scale_range[0] <= 0:
            raise ConfigError("scale range must be positive")


def identity_policy():
    return AugmentPolicy(scale_prob=0.0, rot_prob=0.0, flip_prob=0.0, elastic_prob=0.0)


@dataclass
class TransformParams:
    scale: float | None
    angle_deg: float | None
    flip: str | None
    elastic: tuple | None  # (field_rows, field_cols)


def _bspline_weight_matrix(size, spacing):
    """(size, n_controls) matrix of uniform cubic B-spline weights.

    Control points sit at multiples of ``spacing`` starting one cell
    before the image, so every pixel has full 4-point support; the basis
    is a partition of unity, bounding the field by the control values.
    """
    m = int(np.ceil((size - 1) / spacing))
    n_controls = m + 4
    t = np.arange(size) / spacing
    k = np.floor(t).astype(np.int64)
    u = t - k
    b0 = (1.0 - u) ** 3 / 6.0
    b1 = (3.0 * u**3 - 6.0 * u**2 + 4.0) / 6.0
    b2 = (-3.0 * u**3 + 3.0 * u**2 + 3.0 * u + 1.0) / 6.0
    b3 = u**3 / 6.0
    w = np.zeros((size, n_controls))
    rows = np.arange(size)
    for j, basis in enumerate((b0, b1, b2, b3)):
        w[rows, k + j] = basis
    return w


def make_elastic_field(shape, grid_spacing, max_disp, rng):
    """Dense (rows, cols) displacement fields from random control-point offsets."""
    if grid_spacing < 4:
        raise ConfigError("elastic grid spacing must be >= 4 px")
    if max_disp < 0:
        raise ConfigError("elastic max displacement must be >= 0")
    h, w = shape
    wy = _bspline_weight_matrix(h, grid_spacing)
    wx = _bspline_weight_matrix(w, grid_spacing)
    ctrl = rng.uniform(-max_disp, max_disp, size=(2, wy.shape[1], wx.shape[1]))
    field_rows = wy @ ctrl[0] @ wx.T
    field_cols = wy @ ctrl[1] @ wx.T
    return field_rows, field_cols


def draw_params(policy, rng, shape):
    """Consume the rng in documented order: scale?, rotate?, flip?, elastic?."""
    scale = None
    if rng.uniform() < policy.scale_prob:
        scale = float(rng.uniform(*policy.scale_range))
    angle = None
    if rng.uniform() < policy.rot_prob:
        magnitude = float(rng.uniform(0.0, policy.rot_max_deg))
        sign = 1.0 if rng.uniform() < 0.5 else -1.0
        angle = sign * magnitude
    flip = None
    if rng.uniform() < policy.flip_prob:
        flip = "lr" if rng.uniform() < 0.5 else "ud"
    elastic = None
    if rng.uniform() < policy.elastic_prob:
        elastic = make_elastic_field(shape, policy.elastic_grid, policy.elastic_max_disp, rng)
    return TransformParams(scale, angle, flip, elastic)


def source_coords(params, shape):
    """(src_rows, src_cols) the output grid samples from, shared by image and label."""
    h, w = shape
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0

    # inverse affine: for each output pixel, where in the input it comes from
    a = np.eye(2)
    if params.scale is not None:
        a = a / params.scale
    if params.angle_deg is not None:
        th = np.deg2rad(params.angle_deg)
        rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        a = rot.T @ a
    if params.flip == "lr":
        a = a @ np.diag([1.0, -1.0])
    elif params.flip == "ud":
        a = a @ np.diag([-1.0, 1.0])

    ry = rows - cy
    rx = cols - cx
    src_rows = a[0, 0] * ry + a[0, 1] * rx + cy
    src_cols = a[1, 0] * ry + a[1, 1] * rx + cx

    if params.elastic is not None:
        src_rows = src_rows + params.elastic[0]
        src_cols = src_cols + params.elastic[1]
    return src_rows, src_cols


def bilinear_sample(image, src_rows, src_cols):
    """Bilinear interpolation with border clamping."""
    h, w = image.shape
    r = np.clip(src_rows, 0.0, h - 1.0)
    c = np.clip(src_cols, 0.0, w - 1.0)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = r - r0
    fc = c - c0
    top = image[r0, c0] * (1.0 - fc) + image[r0, c1] * fc
    bot = image[r1, c0] * (1.0 - fc) + image[r1, c1] * fc
    return top * (1.0 - fr) + bot * fr


def nearest_sample(label, src_rows, src_cols):
    """Nearest-neighbor sampling; out-of-bounds reads as background 0."""
    h, w = label.shape
    r = np.floor(src_rows + 0.5).astype(np.int64)
    c = np.floor(src_cols + 0.5).astype(np.int64)
    inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
    out = np.zeros_like(label, dtype=label.dtype)
    rr = np.clip(r, 0, h - 1)
    cc = np.clip(c, 0, w - 1)
    vals = label[rr, cc]
    out[inside] = vals[inside]
    return out


def apply_transform(image, label, params):
    if (
        params.scale is None
        and params.angle_deg is None
        and params.flip is None
        and params.elastic is None
    ):
        return image.copy(), label.copy()
    src_rows, src_cols = source_coords(params, image.shape)
    return (
        bilinear_sample(np.asarray(image, dtype=np.float64), src_rows, src_cols),
        nearest_sample(label, src_rows, src_cols),
    )


def augment(image, label, policy, rng):
    """Randomly transformed (image, label) under one shared geometric map."""
    image = np.asarray(image)
    label = np.asarray(label)
    if image.shape != label.shape:
        raise InputError(f"image shape {image.shape} != label shape {label.shape}")
    params = draw_params(policy, rng, image.shape)
    return apply_transform(image, label, params)


def elastic_deform(image, label, grid_spacing, max_disp, rng):
    """Pure elastic warp of both inputs by one random B-spline field."""
    field = make_elastic_field(image.shape, grid_spacing, max_disp, rng)
    params = TransformParams(None, None, None, field)
    return apply_transform(np.asarray(image), np.asarray(label), params)
