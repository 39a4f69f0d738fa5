"""Synthetic phantom generator: bright elliptical blobs on a darker noisy
background, standing in for clinical volumes at bench scale.

Each case is tagged with a difficulty kind mirroring the hard clinical
situations: ``small`` (foreground under 2% of pixels), ``disconnected``
(two well-separated components), ``blurred`` (strong boundary smoothing)
or ``normal``. Masks always describe the pre-blur geometry exactly, and
generation is a pure function of the PhantomSpec seed.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

SMALL_FRACTION_LIMIT = 0.02


@dataclass
class PhantomSpec:
    size: int = 64
    count: int = 100
    blob_count: tuple = (1, 2)
    noise_sigma: float = 0.05
    blur_sigma: float = 2.2
    frac_small: float = 0.2
    frac_disconnected: float = 0.2
    frac_blurred: float = 0.2
    seed: int = 0

    def __post_init__(self):
        total = self.frac_small + self.frac_disconnected + self.frac_blurred
        if total > 1.0 + 1e-12:
            raise ConfigError(f"challenge fractions sum to {total}, must be <= 1")
        if self.size < 16 or self.count < 1:
            raise ConfigError("size must be >= 16 and count >= 1")


@dataclass
class PhantomCase:
    image: np.ndarray  # (S, S) float32 in [0, 1]
    mask: np.ndarray  # (S, S) uint8
    kind: str


def _gaussian_blur(img, sigma):
    if sigma <= 0:
        return img
    radius = max(1, int(np.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(img, radius, mode="edge")
    out = np.zeros_like(img, dtype=np.float64)
    for k, w in zip(range(-radius, radius + 1), kernel):
        out += w * padded[radius + k : radius + k + img.shape[0], radius : radius + img.shape[1]]
    img2 = out
    out = np.zeros_like(img, dtype=np.float64)
    padded = np.pad(img2, radius, mode="edge")
    for k, w in zip(range(-radius, radius + 1), kernel):
        out += w * padded[radius : radius + img.shape[0], radius + k : radius + k + img.shape[1]]
    return out


def _ellipse_mask(size, center, radii, angle):
    ys, xs = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    dy = ys - center[0]
    dx = xs - center[1]
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dy + sa * dx
    v = -sa * dy + ca * dx
    return (u / radii[0]) ** 2 + (v / radii[1]) ** 2 <= 1.0


def _normal_mask(size, rng, blob_count):
    n_blobs = int(rng.integers(blob_count[0], blob_count[1] + 1))
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(n_blobs):
        center = rng.uniform(0.25 * size, 0.75 * size, size=2)
        base = rng.uniform(0.12 * size, 0.24 * size)
        radii = (base * rng.uniform(0.75, 1.0), base * rng.uniform(0.75, 1.0))
        mask |= _ellipse_mask(size, center, radii, rng.uniform(0.0, np.pi))
    return mask


def _small_mask(size, rng):
    # near the 2% ceiling: tiny enough to exercise the challenge, big enough
    # that a half-pixel boundary error does not dominate the overlap score
    limit = SMALL_FRACTION_LIMIT * size * size
    center = rng.uniform(0.3 * size, 0.7 * size, size=2)
    base = rng.uniform(0.06 * size, 0.078 * size)
    ratio = rng.uniform(0.8, 1.0)
    angle = rng.uniform(0.0, np.pi)
    while True:
        mask = _ellipse_mask(size, center, (base, base * ratio), angle)
        if mask.sum() < limit and mask.any():
            return mask
        base *= 0.85


def _disconnected_mask(size, rng):
    # opposite quadrants with bounded radii: components cannot touch
    c1 = rng.uniform(0.22 * size, 0.32 * size, size=2)
    c2 = rng.uniform(0.68 * size, 0.78 * size, size=2)
    r1 = rng.uniform(0.08 * size, 0.12 * size)
    r2 = rng.uniform(0.08 * size, 0.12 * size)
    m1 = _ellipse_mask(size, c1, (r1, r1 * rng.uniform(0.75, 1.0)), rng.uniform(0.0, np.pi))
    m2 = _ellipse_mask(size, c2, (r2, r2 * rng.uniform(0.75, 1.0)), rng.uniform(0.0, np.pi))
    return m1 | m2


def _case_kinds(spec):
    n_small = int(round(spec.frac_small * spec.count))
    n_disc = int(round(spec.frac_disconnected * spec.count))
    n_blur = int(round(spec.frac_blurred * spec.count))
    kinds = ["small"] * n_small + ["disconnected"] * n_disc + ["blurred"] * n_blur
    kinds += ["normal"] * (spec.count - len(kinds))
    order = np.random.default_rng([spec.seed, 7919]).permutation(spec.count)
    return [kinds[i] for i in order]


def generate_phantoms(spec):
    """Deterministic list of PhantomCase with the declared challenge mix."""
    kinds = _case_kinds(spec)
    cases = []
    for idx, kind in enumerate(kinds):
        rng = np.random.default_rng([spec.seed, idx])
        if kind == "small":
            mask = _small_mask(spec.size, rng)
        elif kind == "disconnected":
            mask = _disconnected_mask(spec.size, rng)
        else:
            mask = _normal_mask(spec.size, rng, spec.blob_count)
        fg = rng.uniform(0.65, 0.8)
        bg = rng.uniform(0.2, 0.35)
        clean = np.where(mask, fg, bg)
        sigma = spec.blur_sigma if kind == "blurred" else 0.5
        blurred = _gaussian_blur(clean, sigma)
        noisy = blurred + rng.normal(0.0, spec.noise_sigma, size=blurred.shape)
        image = np.clip(noisy, 0.0, 1.0).astype(np.float32)
        cases.append(PhantomCase(image, mask.astype(np.uint8), kind))
    return cases
