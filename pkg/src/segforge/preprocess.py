"""CT preprocessing chain: intensity window, per-slice histogram
equalization, z resampling, range normalization and standardization.

The full chain (`preprocess_volume`) runs in that order and expects a
raw ``hu`` volume; re-running it on an already processed volume is a
domain-tag error so pipelines cannot silently double-process.
"""

import numpy as np

from .errors import ConfigError, InputError
from .volume import Volume

HIST_BINS = 256


def hu_window(vol, lo=-200.0, hi=200.0):
    """Clamp raw intensities to [lo, hi]; idempotent."""
    if vol.domain != "hu":
        raise InputError(f"hu_window expects an hu-domain volume, got {vol.domain!r}")
    if lo >= hi:
        raise ConfigError(f"window bounds must satisfy lo < hi, got [{lo}, {hi}]")
    return vol.with_voxels(np.clip(vol.voxels, lo, hi))


def hist_equalize(slice2d):
    """Global 256-bin equalization of one slice; maps each value to its CDF in [0,1]."""
    arr = np.asarray(slice2d, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InputError("hist_equalize requires finite values")
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.ones_like(arr)
    bins = np.minimum(((arr - lo) / (hi - lo) * HIST_BINS).astype(np.int64), HIST_BINS - 1)
    hist = np.bincount(bins.reshape(-1), minlength=HIST_BINS)
    cdf = np.cumsum(hist) / arr.size
    return cdf[bins]


def equalize_volume(vol):
    """Per-slice equalization along z; output is unit-domain."""
    out = np.empty_like(vol.voxels, dtype=np.float64)
    for z in range(vol.dims[2]):
        out[:, :, z] = hist_equalize(vol.voxels[:, :, z])
    return Volume(out.astype(np.float32), vol.spacing, "unit")


def resample_z(vol, target_dz=1.0):
    """Resample along z to ~target_dz mm: linear for images, nearest for labels.

    New depth is round(Z * sz / target_dz); samples are endpoint-anchored
    over the existing slices and the stored spacing becomes Z*sz/newZ.
    """
    if target_dz <= 0:
        raise ConfigError("target z spacing must be positive")
    sx, sy, sz = vol.spacing
    z = vol.dims[2]
    new_z = max(1, int(round(z * sz / target_dz)))
    if new_z == z and abs(sz - target_dz) < 1e-12:
        return vol
    if new_z == 1:
        positions = np.array([(z - 1) / 2.0])
    else:
        positions = np.arange(new_z) * (z - 1) / (new_z - 1)
    if vol.domain == "label":
        idx = np.clip(np.floor(positions + 0.5).astype(np.int64), 0, z - 1)
        out = vol.voxels[:, :, idx]
    else:
        i0 = np.clip(np.floor(positions).astype(np.int64), 0, z - 1)
        i1 = np.minimum(i0 + 1, z - 1)
        frac = positions - i0
        out = vol.voxels[:, :, i0] * (1.0 - frac) + vol.voxels[:, :, i1] * frac
    new_sz = z * sz / new_z
    return Volume(out.astype(np.float32), (sx, sy, new_sz), vol.domain)


def normalize(vol):
    """Affine map of the value range onto [0, 1]."""
    lo = float(vol.voxels.min())
    hi = float(vol.voxels.max())
    if hi == lo:
        raise InputError("degenerate volume: constant values cannot be normalized")
    out = (vol.voxels.astype(np.float64) - lo) / (hi - lo)
    return Volume(out.astype(np.float32), vol.spacing, "unit")


def standardize(vol):
    """Zero-mean, unit-std values (domain tag ``std``)."""
    vals = vol.voxels.astype(np.float64)
    mu = vals.mean()
    sd = vals.std()
    if sd == 0.0:
        raise InputError("degenerate volume: zero standard deviation")
    out = (vals - mu) / sd
    return Volume(out.astype(np.float32), vol.spacing, "std")


def preprocess_volume(vol, lo=-200.0, hi=200.0, target_dz=1.0):
    """window -> equalize -> resample -> normalize -> standardize, hu input only."""
    if vol.domain != "hu":
        raise InputError(
            f"preprocess expects a raw hu volume, got domain {vol.domain!r} (already processed?)"
        )
    v = hu_window(vol, lo, hi)
    v = equalize_volume(v)
    v = resample_z(v, target_dz)
    v = normalize(v)
    return standardize(v)


def preprocess_label(vol, target_dz=1.0):
    """Labels only pass through the grid change (nearest resampling)."""
    if vol.domain != "label":
        raise InputError(f"expected a label volume, got domain {vol.domain!r}")
    return resample_z(vol, target_dz)
