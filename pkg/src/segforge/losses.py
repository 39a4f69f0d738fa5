"""Binary cross-entropy and its class-weighted variant.

Predictions are clamped to [1e-7, 1 - 1e-7] before the logs so early
near-saturated outputs cannot blow up the gradient. Class weights are
recomputed from each batch's own targets: for class i holding n_i of the
N pixels, w_i = (N - n_i) / n_i, so the rarer class weighs more and a
balanced batch reduces the weighted loss to the plain one exactly.
"""

import logging

import numpy as np

from . import tensor as T
from .errors import InputError

logger = logging.getLogger(__name__)

CLAMP = 1e-7


def _check_targets(pred, target):
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InputError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if target.size == 0:
        raise InputError("empty loss batch")
    if not np.all((target == 0.0) | (target == 1.0)):
        raise InputError("targets must be binary (0/1)")
    return target


def _log_terms(pred, target):
    p = T.clip(pred, CLAMP, 1.0 - CLAMP)
    t = T.Tensor(target)
    return T.add(T.mul(t, T.log(p)), T.mul(1.0 - t, T.log(1.0 - p)))


def bce(pred, target):
    """Mean negative log-likelihood of binary targets under probabilities ``pred``."""
    target = _check_targets(pred, target)
    return T.neg(T.tmean(_log_terms(pred, target)))


def class_weights(target):
    """(w_fg, w_bg) with w_i = (N - n_i) / n_i from this batch's own targets.

    A batch missing one class entirely gets weight 0 for the absent class
    and 1 for the present one (logged), keeping the gradient usable.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.size < 1:
        raise InputError("class_weights needs at least one pixel")
    n = target.size
    n_fg = int(np.count_nonzero(target))
    n_bg = n - n_fg
    if n_fg == 0:
        logger.warning("degenerate batch: no foreground pixels, w_fg set to 0")
        return 0.0, 1.0
    if n_bg == 0:
        logger.warning("degenerate batch: no background pixels, w_bg set to 0")
        return 1.0, 0.0
    return (n - n_fg) / n_fg, (n - n_bg) / n_bg


def wbce(pred, target):
    """Class-weighted BCE; each pixel's term is scaled by its true class's weight."""
    target = _check_targets(pred, target)
    w_fg, w_bg = class_weights(target)
    wmap = np.where(target == 1.0, w_fg, w_bg)
    return T.neg(T.tmean(T.mul(T.Tensor(wmap), _log_terms(pred, target))))


LOSSES = {"bce": bce, "wbce": wbce}
