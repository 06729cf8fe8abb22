"""Client update rule: plain SGD with optional adaptive gradient clipping and proximal term."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidSpec, MissingAnchor, ShapeMismatch
from .model import GradientMap, ModelState, ParamRole

AGC_EPS = 1e-3
# A row counts as over the threshold only beyond this relative margin, so a
# freshly clipped row (whose recomputed norm may exceed the cap by a few ulp)
# is not clipped again. Keeps clipping idempotent bit for bit.
AGC_REL_MARGIN = 1e-12

DEFAULT_AGC_ROLES = frozenset({ParamRole.ConvWeight, ParamRole.FCWeight})


@dataclass(frozen=True)
class OptimSpec:
    lr: float
    agc_enabled: bool = False
    agc_lambda: Optional[float] = None
    agc_eps: float = AGC_EPS
    prox_mu: float = 0.0
    agc_roles: frozenset = field(default=DEFAULT_AGC_ROLES)

    def __post_init__(self):
        if self.lr < 0:
            raise InvalidSpec("learning rate must be non-negative")
        if self.agc_enabled and (self.agc_lambda is None or self.agc_lambda <= 0):
            raise InvalidSpec("AGC needs a positive clipping threshold")
        if self.prox_mu < 0:
            raise InvalidSpec("prox_mu must be non-negative")
        if self.agc_eps <= 0:
            raise InvalidSpec("agc_eps must be positive")


def unitwise_norm(a: np.ndarray) -> np.ndarray:
    """Frobenius norm of each output unit (row 0-axis slice)."""
    rows = a.reshape(a.shape[0], -1)
    return np.sqrt(np.einsum("ij,ij->i", rows, rows))


def clip_rows(grad: np.ndarray, weight: np.ndarray, lam: float, eps: float = AGC_EPS) -> np.ndarray:
    if grad.shape != weight.shape:
        raise ShapeMismatch(f"gradient {grad.shape} vs weight {weight.shape}")
    w_norm = np.maximum(unitwise_norm(weight), eps)
    g_norm = unitwise_norm(grad)
    cap = lam * w_norm
    over = g_norm > cap * (1.0 + AGC_REL_MARGIN)
    if not over.any():
        return grad
    scale = np.ones_like(g_norm)
    scale[over] = cap[over] / g_norm[over]
    rows = grad.reshape(grad.shape[0], -1)
    out = np.where(over[:, None], rows * scale[:, None], rows)
    return out.reshape(grad.shape)


def agc_clip(grads: GradientMap, weights: ModelState, lam: float, eps: float = AGC_EPS,
             roles=DEFAULT_AGC_ROLES) -> GradientMap:
    """Per-unit adaptive gradient clipping on entries whose role is in ``roles``.

    A unit is rescaled to norm ``lam * max(||W_i||, eps)`` when its gradient
    norm exceeds that value; other units are returned unchanged.
    """
    out = dict(grads)
    for k, g in grads.items():
        if k not in weights.entries:
            raise ShapeMismatch(f"gradient for unknown entry {k!r}")
        if weights.role(k) in roles:
            out[k] = clip_rows(g, weights[k], lam, eps)
    return out


def sgd_step(model: ModelState, grads: GradientMap, spec: OptimSpec,
             global_anchor: Optional[ModelState] = None) -> ModelState:
    """One SGD step. Running statistics are left untouched."""
    if spec.prox_mu > 0 and global_anchor is None:
        raise MissingAnchor("prox_mu > 0 needs the global model as anchor")
    trainable = model.trainable_keys()
    if set(grads) != set(trainable):
        raise ShapeMismatch("gradient keys do not match the trainable entries")
    if spec.agc_enabled:
        grads = agc_clip(grads, model, spec.agc_lambda, spec.agc_eps, spec.agc_roles)
    new = {}
    for k in trainable:
        theta = model[k]
        g = grads[k]
        if g.shape != theta.shape:
            raise ShapeMismatch(f"{k}: gradient {g.shape} vs parameter {theta.shape}")
        if spec.prox_mu > 0:
            g = g + spec.prox_mu * (theta - global_anchor[k])
        new[k] = theta - spec.lr * g
    return model.replace(new)
