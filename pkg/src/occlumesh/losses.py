"""Supervision terms for both training stages.

Total = color + l1*eikonal + l2*mask + l3*normal_orientation
        + l4*normal_smoothness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorcore import Tensor, as_tensor, ops

BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    eikonal: float = 1.0
    mask: float = 1.0
    normal_orientation: float = 1e3
    normal_smoothness: float = 1e-2

    def __post_init__(self):
        if min(self.eikonal, self.mask, self.normal_orientation,
               self.normal_smoothness) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class LossReport:
    color: float
    eikonal: float
    mask: float
    normal_orientation: float
    normal_smoothness: float
    total: float
    extras: dict | None = None

    def to_json(self) -> dict:
        d = {"color": self.color, "eik": self.eikonal, "mask": self.mask,
             "n_ori": self.normal_orientation, "n_smo": self.normal_smoothness,
             "total": self.total}
        if self.extras:
            d.update(self.extras)
        return d


def color_loss(rendered, targets) -> Tensor:
    """Mean absolute difference over rays and channels."""
    rendered = as_tensor(rendered)
    if rendered.size == 0:
        raise ValueError("color loss over an empty ray batch")
    return ops.absolute(rendered - np.asarray(targets, dtype=np.float64)).mean()


def eikonal_loss(gradients) -> Tensor:
    """Mean squared deviation of the SDF gradient norm from 1."""
    g = as_tensor(gradients)
    norm = ops.sqrt(ops.clip((g * g).sum(axis=-1), 1e-18, None))
    return ((norm - 1.0) ** 2).mean()


def _bce(pred: Tensor, target: np.ndarray) -> Tensor:
    p = ops.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    t = np.asarray(target, dtype=np.float64)
    return -(t * ops.log(p) + (1.0 - t) * ops.log(1.0 - p)).mean()


def mask_loss_pretrain(opacity, mask_values) -> Tensor:
    """BCE between accumulated opacity and the occlusion-free mask."""
    return _bce(as_tensor(opacity), mask_values)


def amodal_mask_weighted_loss(opacity, union_values) -> Tensor:
    """BCE against the clamped union of recovered amodal mask and the
    occluded mask; reduces to the plain mask BCE when the amodal
    prediction is identically zero."""
    return _bce(as_tensor(opacity), union_values)


def amodal_pretrain_loss(pred_map, target_map) -> Tensor:
    """Mean pixelwise BCE over the full image."""
    pred_map = as_tensor(pred_map)
    target = np.asarray(target_map, dtype=np.float64)
    if pred_map.shape != target.shape:
        raise ValueError(
            f"mask resolution mismatch: {pred_map.shape} vs {target.shape}")
    return _bce(pred_map, target)


def normal_orientation_loss(normals, dirs) -> Tensor:
    """(1/m) sum min(0, -n.D)^2 -- penalizes normals facing away."""
    n = as_tensor(normals)
    d = np.asarray(dirs, dtype=np.float64)
    dot = (n * d).sum(axis=-1)
    return (ops.minimum(-dot, Tensor(0.0)) ** 2).mean()


def knn_indices(points: np.ndarray, k: int) -> np.ndarray:
    """(m, k) nearest-neighbor indices (self included) by brute force."""
    d = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1)
    return np.argsort(d, axis=-1, kind="stable")[:, :k]


def normal_smoothness_loss(surface_points: np.ndarray, normals, k_nn: int = 16) -> Tensor:
    """Squared deviation of each ray's normal from the mean normal over
    its K nearest surface points in the batch, averaged over rays and
    components. Neighborhoods are constant w.r.t. the gradient."""
    pts = np.asarray(surface_points, dtype=np.float64)
    m = pts.shape[0]
    if m < k_nn:
        raise ValueError(f"batch of {m} rays smaller than K_nn={k_nn}")
    n = as_tensor(normals)
    idx = knn_indices(pts, k_nn)
    neigh = n[idx]  # (m, k, 3)
    mean = neigh.mean(axis=1)
    return ((n - mean) ** 2).mean()


def total_loss(color, eikonal, mask, n_ori, n_smo,
               weights: LossWeights, extras: dict | None = None):
    """Weighted sum; returns (total Tensor, LossReport)."""
    terms = {"color": color, "eikonal": eikonal, "mask": mask,
             "normal_orientation": n_ori, "normal_smoothness": n_smo}
    for name, t in terms.items():
        val = t.item() if isinstance(t, Tensor) else float(t)
        if not np.isfinite(val):
            raise FloatingPointError(f"loss term {name!r} is not finite ({val})")
    total = (as_tensor(color) + weights.eikonal * as_tensor(eikonal)
             + weights.mask * as_tensor(mask)
             + weights.normal_orientation * as_tensor(n_ori)
             + weights.normal_smoothness * as_tensor(n_smo))
    report = LossReport(
        color=float(as_tensor(color).item()),
        eikonal=float(as_tensor(eikonal).item()),
        mask=float(as_tensor(mask).item()),
        normal_orientation=float(as_tensor(n_ori).item()),
        normal_smoothness=float(as_tensor(n_smo).item()),
        total=float(total.item()),
        extras={k: float(v.item() if isinstance(v, Tensor) else v)
                for k, v in (extras or {}).items()} or None,
    )
    return total, report
