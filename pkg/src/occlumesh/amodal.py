"""2D amodal mask recovery head: predicts the hand-covered object region
from reference-view features. Trainable during pretraining, frozen during
finetuning."""

from __future__ import annotations

import numpy as np

from .camera import FeatureMap
from .conditioning import conv2d, upsample_nearest2
from .tensorcore import Tensor, ops


def init_amodal_params(rng: np.random.Generator, channels: int) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}

    def conv(name, c_in, c_out, k=3):
        std = np.sqrt(2.0 / (c_in * k * k))
        params[f"amodal.{name}.W"] = Tensor(rng.normal(0, std, (c_out, c_in, k, k)),
                                            requires_grad=True, name=f"amodal.{name}.W")
        # nonzero bias init keeps uniform input regions off the ReLU kink
        params[f"amodal.{name}.b"] = Tensor(rng.normal(0, 1e-2, c_out),
                                            requires_grad=True,
                                            name=f"amodal.{name}.b")

    conv("up0", channels, 16)
    conv("up1", 16, 8)
    conv("out", 8, 1)
    return params


def recover_amodal(params: dict[str, Tensor], f_c_map: FeatureMap) -> Tensor:
    """Feature map at 1/4 resolution -> covered-region probability map at
    full image resolution, values in (0, 1)."""
    h = f_c_map.data if isinstance(f_c_map.data, Tensor) else Tensor(f_c_map.array)
    h = ops.relu(conv2d(upsample_nearest2(h), params["amodal.up0.W"],
                        params["amodal.up0.b"], pad=1))
    h = ops.relu(conv2d(upsample_nearest2(h), params["amodal.up1.W"],
                        params["amodal.up1.b"], pad=1))
    h = conv2d(h, params["amodal.out.W"], params["amodal.out.b"], pad=1)
    return ops.sigmoid(h[0])


def amodal_target(m_complete: np.ndarray, m_occluded: np.ndarray) -> np.ndarray:
    """Object pixels hidden by the hand: max(M_co - M, 0) pixelwise."""
    m_complete = np.asarray(m_complete, dtype=np.float64)
    m_occluded = np.asarray(m_occluded, dtype=np.float64)
    if m_complete.shape != m_occluded.shape:
        raise ValueError(
            f"mask resolution mismatch: {m_complete.shape} vs {m_occluded.shape}")
    return np.maximum(m_complete - m_occluded, 0.0)


def amodal_union(m_amodal, m_occluded):
    """Clamped union min(M_ho + M, 1); accepts soft probability maps."""
    a = m_amodal.data if isinstance(m_amodal, Tensor) else np.asarray(m_amodal, dtype=np.float64)
    b = np.asarray(m_occluded, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mask resolution mismatch: {a.shape} vs {b.shape}")
    return np.minimum(a + b, 1.0)
