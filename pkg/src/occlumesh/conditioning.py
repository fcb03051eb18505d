"""Occlusion-aware conditioning features for the fields.

A small trainable conv pyramid replaces the pretrained backbone: local
features at 1/4 input resolution fused (summed) with a broadcast
global-average branch. Semantic cues come from generator part labels by
default, or from descriptor maps projected through a stored PCA basis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, FeatureMap, bilinear_sample, project_point_t
from .hand import JointTransforms, hand_embedding
from .tensorcore import Tensor, concat, custom_op, ops, positional_encode


# ----------------------------------------------------------------------
# conv primitives (im2col based; desk-scale images only)
# ----------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """x: (C_in, H, W), w: (C_out, C_in, kh, kw), b: (C_out,)."""
    C_in, H, W = x.shape
    C_out, C_in_w, kh, kw = w.shape
    if C_in != C_in_w:
        raise ValueError(f"conv channel mismatch: input {C_in}, weight {C_in_w}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C_in, H_out, W_out, kh, kw)
    H_out, W_out = win.shape[1], win.shape[2]
    patches = win.transpose(1, 2, 0, 3, 4).reshape(H_out * W_out, C_in * kh * kw)
    wmat = w.data.reshape(C_out, -1)
    out = (patches @ wmat.T + b.data).T.reshape(C_out, H_out, W_out)

    def bwd(g):
        gmat = g.reshape(C_out, -1).T  # (HW, C_out)
        if w.requires_grad:
            w._zero_grad_buffer()
            w.grad += (gmat.T @ patches).reshape(w.data.shape)
        if b.requires_grad:
            b._zero_grad_buffer()
            b.grad += gmat.sum(axis=0)
        if x.requires_grad:
            x._zero_grad_buffer()
            gp = (gmat @ wmat).reshape(H_out, W_out, C_in, kh, kw)
            gx = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gx[:, i : i + H_out * stride : stride,
                       j : j + W_out * stride : stride] += gp[:, :, :, i, j].transpose(2, 0, 1)
            x.grad += gx[:, pad : pad + H, pad : pad + W] if pad else gx

    return custom_op(out, [x, w, b], bwd)


def upsample_nearest2(x: Tensor) -> Tensor:
    """2x nearest-neighbor upsampling of (C, H, W)."""
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def bwd(g):
        if x.requires_grad:
            x._zero_grad_buffer()
            C, H, W = x.shape
            x.grad += g.reshape(C, H, 2, W, 2).sum(axis=(2, 4))

    return custom_op(out, [x], bwd)


# ----------------------------------------------------------------------
# reference-view encoder
# ----------------------------------------------------------------------

ENCODER_STAGES = ((3, 16), (16, 32), (32, 32))  # stride-2 3x3 convs


def init_encoder_params(rng: np.random.Generator, channels: int) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}

    def conv(name, c_in, c_out, k):
        std = np.sqrt(2.0 / (c_in * k * k))
        params[f"enc.{name}.W"] = Tensor(rng.normal(0, std, (c_out, c_in, k, k)),
                                         requires_grad=True, name=f"enc.{name}.W")
        # small nonzero bias init: masked inputs make whole regions of the
        # pre-activation exactly equal to the bias, and a zero bias would
        # park those regions on the ReLU kink
        params[f"enc.{name}.b"] = Tensor(rng.normal(0, 1e-2, c_out),
                                         requires_grad=True, name=f"enc.{name}.b")

    for i, (c_in, c_out) in enumerate(ENCODER_STAGES):
        conv(f"stage{i}", c_in, c_out, 3)
    conv("local", ENCODER_STAGES[1][1] + ENCODER_STAGES[2][1], channels, 1)
    params["enc.global.W"] = Tensor(
        rng.normal(0, np.sqrt(2.0 / ENCODER_STAGES[2][1]),
                   (ENCODER_STAGES[2][1], channels)),
        requires_grad=True, name="enc.global.W")
    params["enc.global.b"] = Tensor(np.zeros(channels), requires_grad=True,
                                    name="enc.global.b")
    return params


def encode_reference(params: dict[str, Tensor], image_masked) -> FeatureMap:
    """Masked RGB (3, H, W) -> feature map at 1/4 resolution.

    Local 1x1 bottleneck over the fused pyramid plus a broadcast
    global-average branch, summed.
    """
    x = image_masked if isinstance(image_masked, Tensor) else Tensor(image_masked)
    if x.shape[1] == 0 or x.shape[2] == 0:
        raise ValueError("zero-size image")
    h = x
    feats = []
    for i in range(len(ENCODER_STAGES)):
        h = ops.relu(conv2d(h, params[f"enc.stage{i}.W"], params[f"enc.stage{i}.b"],
                            stride=2, pad=1))
        feats.append(h)
    fused = concat([feats[1], upsample_nearest2(feats[2])], axis=0)
    local = conv2d(fused, params["enc.local.W"], params["enc.local.b"])
    pooled = feats[2].mean(axis=(1, 2))  # (C,)
    glob = ops.reshape(pooled, (1, -1)) @ params["enc.global.W"] + params["enc.global.b"]
    out = local + ops.reshape(ops.transpose(glob), (-1, 1, 1))
    return FeatureMap(out, ratio=0.25)


# ----------------------------------------------------------------------
# semantic cues
# ----------------------------------------------------------------------

@dataclass
class PcaBasis:
    mean: np.ndarray  # (d,)
    components: np.ndarray  # (3, d) orthonormal rows


@dataclass
class SemanticProvider:
    mode: str = "generator_labels"  # or "learned"
    basis: PcaBasis | None = None

    def __post_init__(self):
        if self.mode not in ("generator_labels", "learned"):
            raise ValueError(f"unknown semantic mode {self.mode!r}")
        if self.mode == "learned" and self.basis is None:
            raise ValueError("learned mode requires a fitted PCA basis")


_MAX_PART_IDS = 255


def part_id_vector(part_id: int) -> np.ndarray:
    """Fixed unit 3-vector per part ID via a golden-angle spherical table."""
    if not 1 <= part_id <= _MAX_PART_IDS:
        raise ValueError(f"unknown part ID {part_id}")
    i = part_id - 1
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    z = 1.0 - 2.0 * (i + 0.5) / _MAX_PART_IDS
    r = np.sqrt(max(0.0, 1.0 - z * z))
    return np.array([r * np.cos(phi), r * np.sin(phi), z])


def semantic_map(provider: SemanticProvider, view) -> FeatureMap:
    """3-channel semantic map masked by the object mask.

    ``view`` supplies ``object_mask`` (H, W) and, per mode, either
    ``part_labels`` (H, W) uint IDs or ``descriptors`` (d, H, W).
    """
    mask = np.asarray(view["object_mask"], dtype=np.float64)
    if provider.mode == "generator_labels":
        labels = np.asarray(view["part_labels"])
        out = np.zeros((3,) + labels.shape)
        active = labels[(labels > 0) & (mask > 0)]
        for pid in np.unique(active):
            out[:, (labels == pid) & (mask > 0)] = part_id_vector(int(pid))[:, None]
    else:
        desc = np.asarray(view["descriptors"], dtype=np.float64)
        d, H, W = desc.shape
        flat = desc.reshape(d, -1).T - provider.basis.mean
        out = (flat @ provider.basis.components.T).T.reshape(3, H, W)
        out = out * (mask > 0)
    return FeatureMap(out, ratio=out.shape[1] / mask.shape[0])


def fit_pca(descriptors: np.ndarray) -> PcaBasis:
    """Top-3 principal components of row-vector descriptors (n, d)."""
    X = np.asarray(descriptors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise ValueError("need at least 3 descriptors")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / X.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    if np.sum(evals > max(1e-12, evals[-1] * 1e-12)) < 3:
        raise ValueError("descriptor rank < 3; PCA basis undefined")
    comps = evecs[:, ::-1][:, :3].T  # rows, descending variance
    return PcaBasis(mean=mean, components=comps)


# ----------------------------------------------------------------------
# per-point fetch
# ----------------------------------------------------------------------

@dataclass
class PointFeatures:
    f_s: Tensor | np.ndarray  # (N, 3)
    f_h: Tensor | np.ndarray  # (N, 3K)
    f_c: Tensor | np.ndarray  # (N, c)
    f_con: Tensor  # (N, 3 + 3K + c), order (F_s, F_h, F_c)


def image_to_map_coords(u, v, ratio: float):
    """Image pixel centers -> map pixel centers for a resolution ratio."""
    return (u + 0.5) * ratio - 0.5, (v + 0.5) * ratio - 0.5


def fetch_point_features(f_c_map: FeatureMap, f_s_map: FeatureMap, cam: Camera,
                         p, jt: JointTransforms, k: int) -> PointFeatures:
    """Project points into the reference view, sample both maps, compute
    the hand embedding, concatenate as (F_s, F_h, F_c)."""
    p_t = p if isinstance(p, Tensor) else Tensor(np.atleast_2d(p))
    u, v, _ = project_point_t(cam, p_t)
    uc, vc = image_to_map_coords(u, v, f_c_map.ratio)
    f_c = bilinear_sample(f_c_map, uc, vc)
    us, vs = image_to_map_coords(u, v, f_s_map.ratio)
    f_s = bilinear_sample(f_s_map, us, vs)
    f_h = hand_embedding(p_t, jt, k)
    f_con = concat([f_s, f_h, f_c], axis=-1)
    return PointFeatures(f_s=f_s, f_h=f_h, f_c=f_c, f_con=f_con)
