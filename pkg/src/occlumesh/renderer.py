"""Conditional SDF volume rendering.

Geometric field psi_S maps (positional-encoded point, conditioning
features) to an SDF value plus a feature vector; the color field maps
(pixel-aligned color feature, encoded view direction, normal, SDF
feature) to RGB. Per-sample opacity follows the unbiased sigmoid-ratio
construction, discretized over consecutive sample pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensorcore import (MlpSpec, Tensor, as_tensor, concat, eval_mlp,
                         init_mlp_params, mlp_input_grad, no_grad, ops,
                         positional_encode, positional_encode_vjp)


@dataclass(frozen=True)
class GeometricFieldSpec:
    mlp: MlpSpec
    pe_freq: int = 6
    feature_dim: int = 32

    def __post_init__(self):
        if self.mlp.out_dim != 1 + self.feature_dim:
            raise ValueError("geometric field output dim must be 1 + feature_dim")

    @property
    def pe_dim(self) -> int:
        return 3 + 6 * self.pe_freq


@dataclass(frozen=True)
class ColorFieldSpec:
    mlp: MlpSpec
    dir_freq: int = 4

    @property
    def dir_dim(self) -> int:
        return 3 + 6 * self.dir_freq


def make_geometric_spec(cond_dim: int, hidden: int = 64, layers: int = 4,
                        feature_dim: int = 32, pe_freq: int = 6) -> GeometricFieldSpec:
    in_dim = 3 + 6 * pe_freq + cond_dim
    skip = frozenset({layers // 2}) if layers >= 4 else frozenset()
    mlp = MlpSpec(layers, hidden, in_dim, 1 + feature_dim, activation="softplus",
                  beta=100.0, skip_layers=skip, skip_scale=np.sqrt(2.0) / 2.0)
    return GeometricFieldSpec(mlp=mlp, pe_freq=pe_freq, feature_dim=feature_dim)


def make_color_spec(c_dim: int, feature_dim: int = 32, hidden: int = 64,
                    layers: int = 3, dir_freq: int = 4) -> ColorFieldSpec:
    in_dim = c_dim + 3 + 6 * dir_freq + 3 + feature_dim
    mlp = MlpSpec(layers, hidden, in_dim, 3, activation="relu",
                  out_activation="sigmoid")
    return ColorFieldSpec(mlp=mlp, dir_freq=dir_freq)


def eval_geometric_field(spec: GeometricFieldSpec, params: dict[str, Tensor],
                         p: np.ndarray, f_con, prefix: str = "geo",
                         with_grad: bool = True):
    """Returns (sdf (N,), feature (N, F), grad (N, 3) or None).

    The point gradient is built as an explicit tape expression, so
    first-order backward yields correct parameter gradients for losses
    that consume it (eikonal, normals).
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    pe = positional_encode(p, spec.pe_freq)
    x = concat([as_tensor(pe), as_tensor(f_con)], axis=-1)
    if x.shape[-1] != spec.mlp.in_dim:
        raise ValueError(
            f"conditioning layout mismatch: field expects {spec.mlp.in_dim}, "
            f"got {x.shape[-1]} = pe {pe.shape[-1]} + cond {x.shape[-1]-pe.shape[-1]}")
    out, cache = eval_mlp(spec.mlp, params, x, prefix=prefix, return_cache=True)
    s = out[..., 0]
    feat = out[..., 1:]
    grad = None
    if with_grad:
        g_in = mlp_input_grad(spec.mlp, params, cache, 0, prefix=prefix)
        grad = positional_encode_vjp(p, g_in[..., : spec.pe_dim], spec.pe_freq)
    return s, feat, grad


def eval_color_field(spec: ColorFieldSpec, params: dict[str, Tensor], f_c,
                     dirs: np.ndarray, normal, f_sdf, prefix: str = "color") -> Tensor:
    """Sigmoid-bounded RGB from Cat(F_c, E_D(D), normal, F_sdf)."""
    e_d = positional_encode(np.asarray(dirs, dtype=np.float64), spec.dir_freq)
    x = concat([as_tensor(f_c), as_tensor(e_d), as_tensor(normal),
                as_tensor(f_sdf)], axis=-1)
    return eval_mlp(spec.mlp, params, x, prefix=prefix)


class ConditionedField:
    """Trainable field bundle: geometric + color MLPs and log-sharpness."""

    def __init__(self, geo_spec: GeometricFieldSpec, color_spec: ColorFieldSpec,
                 params: dict[str, Tensor]):
        self.geo_spec = geo_spec
        self.color_spec = color_spec
        self.params = params

    @staticmethod
    def init(geo_spec: GeometricFieldSpec, color_spec: ColorFieldSpec,
             rng: np.random.Generator, init_sharpness: float = 3.33) -> "ConditionedField":
        params = init_mlp_params(geo_spec.mlp, "geo", rng, geometric_init=True,
                                 sphere_radius=0.45, pe_dims=geo_spec.pe_dim)
        params.update(init_mlp_params(color_spec.mlp, "color", rng))
        params["eta"] = Tensor(np.log(init_sharpness), requires_grad=True, name="eta")
        return ConditionedField(geo_spec, color_spec, params)

    def sharpness(self) -> Tensor:
        return ops.exp(self.params["eta"])

    def sdf(self, p, feats, with_grad: bool = True):
        return eval_geometric_field(self.geo_spec, self.params, p, feats.f_con,
                                    with_grad=with_grad)

    def color(self, feats, dirs, normal, f_sdf) -> Tensor:
        return eval_color_field(self.color_spec, self.params, feats.f_c, dirs,
                                normal, f_sdf)


class AnalyticSphereField:
    """Closed-form SDF/color stand-in for unit-testing the renderer."""

    def __init__(self, center=(0.0, 0.0, 0.0), radius: float = 1.0,
                 rgb=(1.0, 1.0, 1.0), sharpness: float = 200.0):
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.rgb = np.asarray(rgb, dtype=np.float64)
        self._h = float(sharpness)

    def sharpness(self) -> Tensor:
        return Tensor(self._h)

    def sdf(self, p, feats, with_grad: bool = True):
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        d = p - self.center
        r = np.linalg.norm(d, axis=-1)
        s = Tensor(r - self.radius)
        grad = Tensor(d / np.maximum(r, 1e-12)[..., None]) if with_grad else None
        return s, Tensor(np.zeros((p.shape[0], 0))), grad

    def color(self, feats, dirs, normal, f_sdf) -> Tensor:
        n = np.asarray(dirs).shape[0]
        return Tensor(np.broadcast_to(self.rgb, (n, 3)).copy())


def sdf_to_alpha(s_i, s_next, h):
    """alpha = max((Phi_h(s_i) - Phi_h(s_next)) / Phi_h(s_i), 0).

    Phi_h is the sigmoid with sharpness h; the denominator is floored at
    1e-12 against underflow.
    """
    s_i, s_next, h = as_tensor(s_i), as_tensor(s_next), as_tensor(h)
    phi_i = ops.sigmoid(s_i * h)
    phi_n = ops.sigmoid(s_next * h)
    ratio = (phi_i - phi_n) / ops.maximum(phi_i, Tensor(1e-12))
    return ops.maximum(ratio, Tensor(0.0))


def weights_from_alphas(alpha: Tensor) -> Tensor:
    """omega_i = T_i * alpha_i with T_i = prod_{j<i} (1 - alpha_j)."""
    one_m = ops.clip(1.0 - alpha, 1e-12, 1.0)
    logs = ops.log(one_m)
    cum = ops.cumsum(logs, axis=-1)
    log_T = cum - logs  # exclusive prefix
    return ops.exp(log_T) * alpha


def stratified_depths(z_near, z_far, n: int, count: int,
                      rng: np.random.Generator | None) -> np.ndarray:
    """(count, n) depths uniform over [z_near, z_far] with stratified jitter."""
    z_near = np.broadcast_to(np.asarray(z_near, dtype=np.float64), (count,))
    z_far = np.broadcast_to(np.asarray(z_far, dtype=np.float64), (count,))
    jitter = rng.random((count, n)) if rng is not None else np.full((count, n), 0.5)
    frac = (np.arange(n) + jitter) / n
    return z_near[:, None] + (z_far - z_near)[:, None] * frac


def hierarchical_upsample(depths: np.ndarray, weights: np.ndarray, n_fine: int,
                          rng: np.random.Generator | None) -> np.ndarray:
    """Inverse-CDF draws from the per-segment coarse weight distribution.

    ``depths``: (N, n) sorted; ``weights``: (N, n-1) per segment. The
    epsilon floor keeps every segment reachable; rows of all-zero weight
    therefore fall back to (near-)uniform sampling. Returns (N, n_fine).
    """
    w = np.maximum(np.asarray(weights, dtype=np.float64), 0.0) + 1e-5
    pdf = w / w.sum(axis=-1, keepdims=True)
    cdf = np.concatenate([np.zeros((w.shape[0], 1)), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine,
                            (w.shape[0], n_fine)).copy()
    else:
        u = (np.arange(n_fine) + rng.random((w.shape[0], n_fine))) / n_fine
    idx = np.clip((u[..., None] >= cdf[:, None, :-1]).sum(-1) - 1, 0, w.shape[1] - 1)
    rows = np.arange(w.shape[0])[:, None]
    c0 = cdf[rows, idx]
    c1 = cdf[rows, idx + 1]
    frac = (u - c0) / np.maximum(c1 - c0, 1e-12)
    z0 = depths[rows, idx]
    z1 = depths[rows, idx + 1]
    return z0 + frac * (z1 - z0)


@dataclass
class RaySampleBatch:
    depths: np.ndarray  # (N, n) sorted
    points: np.ndarray  # (N, n, 3)
    sdf: Tensor  # (N, n)
    weights: Tensor  # (N, n-1), one per segment
    gradients: Tensor  # (N, n, 3)


@dataclass
class RenderOutput:
    color: Tensor  # (N, 3) in [0, 1]
    opacity: Tensor  # (N,)
    normal: Tensor  # (N, 3), weight-aggregated field gradient
    surface_point: np.ndarray  # (N, 3) expected surface location
    expected_depth: np.ndarray  # (N,)


def render_rays(fld, cond_fn, origins: np.ndarray, dirs: np.ndarray,
                z_near, z_far, n_coarse: int = 40, n_fine: int = 40,
                rng: np.random.Generator | None = None,
                depths: np.ndarray | None = None):
    """Volume-render a batch of rays; returns (RenderOutput, RaySampleBatch).

    ``cond_fn(points (M, 3)) -> PointFeatures | None`` supplies reference-
    view conditioning (None for analytic test fields). ``depths`` may pin
    the sample locations (used by gradient audits); otherwise coarse
    depths are stratified and fine depths importance-sampled from the
    coarse weight distribution (computed without gradient tracking).
    """
    if n_coarse < 1 or n_fine < 0:
        raise ValueError("need n_coarse >= 1 and n_fine >= 0")
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    n_rays = origins.shape[0]
    if depths is None:
        z = stratified_depths(z_near, z_far, n_coarse, n_rays, rng)
        if n_fine > 0:
            with no_grad():
                p_c = origins[:, None, :] + z[..., None] * dirs[:, None, :]
                feats_c = cond_fn(p_c.reshape(-1, 3)) if cond_fn else None
                s_c, _, _ = fld.sdf(p_c.reshape(-1, 3), feats_c, with_grad=False)
                s_c = s_c.data.reshape(n_rays, n_coarse)
                h = fld.sharpness().data
                phi = 1.0 / (1.0 + np.exp(-np.clip(h * s_c, -500, 500)))
                alpha = np.maximum((phi[:, :-1] - phi[:, 1:])
                                   / np.maximum(phi[:, :-1], 1e-12), 0.0)
                trans = np.cumprod(1.0 - alpha + 1e-12, axis=-1)
                w_c = alpha * np.concatenate(
                    [np.ones((n_rays, 1)), trans[:, :-1]], axis=-1)
            z_fine = hierarchical_upsample(z, w_c, n_fine, rng)
            z = np.sort(np.concatenate([z, z_fine], axis=-1), axis=-1)
    else:
        z = np.asarray(depths, dtype=np.float64)

    n_total = z.shape[1]
    p = origins[:, None, :] + z[..., None] * dirs[:, None, :]
    p_flat = p.reshape(-1, 3)
    feats = cond_fn(p_flat) if cond_fn else None
    s_flat, f_sdf, grad_flat = fld.sdf(p_flat, feats, with_grad=True)
    s = ops.reshape(s_flat, (n_rays, n_total))
    grads = ops.reshape(grad_flat, (n_rays, n_total, 3))

    alpha = sdf_to_alpha(s[:, :-1], s[:, 1:], fld.sharpness())
    w = weights_from_alphas(alpha)  # (N, n_total-1)

    dirs_per_sample = np.repeat(dirs, n_total, axis=0)
    rgb_flat = fld.color(feats, dirs_per_sample, grad_flat, f_sdf)
    rgb = ops.reshape(rgb_flat, (n_rays, n_total, 3))[:, :-1, :]

    w3 = ops.reshape(w, (n_rays, n_total - 1, 1))
    c_hat = (w3 * rgb).sum(axis=1)  # (N, 3)
    opacity = w.sum(axis=-1)
    normal = (w3 * grads[:, :-1, :]).sum(axis=1)

    w_np = w.data
    o_np = np.maximum(opacity.data, 1e-12)
    # segment midpoints: the alpha of a segment localizes the crossing
    # between its endpoints, so midpoints are the unbiased summary
    p_mid = 0.5 * (p[:, :-1, :] + p[:, 1:, :])
    z_mid = 0.5 * (z[:, :-1] + z[:, 1:])
    surface = (w_np[..., None] * p_mid).sum(axis=1) / o_np[:, None]
    exp_depth = (w_np * z_mid).sum(axis=-1) / o_np

    out = RenderOutput(color=c_hat, opacity=opacity, normal=normal,
                       surface_point=surface, expected_depth=exp_depth)
    samples = RaySampleBatch(depths=z, points=p, sdf=s, weights=w, gradients=grads)
    return out, samples
