"""MLP evaluation, positional encoding, and closed-form input gradients.

Parameters for a spec named ``prefix`` live in a flat dict as
``{prefix}.W{l}`` / ``{prefix}.b{l}`` with weights of shape (in, out).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

_ACTIVATIONS = ("softplus", "relu", "sigmoid", "none")


@dataclass(frozen=True)
class MlpSpec:
    layer_count: int
    hidden_dim: int
    in_dim: int
    out_dim: int
    activation: str = "relu"
    beta: float = 100.0
    skip_layers: frozenset[int] = field(default_factory=frozenset)
    skip_scale: float = 1.0
    out_activation: str = "none"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS or self.out_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation; choose from {_ACTIVATIONS}")
        if self.beta <= 0:
            raise ValueError("softplus beta must be > 0")
        for l in self.skip_layers:
            if not 1 <= l < self.layer_count:
                raise ValueError(f"skip layer {l} outside [1, {self.layer_count})")

    def layer_in_dim(self, l: int) -> int:
        base = self.in_dim if l == 0 else self.hidden_dim
        return base + self.in_dim if l in self.skip_layers else base

    def layer_out_dim(self, l: int) -> int:
        return self.out_dim if l == self.layer_count - 1 else self.hidden_dim


def _apply_activation(x: Tensor, kind: str, beta: float) -> Tensor:
    if kind == "softplus":
        return ad.softplus(x, beta)
    if kind == "relu":
        return ad.relu(x)
    if kind == "sigmoid":
        return ad.sigmoid(x)
    return x


def init_mlp_params(spec: MlpSpec, prefix: str, rng: np.random.Generator,
                    geometric_init: bool = False, sphere_radius: float = 0.5,
                    pe_dims: int = 0) -> dict[str, Tensor]:
    """Xavier-style init; optional geometric init biasing output 0 toward
    a sphere SDF of ``sphere_radius`` (first 3 inputs taken as the point,
    ``pe_dims`` marks the positional-encoding block kept small)."""
    params: dict[str, Tensor] = {}
    for l in range(spec.layer_count):
        n_in, n_out = spec.layer_in_dim(l), spec.layer_out_dim(l)
        w = rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out))
        b = np.zeros(n_out)
        if geometric_init:
            if l == spec.layer_count - 1:
                w *= 0.05
                w[:, 0] = rng.normal(np.sqrt(np.pi / n_in), 1e-4, size=n_in)
                b[0] = -sphere_radius
            else:
                w = rng.normal(0.0, np.sqrt(2.0 / n_out), size=(n_in, n_out))
                if l == 0:
                    # let the raw point dominate at init: higher positional
                    # harmonics and conditioning features start near-silent
                    w[3:, :] *= 1e-2
                elif l in spec.skip_layers:
                    # the re-injected input block starts silent
                    w[n_in - spec.in_dim:, :] = 0.0
        params[f"{prefix}.W{l}"] = Tensor(w, requires_grad=True, name=f"{prefix}.W{l}")
        params[f"{prefix}.b{l}"] = Tensor(b, requires_grad=True, name=f"{prefix}.b{l}")
    return params


def eval_mlp(spec: MlpSpec, params: dict[str, Tensor], x: Tensor | np.ndarray,
             prefix: str = "mlp", return_cache: bool = False):
    """Forward pass; input shape (..., in_dim), output (..., out_dim).

    With ``return_cache`` also returns per-layer (input, pre-activation)
    pairs for closed-form input-gradient computation.
    """
    x = as_tensor(x)
    if x.shape[-1] != spec.in_dim:
        raise ValueError(
            f"input last dim {x.shape[-1]} does not match spec in_dim {spec.in_dim}")
    cache = []
    h = x
    for l in range(spec.layer_count):
        if l in spec.skip_layers:
            h = ad.concat([h, x], axis=-1) * spec.skip_scale
        wname, bname = f"{prefix}.W{l}", f"{prefix}.b{l}"
        if wname not in params or bname not in params:
            raise KeyError(f"missing parameters for layer {l} ({wname}/{bname})")
        w, b = params[wname], params[bname]
        if w.shape != (spec.layer_in_dim(l), spec.layer_out_dim(l)):
            raise ValueError(
                f"layer {l}: weight shape {w.shape} != "
                f"{(spec.layer_in_dim(l), spec.layer_out_dim(l))}")
        z = h @ w + b
        cache.append((h, z))
        kind = spec.out_activation if l == spec.layer_count - 1 else spec.activation
        h = _apply_activation(z, kind, spec.beta)
    return (h, cache) if return_cache else h


def _activation_deriv(z: Tensor, kind: str, beta: float) -> Tensor | None:
    """Derivative of the activation at pre-activation z, as a tape expression."""
    if kind == "softplus":
        return ad.sigmoid(z * beta)
    if kind == "relu":
        return ad.where(z.data > 0, ad.as_tensor(np.ones_like(z.data)),
                        ad.as_tensor(np.zeros_like(z.data)))
    if kind == "sigmoid":
        s = ad.sigmoid(z)
        return s * (1.0 - s)
    return None


def mlp_input_grad(spec: MlpSpec, params: dict[str, Tensor],
                   cache, out_index: int, prefix: str = "mlp") -> Tensor:
    """d out[..., out_index] / d input as a differentiable tape expression.

    Built from the forward cache via an explicit vector-Jacobian chain, so
    first-order backward through the result yields correct parameter
    gradients without second-order tape support.
    """
    last = spec.layer_count - 1
    if spec.out_activation != "none":
        raise ValueError("input gradient requires a linear output layer")
    w_last = params[f"{prefix}.W{last}"]
    g = ad.transpose(w_last[:, out_index : out_index + 1])  # (1, n_in_last)
    g_input = None
    if last in spec.skip_layers:
        g = g * spec.skip_scale
        g_input = g[..., spec.hidden_dim :]
        g = g[..., : spec.hidden_dim]
    for l in range(last - 1, -1, -1):
        dact = _activation_deriv(cache[l][1], spec.activation, spec.beta)
        g = g * dact if dact is not None else g
        g = g @ ad.transpose(params[f"{prefix}.W{l}"])
        if l in spec.skip_layers:
            g = g * spec.skip_scale
            g_hidden = g[..., : spec.hidden_dim]
            g_skip = g[..., spec.hidden_dim :]
            g_input = g_skip if g_input is None else g_input + g_skip
            g = g_hidden
    g_input = g if g_input is None else g_input + g
    return g_input  # (..., in_dim)


def positional_encode(v: Tensor | np.ndarray, num_freq: int) -> Tensor | np.ndarray:
    """[v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^{F-1} pi v), cos(...)].

    Output length d + 2*d*num_freq along the last axis; numpy in, numpy
    out; Tensor in, tape-recorded Tensor out.
    """
    if num_freq < 0:
        raise ValueError("num_freq must be >= 0")
    if isinstance(v, Tensor):
        parts = [v]
        for k in range(num_freq):
            s = v * (np.pi * 2.0**k)
            parts.extend([ad.sin(s), ad.cos(s)])
        return ad.concat(parts, axis=-1)
    v = np.asarray(v, dtype=np.float64)
    parts = [v]
    for k in range(num_freq):
        s = v * (np.pi * 2.0**k)
        parts.extend([np.sin(s), np.cos(s)])
    return np.concatenate(parts, axis=-1)


def positional_encode_vjp(p: np.ndarray, g_enc: Tensor, num_freq: int) -> Tensor:
    """Pull a gradient w.r.t. positional_encode(p) back to p.

    ``p`` is a constant point batch (..., d); ``g_enc`` a tape expression
    of shape (..., d + 2*d*num_freq). Returns a (..., d) tape expression.
    """
    d = p.shape[-1]
    out = g_enc[..., :d]
    for k in range(num_freq):
        f = np.pi * 2.0**k
        s, c = np.sin(f * p), np.cos(f * p)
        gs = g_enc[..., d * (1 + 2 * k) : d * (2 + 2 * k)]
        gc = g_enc[..., d * (2 + 2 * k) : d * (3 + 2 * k)]
        out = out + gs * (f * c) - gc * (f * s)
    return out
