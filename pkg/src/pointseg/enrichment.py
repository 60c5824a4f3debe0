"""Contextual representation and gated fusion of point features.

Each point gathers its k nearest neighbors' features into a context row
R_i, then the point's own (lifted) features and the context gate each
other: the gate applied to one branch is computed from the other. All
linear maps run through the row-stable matmul so permuting the points
permutes the output rows bit-exactly.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionMismatch
from .tensor import Tensor


def init_params(rng, c_f: int, k: int, prefix: str = "enrich") -> dict:
    """Glorot-uniform weights, zero biases, as plain arrays."""
    kc = k * c_f

    def glorot(fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    return {
        f"{prefix}.lift.w": glorot(c_f, kc),
        f"{prefix}.lift.b": np.zeros(kc),
        f"{prefix}.gate_point.w": glorot(kc, kc),   # reads R, gates the lifted point
        f"{prefix}.gate_point.b": np.zeros(kc),
        f"{prefix}.gate_context.w": glorot(kc, kc),  # reads lifted point, gates R
        f"{prefix}.gate_context.b": np.zeros(kc),
    }


def output_width(c_f: int, k: int, mode: str = "gated") -> int:
    """Width of the enriched representation for each fusion mode."""
    if mode == "gated":
        return 2 * k * c_f
    if mode == "concat":
        return c_f + k * c_f
    if mode == "off":
        return c_f
    raise DimensionMismatch(f"unknown fusion mode {mode!r}")


def contextual_representation(features: Tensor, neighbor_idx: np.ndarray) -> Tensor:
    """R_i: the k neighbor feature vectors of point i, concatenated in
    ascending-distance order (the order the neighbor lists arrive in)."""
    if neighbor_idx.ndim != 2 or neighbor_idx.shape[0] != features.data.shape[0]:
        raise DimensionMismatch(
            f"neighbor table {neighbor_idx.shape} does not match "
            f"{features.data.shape[0]} points")
    k = neighbor_idx.shape[1]
    return T.concat_cols([T.gather_rows(features, neighbor_idx[:, j]) for j in range(k)])


def gated_fuse(params: dict, P: Tensor, R: Tensor, prefix: str = "enrich") -> Tensor:
    """Mutually gated fusion of point features with their context.

    P~ = lift(P); g = sigmoid(fc(R)) gates P~; g_R = sigmoid(fc(P~)) gates R;
    output row = (g * P~) concat (g_R * R), width 2kC_f.
    """
    w_lift = params[f"{prefix}.lift.w"]
    if P.data.shape[1] != w_lift.data.shape[0]:
        raise DimensionMismatch(
            f"point width {P.data.shape[1]} does not match lift weights "
            f"{tuple(w_lift.data.shape)}")
    if R.data.shape[1] != w_lift.data.shape[1]:
        raise DimensionMismatch(
            f"context width {R.data.shape[1]} does not match lift output "
            f"{w_lift.data.shape[1]}")
    lifted = T.fc_rowstable(P, w_lift, params[f"{prefix}.lift.b"])
    gate_p = T.sigmoid(T.fc_rowstable(
        R, params[f"{prefix}.gate_point.w"], params[f"{prefix}.gate_point.b"]))
    gate_r = T.sigmoid(T.fc_rowstable(
        lifted, params[f"{prefix}.gate_context.w"], params[f"{prefix}.gate_context.b"]))
    return T.concat_cols([T.elementwise_mul(gate_p, lifted),
                          T.elementwise_mul(gate_r, R)])


def concat_fuse(P: Tensor, R: Tensor) -> Tensor:
    """Parameter-free fusion: plain P concat R (ablation variant)."""
    return T.concat_cols([P, R])
