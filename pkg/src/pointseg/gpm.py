"""Per-group feature learning: member MLP, graph attention over the full
group, gated skip fusion, optional stacking, and max-pool aggregation.

Everything operates on batched group tensors of shape (groups, g, c). The
attention aggregation sums over group members, so it uses the value-sorted
matmul; together with row-stable projections this makes the pooled output
bit-invariant under any reordering of a group's members.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionMismatch
from .tensor import Tensor

LEAKY_SLOPE = 0.2


def init_params(rng, c_in: int, c_e: int, stack_depth: int = 2,
                prefix: str = "gpm") -> dict:
    """One (MLP -> GAB -> gates) unit per stack level; unit u > 0 consumes
    the previous unit's 2*c_e concat output."""

    def glorot(fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    out = {}
    width = c_in
    for u in range(stack_depth):
        p = f"{prefix}.u{u}"
        out[f"{p}.mlp.w"] = glorot(width, c_e)
        out[f"{p}.mlp.b"] = np.zeros(c_e)
        out[f"{p}.gab.w"] = glorot(c_e, c_e)
        out[f"{p}.gab.b"] = np.zeros(c_e)
        out[f"{p}.gate_point.w"] = glorot(c_e, c_e)
        out[f"{p}.gate_point.b"] = np.zeros(c_e)
        out[f"{p}.gate_context.w"] = glorot(c_e, c_e)
        out[f"{p}.gate_context.b"] = np.zeros(c_e)
        width = 2 * c_e
    return out


def gab_forward(G: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Graph attention over a fully connected group (self-loops included).

    G_hat = fc(G); similarity a_ij = G_hat_i . G_hat_j; influence
    b_ij = softmax_j(leaky_relu(a_ij)); output_i = sum_j b_ij G_hat_j.
    Accepts (g, c) or batched (groups, g, c).
    """
    g_hat = T.fc_rowstable(G, w, b)
    sim = T.matmul_rowstable(g_hat, T.transpose(g_hat))
    beta = T.softmax_rows(T.leaky_relu(sim, LEAKY_SLOPE))
    return T.matmul_sorted(beta, g_hat)


def _unit_forward(params: dict, prefix: str, feats: Tensor) -> Tensor:
    mlp = T.relu(T.fc_rowstable(feats, params[f"{prefix}.mlp.w"],
                                params[f"{prefix}.mlp.b"]))
    updated = gab_forward(mlp, params[f"{prefix}.gab.w"], params[f"{prefix}.gab.b"])
    # skip connection through the mutual gating used for enrichment, at
    # equal widths: the gate for each branch reads the other branch
    gate_p = T.sigmoid(T.fc_rowstable(updated, params[f"{prefix}.gate_point.w"],
                                      params[f"{prefix}.gate_point.b"]))
    gate_c = T.sigmoid(T.fc_rowstable(mlp, params[f"{prefix}.gate_context.w"],
                                      params[f"{prefix}.gate_context.b"]))
    return T.concat_cols([T.elementwise_mul(gate_p, mlp),
                          T.elementwise_mul(gate_c, updated)])


def gpm_forward(params: dict, group_feats: Tensor, stack_depth: int = 2,
                prefix: str = "gpm", pool: bool = True) -> Tensor:
    """Stacked (MLP + graph attention + gated skip) units, then max over
    group members. group_feats: (groups, g, c_in) -> (groups, 2*c_e)."""
    if group_feats.data.ndim != 3:
        raise DimensionMismatch(
            f"gpm expects (groups, g, c), got {tuple(group_feats.data.shape)}")
    feats = group_feats
    for u in range(stack_depth):
        feats = _unit_forward(params, f"{prefix}.u{u}", feats)
    return T.max_over_rows(feats) if pool else feats


def init_plain_params(rng, c_in: int, c_out: int, prefix: str = "mlp") -> dict:
    """Params for the GPM-disabled variant: one FC per group member."""
    lim = np.sqrt(6.0 / (c_in + c_out))
    return {f"{prefix}.w": rng.uniform(-lim, lim, size=(c_in, c_out)),
            f"{prefix}.b": np.zeros(c_out)}


def plain_forward(params: dict, group_feats: Tensor, prefix: str = "mlp",
                  pool: bool = True) -> Tensor:
    """MLP + max-pool without graph attention (the ablation path)."""
    feats = T.relu(T.fc_rowstable(group_feats, params[f"{prefix}.w"],
                                  params[f"{prefix}.b"]))
    return T.max_over_rows(feats) if pool else feats
