"""Global prediction head: spatial attention over points, channel attention
over feature columns, residual fusion, and per-point classification."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractViolation
from .tensor import Tensor

# O(N^2) attention: per-block point budget guard
MAX_POINTS = 8192


def init_params(rng, c_d: int, num_classes: int, prefix: str = "head") -> dict:
    def glorot(fan_in, fan_out):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=(fan_in, fan_out))

    return {
        f"{prefix}.a.w": glorot(c_d, c_d),
        f"{prefix}.a.b": np.zeros(c_d),
        f"{prefix}.b.w": glorot(c_d, c_d),
        f"{prefix}.b.b": np.zeros(c_d),
        f"{prefix}.d.w": glorot(c_d, c_d),
        f"{prefix}.d.b": np.zeros(c_d),
        f"{prefix}.cls.w": glorot(c_d, num_classes),
        f"{prefix}.cls.b": np.zeros(num_classes),
    }


def spatial_attention(params: dict, F: Tensor, prefix: str = "head") -> Tensor:
    """F_hat_i = sum_j softmax_j(A_i . B_j) D_j + F_i.

    The aggregation over j uses the value-sorted matmul, so reordering the
    points reorders the output rows bit-exactly.
    """
    n = F.data.shape[0]
    if n < 1:
        raise ContractViolation("spatial attention needs at least one point")
    if n > MAX_POINTS:
        raise ContractViolation(f"spatial attention capped at {MAX_POINTS} points, got {n}")
    A = T.fc_rowstable(F, params[f"{prefix}.a.w"], params[f"{prefix}.a.b"])
    B = T.fc_rowstable(F, params[f"{prefix}.b.w"], params[f"{prefix}.b.b"])
    D = T.fc_rowstable(F, params[f"{prefix}.d.w"], params[f"{prefix}.d.b"])
    scores = T.matmul_rowstable(A, T.transpose(B))
    v = T.softmax_rows(scores)
    return T.add(T.matmul_sorted(v, D), F)


def channel_attention(F: Tensor) -> Tensor:
    """F_tilde = F @ M + F with M the softmax-normalized channel energies.

    E = F^T F; M[p, q] = softmax over source channels p of E[:, q], with
    max-subtraction. No learned parameters on this path.
    """
    if F.data.shape[0] < 1:
        raise ContractViolation("channel attention needs at least one point")
    # energies contract over the point axis: value-sorted keeps them
    # permutation-invariant
    energy = T.matmul_sorted(T.transpose(F), F)
    # softmax over p (rows of E) for each column q: transpose, row-softmax,
    # transpose back
    M = T.transpose(T.softmax_rows(T.transpose(energy)))
    return T.add(T.matmul_rowstable(F, M), F)


def classify(params: dict, f_spatial: Tensor, f_channel: Tensor,
             prefix: str = "head") -> Tensor:
    """Logits from the summed attention branches."""
    fused = T.add(f_spatial, f_channel)
    return T.fc_rowstable(fused, params[f"{prefix}.cls.w"], params[f"{prefix}.cls.b"])


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """Per-row argmax; ties go to the lowest class id."""
    return np.argmax(logits, axis=-1).astype(np.int32)
