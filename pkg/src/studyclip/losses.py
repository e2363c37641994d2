"""Symmetric InfoNCE losses over paired embedding batches, with analytic gradients.

All losses here are built from one primitive: the symmetric contrastive loss
over a batch of n paired embeddings,

    loss = -1/(2n) * sum_i [ log softmax_j(s_ij / tau)|_{j=i}      (row direction)
                           + log softmax_j(s_ji / tau)|_{j=i} ]    (column direction)

where s_ij is the inner product between row i of the first batch and row j of
the second. On top of it sit the multi-view average over two image and two
text views, the image-only and text-only variants, and the weighted total
objective. Gradients with respect to every input batch and with respect to
log(tau) are derived by hand and returned alongside the value; no autodiff.

All arithmetic is float64 with max-subtracted log-sum-exp and row-major
accumulation, so results are deterministic and gradient checks are tight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ZeroRow(ValueError):
    """A row with (near-)zero Euclidean norm cannot be normalized."""


class ShapeMismatch(ValueError):
    """Input batches disagree in batch size or embedding dimension."""


ROW_NORM_TOL = 1e-6


@dataclass
class EmbeddingBatch:
    """n x d matrix of unit-norm row embeddings, tagged image or text.

    Row i of an image batch pairs with row i of the corresponding text batch.
    """

    rows: np.ndarray
    role: str = "image"

    def __post_init__(self) -> None:
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2:
            raise ShapeMismatch(f"expected 2-d matrix, got shape {self.rows.shape}")
        n, d = self.rows.shape
        if n < 1 or d < 2:
            raise ShapeMismatch(f"need n >= 1 and d >= 2, got {self.rows.shape}")
        if self.role not in ("image", "text"):
            raise ValueError(f"role must be 'image' or 'text', got {self.role!r}")
        norms = np.linalg.norm(self.rows, axis=1)
        if np.any(np.abs(norms - 1.0) > ROW_NORM_TOL):
            worst = float(np.max(np.abs(norms - 1.0)))
            raise ValueError(f"rows must be unit-norm within {ROW_NORM_TOL}, off by {worst:g}")

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]


@dataclass
class Temperature:
    """Learnable softmax temperature, parameterized as log(tau) so tau > 0."""

    log_tau: float

    TAU_MIN = 1e-3
    TAU_MAX = 10.0

    @classmethod
    def from_tau(cls, tau: float) -> "Temperature":
        if tau <= 0:
            raise ValueError(f"tau must be positive, got {tau}")
        return cls(log_tau=math.log(tau))

    @property
    def tau(self) -> float:
        return math.exp(self.log_tau)

    def clamped(self) -> "Temperature":
        """Return a copy with tau clamped into [TAU_MIN, TAU_MAX]."""
        lo, hi = math.log(self.TAU_MIN), math.log(self.TAU_MAX)
        return Temperature(log_tau=min(max(self.log_tau, lo), hi))


@dataclass
class LossWeights:
    """Mixing weights for the image-only and text-only terms of the total loss."""

    lambda_icl: float = 1.0
    lambda_tcl: float = 0.5

    def __post_init__(self) -> None:
        if self.lambda_icl < 0 or self.lambda_tcl < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossOutput:
    """Scalar loss with gradients matching each input batch, plus d/d log(tau).

    grad_inputs follows the positional order of the loss function's batch
    arguments. components carries per-term values for logging.
    """

    value: float
    grad_inputs: tuple[np.ndarray, ...]
    grad_log_tau: float
    components: dict[str, float] = field(default_factory=dict)


def l2_normalize(matrix: np.ndarray, role: str = "image") -> EmbeddingBatch:
    """Divide each row by its Euclidean norm. Raises ZeroRow on degenerate rows."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ShapeMismatch(f"expected 2-d matrix, got shape {matrix.shape}")
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise ZeroRow("cannot normalize a row with norm <= 1e-12")
    return EmbeddingBatch(rows=matrix / norms, role=role)


def l2_normalize_vjp(raw: np.ndarray, grad_normalized: np.ndarray) -> np.ndarray:
    """Backpropagate a gradient through row-wise normalization.

    For y = x / |x| per row: dx = (g - y * (y . g)) / |x|.
    """
    raw = np.asarray(raw, dtype=np.float64)
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    if np.any(norms <= 1e-12):
        raise ZeroRow("cannot normalize a row with norm <= 1e-12")
    y = raw / norms
    inner = np.sum(y * grad_normalized, axis=1, keepdims=True)
    return (grad_normalized - y * inner) / norms


def _require_same_shape(*batches: EmbeddingBatch) -> None:
    shapes = {b.rows.shape for b in batches}
    if len(shapes) != 1:
        raise ShapeMismatch(f"batches must share n and d, got shapes {sorted(shapes)}")


def _log_softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def _symmetric_infonce(a: np.ndarray, b: np.ndarray, temp: Temperature):
    """Value and raw gradients of the symmetric contrastive loss.

    Returns (value, grad_a, grad_b, grad_log_tau) for unit-norm row matrices
    a, b of identical shape, where similarity s_ij = a_i . b_j.
    """
    n = a.shape[0]
    tau = temp.tau
    sims = a @ b.T
    logits = sims / tau

    log_p_rows = _log_softmax(logits, axis=1)  # softmax over b for each a_i
    log_p_cols = _log_softmax(logits, axis=0)  # softmax over a for each b_j
    diag = np.arange(n)
    value = -(np.sum(log_p_rows[diag, diag]) + np.sum(log_p_cols[diag, diag])) / (2.0 * n)

    # d value / d logits = (row softmax + column softmax - 2 I) / (2n)
    grad_logits = np.exp(log_p_rows) + np.exp(log_p_cols)
    grad_logits[diag, diag] -= 2.0
    grad_logits /= 2.0 * n

    grad_a = (grad_logits @ b) / tau
    grad_b = (grad_logits.T @ a) / tau
    # logits = sims * exp(-log tau)  =>  d logits / d log tau = -logits
    grad_log_tau = -float(np.sum(grad_logits * logits))
    return float(value), grad_a, grad_b, grad_log_tau


def clip_loss(U: EmbeddingBatch, V: EmbeddingBatch, temp: Temperature) -> LossOutput:
    """Symmetric contrastive loss between paired batches (first arg text-role).

    Mean of the two directional InfoNCE terms: each text scored against all
    images and each image against all texts, matched pairs on the diagonal.
    """
    _require_same_shape(U, V)
    value, grad_u, grad_v, grad_lt = _symmetric_infonce(U.rows, V.rows, temp)
    return LossOutput(value=value, grad_inputs=(grad_u, grad_v), grad_log_tau=grad_lt)


def mvs_loss(
    U1: EmbeddingBatch,
    U2: EmbeddingBatch,
    V1: EmbeddingBatch,
    V2: EmbeddingBatch,
    temp: Temperature,
) -> LossOutput:
    """Multi-view loss: mean of the four text/image cross pairings.

    value = 1/4 * [L(U1,V1) + L(U2,V1) + L(U1,V2) + L(U2,V2)], with gradients
    accumulated across the four terms.
    """
    _require_same_shape(U1, U2, V1, V2)
    grads = {
        "u1": np.zeros_like(U1.rows),
        "u2": np.zeros_like(U2.rows),
        "v1": np.zeros_like(V1.rows),
        "v2": np.zeros_like(V2.rows),
    }
    value = 0.0
    grad_lt = 0.0
    pairings = [("u1", U1, "v1", V1), ("u2", U2, "v1", V1), ("u1", U1, "v2", V2), ("u2", U2, "v2", V2)]
    for ku, u, kv, v in pairings:
        term, gu, gv, glt = _symmetric_infonce(u.rows, v.rows, temp)
        value += term
        grads[ku] += gu
        grads[kv] += gv
        grad_lt += glt
    value /= 4.0
    grad_lt /= 4.0
    return LossOutput(
        value=value,
        grad_inputs=(grads["u1"] / 4.0, grads["u2"] / 4.0, grads["v1"] / 4.0, grads["v2"] / 4.0),
        grad_log_tau=grad_lt,
    )


def icl_loss(V1: EmbeddingBatch, V2: EmbeddingBatch, temp: Temperature) -> LossOutput:
    """Contrastive loss between the two image views of each study."""
    _require_same_shape(V1, V2)
    value, g1, g2, grad_lt = _symmetric_infonce(V1.rows, V2.rows, temp)
    return LossOutput(value=value, grad_inputs=(g1, g2), grad_log_tau=grad_lt)


def tcl_loss(U1: EmbeddingBatch, U2: EmbeddingBatch, temp: Temperature) -> LossOutput:
    """Contrastive loss between the two text views of each study."""
    _require_same_shape(U1, U2)
    value, g1, g2, grad_lt = _symmetric_infonce(U1.rows, U2.rows, temp)
    return LossOutput(value=value, grad_inputs=(g1, g2), grad_log_tau=grad_lt)


def total_loss(
    U1: EmbeddingBatch,
    U2: EmbeddingBatch,
    V1: EmbeddingBatch,
    V2: EmbeddingBatch,
    temp: Temperature,
    weights: LossWeights,
) -> LossOutput:
    """Weighted training objective: multi-view + image-only + text-only terms.

    value = mvs + lambda_icl * icl + lambda_tcl * tcl. Per-component values
    are reported in .components so the trainer can log them without a second
    pass.
    """
    _require_same_shape(U1, U2, V1, V2)
    mvs = mvs_loss(U1, U2, V1, V2, temp)
    icl = icl_loss(V1, V2, temp)
    tcl = tcl_loss(U1, U2, temp)
    li, lt = weights.lambda_icl, weights.lambda_tcl
    value = mvs.value + li * icl.value + lt * tcl.value
    grad_u1 = mvs.grad_inputs[0] + lt * tcl.grad_inputs[0]
    grad_u2 = mvs.grad_inputs[1] + lt * tcl.grad_inputs[1]
    grad_v1 = mvs.grad_inputs[2] + li * icl.grad_inputs[0]
    grad_v2 = mvs.grad_inputs[3] + li * icl.grad_inputs[1]
    grad_log_tau = mvs.grad_log_tau + li * icl.grad_log_tau + lt * tcl.grad_log_tau
    return LossOutput(
        value=value,
        grad_inputs=(grad_u1, grad_u2, grad_v1, grad_v2),
        grad_log_tau=grad_log_tau,
        components={"mvs": mvs.value, "icl": icl.value, "tcl": tcl.value, "total": value},
    )


def finite_diff_grad(loss_fn, inputs: list[np.ndarray], epsilon: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of a scalar function of ndarray inputs.

    Test oracle: perturbs every scalar entry of every input by +/- epsilon.
    Inputs are raw (pre-normalization) parameters; any normalization belongs
    inside loss_fn.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    grads = []
    work = [np.array(x, dtype=np.float64) for x in inputs]
    for idx, x in enumerate(work):
        g = np.zeros_like(x)
        flat_x = x.reshape(-1)
        flat_g = g.reshape(-1)
        for k in range(flat_x.size):
            orig = flat_x[k]
            flat_x[k] = orig + epsilon
            hi = loss_fn(*work)
            flat_x[k] = orig - epsilon
            lo = loss_fn(*work)
            flat_x[k] = orig
            flat_g[k] = (hi - lo) / (2.0 * epsilon)
        grads.append(g)
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max entrywise |a - f| / max(|a|, |f|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
    return float(np.max(np.abs(a - f) / denom))
