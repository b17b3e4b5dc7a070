"""Cross-modal alignment losses and their analytic gradients.

All losses consume a batch of N image/text embedding rows (unit norm in normal
use) and return the scalar value together with gradients for both embedding
matrices and the learnable scale parameters. Gradients are exact derivatives
of the returned value, including through the unrolled transport solver, so
central finite differences reproduce them to first order.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    BatchTooSmall,
    DimensionMismatch,
    DomainError,
    GraphBatchMismatch,
    NegativeLambda,
)
from .graph import SimilarityGraph
from .ot import SolverConfig, SolverMode, sinkhorn_backward, sinkhorn_unbalanced

# exp(tau_prime) is clamped to at most this; beyond it the scale gradient is 0.
TAU_MAX = 1000.0
TAU_PRIME_CAP = math.log(TAU_MAX)

# Plan entries are floored here before the log inside the generalized KL.
PLAN_FLOOR = 1e-30


class Contrastive(enum.Enum):
    CLIP = "clip"
    SIGLIP = "siglip"


@dataclass
class ModelBatch:
    """N matched image/text embedding rows sharing one embedding dimension."""

    z_image: np.ndarray
    z_text: np.ndarray

    def __post_init__(self):
        self.z_image = np.asarray(self.z_image, dtype=np.float64)
        self.z_text = np.asarray(self.z_text, dtype=np.float64)
        if self.z_image.ndim != 2 or self.z_text.ndim != 2:
            raise DimensionMismatch("embeddings must be 2-D")
        if self.z_image.shape != self.z_text.shape:
            raise DimensionMismatch(
                f"image shape {self.z_image.shape} != text shape {self.z_text.shape}"
            )

    @property
    def n(self) -> int:
        return self.z_image.shape[0]

    def validate(self, tol: float = 1e-9):
        for name, mat in (("z_image", self.z_image), ("z_text", self.z_text)):
            norms = np.sqrt(np.einsum("ij,ij->i", mat, mat))
            off = np.abs(norms - 1.0)
            if np.any(off > tol):
                i = int(np.argmax(off))
                raise DomainError(f"{name} row {i} has norm {norms[i]!r}")


@dataclass
class ScaleParams:
    """Learnable temperature (as log, tau = exp(tau_prime)) and additive bias."""

    tau_prime: float
    bias: float = 0.0

    def temperature(self) -> float:
        return math.exp(min(self.tau_prime, TAU_PRIME_CAP))

    def scale_grad_gate(self) -> float:
        """0 once the temperature clamp is active, else 1."""
        return 1.0 if self.tau_prime < TAU_PRIME_CAP else 0.0


@dataclass
class LossOutput:
    value: float
    grad_z_image: np.ndarray
    grad_z_text: np.ndarray
    grad_tau_prime: float
    grad_bias: float


def similarity_logits(batch: ModelBatch) -> np.ndarray:
    """Raw similarity matrix S = Z_image Z_text^T."""
    return batch.z_image @ batch.z_text.T


def _require_nonempty(batch: ModelBatch):
    if batch.n < 1:
        raise BatchTooSmall("loss needs at least one pair")


def _lse(mat: np.ndarray, axis: int) -> np.ndarray:
    mx = mat.max(axis=axis)
    if axis == 1:
        out = np.log(np.exp(mat - mx[:, None]).sum(axis=1))
    else:
        out = np.log(np.exp(mat - mx[None, :]).sum(axis=0))
    return out + mx


def clip_loss(batch: ModelBatch, params: ScaleParams) -> LossOutput:
    """Symmetric InfoNCE over S/tau with the diagonal as positives.

    Cross entropy is taken along rows (image to text) and columns (text to
    image) and the two directions are averaged.
    """
    _require_nonempty(batch)
    n = batch.n
    s = similarity_logits(batch)
    tau = params.temperature()
    logits = s / tau

    lse_rows = _lse(logits, axis=1)
    lse_cols = _lse(logits, axis=0)
    diag = np.diag(logits)
    value = 0.5 * (float((lse_rows - diag).mean()) + float((lse_cols - diag).mean()))

    p_row = np.exp(logits - lse_rows[:, None])
    p_col = np.exp(logits - lse_cols[None, :])
    g_logits = (p_row + p_col) / (2.0 * n)
    idx = np.arange(n)
    g_logits[idx, idx] -= 1.0 / n

    grad_s = g_logits / tau
    grad_tau_prime = -float(np.sum(g_logits * logits)) * params.scale_grad_gate()
    return LossOutput(
        value=value,
        grad_z_image=grad_s @ batch.z_text,
        grad_z_text=grad_s.T @ batch.z_image,
        grad_tau_prime=grad_tau_prime,
        grad_bias=0.0,
    )


def siglip_loss(batch: ModelBatch, params: ScaleParams) -> LossOutput:
    """Pairwise sigmoid loss over logits tau*S + bias.

    Every (i, j) cell is an independent binary problem with label +1 on the
    diagonal and -1 off it; the sum is divided by N.
    """
    _require_nonempty(batch)
    n = batch.n
    s = similarity_logits(batch)
    tau = params.temperature()
    t = tau * s + params.bias
    labels = np.full((n, n), -1.0)
    idx = np.arange(n)
    labels[idx, idx] = 1.0

    x = labels * t
    # softplus(-x) = -log sigmoid(x)
    value = float(np.logaddexp(0.0, -x).sum()) / n
    sig_neg = 0.5 * (1.0 - np.tanh(0.5 * x))  # sigmoid(-x), overflow-safe
    g_t = -(labels * sig_neg) / n

    grad_s = tau * g_t
    grad_tau_prime = float(np.sum(g_t * s)) * tau * params.scale_grad_gate()
    return LossOutput(
        value=value,
        grad_z_image=grad_s @ batch.z_text,
        grad_z_text=grad_s.T @ batch.z_image,
        grad_tau_prime=grad_tau_prime,
        grad_bias=float(g_t.sum()),
    )


def _plan_kl(plan: np.ndarray, target: np.ndarray, n: int):
    """Row-averaged generalized KL of the scaled plan against the target.

    Returns the value and its gradient with respect to the (unscaled) plan.
    Plan entries are floored at PLAN_FLOOR inside the log only.
    """
    p = n * plan
    pf = np.maximum(p, PLAN_FLOOR)
    logratio = np.log(pf) - np.log(target)
    value = float(np.sum(p * logratio - p + target)) / n
    grad_plan = np.where(p > PLAN_FLOOR, logratio, logratio - 1.0)
    return value, grad_plan


def sigrot_loss(
    batch: ModelBatch,
    graph: SimilarityGraph,
    solver: SolverConfig,
    detach_plan: bool = False,
) -> LossOutput:
    """Transport-alignment loss against a similarity-graph target.

    Unbalanced plans are solved on cost 1 - S (image to text) and its transpose
    (text to image) with uniform marginals 1/N. Each plan, scaled by N, is
    compared row-wise to the graph's softmax target with the generalized KL,
    and the two directions are averaged. Gradients flow through the unrolled
    solver iterations unless `detach_plan` is set, in which case the plans are
    treated as constants and the embedding gradients are zero.
    """
    _require_nonempty(batch)
    if graph.n != batch.n:
        raise GraphBatchMismatch(f"graph size {graph.n} != batch size {batch.n}")
    if solver.mode is not SolverMode.UNBALANCED:
        raise DomainError("sigrot_loss requires an unbalanced solver config")
    n = batch.n
    s = similarity_logits(batch)
    cost_i2t = 1.0 - s
    cost_t2i = np.ascontiguousarray(cost_i2t.T)
    marginal = np.full(n, 1.0 / n)

    record = not detach_plan
    res_i2t = sinkhorn_unbalanced(cost_i2t, marginal, marginal, solver, record_tape=record)
    res_t2i = sinkhorn_unbalanced(cost_t2i, marginal, marginal, solver, record_tape=record)

    q = graph.target
    val_i2t, grad_plan_i2t = _plan_kl(res_i2t.plan, q, n)
    val_t2i, grad_plan_t2i = _plan_kl(res_t2i.plan, q, n)
    value = 0.5 * (val_i2t + val_t2i)

    if detach_plan:
        zeros = np.zeros_like(s)
        return LossOutput(value, zeros, zeros.copy(), 0.0, 0.0)

    d_cost = sinkhorn_backward(res_i2t, 0.5 * grad_plan_i2t)
    d_cost += sinkhorn_backward(res_t2i, 0.5 * grad_plan_t2i).T
    grad_s = -d_cost
    return LossOutput(
        value=value,
        grad_z_image=grad_s @ batch.z_text,
        grad_z_text=grad_s.T @ batch.z_image,
        grad_tau_prime=0.0,
        grad_bias=0.0,
    )


def hybrid_loss(
    batch: ModelBatch,
    graph: SimilarityGraph,
    params: ScaleParams,
    solver: SolverConfig,
    lam: float,
    contrastive: Contrastive,
    detach_plan: bool = False,
) -> LossOutput:
    """lam * contrastive loss + transport-alignment loss.

    lam = 0 returns the transport-alignment output unchanged (bit-identical).
    """
    if lam < 0:
        raise NegativeLambda(f"lambda must be >= 0, got {lam}")
    sig = sigrot_loss(batch, graph, solver, detach_plan=detach_plan)
    if lam == 0.0:
        return sig
    if contrastive is Contrastive.CLIP:
        con = clip_loss(batch, params)
    else:
        con = siglip_loss(batch, params)
    return LossOutput(
        value=lam * con.value + sig.value,
        grad_z_image=lam * con.grad_z_image + sig.grad_z_image,
        grad_z_text=lam * con.grad_z_text + sig.grad_z_text,
        grad_tau_prime=lam * con.grad_tau_prime,
        grad_bias=lam * con.grad_bias,
    )
