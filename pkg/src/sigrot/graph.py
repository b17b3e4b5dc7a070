"""Batch similarity graphs over auxiliary (frozen) embeddings.

A batch of N pairs carries caption-side and image-side graph embeddings with
unit rows. Gram matrices of those embeddings give four component graphs; a
combination strategy reduces them to one N x N graph G whose row softmax is the
target distribution used by the transport-alignment loss.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, UnknownStrategy
from .numerics import row_softmax

# Guard for the elementwise harmonic mean: denominators this close to zero
# would amplify noise, so the combined entry is defined as 0 there.
HARMONIC_DENOM_FLOOR = 1e-8

# Unit-row tolerance for graph embeddings.
ROW_NORM_TOL = 1e-9


class CombinationStrategy(enum.Enum):
    CROSS_MODALITY = "cross"
    ARITHMETIC_MEAN = "arith"
    HARMONIC_MEAN = "harm"
    CAPTION_ONLY = "caption"
    IMAGE_ONLY = "image"

    @classmethod
    def from_name(cls, name: str) -> "CombinationStrategy":
        for member in cls:
            if member.value == name:
                return member
        known = ", ".join(m.value for m in cls)
        raise UnknownStrategy(f"unknown strategy {name!r}; expected one of: {known}")


@dataclass
class GraphEmbeddings:
    """Unit-row graph-space embeddings for one batch (text side, image side)."""

    e_text: np.ndarray
    e_image: np.ndarray

    def __post_init__(self):
        self.e_text = np.asarray(self.e_text, dtype=np.float64)
        self.e_image = np.asarray(self.e_image, dtype=np.float64)
        if self.e_text.ndim != 2 or self.e_image.ndim != 2:
            raise DimensionMismatch("graph embeddings must be 2-D")
        if self.e_text.shape != self.e_image.shape:
            raise DimensionMismatch(
                f"text shape {self.e_text.shape} != image shape {self.e_image.shape}"
            )
        for name, mat in (("e_text", self.e_text), ("e_image", self.e_image)):
            norms = np.sqrt(np.einsum("ij,ij->i", mat, mat))
            off = np.abs(norms - 1.0)
            if np.any(off > ROW_NORM_TOL):
                i = int(np.argmax(off))
                raise DimensionMismatch(
                    f"{name} row {i} has norm {norms[i]!r}, expected 1 within {ROW_NORM_TOL:.0e}"
                )

    @property
    def n(self) -> int:
        return self.e_text.shape[0]


@dataclass
class ComponentGraphs:
    """The four Gram matrices of one batch."""

    text_text: np.ndarray
    image_image: np.ndarray
    text_image: np.ndarray
    image_text: np.ndarray


@dataclass
class SimilarityGraph:
    """Combined graph G and its row-softmax target distribution."""

    g: np.ndarray
    target: np.ndarray
    strategy: CombinationStrategy

    @property
    def n(self) -> int:
        return self.g.shape[0]


def component_graphs(emb: GraphEmbeddings) -> ComponentGraphs:
    """Gram matrices E_t E_t^T, E_i E_i^T, E_t E_i^T and the exact transpose of the last."""
    g_tt = emb.e_text @ emb.e_text.T
    g_ii = emb.e_image @ emb.e_image.T
    g_ti = emb.e_text @ emb.e_image.T
    # Transposing g_ti (rather than recomputing E_i E_t^T) keeps the pair exact.
    g_it = g_ti.T.copy()
    return ComponentGraphs(g_tt, g_ii, g_ti, g_it)


def combine(components: ComponentGraphs, strategy: CombinationStrategy) -> SimilarityGraph:
    """Reduce the four component graphs to one and attach its row-softmax target."""
    g_tt = components.text_text
    g_ii = components.image_image
    if strategy is CombinationStrategy.CROSS_MODALITY:
        g = 0.25 * (g_tt + g_ii + components.text_image + components.image_text)
    elif strategy is CombinationStrategy.ARITHMETIC_MEAN:
        g = 0.5 * (g_tt + g_ii)
    elif strategy is CombinationStrategy.HARMONIC_MEAN:
        denom = g_tt + g_ii
        small = np.abs(denom) < HARMONIC_DENOM_FLOOR
        safe = np.where(small, 1.0, denom)
        g = np.where(small, 0.0, 2.0 * g_tt * g_ii / safe)
    elif strategy is CombinationStrategy.CAPTION_ONLY:
        g = g_tt.copy()
    elif strategy is CombinationStrategy.IMAGE_ONLY:
        g = g_ii.copy()
    else:  # pragma: no cover - enum is closed
        raise UnknownStrategy(str(strategy))
    return SimilarityGraph(g, row_softmax(g), strategy)


def build_graph(emb: GraphEmbeddings, strategy: CombinationStrategy) -> SimilarityGraph:
    """component_graphs followed by combine."""
    return combine(component_graphs(emb), strategy)


@dataclass
class PairingDiagnostics:
    """Summary of the cross-modal diagonal (each pair's own text-image similarity)."""

    diag_min: float
    diag_mean: float
    diag_max: float
    offdiag_mean: float
    suspicious: bool


def self_pair_diagonal_check(emb: GraphEmbeddings) -> PairingDiagnostics:
    """Flag batches whose matched pairs are no more similar than random pairs.

    A healthy batch has the diagonal of E_t E_i^T clearly above the off-diagonal
    mean; the opposite usually means rows of the two sides are misaligned.
    """
    g_ti = emb.e_text @ emb.e_image.T
    diag = np.diag(g_ti)
    n = g_ti.shape[0]
    if n > 1:
        off_mean = float((g_ti.sum() - diag.sum()) / (n * n - n))
    else:
        off_mean = 0.0
    diag_mean = float(diag.mean())
    return PairingDiagnostics(
        diag_min=float(diag.min()),
        diag_mean=diag_mean,
        diag_max=float(diag.max()),
        offdiag_mean=off_mean,
        suspicious=bool(n > 1 and diag_mean <= off_mean),
    )
