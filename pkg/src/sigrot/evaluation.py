"""Retrieval recall and embedding-quality metrics.

A corpus holds one embedding row per unique image and one per caption, plus
the caption-to-image ground truth. Text-to-image retrieval has exactly one
correct image per caption; image-to-text succeeds when any of the image's
captions lands in the top K. Ties in the score matrix are broken toward the
lower candidate index (stable sort), so results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadK, DimensionMismatch
from .losses import ModelBatch


@dataclass
class RetrievalCorpus:
    """Image rows (I x d), caption rows (T x d), and caption ground truth (T,)."""

    image_embeddings: np.ndarray
    text_embeddings: np.ndarray
    caption_to_image: np.ndarray

    def __post_init__(self):
        self.image_embeddings = np.asarray(self.image_embeddings, dtype=np.float64)
        self.text_embeddings = np.asarray(self.text_embeddings, dtype=np.float64)
        self.caption_to_image = np.asarray(self.caption_to_image, dtype=np.int64)
        if self.image_embeddings.ndim != 2 or self.text_embeddings.ndim != 2:
            raise DimensionMismatch("embeddings must be 2-D")
        if self.image_embeddings.shape[1] != self.text_embeddings.shape[1]:
            raise DimensionMismatch(
                f"embedding dims differ: {self.image_embeddings.shape[1]} vs "
                f"{self.text_embeddings.shape[1]}"
            )
        if self.caption_to_image.shape != (self.text_embeddings.shape[0],):
            raise DimensionMismatch("caption_to_image must have one entry per caption")
        n_images = self.image_embeddings.shape[0]
        if self.caption_to_image.size:
            lo = int(self.caption_to_image.min())
            hi = int(self.caption_to_image.max())
            if lo < 0 or hi >= n_images:
                raise DimensionMismatch(
                    f"caption_to_image entries must lie in [0, {n_images})"
                )
        counts = np.bincount(self.caption_to_image, minlength=n_images)
        if np.any(counts == 0):
            orphan = int(np.argmin(counts))
            raise DimensionMismatch(f"image {orphan} has no captions")

    @property
    def n_images(self) -> int:
        return self.image_embeddings.shape[0]

    @property
    def n_captions(self) -> int:
        return self.text_embeddings.shape[0]


def _check_ks(ks, limit: int):
    for k in ks:
        if not (1 <= int(k) <= limit):
            raise BadK(f"K={k} out of range [1, {limit}]")


def recall_at_k_t2i(corpus: RetrievalCorpus, ks) -> dict[int, float]:
    """Percentage of captions whose ground-truth image ranks in the top K."""
    _check_ks(ks, corpus.n_images)
    scores = corpus.text_embeddings @ corpus.image_embeddings.T
    order = np.argsort(-scores, axis=1, kind="stable")
    rank = (order == corpus.caption_to_image[:, None]).argmax(axis=1)
    return {int(k): 100.0 * float((rank < int(k)).mean()) for k in ks}


def recall_at_k_i2t(corpus: RetrievalCorpus, ks) -> dict[int, float]:
    """Percentage of images with at least one of their captions in the top K."""
    _check_ks(ks, corpus.n_captions)
    scores = corpus.image_embeddings @ corpus.text_embeddings.T
    order = np.argsort(-scores, axis=1, kind="stable")
    owner = corpus.caption_to_image[order]
    image_idx = np.arange(corpus.n_images)[:, None]
    hit = owner == image_idx
    return {int(k): 100.0 * float(hit[:, : int(k)].any(axis=1).mean()) for k in ks}


def alignment_score(batch: ModelBatch) -> float:
    """Mean similarity of matched pairs (cosine when rows are unit norm)."""
    return float(np.einsum("ij,ij->i", batch.z_image, batch.z_text).mean())


def modality_gap(batch: ModelBatch) -> tuple[np.ndarray, float]:
    """Difference of modality centroids and its L2 norm."""
    delta = batch.z_image.mean(axis=0) - batch.z_text.mean(axis=0)
    return delta, float(np.sqrt(np.dot(delta, delta)))


@dataclass
class EvalReport:
    t2i: dict[int, float]
    i2t: dict[int, float]
    avg_recall: float
    alignment: float
    gap_norm: float


def evaluate_retrieval(corpus: RetrievalCorpus, pairs: ModelBatch, ks=(1, 5, 10)) -> EvalReport:
    """Full report: recalls both directions at each K, their mean, alignment, gap.

    `pairs` is the pair-level batch (one row per caption with its image's
    embedding) used for alignment and modality gap.
    """
    t2i = recall_at_k_t2i(corpus, ks)
    i2t = recall_at_k_i2t(corpus, ks)
    values = [t2i[int(k)] for k in ks] + [i2t[int(k)] for k in ks]
    avg = float(np.mean(values))
    _, gap = modality_gap(pairs)
    return EvalReport(t2i, i2t, avg, alignment_score(pairs), gap)
