"""Pair datasets, the embedding file format, and the synthetic generator.

The embedding file is a line-oriented UTF-8 text format:

    SIGROT-EMB v1 <d_model_img> <d_model_txt> <d_graph>
    image_id<TAB>caption_id<TAB>split<TAB>img_csv<TAB>txt_csv<TAB>gimg_csv<TAB>gtxt_csv

Vectors are comma-separated decimal floats written with 17 significant digits,
so write -> read -> write round-trips byte-identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ParseError, UnknownSplit
from .numerics import normalize_rows

EMB_MAGIC = "SIGROT-EMB"
EMB_VERSION = "v1"
SPLITS = ("train", "val", "test")

# Graph feature rows must be unit norm within this tolerance on load; they are
# re-normalized exactly afterwards.
GRAPH_NORM_TOL = 1e-6


def fmt17(x: float) -> str:
    """Decimal text with 17 significant digits; round-trips float64 exactly."""
    return format(float(x), ".17g")


@dataclass
class PairRecord:
    image_id: str
    caption_id: str
    split: str
    image_feature: np.ndarray
    text_feature: np.ndarray
    graph_image_feature: np.ndarray
    graph_text_feature: np.ndarray


@dataclass
class PairDataset:
    records: list[PairRecord]
    d_image: int
    d_text: int
    d_graph: int

    @property
    def n(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[PairRecord]:
        if name not in SPLITS:
            raise UnknownSplit(f"unknown split {name!r}; expected one of {SPLITS}")
        return [r for r in self.records if r.split == name]


def _parse_vector(text: str, expect: int, what: str, line: int, column: int) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != expect:
        raise ParseError(
            f"{what}: expected {expect} values, got {len(parts)}", line, column
        )
    try:
        vec = np.array([float(p) for p in parts], dtype=np.float64)
    except ValueError:
        raise ParseError(f"{what}: malformed float", line, column) from None
    if not np.all(np.isfinite(vec)):
        raise ParseError(f"{what}: non-finite value", line, column)
    return vec


def load_embeddings(path) -> PairDataset:
    """Parse an embedding file, validating dimensions, splits, and graph norms."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        text = fh.read()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("empty file", 1, 1)

    head = lines[0].split(" ")
    if len(head) != 5 or head[0] != EMB_MAGIC or head[1] != EMB_VERSION:
        raise ParseError(
            f"expected header '{EMB_MAGIC} {EMB_VERSION} <d_img> <d_txt> <d_graph>'", 1, 1
        )
    try:
        d_image, d_text, d_graph = (int(tok) for tok in head[2:])
    except ValueError:
        raise ParseError("header dimensions must be integers", 1, 1) from None
    if min(d_image, d_text, d_graph) < 1:
        raise ParseError("header dimensions must be positive", 1, 1)

    records: list[PairRecord] = []
    for ln, raw in enumerate(lines[1:], start=2):
        if raw == "":
            raise ParseError("blank record line", ln, 1)
        fields = raw.split("\t")
        if len(fields) != 7:
            raise ParseError(f"expected 7 tab-separated fields, got {len(fields)}", ln, 1)
        # 1-based character offset where each field starts.
        cols = [1]
        for f in fields[:-1]:
            cols.append(cols[-1] + len(f) + 1)
        image_id, caption_id, split = fields[0], fields[1], fields[2]
        if split not in SPLITS:
            raise ParseError(f"unknown split {split!r}", ln, cols[2])
        img = _parse_vector(fields[3], d_image, "image feature", ln, cols[3])
        txt = _parse_vector(fields[4], d_text, "text feature", ln, cols[4])
        gimg = _parse_vector(fields[5], d_graph, "graph image feature", ln, cols[5])
        gtxt = _parse_vector(fields[6], d_graph, "graph text feature", ln, cols[6])
        for what, vec, col in (("graph image feature", gimg, cols[5]),
                               ("graph text feature", gtxt, cols[6])):
            norm = float(np.sqrt(np.dot(vec, vec)))
            if abs(norm - 1.0) > GRAPH_NORM_TOL:
                raise ParseError(f"{what}: norm {norm!r} not within {GRAPH_NORM_TOL:g} of 1",
                                 ln, col)
        records.append(PairRecord(image_id, caption_id, split,
                                  img, txt, gimg / np.sqrt(np.dot(gimg, gimg)),
                                  gtxt / np.sqrt(np.dot(gtxt, gtxt))))
    return PairDataset(records, d_image, d_text, d_graph)


def write_embeddings(path, dataset: PairDataset):
    """Write the canonical text form (17 significant digits, LF newlines)."""
    lines = [f"{EMB_MAGIC} {EMB_VERSION} {dataset.d_image} {dataset.d_text} {dataset.d_graph}"]
    for r in dataset.records:
        for name, value in (("image_id", r.image_id), ("caption_id", r.caption_id)):
            if "\t" in value or "\n" in value or "," in value:
                raise DomainError(f"{name} {value!r} contains a reserved character")
        if r.split not in SPLITS:
            raise UnknownSplit(f"unknown split {r.split!r}")
        lines.append("\t".join([
            r.image_id,
            r.caption_id,
            r.split,
            ",".join(fmt17(x) for x in r.image_feature),
            ",".join(fmt17(x) for x in r.text_feature),
            ",".join(fmt17(x) for x in r.graph_image_feature),
            ",".join(fmt17(x) for x in r.graph_text_feature),
        ]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


@dataclass
class SynthConfig:
    """Clustered synthetic pairs: per-cluster centers plus isotropic noise."""

    n_clusters: int = 8
    pairs_per_cluster: int = 64
    d_model_img: int = 32
    d_model_txt: int = 32
    d_graph: int = 16
    noise_sigma: float = 0.35
    captions_per_image: int = 3
    seed: int = 42

    def __post_init__(self):
        if min(self.n_clusters, self.pairs_per_cluster, self.captions_per_image) < 1:
            raise DomainError("cluster, pair, and caption counts must be >= 1")
        if min(self.d_model_img, self.d_model_txt, self.d_graph) < 1:
            raise DomainError("dimensions must be >= 1")
        if self.noise_sigma < 0:
            raise DomainError("noise_sigma must be >= 0")


def generate_synthetic(cfg: SynthConfig) -> PairDataset:
    """Deterministic clustered dataset.

    Each cluster gets a unit-norm model-space center per modality (shared
    between modalities when the dims match, so captions coincide with image
    centers at sigma = 0) and one unit-norm graph-space center used verbatim,
    noise-free, as the graph feature of every record in the cluster. One image
    feature is drawn per image; each of its captions draws a fresh text
    feature. Splits are 70/15/15 over a seeded permutation of images.
    """
    rng = np.random.default_rng(cfg.seed)
    k = cfg.n_clusters
    n_images = k * cfg.pairs_per_cluster

    graph_centers = normalize_rows(rng.standard_normal((k, cfg.d_graph)))
    img_centers = normalize_rows(rng.standard_normal((k, cfg.d_model_img)))
    if cfg.d_model_txt == cfg.d_model_img:
        txt_centers = img_centers
    else:
        txt_centers = normalize_rows(rng.standard_normal((k, cfg.d_model_txt)))

    clusters = np.repeat(np.arange(k), cfg.pairs_per_cluster)
    perm = rng.permutation(n_images)
    n_train = int(0.70 * n_images)
    n_val = int(0.15 * n_images)
    split_of = np.empty(n_images, dtype=object)
    split_of[perm[:n_train]] = "train"
    split_of[perm[n_train:n_train + n_val]] = "val"
    split_of[perm[n_train + n_val:]] = "test"

    img_feats = img_centers[clusters] + cfg.noise_sigma * rng.standard_normal(
        (n_images, cfg.d_model_img)
    )
    n_captions = n_images * cfg.captions_per_image
    txt_noise = cfg.noise_sigma * rng.standard_normal((n_captions, cfg.d_model_txt))

    records: list[PairRecord] = []
    row = 0
    for i in range(n_images):
        cl = int(clusters[i])
        for j in range(cfg.captions_per_image):
            records.append(PairRecord(
                image_id=f"img{i:05d}",
                caption_id=f"cap{i:05d}_{j}",
                split=str(split_of[i]),
                image_feature=img_feats[i],
                text_feature=txt_centers[cl] + txt_noise[row],
                graph_image_feature=graph_centers[cl],
                graph_text_feature=graph_centers[cl],
            ))
            row += 1
    return PairDataset(records, cfg.d_model_img, cfg.d_model_txt, cfg.d_graph)


def read_matrix(path) -> np.ndarray:
    """Whitespace-separated float rows; all rows must have equal length."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    rows: list[list[float]] = []
    width = None
    for ln, raw in enumerate(lines, start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = raw.split()
        values = []
        col = 0
        for tok in tokens:
            col = raw.index(tok, col) + 1
            try:
                values.append(float(tok))
            except ValueError:
                raise ParseError(f"malformed float {tok!r}", ln, col) from None
            col += len(tok) - 1
        if width is None:
            width = len(values)
        elif len(values) != width:
            raise ParseError(f"expected {width} values, got {len(values)}", ln, 1)
        rows.append(values)
    if not rows:
        raise ParseError("no matrix rows found", 1, 1)
    mat = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(mat)):
        raise ParseError("matrix contains non-finite values", 1, 1)
    return mat


def write_matrix(path, mat: np.ndarray, comments=()):
    """Write a matrix as whitespace-separated rows, with optional # comments."""
    arr = np.asarray(mat, dtype=np.float64)
    lines = [f"# {c}" for c in comments]
    lines.extend(" ".join(fmt17(x) for x in row) for row in arr)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
