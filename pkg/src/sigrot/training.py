"""Desk-scale trainer: linear projection heads over frozen features.

Each modality has one bias-free linear head whose output is L2-normalized.
Heads (plus the loss's scale parameters) are trained with decoupled AdamW
under a warmup+cosine schedule, with global gradient-norm clipping. Model
selection keeps the state with the best validation text-to-image R@1.

Everything is seeded and single-threaded numpy, so two runs from the same
config and data produce bit-identical weights, history, and checkpoints.
"""

from __future__ import annotations

import copy
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .data import PairDataset, PairRecord, fmt17
from .errors import (
    DimensionMismatch,
    DomainError,
    EmptySplit,
    NearZeroNorm,
    NonFiniteGradient,
    ParseError,
)
from .evaluation import RetrievalCorpus, recall_at_k_i2t, recall_at_k_t2i
from .graph import CombinationStrategy, GraphEmbeddings, build_graph
from .losses import (
    Contrastive,
    LossOutput,
    ModelBatch,
    ScaleParams,
    clip_loss,
    hybrid_loss,
    siglip_loss,
    sigrot_loss,
)
from .ot import SolverConfig, SolverMode

CKPT_MAGIC = "SIGROT-CKPT"
CKPT_VERSION = "v1"

# Scale initializations per objective family.
TAU_INIT_CLIP = 0.07
TAU_INIT_SIGLIP = 0.06
BIAS_INIT_SIGLIP = -9.0


class Objective(enum.Enum):
    CLIP = "clip"
    SIGLIP = "siglip"
    SIGROT = "sigrot"
    CLIP_SIGROT = "clip_sigrot"
    SIGLIP_SIGROT = "siglip_sigrot"

    @classmethod
    def from_name(cls, name: str) -> "Objective":
        for member in cls:
            if member.value == name:
                return member
        known = ", ".join(m.value for m in cls)
        raise ValueError(f"unknown objective {name!r}; expected one of: {known}")

    @property
    def uses_graph(self) -> bool:
        return self in (Objective.SIGROT, Objective.CLIP_SIGROT, Objective.SIGLIP_SIGROT)

    @property
    def siglip_family(self) -> bool:
        return self in (Objective.SIGLIP, Objective.SIGLIP_SIGROT)


def _default_train_solver() -> SolverConfig:
    # Fixed iteration count inside training keeps the unrolled graph depth
    # constant across steps and runs.
    return SolverConfig(
        epsilon=0.05,
        tau1=0.5,
        tau2=0.5,
        max_iters=100,
        tolerance=1e-9,
        mode=SolverMode.UNBALANCED,
        early_stop=False,
    )


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    peak_lr_head: float = 2e-4
    warmup_epochs: int = 2
    lr_floor_frac: float = 1e-4
    weight_decay: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-10
    clip_norm: float = 1.0
    lambda_weight: float = 0.1
    objective: Objective = Objective.CLIP_SIGROT
    strategy: CombinationStrategy = CombinationStrategy.CROSS_MODALITY
    solver: SolverConfig = field(default_factory=_default_train_solver)
    seed: int = 0
    embed_dim: int = 32
    detach_plan: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 2 or self.embed_dim < 1:
            raise DomainError("epochs >= 1, batch_size >= 2, embed_dim >= 1 required")
        if not (self.peak_lr_head > 0 and self.lr_floor_frac > 0):
            raise DomainError("peak_lr_head and lr_floor_frac must be positive")
        if not (0 <= self.warmup_epochs <= self.epochs):
            raise DomainError("warmup_epochs must lie in [0, epochs]")
        if self.weight_decay < 0 or self.clip_norm <= 0 or self.adam_eps <= 0:
            raise DomainError("weight_decay >= 0, clip_norm > 0, adam_eps > 0 required")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise DomainError("betas must lie in [0, 1)")
        if self.lambda_weight < 0:
            raise DomainError("lambda_weight must be >= 0")


@dataclass
class ProjectionHead:
    """Bias-free linear map (d_out x d_in); outputs are L2-normalized."""

    weight: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise DimensionMismatch("head weight must be 2-D")

    def forward(self, x) -> np.ndarray:
        """Project one vector or a stack of row vectors, unit-normalized."""
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim == 1:
            y = self.weight @ arr
            norm = float(np.sqrt(np.dot(y, y)))
            if norm <= 1e-12:
                raise NearZeroNorm(f"projected vector has norm {norm:.3e}")
            return y / norm
        z, _, _ = project_batch(self, arr)
        return z


def project_batch(head: ProjectionHead, x: np.ndarray):
    """Project a stack of rows; returns (z, pre-norm row norms, x as float64)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != head.weight.shape[1]:
        raise DimensionMismatch(
            f"input shape {arr.shape} incompatible with head {head.weight.shape}"
        )
    y = arr @ head.weight.T
    norms = np.sqrt(np.einsum("ij,ij->i", y, y))
    small = np.where(norms <= 1e-12)[0]
    if small.size:
        raise NearZeroNorm(f"projected row {int(small[0])} has norm {norms[small[0]]:.3e}")
    z = y / norms[:, None]
    return z, norms, arr


def project_backward(grad_z: np.ndarray, z: np.ndarray, norms: np.ndarray,
                     x: np.ndarray) -> np.ndarray:
    """Gradient of the head weight given dLoss/dz for z = normalize(W x).

    Through the normalization: grad_y = (g - (g.z) z) / ||y||.
    """
    inner = np.einsum("ij,ij->i", grad_z, z)
    grad_y = (grad_z - inner[:, None] * z) / norms[:, None]
    return grad_y.T @ x


@dataclass
class GradSet:
    """One gradient per trainable tensor."""

    w_image: np.ndarray
    w_text: np.ndarray
    tau_prime: float
    bias: float


@dataclass
class TrainState:
    image_head: ProjectionHead
    text_head: ProjectionHead
    scale: ScaleParams
    step: int = 0
    seed: int = 0
    m_w_image: np.ndarray | None = None
    v_w_image: np.ndarray | None = None
    m_w_text: np.ndarray | None = None
    v_w_text: np.ndarray | None = None
    m_tau: float = 0.0
    v_tau: float = 0.0
    m_bias: float = 0.0
    v_bias: float = 0.0

    def __post_init__(self):
        if self.m_w_image is None:
            self.m_w_image = np.zeros_like(self.image_head.weight)
        if self.v_w_image is None:
            self.v_w_image = np.zeros_like(self.image_head.weight)
        if self.m_w_text is None:
            self.m_w_text = np.zeros_like(self.text_head.weight)
        if self.v_w_text is None:
            self.v_w_text = np.zeros_like(self.text_head.weight)

    @classmethod
    def init(cls, cfg: TrainConfig, d_image: int, d_text: int) -> "TrainState":
        """Seeded Gaussian head init (scaled by 1/sqrt(d_in)) and scale init."""
        rng = np.random.default_rng(cfg.seed)
        w_img = rng.standard_normal((cfg.embed_dim, d_image)) / math.sqrt(d_image)
        w_txt = rng.standard_normal((cfg.embed_dim, d_text)) / math.sqrt(d_text)
        if cfg.objective.siglip_family:
            scale = ScaleParams(math.log(TAU_INIT_SIGLIP), BIAS_INIT_SIGLIP)
        else:
            scale = ScaleParams(math.log(TAU_INIT_CLIP), 0.0)
        return cls(ProjectionHead(w_img), ProjectionHead(w_txt), scale, seed=cfg.seed)


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup from 0.01*peak to peak, then cosine decay to the floor.

    `step` is the 0-based global step; the floor is reached exactly at the
    final step of training.
    """
    if steps_per_epoch < 1:
        raise DomainError("steps_per_epoch must be >= 1")
    peak = cfg.peak_lr_head
    floor = cfg.lr_floor_frac * peak
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    last = total - 1
    if warmup_steps > 0 and step <= warmup_steps:
        return peak * (0.01 + 0.99 * (step / warmup_steps))
    if last <= warmup_steps:
        return peak
    progress = (step - warmup_steps) / (last - warmup_steps)
    progress = min(max(progress, 0.0), 1.0)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(grads: GradSet, max_norm: float) -> tuple[GradSet, float]:
    """Scale all gradients by max_norm/norm when the joint L2 norm exceeds it.

    Returns the (possibly scaled) gradients and the pre-clip norm.
    """
    sq = float(np.sum(grads.w_image * grads.w_image))
    sq += float(np.sum(grads.w_text * grads.w_text))
    sq += grads.tau_prime * grads.tau_prime + grads.bias * grads.bias
    norm = math.sqrt(sq)
    if norm <= max_norm:
        return GradSet(grads.w_image.copy(), grads.w_text.copy(),
                       grads.tau_prime, grads.bias), norm
    s = max_norm / norm
    return GradSet(grads.w_image * s, grads.w_text * s,
                   grads.tau_prime * s, grads.bias * s), norm


def _adamw_scalar(theta, g, m, v, t, lr, cfg: TrainConfig, decay: bool):
    m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * g
    v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * g * g
    m_hat = m / (1.0 - cfg.adam_beta1 ** t)
    v_hat = v / (1.0 - cfg.adam_beta2 ** t)
    update = m_hat / (math.sqrt(v_hat) + cfg.adam_eps)
    if decay:
        update += cfg.weight_decay * theta
    return theta - lr * update, m, v


def adamw_step(state: TrainState, grads: GradSet, lr: float, cfg: TrainConfig) -> TrainState:
    """One decoupled-AdamW update in place; weight decay hits head weights only."""
    finite = (
        np.all(np.isfinite(grads.w_image))
        and np.all(np.isfinite(grads.w_text))
        and math.isfinite(grads.tau_prime)
        and math.isfinite(grads.bias)
    )
    if not finite:
        raise NonFiniteGradient("gradient contains NaN or Inf")
    state.step += 1
    t = state.step
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    for w, g, m, v in (
        (state.image_head.weight, grads.w_image, state.m_w_image, state.v_w_image),
        (state.text_head.weight, grads.w_text, state.m_w_text, state.v_w_text),
    ):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        update = m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        update += cfg.weight_decay * w
        w -= lr * update
    state.scale.tau_prime, state.m_tau, state.v_tau = _adamw_scalar(
        state.scale.tau_prime, grads.tau_prime, state.m_tau, state.v_tau, t, lr, cfg, False
    )
    state.scale.bias, state.m_bias, state.v_bias = _adamw_scalar(
        state.scale.bias, grads.bias, state.m_bias, state.v_bias, t, lr, cfg, False
    )
    return state


def shuffle_batches(n_records: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded permutation chunked into batches; a final batch of 1 is dropped."""
    rng = np.random.default_rng([seed, epoch])
    perm = rng.permutation(n_records)
    batches = [perm[i:i + batch_size] for i in range(0, n_records, batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches


def _loss_for_batch(cfg: TrainConfig, mb: ModelBatch, graph, scale: ScaleParams) -> LossOutput:
    obj = cfg.objective
    if obj is Objective.CLIP:
        return clip_loss(mb, scale)
    if obj is Objective.SIGLIP:
        return siglip_loss(mb, scale)
    if obj is Objective.SIGROT:
        return sigrot_loss(mb, graph, cfg.solver, detach_plan=cfg.detach_plan)
    kind = Contrastive.CLIP if obj is Objective.CLIP_SIGROT else Contrastive.SIGLIP
    return hybrid_loss(mb, graph, scale, cfg.solver, cfg.lambda_weight, kind,
                       detach_plan=cfg.detach_plan)


def build_corpus(records: list[PairRecord], image_head: ProjectionHead,
                 text_head: ProjectionHead):
    """Project records into a retrieval corpus plus the pair-level batch.

    Images are deduplicated by image_id in first-appearance order; captions
    keep record order.
    """
    if not records:
        raise EmptySplit("no records to evaluate")
    image_index: dict[str, int] = {}
    image_rows = []
    for r in records:
        if r.image_id not in image_index:
            image_index[r.image_id] = len(image_rows)
            image_rows.append(r.image_feature)
    x_images = np.stack(image_rows)
    x_texts = np.stack([r.text_feature for r in records])
    z_images = image_head.forward(x_images)
    z_texts = text_head.forward(x_texts)
    caption_to_image = np.array([image_index[r.image_id] for r in records], dtype=np.int64)
    corpus = RetrievalCorpus(z_images, z_texts, caption_to_image)
    pairs = ModelBatch(z_images[caption_to_image], z_texts)
    return corpus, pairs


@dataclass
class EpochStats:
    epoch: int
    loss: float
    val_t2i_r1: float
    val_i2t_r1: float
    lr: float


@dataclass
class TrainResult:
    state: TrainState
    history: list[EpochStats]
    best_epoch: int


def train(dataset: PairDataset, cfg: TrainConfig) -> TrainResult:
    """Full training loop; returns the best-validation state and epoch history."""
    train_recs = dataset.split("train")
    val_recs = dataset.split("val")
    if not train_recs:
        raise EmptySplit("train split is empty")
    if not val_recs:
        raise EmptySplit("val split is empty")

    x_img = np.stack([r.image_feature for r in train_recs])
    x_txt = np.stack([r.text_feature for r in train_recs])
    g_img = np.stack([r.graph_image_feature for r in train_recs])
    g_txt = np.stack([r.graph_text_feature for r in train_recs])
    n = len(train_recs)

    steps_per_epoch = len(shuffle_batches(n, cfg.batch_size, cfg.seed, 0))
    if steps_per_epoch < 1:
        raise EmptySplit("train split has no usable batches")

    state = TrainState.init(cfg, dataset.d_image, dataset.d_text)
    history: list[EpochStats] = []
    best_r1 = -math.inf
    best_epoch = -1
    best_state = None

    for epoch in range(cfg.epochs):
        batches = shuffle_batches(n, cfg.batch_size, cfg.seed, epoch)
        loss_sum = 0.0
        lr = lr_at(state.step, cfg, steps_per_epoch)
        for idx in batches:
            z_i, norms_i, xb_i = project_batch(state.image_head, x_img[idx])
            z_t, norms_t, xb_t = project_batch(state.text_head, x_txt[idx])
            mb = ModelBatch(z_i, z_t)
            g = None
            if cfg.objective.uses_graph:
                g = build_graph(GraphEmbeddings(g_txt[idx], g_img[idx]), cfg.strategy)
            out = _loss_for_batch(cfg, mb, g, state.scale)
            grads = GradSet(
                w_image=project_backward(out.grad_z_image, z_i, norms_i, xb_i),
                w_text=project_backward(out.grad_z_text, z_t, norms_t, xb_t),
                tau_prime=out.grad_tau_prime,
                bias=out.grad_bias,
            )
            grads, _ = clip_global_norm(grads, cfg.clip_norm)
            lr = lr_at(state.step, cfg, steps_per_epoch)
            adamw_step(state, grads, lr, cfg)
            loss_sum += out.value

        corpus, _ = build_corpus(val_recs, state.image_head, state.text_head)
        r1_t2i = recall_at_k_t2i(corpus, (1,))[1]
        r1_i2t = recall_at_k_i2t(corpus, (1,))[1]
        history.append(EpochStats(epoch, loss_sum / len(batches), r1_t2i, r1_i2t, lr))
        if r1_t2i > best_r1:
            best_r1 = r1_t2i
            best_epoch = epoch
            best_state = copy.deepcopy(state)

    return TrainResult(best_state, history, best_epoch)


def save_checkpoint(path, state: TrainState):
    """Versioned text checkpoint: dims, scale params, then row-major weights."""
    w_img = state.image_head.weight
    w_txt = state.text_head.weight
    if w_img.shape[0] != w_txt.shape[0]:
        raise DimensionMismatch("heads disagree on output dimension")
    lines = [
        f"{CKPT_MAGIC} {CKPT_VERSION}",
        f"dims {w_img.shape[0]} {w_img.shape[1]} {w_txt.shape[1]}",
        f"tau_prime {fmt17(state.scale.tau_prime)}",
        f"bias {fmt17(state.scale.bias)}",
        "image_head",
    ]
    lines.extend(" ".join(fmt17(x) for x in row) for row in w_img)
    lines.append("text_head")
    lines.extend(" ".join(fmt17(x) for x in row) for row in w_txt)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _ckpt_rows(lines, start, count, width, what):
    rows = []
    for i in range(count):
        ln = start + i
        if ln >= len(lines):
            raise ParseError(f"{what}: expected {count} rows", ln + 1, 1)
        parts = lines[ln].split(" ")
        if len(parts) != width:
            raise ParseError(f"{what}: expected {width} values", ln + 1, 1)
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ParseError(f"{what}: malformed float", ln + 1, 1) from None
    return np.array(rows, dtype=np.float64)


def load_checkpoint(path) -> tuple[ProjectionHead, ProjectionHead, ScaleParams]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != f"{CKPT_MAGIC} {CKPT_VERSION}":
        raise ParseError(f"expected header '{CKPT_MAGIC} {CKPT_VERSION}'", 1, 1)
    if len(lines) < 5:
        raise ParseError("truncated checkpoint", len(lines), 1)
    dims = lines[1].split(" ")
    if len(dims) != 4 or dims[0] != "dims":
        raise ParseError("expected 'dims <d_out> <d_image_in> <d_text_in>'", 2, 1)
    try:
        d_out, d_img, d_txt = int(dims[1]), int(dims[2]), int(dims[3])
    except ValueError:
        raise ParseError("dims must be integers", 2, 1) from None

    def scalar(ln, key):
        parts = lines[ln].split(" ")
        if len(parts) != 2 or parts[0] != key:
            raise ParseError(f"expected '{key} <float>'", ln + 1, 1)
        try:
            return float(parts[1])
        except ValueError:
            raise ParseError(f"malformed float for {key}", ln + 1, 1) from None

    tau_prime = scalar(2, "tau_prime")
    bias = scalar(3, "bias")
    if lines[4] != "image_head":
        raise ParseError("expected 'image_head' marker", 5, 1)
    w_img = _ckpt_rows(lines, 5, d_out, d_img, "image_head")
    marker = 5 + d_out
    if marker >= len(lines) or lines[marker] != "text_head":
        raise ParseError("expected 'text_head' marker", marker + 1, 1)
    w_txt = _ckpt_rows(lines, marker + 1, d_out, d_txt, "text_head")
    if marker + 1 + d_out != len(lines):
        raise ParseError("trailing content after text_head rows", marker + 1 + d_out + 1, 1)
    return ProjectionHead(w_img), ProjectionHead(w_txt), ScaleParams(tau_prime, bias)


HISTORY_COLUMNS = ("epoch", "loss", "val_t2i_r1", "val_i2t_r1", "lr")


def write_history(path, history: list[EpochStats]):
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        lines.append(",".join([
            str(row.epoch),
            fmt17(row.loss),
            fmt17(row.val_t2i_r1),
            fmt17(row.val_i2t_r1),
            fmt17(row.lr),
        ]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
