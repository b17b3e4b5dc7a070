"""Command line interface.

Exit codes: 0 success, 1 usage error, 2 data error (parse failures, missing
files, shape mismatches), 3 numerical failure (non-finite values, failed
gradient check).
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import __version__
from .data import (
    PairDataset,
    SynthConfig,
    fmt17,
    generate_synthetic,
    load_embeddings,
    read_matrix,
    write_embeddings,
    write_matrix,
)
from .errors import (
    BadK,
    BatchTooSmall,
    DimensionMismatch,
    DomainError,
    EmptyInput,
    EmptySplit,
    GraphBatchMismatch,
    NearZeroNorm,
    NegativeLambda,
    NoForwardTape,
    NonFiniteGradient,
    NonPositiveMarginal,
    ParseError,
    UnknownSplit,
    UnknownStrategy,
)
from .evaluation import evaluate_retrieval
from .graph import (
    CombinationStrategy,
    GraphEmbeddings,
    build_graph,
    self_pair_diagonal_check,
)
from .losses import (
    Contrastive,
    ModelBatch,
    ScaleParams,
    clip_loss,
    hybrid_loss,
    siglip_loss,
    sigrot_loss,
)
from .numerics import normalize_rows
from .ot import SolverConfig, SolverMode, sinkhorn_balanced, sinkhorn_unbalanced, transport_cost
from .training import (
    BIAS_INIT_SIGLIP,
    Objective,
    TAU_INIT_CLIP,
    TAU_INIT_SIGLIP,
    TrainConfig,
    build_corpus,
    load_checkpoint,
    save_checkpoint,
    train,
    write_history,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

GRADCHECK_THRESHOLD = 1e-4

DATA_ERRORS = (
    ParseError,
    UnknownSplit,
    UnknownStrategy,
    EmptySplit,
    BadK,
    DimensionMismatch,
    EmptyInput,
    OSError,
)
NUMERIC_ERRORS = (
    DomainError,
    NonPositiveMarginal,
    NearZeroNorm,
    NonFiniteGradient,
    NoForwardTape,
    BatchTooSmall,
    GraphBatchMismatch,
    NegativeLambda,
)


class _Parser(argparse.ArgumentParser):
    """argparse maps usage errors to exit code 2; this CLI reserves 2 for data errors."""

    def exit(self, status=0, message=None):
        if message:
            self._print_message(message, sys.stderr)
        raise SystemExit(EXIT_USAGE if status else EXIT_OK)


# Config keys accepted by `sigrot train`, one per TrainConfig/SolverConfig field.
def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


TRAIN_KEYS = {
    "epochs": int,
    "batch_size": int,
    "peak_lr_head": float,
    "warmup_epochs": int,
    "lr_floor_frac": float,
    "weight_decay": float,
    "adam_beta1": float,
    "adam_beta2": float,
    "adam_eps": float,
    "clip_norm": float,
    "lambda": float,
    "objective": Objective.from_name,
    "strategy": CombinationStrategy.from_name,
    "seed": int,
    "embed_dim": int,
    "detach_plan": _parse_bool,
    "epsilon": float,
    "tau1": float,
    "tau2": float,
    "max_iters": int,
    "tolerance": float,
    "solver_mode": SolverMode,
    "early_stop": _parse_bool,
}

SOLVER_FIELD_OF_KEY = {
    "epsilon": "epsilon",
    "tau1": "tau1",
    "tau2": "tau2",
    "max_iters": "max_iters",
    "tolerance": "tolerance",
    "solver_mode": "mode",
    "early_stop": "early_stop",
}
TRAIN_FIELD_OF_KEY = {"lambda": "lambda_weight"}


def parse_train_config(text: str) -> tuple[TrainConfig, list[str]]:
    """Parse flat key=value lines ('#' starts a comment) into a TrainConfig.

    Unknown keys are rejected with the offending line. Returns the config and
    a list of warnings (e.g. lambda given for the pure transport objective).
    """
    train_kwargs: dict = {}
    solver_kwargs: dict = {}
    seen: set[str] = set()
    for ln, raw in enumerate(text.split("\n"), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected key=value", ln, 1)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in TRAIN_KEYS:
            raise ParseError(f"unknown key {key!r}", ln, 1)
        if key in seen:
            raise ParseError(f"duplicate key {key!r}", ln, 1)
        seen.add(key)
        try:
            parsed = TRAIN_KEYS[key](value)
        except ValueError as exc:
            raise ParseError(f"bad value for {key}: {exc}", ln, 1) from None
        except UnknownStrategy as exc:
            raise ParseError(str(exc), ln, 1) from None
        if key in SOLVER_FIELD_OF_KEY:
            solver_kwargs[SOLVER_FIELD_OF_KEY[key]] = parsed
        else:
            train_kwargs[TRAIN_FIELD_OF_KEY.get(key, key)] = parsed

    base_solver = TrainConfig().solver
    for f in ("epsilon", "tau1", "tau2", "max_iters", "tolerance", "mode", "early_stop"):
        solver_kwargs.setdefault(f, getattr(base_solver, f))
    try:
        cfg = TrainConfig(solver=SolverConfig(**solver_kwargs), **train_kwargs)
    except DomainError as exc:
        raise ParseError(f"invalid configuration: {exc}") from None

    warnings = []
    if cfg.objective is Objective.SIGROT and "lambda" in seen:
        warnings.append("objective=sigrot ignores the lambda key")
    return cfg, warnings


def _load_train_config(path) -> tuple[TrainConfig, list[str]]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_train_config(fh.read())


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        n_clusters=args.clusters,
        pairs_per_cluster=args.pairs_per_cluster,
        d_model_img=args.d_model_img,
        d_model_txt=args.d_model_txt,
        d_graph=args.d_graph,
        noise_sigma=args.noise_sigma,
        captions_per_image=args.captions_per_image,
        seed=args.seed,
    )
    dataset = generate_synthetic(cfg)
    write_embeddings(args.out, dataset)
    print(f"wrote {dataset.n} records "
          f"({cfg.n_clusters * cfg.pairs_per_cluster} images) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, warnings = _load_train_config(args.config)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    dataset = load_embeddings(args.data)
    result = train(dataset, cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    ckpt = os.path.join(args.out_dir, "checkpoint.txt")
    hist = os.path.join(args.out_dir, "history.csv")
    save_checkpoint(ckpt, result.state)
    write_history(hist, result.history)
    last = result.history[-1]
    best = result.history[result.best_epoch]
    print(f"trained {cfg.epochs} epochs; best epoch {result.best_epoch} "
          f"(val t2i R@1 {fmt17(best.val_t2i_r1)}); final loss {fmt17(last.loss)}")
    print(f"checkpoint: {ckpt}")
    print(f"history: {hist}")
    return EXIT_OK


EVAL_CSV_COLUMNS = (
    "t2i_r1", "t2i_r5", "t2i_r10",
    "i2t_r1", "i2t_r5", "i2t_r10",
    "avg_recall", "alignment", "modality_gap",
)


def _report_csv(report) -> str:
    values = [
        report.t2i[1], report.t2i[5], report.t2i[10],
        report.i2t[1], report.i2t[5], report.i2t[10],
        report.avg_recall, report.alignment, report.gap_norm,
    ]
    return ",".join(EVAL_CSV_COLUMNS) + "\n" + ",".join(fmt17(v) for v in values) + "\n"


def cmd_eval(args) -> int:
    image_head, text_head, _ = load_checkpoint(args.checkpoint)
    dataset = load_embeddings(args.data)
    if image_head.weight.shape[1] != dataset.d_image:
        raise DimensionMismatch(
            f"checkpoint expects image dim {image_head.weight.shape[1]}, "
            f"data has {dataset.d_image}"
        )
    if text_head.weight.shape[1] != dataset.d_text:
        raise DimensionMismatch(
            f"checkpoint expects text dim {text_head.weight.shape[1]}, "
            f"data has {dataset.d_text}"
        )
    records = dataset.split(args.split)
    if not records:
        raise EmptySplit(f"split {args.split!r} has no records")
    corpus, pairs = build_corpus(records, image_head, text_head)
    report = evaluate_retrieval(corpus, pairs, ks=(1, 5, 10))

    print(f"split={args.split} images={corpus.n_images} captions={corpus.n_captions}")
    for k in (1, 5, 10):
        print(f"  t2i R@{k:<3} {report.t2i[k]:10.4f}")
    for k in (1, 5, 10):
        print(f"  i2t R@{k:<3} {report.i2t[k]:10.4f}")
    print(f"  avg recall   {report.avg_recall:10.4f}")
    print(f"  alignment    {report.alignment:10.4f}")
    print(f"  modality gap {report.gap_norm:10.4f}")

    csv_text = _report_csv(report)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(csv_text)
        print(f"csv: {args.out}")
    else:
        sys.stdout.write(csv_text)
    return EXIT_OK


def cmd_solve_ot(args) -> int:
    cost = read_matrix(args.cost)
    mode = SolverMode(args.mode)
    cfg = SolverConfig(
        epsilon=args.eps,
        tau1=args.tau1,
        tau2=args.tau2,
        max_iters=args.max_iters,
        tolerance=args.tol,
        mode=mode,
    )
    n, m = cost.shape
    mu = np.full(n, 1.0 / n)
    nu = np.full(m, 1.0 / m)
    if mode is SolverMode.BALANCED:
        result = sinkhorn_balanced(cost, mu, nu, cfg, record_tape=False)
    else:
        result = sinkhorn_unbalanced(cost, mu, nu, cfg, record_tape=False)
    if not np.all(np.isfinite(result.plan)):
        raise NonFiniteGradient("solver produced non-finite plan entries")
    diag = (
        f"mode={mode.value} iterations={result.iterations_used} "
        f"converged={str(result.converged).lower()} "
        f"row_residual={fmt17(result.row_residual)} "
        f"col_residual={fmt17(result.col_residual)} "
        f"cost={fmt17(transport_cost(result, cost))}"
    )
    print(diag)
    if args.out:
        write_matrix(args.out, result.plan, comments=[diag])
        print(f"plan: {args.out}")
    else:
        for row in result.plan:
            print(" ".join(fmt17(x) for x in row))
    return EXIT_OK


def _graph_batch(dataset: PairDataset, n: int) -> GraphEmbeddings:
    if n < 1 or n > dataset.n:
        raise EmptyInput(f"need 1 <= n <= {dataset.n}, got {n}")
    recs = dataset.records[:n]
    return GraphEmbeddings(
        e_text=np.stack([r.graph_text_feature for r in recs]),
        e_image=np.stack([r.graph_image_feature for r in recs]),
    )


def cmd_graph(args) -> int:
    dataset = load_embeddings(args.data)
    strategy = CombinationStrategy.from_name(args.strategy)
    emb = _graph_batch(dataset, args.n)
    sim = build_graph(emb, strategy)
    diag = self_pair_diagonal_check(emb)
    if diag.suspicious:
        print(
            "warning: mean cross-modal diagonal "
            f"{diag.diag_mean:.6f} <= off-diagonal mean {diag.offdiag_mean:.6f}; "
            "check record pairing",
            file=sys.stderr,
        )
    lines = [f"SIGROT-GRAPH v1 {sim.n} {strategy.value}", "G"]
    lines.extend(" ".join(fmt17(x) for x in row) for row in sim.g)
    lines.append("target")
    lines.extend(" ".join(fmt17(x) for x in row) for row in sim.target)
    body = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(body)
        print(f"graph: {args.out} (n={sim.n}, strategy={strategy.value})")
    else:
        sys.stdout.write(body)
    return EXIT_OK


def _gradcheck_eval(objective: Objective, mb: ModelBatch, g, scale: ScaleParams,
                    solver: SolverConfig, lam: float):
    if objective is Objective.CLIP:
        return clip_loss(mb, scale)
    if objective is Objective.SIGLIP:
        return siglip_loss(mb, scale)
    if objective is Objective.SIGROT:
        return sigrot_loss(mb, g, solver)
    kind = Contrastive.CLIP if objective is Objective.CLIP_SIGROT else Contrastive.SIGLIP
    return hybrid_loss(mb, g, scale, solver, lam, kind)


def cmd_gradcheck(args) -> int:
    dataset = load_embeddings(args.data)
    objective = Objective.from_name(args.objective)
    n = args.n
    if n < 1 or n > min(8, dataset.n):
        raise EmptyInput(f"need 1 <= n <= {min(8, dataset.n)}, got {n}")
    if dataset.d_image != dataset.d_text:
        raise DimensionMismatch(
            "gradcheck compares raw features and needs d_model_img == d_model_txt"
        )
    recs = dataset.records[:n]
    z_img = normalize_rows(np.stack([r.image_feature for r in recs]))
    z_txt = normalize_rows(np.stack([r.text_feature for r in recs]))
    g = None
    if objective.uses_graph:
        emb = GraphEmbeddings(
            e_text=np.stack([r.graph_text_feature for r in recs]),
            e_image=np.stack([r.graph_image_feature for r in recs]),
        )
        g = build_graph(emb, CombinationStrategy.CROSS_MODALITY)
    if objective.siglip_family:
        scale = ScaleParams(math.log(TAU_INIT_SIGLIP), BIAS_INIT_SIGLIP)
    else:
        scale = ScaleParams(math.log(TAU_INIT_CLIP), 0.0)
    solver = SolverConfig(max_iters=100, early_stop=False)

    def value_at(zi, zt, tp, b):
        out = _gradcheck_eval(objective, ModelBatch(zi, zt), g,
                              ScaleParams(tp, b), solver, args.lam)
        return out.value

    analytic = _gradcheck_eval(objective, ModelBatch(z_img, z_txt), g, scale,
                               solver, args.lam)
    rng = np.random.default_rng(args.seed)
    h = 1e-6
    max_rel = 0.0

    for _ in range(args.directions):
        d_img = rng.standard_normal(z_img.shape)
        d_txt = rng.standard_normal(z_txt.shape)
        norm = np.sqrt(np.sum(d_img * d_img) + np.sum(d_txt * d_txt))
        d_img /= norm
        d_txt /= norm
        plus = value_at(z_img + h * d_img, z_txt + h * d_txt, scale.tau_prime, scale.bias)
        minus = value_at(z_img - h * d_img, z_txt - h * d_txt, scale.tau_prime, scale.bias)
        fd = (plus - minus) / (2 * h)
        ana = float(np.sum(analytic.grad_z_image * d_img)
                    + np.sum(analytic.grad_z_text * d_txt))
        rel = abs(ana - fd) / max(abs(ana), abs(fd), 1e-8)
        max_rel = max(max_rel, rel)

    if objective is not Objective.SIGROT:
        fd_tau = (value_at(z_img, z_txt, scale.tau_prime + h, scale.bias)
                  - value_at(z_img, z_txt, scale.tau_prime - h, scale.bias)) / (2 * h)
        rel = abs(analytic.grad_tau_prime - fd_tau) / max(
            abs(analytic.grad_tau_prime), abs(fd_tau), 1e-8)
        max_rel = max(max_rel, rel)
        fd_bias = (value_at(z_img, z_txt, scale.tau_prime, scale.bias + h)
                   - value_at(z_img, z_txt, scale.tau_prime, scale.bias - h)) / (2 * h)
        rel = abs(analytic.grad_bias - fd_bias) / max(
            abs(analytic.grad_bias), abs(fd_bias), 1e-8)
        max_rel = max(max_rel, rel)

    ok = max_rel < GRADCHECK_THRESHOLD
    status = "PASS" if ok else "FAIL"
    print(f"{status} objective={objective.value} n={n} max_rel_err={max_rel:.3e} "
          f"threshold={GRADCHECK_THRESHOLD:g}")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sigrot", description=__doc__)
    parser.add_argument("--version", action="version", version=f"sigrot {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a clustered synthetic pair dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--clusters", type=int, default=SynthConfig.n_clusters)
    p.add_argument("--pairs-per-cluster", type=int, default=SynthConfig.pairs_per_cluster)
    p.add_argument("--captions-per-image", type=int, default=SynthConfig.captions_per_image)
    p.add_argument("--d-model-img", type=int, default=SynthConfig.d_model_img)
    p.add_argument("--d-model-txt", type=int, default=SynthConfig.d_model_txt)
    p.add_argument("--d-graph", type=int, default=SynthConfig.d_graph)
    p.add_argument("--noise-sigma", type=float, default=SynthConfig.noise_sigma)
    p.add_argument("--seed", type=int, default=SynthConfig.seed)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train projection heads from a config file")
    p.add_argument("config")
    p.add_argument("data")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("checkpoint")
    p.add_argument("data")
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--out", default=None, help="write the CSV report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("solve-ot", help="run one transport solve on a cost matrix file")
    p.add_argument("cost")
    p.add_argument("--mode", default="unbalanced", choices=["balanced", "unbalanced"])
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--tau1", type=float, default=0.5)
    p.add_argument("--tau2", type=float, default=0.5)
    p.add_argument("--max-iters", type=int, default=2000)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_solve_ot)

    p = sub.add_parser("graph", help="emit the combined graph and target for a batch")
    p.add_argument("data")
    p.add_argument("--strategy", default="cross",
                   choices=[s.value for s in CombinationStrategy])
    p.add_argument("--n", type=int, default=8, help="use the first N records")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("gradcheck",
                       help="compare analytic gradients against finite differences")
    p.add_argument("data")
    p.add_argument("--objective", default="clip_sigrot",
                   choices=[o.value for o in Objective])
    p.add_argument("--n", type=int, default=5, help="batch size (<= 8)")
    p.add_argument("--lam", type=float, default=0.1)
    p.add_argument("--directions", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
