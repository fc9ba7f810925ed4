"""Training stages: experts, reference GNN, projector, student, baselines."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from . import __version__
from . import tensor as T
from .config import TrainConfig
from .graph import Graph, GraphView, ViewKind, make_view
from .losses import (
    BalancerError,
    BalancerState,
    ContrastiveConfig,
    FrozenTarget,
    adaptive_coefficients,
    bce,
    distill_loss,
    mse,
    nt_xent,
)
from .metrics import MetricsReport, RunMetrics, accuracy, aggregate, evaluate_multi_sensitive
from .models import (
    GCNExpert,
    GNNClassifier,
    Linear,
    MLPExpert,
    Module,
    Projector,
    SyntheticTeacher,
    forward_student,
    forward_teacher,
    save_checkpoint,
)

log = logging.getLogger(__name__)

STRATEGIES = ("full", "nodes-only", "topology-only")

# each model role draws its initial weights from its own stream, so that the
# student, the reference model and the full-data baseline start identically
_ROLE = {
    "classifier": 0,
    "expert_m": 1,
    "expert_g": 2,
    "head_m": 3,
    "head_g": 4,
    "projector": 5,
    "sim_projector": 6,
    "sim_student": 7,
}


def role_rng(seed: int, role: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), _ROLE[role]])


class TrainingError(RuntimeError):
    """A training stage produced a non-finite loss."""


@dataclass
class Views:
    full: GraphView
    nodes: GraphView
    topology: GraphView

    def by_strategy(self, strategy: str) -> GraphView:
        return {"full": self.full, "nodes-only": self.nodes, "topology-only": self.topology}[strategy]


def build_views(g: Graph, cfg: TrainConfig) -> Views:
    kw = dict(with_sensitive=cfg.with_sensitive, standardize=cfg.standardize)
    sens = cfg.sensitive_column
    return Views(
        full=make_view(g, ViewKind.FULL, sens, **kw),
        nodes=make_view(g, ViewKind.NODES_ONLY, sens, **kw),
        topology=make_view(g, ViewKind.TOPOLOGY_ONLY, sens, **kw),
    )


def _finite(value: float, stage: str, epoch: int) -> None:
    if not math.isfinite(value):
        raise TrainingError(f"{stage}: non-finite loss {value} at epoch {epoch}")


def _soft_loss(cfg: TrainConfig, target: T.Tensor, sim_head=None):
    """Return ``rep -> soft(rep, target)`` for a constant ``target``."""
    if cfg.soft_loss == "mse":
        return lambda rep: mse(rep, target)
    # a row of dead ReLUs through a zero bias is exactly zero; treat it as
    # orthogonal to everything rather than aborting the run
    if sim_head is None:
        return FrozenTarget(target, cfg.tau, allow_zero_rows=True).loss
    ccfg = ContrastiveConfig(tau=cfg.tau, sim_head=sim_head, allow_zero_rows=True)
    return lambda rep: nt_xent(rep, target, ccfg)


class _BestTracker:
    """Keeps the parameters of the epoch with the best validation accuracy."""

    def __init__(self, modules: Sequence[Module], g: Graph):
        self.modules = list(modules)
        self.val = g.splits.get("val", np.array([], dtype=np.int64))
        self.labels = g.labels
        self.best = -1.0
        self.best_epoch = -1
        self.state = None

    def update(self, epoch: int, probs: np.ndarray) -> float:
        if self.val.size == 0:
            return float("nan")
        acc = accuracy((probs[:, 0] > 0.5).astype(np.int64), self.labels, self.val)
        if acc > self.best:
            self.best, self.best_epoch = acc, epoch
            self.state = [m.state() for m in self.modules]
        return acc

    def restore(self) -> None:
        if self.state is not None:
            for m, s in zip(self.modules, self.state):
                m.load_state(s)


def _fit_supervised(
    stage: str,
    forward: Callable[[], T.Tensor],
    modules: Sequence[Module],
    g: Graph,
    cfg: TrainConfig,
) -> list[dict]:
    """BCE on the train split for ``cfg.epochs`` epochs, best-val checkpoint."""
    params = [p for m in modules for p in m.parameters()]
    opt = T.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    tracker = _BestTracker(modules, g)
    train = g.splits["train"]
    rows = []
    for epoch in range(cfg.epochs):
        with T.Tape():
            probs = T.sigmoid(forward())
            loss = bce(probs, g.labels, train)
        value = loss.item()
        _finite(value, stage, epoch)
        val_acc = tracker.update(epoch, probs.values)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        rows.append({"epoch": epoch, "loss": value, "val_acc": val_acc})
    tracker.restore()
    log.debug("%s: best val acc %.2f at epoch %d", stage, tracker.best, tracker.best_epoch)
    return rows


def train_classifier(view: GraphView, cfg: TrainConfig, seed: int, stage: str = "classifier"):
    """One convolution + linear head trained with BCE on ``view``."""
    model = GNNClassifier(cfg.backbone, view.attributes.shape[1], cfg.hidden, role_rng(seed, "classifier"))
    rows = _fit_supervised(stage, lambda: model(view)[1], [model], view.source, cfg)
    return model, rows


def train_experts(g: Graph, cfg: TrainConfig, seed: int, views: Views | None = None):
    """Attribute-only MLP expert and topology-only GCN expert, frozen on return."""
    views = views or build_views(g, cfg)
    f_tm = MLPExpert(views.nodes.attributes.shape[1], cfg.hidden, role_rng(seed, "expert_m"))
    head_m = Linear(cfg.hidden, 1, role_rng(seed, "head_m"))
    log_m = _fit_supervised("expert_m", lambda: head_m(T.relu(f_tm(views.nodes))), [f_tm, head_m], g, cfg)

    f_tg = GCNExpert(views.topology.attributes.shape[1], cfg.hidden, role_rng(seed, "expert_g"))
    head_g = Linear(cfg.hidden, 1, role_rng(seed, "head_g"))
    log_g = _fit_supervised("expert_g", lambda: head_g(T.relu(f_tg(views.topology))), [f_tg, head_g], g, cfg)
    return f_tm.freeze(), f_tg.freeze(), {"expert_m": log_m, "expert_g": log_g}


def train_reference(g: Graph, cfg: TrainConfig, seed: int, views: Views | None = None):
    """Student-architecture GNN trained on the full view, frozen on return."""
    views = views or build_views(g, cfg)
    model, rows = train_classifier(views.full, cfg, seed, stage="reference")
    return model.freeze(), rows


def _mean_row_cosine(a: np.ndarray, b: np.ndarray) -> float:
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    # zero rows count as orthogonal, matching the soft loss
    return float(np.mean(np.einsum("ij,ij->i", a, b) / np.where(den == 0, 1.0, den)))


def train_projector(
    f_tm: MLPExpert,
    f_tg: GCNExpert,
    f_cg: GNNClassifier,
    g: Graph,
    cfg: TrainConfig,
    seed: int,
    views: Views | None = None,
):
    """Fit the projector so ``proj(H_m || H_g)`` matches the reference representation."""
    views = views or build_views(g, cfg)
    if not (f_tm.frozen and f_tg.frozen and f_cg.frozen):
        raise RuntimeError("experts and reference model must be frozen")
    proj = Projector(f_tm.out_dim + f_tg.out_dim, cfg.hidden, cfg.hidden, role_rng(seed, "projector"))
    teacher = SyntheticTeacher(f_tm, f_tg, proj)
    h_cat = teacher.expert_representations(views.nodes, views.topology)
    with T.no_grad():
        h_cg = f_cg(views.full)[0]

    trainable: list[Module] = [proj]
    sim_head = None
    if cfg.sim_head and cfg.soft_loss == "ntxent":
        sim_head = Linear(cfg.hidden, cfg.hidden, role_rng(seed, "sim_projector"))
        trainable.append(sim_head)
    loss_fn = _soft_loss(cfg, h_cg, sim_head)
    opt = T.Adam([p for m in trainable for p in m.parameters()], lr=cfg.lr, weight_decay=cfg.weight_decay)

    rows = []
    for epoch in range(cfg.epochs):
        with T.Tape():
            h_p = proj(h_cat)
            loss = loss_fn(h_p)
        value = loss.item()
        _finite(value, "projector", epoch)
        rows.append({"epoch": epoch, "loss": value, "mean_cos": _mean_row_cosine(h_p.values, h_cg.values)})
        opt.zero_grad()
        T.backward(loss)
        opt.step()
    with T.no_grad():
        final = loss_fn(proj(h_cat)).item()
        rows.append({"epoch": cfg.epochs, "loss": final, "mean_cos": _mean_row_cosine(proj(h_cat).values, h_cg.values)})
    proj.freeze()
    return proj, rows


def _assert_blind(view: GraphView, cfg: TrainConfig) -> None:
    g = view.source
    col = view.sensitive_column
    if not cfg.with_sensitive and col in g.feature_names:
        if view.attributes.shape[1] != g.num_features - 1:
            raise AssertionError("student input still carries the sensitive column")


def distill_student(
    teacher_h: np.ndarray,
    g: Graph,
    cfg: TrainConfig,
    seed: int,
    views: Views | None = None,
):
    """Train the student on ``alpha * BCE + beta * soft(H_hat, H)``.

    ``teacher_h`` is computed once and held fixed. Returns the student (best
    validation epoch) and one log row per epoch.
    """
    views = views or build_views(g, cfg)
    _assert_blind(views.full, cfg)
    student = GNNClassifier(cfg.backbone, views.full.attributes.shape[1], cfg.hidden, role_rng(seed, "classifier"))
    target = T.Tensor(teacher_h)
    if target.shape != (g.num_nodes, cfg.hidden):
        raise T.ShapeError(f"teacher representation {target.shape} does not match student width")

    trainable: list[Module] = [student]
    sim_head = None
    if cfg.sim_head and cfg.soft_loss == "ntxent":
        sim_head = Linear(cfg.hidden, cfg.hidden, role_rng(seed, "sim_student"))
        trainable.append(sim_head)
    soft = _soft_loss(cfg, target, sim_head)
    opt = T.Adam([p for m in trainable for p in m.parameters()], lr=cfg.lr, weight_decay=cfg.weight_decay)
    tracker = _BestTracker([student], g)
    balancer = BalancerState(lr=cfg.balancer_lr, gamma=cfg.gamma)
    train = g.splits["train"]

    rows = []
    for epoch in range(cfg.epochs):
        with T.Tape():
            rep, logits = forward_student(student, views.full)
            probs = T.sigmoid(logits)
            lc = bce(probs, g.labels, train)
            lkd = soft(rep)
            lc_v, lkd_v = lc.item(), lkd.item()
            _finite(lc_v, "student/hard", epoch)
            _finite(lkd_v, "student/soft", epoch)
            if cfg.fixed_alpha is not None:
                alpha = float(cfg.fixed_alpha)
                beta = 1.0 - alpha
            elif epoch == 0:
                balancer.initialize(lc_v, lkd_v)
                alpha, beta = balancer.alpha_prev, 1.0 - balancer.alpha_prev
            else:
                alpha, beta = adaptive_coefficients(balancer, lc_v, lkd_v)
            if alpha + beta != 1.0 or not 0.0 <= alpha <= 1.0:
                raise BalancerError(f"epoch {epoch}: alpha={alpha!r} beta={beta!r}")
            loss = distill_loss(lc, lkd, alpha, beta)
        val_acc = tracker.update(epoch, probs.values)
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        rows.append({"epoch": epoch, "l_c": lc_v, "l_kd": lkd_v, "alpha": alpha, "beta": beta, "val_acc": val_acc})
    tracker.restore()
    return student, rows


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunArtifacts:
    seed: int
    strategy: str
    config_hash: str
    metrics: RunMetrics
    models: dict[str, Module] = field(default_factory=dict)
    logs: dict[str, list[dict]] = field(default_factory=dict)
    embeddings: dict[str, np.ndarray] = field(default_factory=dict)
    view_info: dict = field(default_factory=dict)

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        (directory / "checkpoints").mkdir(parents=True, exist_ok=True)
        for name, model in self.models.items():
            save_checkpoint(
                model,
                directory / "checkpoints" / name,
                seed=self.seed,
                config_hash=self.config_hash,
                strategy=self.strategy,
                version=__version__,
                view=self.view_info.get(name, {}),
            )
        for name, rows in self.logs.items():
            _atomic_write(directory / f"{name}_log.csv", _rows_to_csv(rows))
        if self.embeddings:
            (directory / "embeddings").mkdir(exist_ok=True)
            for name, arr in self.embeddings.items():
                T.save_snapshots(directory / "embeddings" / f"{name}.bin", [arr])
        _atomic_write(directory / "metrics.json", json.dumps(_run_doc(self.metrics), indent=2, sort_keys=True) + "\n")
        return directory


def _run_doc(m: RunMetrics) -> dict:
    return {"acc": m.acc, "f1": m.f1, "fairness": m.fairness, "seed": m.seed, "strategy": m.strategy, "config_hash": m.config_hash}


def _rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _view_info(view: GraphView) -> dict:
    return {
        "kind": view.kind.value,
        "sensitive_column": view.sensitive_column,
        "with_sensitive": view.with_sensitive,
        "standardize": view.standardize,
    }


def run_baseline(g: Graph, strategy: str, cfg: TrainConfig, seed: int) -> RunArtifacts:
    """Train the convolution + linear classifier on one data view and evaluate.

    ``full`` is the vanilla model.
    """
    if strategy == "vanilla":
        strategy = "full"
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    views = build_views(g, cfg)
    view = views.by_strategy(strategy)
    model, rows = train_classifier(view, cfg, seed, stage=strategy)
    meta = dict(seed=seed, strategy=strategy, config_hash=cfg.config_hash())
    metrics = evaluate_multi_sensitive(model, view, **meta)
    return RunArtifacts(
        seed=seed,
        strategy=strategy,
        config_hash=cfg.config_hash(),
        metrics=metrics,
        models={"classifier": model},
        logs={"train": rows},
        view_info={"classifier": _view_info(view)},
    )


def run_fairgkd(g: Graph, cfg: TrainConfig, seed: int) -> RunArtifacts:
    """Experts -> reference -> projector -> distilled student, then evaluate."""
    views = build_views(g, cfg)
    f_tm, f_tg, expert_logs = train_experts(g, cfg, seed, views)
    f_cg, ref_log = train_reference(g, cfg, seed, views)
    f_tp, proj_log = train_projector(f_tm, f_tg, f_cg, g, cfg, seed, views)
    teacher = SyntheticTeacher(f_tm, f_tg, f_tp)
    with T.no_grad():
        h = forward_teacher(teacher, views.nodes, views.topology).values
    f_s, student_log = distill_student(h, g, cfg, seed, views)
    with T.no_grad():
        h_hat = forward_student(f_s, views.full)[0].values
    meta = dict(seed=seed, strategy="fairgkd", config_hash=cfg.config_hash())
    metrics = evaluate_multi_sensitive(f_s, views.full, **meta)
    return RunArtifacts(
        seed=seed,
        strategy="fairgkd",
        config_hash=cfg.config_hash(),
        metrics=metrics,
        models={"f_tm": f_tm, "f_tg": f_tg, "f_cg": f_cg, "f_tp": f_tp, "f_s": f_s},
        logs={**expert_logs, "reference": ref_log, "projector": proj_log, "train": student_log},
        embeddings={"H": h, "H_hat": h_hat},
        view_info={
            "f_tm": _view_info(views.nodes),
            "f_tg": _view_info(views.topology),
            "f_cg": _view_info(views.full),
            "f_s": _view_info(views.full),
        },
    )


GraphSource = Union[Graph, Callable[[int], Graph]]


def _run_one(args) -> RunArtifacts:
    source, strategy, cfg, seed = args
    g = source(seed) if callable(source) else source
    if strategy == "fairgkd":
        return run_fairgkd(g, cfg, seed)
    return run_baseline(g, strategy, cfg, seed)


def run_experiment(
    cfg: TrainConfig,
    graph: GraphSource,
    strategy: str = "fairgkd",
    out_dir: str | Path | None = None,
    extra_meta: dict | None = None,
) -> tuple[MetricsReport, list[RunArtifacts]]:
    """Run ``strategy`` once per seed and aggregate.

    ``graph`` is either a fixed graph (seeds vary initialization only) or a
    callable building a graph per seed. Artifacts are written under
    ``out_dir`` when given.
    """
    jobs = [(graph, strategy, cfg, s) for s in cfg.seed_list]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    meta = {
        "strategy": "vanilla" if strategy == "full" else strategy,
        "config_hash": cfg.config_hash(),
        "version": __version__,
        "seeds": cfg.seed_list,
        **(extra_meta or {}),
    }
    report = aggregate([r.metrics for r in results], **meta)
    if out_dir is not None:
        write_run(out_dir, cfg, report, results, extra_meta)
    return report, results


def write_run(out_dir, cfg: TrainConfig, report: MetricsReport, results: list[RunArtifacts], extra_meta=None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = {"train": cfg.to_dict(), "config_hash": cfg.config_hash(), "version": __version__, **(extra_meta or {})}
    _atomic_write(out / "config.json", json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    for r in results:
        r.save(out / f"seed_{r.seed}")
    _atomic_write(out / "report.json", report.to_json())
    _atomic_write(out / "summary.csv", report.to_csv())
    return out
