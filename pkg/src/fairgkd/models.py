"""Layers and the model roles used by the distillation pipeline.

Roles:

* ``MLPExpert`` (attributes-only expert): 2-layer MLP, output = hidden repr.
* ``GCNExpert`` (topology-only expert): one GCN convolution.
* ``Projector``: 3-layer MLP fusing the concatenated expert representations.
* ``GNNClassifier``: one GCN/GIN convolution + linear head. Used for the
  student, the full-data reference model and the partial-data baselines.

Representations handed to contrastive losses are pre-activation; a ReLU
sits between every pair of stacked layers, including before a head.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .graph import GraphView, ViewKind
from .tensor import Tensor


class Module:
    """Ordered container of parameter tensors and sub-modules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "frozen", False)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        for m in self._modules():
            object.__setattr__(m, "frozen", True)
        return self

    def _modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child._modules()

    def state(self) -> list[np.ndarray]:
        return [p.values.copy() for p in self.parameters()]

    def load_state(self, arrays) -> None:
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if p.shape != a.shape:
                raise ValueError(f"shape mismatch {p.shape} vs {a.shape}")
            p.values = np.array(a, dtype=np.float64)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.values).tobytes())
        return h.hexdigest()

    def spec(self) -> dict:
        raise NotImplementedError


def _param(values: np.ndarray) -> Tensor:
    return Tensor(values, requires_grad=True)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = _param(T.glorot_uniform(rng, in_dim, out_dim))
        self.bias = _param(np.zeros((1, out_dim)))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)

    def spec(self) -> dict:
        return {"kind": "linear", "in": self.in_dim, "out": self.out_dim}


class MLP(Module):
    """Linear layers with ReLU in between and none after the last."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        super().__init__()
        if len(dims) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.dims = list(dims)
        self.layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            layer = Linear(a, b, rng)
            setattr(self, f"l{i}", layer)
            self.layers.append(layer)

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            if i:
                x = T.relu(x)
            x = layer(x)
        return x

    def spec(self) -> dict:
        return {"kind": "mlp", "dims": self.dims, "activation": "relu"}


def gcn_layer(
    a_hat: sp.spmatrix,
    h: Tensor,
    w: Tensor,
    b: Tensor,
    activation: Callable[[Tensor], Tensor] | None = None,
) -> Tensor:
    """``activation(A_hat @ H @ W + b)``; no activation when ``None``."""
    if a_hat.shape != (h.rows, h.rows):
        raise T.ShapeError(f"adjacency {a_hat.shape} does not match {h.rows} rows")
    if h.cols != w.rows:
        raise T.ShapeError(f"features {h.shape} vs weights {w.shape}")
    out = T.add(T.spmm(a_hat, T.matmul(h, w)), b)
    return activation(out) if activation is not None else out


def gin_layer(
    adj: sp.spmatrix,
    h: Tensor,
    mlp: Callable[[Tensor], Tensor],
    eps: float = 0.0,
) -> Tensor:
    """``mlp((1 + eps) * H + A @ H)`` with the raw adjacency."""
    if adj.shape != (h.rows, h.rows):
        raise T.ShapeError(f"adjacency {adj.shape} does not match {h.rows} rows")
    agg = T.add(T.scale(h, 1.0 + eps), T.spmm(adj, h)) if eps else T.add(h, T.spmm(adj, h))
    return mlp(agg)


class GCNConv(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = _param(T.glorot_uniform(rng, in_dim, out_dim))
        self.bias = _param(np.zeros((1, out_dim)))

    def __call__(self, view: GraphView, x: Tensor) -> Tensor:
        return gcn_layer(view.normalized_adjacency, x, self.weight, self.bias)

    def spec(self) -> dict:
        return {"kind": "gcn", "in": self.in_dim, "out": self.out_dim}


class GINConv(Module):
    """GIN convolution with fixed ``eps = 0`` and a 2-layer inner MLP."""

    eps = 0.0

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        self.mlp = MLP([in_dim, out_dim, out_dim], rng)

    def __call__(self, view: GraphView, x: Tensor) -> Tensor:
        return gin_layer(view.gin_adjacency, x, self.mlp, self.eps)

    def spec(self) -> dict:
        return {"kind": "gin", "in": self.in_dim, "out": self.out_dim, "eps": self.eps, "mlp": self.mlp.spec()}


def _input(view: GraphView) -> Tensor:
    return Tensor._wrap(view.attributes)


class GNNClassifier(Module):
    """One graph convolution (the backbone) followed by a linear classifier."""

    def __init__(self, backbone: str, in_dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        backbone = backbone.lower()
        if backbone == "gcn":
            self.conv = GCNConv(in_dim, hidden, rng)
        elif backbone == "gin":
            self.conv = GINConv(in_dim, hidden, rng)
        else:
            raise ValueError(f"unknown backbone {backbone!r}")
        self.backbone = backbone
        self.head = Linear(hidden, 1, rng)

    def __call__(self, view: GraphView) -> tuple[Tensor, Tensor]:
        x = _input(view)
        if x.cols != self.conv.in_dim:
            raise T.ShapeError(f"view has {x.cols} features, model expects {self.conv.in_dim}")
        rep = self.conv(view, x)
        return rep, self.head(T.relu(rep))

    def spec(self) -> dict:
        return {"kind": "gnn_classifier", "backbone": self.conv.spec(), "head": self.head.spec()}


def forward_student(model: GNNClassifier, view: GraphView) -> tuple[Tensor, Tensor]:
    """Backbone representation and logits of the student on the full view."""
    if view.kind is not ViewKind.FULL:
        raise ValueError(f"student expects a full view, got {view.kind.value}")
    return model(view)


class MLPExpert(Module):
    """Attributes-only expert; the representation is the last hidden layer."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.body = MLP([in_dim, hidden, hidden], rng)

    @property
    def out_dim(self) -> int:
        return self.body.dims[-1]

    def __call__(self, view: GraphView) -> Tensor:
        return forward_expert_m(self, view)

    def spec(self) -> dict:
        return {"kind": "mlp_expert", "body": self.body.spec()}


class GCNExpert(Module):
    """Topology-only expert: a single GCN convolution over all-one features."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.conv = GCNConv(in_dim, hidden, rng)

    @property
    def out_dim(self) -> int:
        return self.conv.out_dim

    def __call__(self, view: GraphView) -> Tensor:
        return forward_expert_g(self, view)

    def spec(self) -> dict:
        return {"kind": "gcn_expert", "conv": self.conv.spec()}


def forward_expert_m(expert: MLPExpert, view: GraphView) -> Tensor:
    if view.kind is not ViewKind.NODES_ONLY:
        raise ValueError(f"attribute expert needs a nodes-only view, got {view.kind.value}")
    return expert.body(_input(view))


def forward_expert_g(expert: GCNExpert, view: GraphView) -> Tensor:
    if view.kind is not ViewKind.TOPOLOGY_ONLY:
        raise ValueError(f"topology expert needs a topology-only view, got {view.kind.value}")
    return expert.conv(view, _input(view))


class Projector(Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.body = MLP([in_dim, hidden, hidden, out_dim], rng)

    @property
    def in_dim(self) -> int:
        return self.body.dims[0]

    def __call__(self, h: Tensor) -> Tensor:
        return self.body(h)

    def spec(self) -> dict:
        return {"kind": "projector", "body": self.body.spec()}


class SyntheticTeacher:
    """Frozen experts plus projector: ``H = proj(H_m || H_g)``."""

    def __init__(self, expert_m: MLPExpert, expert_g: GCNExpert, projector: Projector):
        if projector.in_dim != expert_m.out_dim + expert_g.out_dim:
            raise T.ShapeError("projector input width != sum of expert widths")
        self.expert_m = expert_m
        self.expert_g = expert_g
        self.projector = projector

    def expert_representations(self, nodes_view: GraphView, topo_view: GraphView) -> Tensor:
        if not (self.expert_m.frozen and self.expert_g.frozen):
            raise RuntimeError("experts must be trained and frozen first")
        with T.no_grad():
            h_m = forward_expert_m(self.expert_m, nodes_view)
            h_g = forward_expert_g(self.expert_g, topo_view)
            return T.concat_cols([h_m, h_g])

    def __call__(self, nodes_view: GraphView, topo_view: GraphView) -> Tensor:
        return forward_teacher(self, nodes_view, topo_view)


def forward_teacher(teacher: SyntheticTeacher, nodes_view: GraphView, topo_view: GraphView) -> Tensor:
    return teacher.projector(teacher.expert_representations(nodes_view, topo_view))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Module, path: str | Path, **manifest) -> None:
    """Write ``<path>.bin`` (tensor snapshots) and ``<path>.json`` (manifest)."""
    path = Path(path)
    T.save_snapshots(path.with_suffix(".bin"), model.state())
    doc = {
        "spec": model.spec(),
        "parameters": [[name, list(p.shape)] for name, p in model.named_parameters()],
        "checksum": model.checksum(),
        **manifest,
    }
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    tmp.replace(path.with_suffix(".json"))


def classifier_from_spec(spec: dict) -> GNNClassifier:
    """Empty-shell classifier with the architecture described by ``spec``;
    parameters are placeholders until :func:`load_checkpoint` fills them."""
    if spec.get("kind") != "gnn_classifier":
        raise ValueError(f"not a classifier spec: {spec.get('kind')!r}")
    conv = spec["backbone"]
    return GNNClassifier(conv["kind"], conv["in"], conv["out"], np.random.default_rng(0))


def load_checkpoint(model: Module, path: str | Path) -> dict:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    model.load_state(T.load_snapshots(path.with_suffix(".bin")))
    if model.checksum() != manifest["checksum"]:
        raise ValueError(f"{path}: checksum mismatch after load")
    return manifest
