"""Geometric-vector-perceptron network for residue identity prediction.

Nodes carry ``n`` scalar channels and ``nu`` 3-vector channels; edges carry
``m`` radial-basis scalars and ``eta`` unit displacement vectors.  Scalars
only ever see rotation-invariant quantities (vector norms), and vectors are
only ever mixed linearly across channels and scaled by scalar gates, so the
scalar outputs are invariant and the vector channels equivariant under any
rigid motion of the input coordinates.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..structio import MaskedGraph

ELEMENT_CLASSES = ("C", "N", "O", "S")
# one-hot element (4 + "other"), backbone flag, target flag
NODE_INPUT_DIM = len(ELEMENT_CLASSES) + 3
NUM_CLASSES = 20
_EPS = 1e-8


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    node_scalar_dim: int = 100
    node_vector_dim: int = 16
    edge_scalar_dim: int = 32
    edge_vector_dim: int = 1
    hidden_out_dim: int = 100
    num_layers: int = 5
    rbf_max: float = 4.5
    aggregation: str = "mean"

    def __post_init__(self):
        dims = (self.node_scalar_dim, self.node_vector_dim, self.edge_scalar_dim,
                self.edge_vector_dim, self.hidden_out_dim, self.num_layers)
        if min(dims) <= 0:
            raise ConfigurationError(f"all feature dimensions must be positive: {self}")
        if self.aggregation not in ("mean", "sum"):
            raise ConfigurationError(f"unknown aggregation {self.aggregation!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# featurization


class GraphFeatures(NamedTuple):
    node_s: torch.Tensor      # (N, NODE_INPUT_DIM)
    node_v: torch.Tensor      # (N, nu, 3)
    edge_index: torch.Tensor  # (2, E) rows: source, destination
    edge_s: torch.Tensor      # (E, m)
    edge_v: torch.Tensor      # (E, eta, 3)
    target: int


def rbf(distance: np.ndarray, count: int, d_max: float) -> np.ndarray:
    """Gaussian bases with ``count`` centres evenly spaced on ``[0, d_max]``."""
    centers = np.linspace(0.0, d_max, count)
    width = d_max / count
    return np.exp(-(((np.asarray(distance)[..., None] - centers) / width) ** 2))


def featurize(
    masked: MaskedGraph, spec: FeatureSpec, dtype: torch.dtype = torch.float64
) -> GraphFeatures:
    graph = masked.graph
    n = len(graph.atoms)
    if n == 0:
        raise ConfigurationError("masked graph is empty")
    if not 0 <= masked.target_node < n:
        raise ConfigurationError(f"target node {masked.target_node} outside graph of {n} atoms")

    node_s = np.zeros((n, NODE_INPUT_DIM))
    for i, atom in enumerate(graph.atoms):
        try:
            node_s[i, ELEMENT_CLASSES.index(atom.element)] = 1.0
        except ValueError:
            node_s[i, len(ELEMENT_CLASSES)] = 1.0
        node_s[i, -2] = float(atom.is_backbone)
    node_s[masked.target_node, -1] = 1.0

    src, dst = graph.src, graph.dst
    disp = graph.coords[src] - graph.coords[dst]
    unit = np.divide(disp, graph.dist[:, None], out=np.zeros_like(disp),
                     where=graph.dist[:, None] > 0)
    edge_v = np.repeat(unit[:, None, :], spec.edge_vector_dim, axis=1)

    as_t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)
    return GraphFeatures(
        node_s=as_t(node_s),
        node_v=torch.zeros((n, spec.node_vector_dim, 3), dtype=dtype),
        edge_index=torch.as_tensor(np.stack([src, dst]), dtype=torch.long),
        edge_s=as_t(rbf(graph.dist, spec.edge_scalar_dim, spec.rbf_max)),
        edge_v=as_t(edge_v),
        target=masked.target_node,
    )


def receptive_field(masked: MaskedGraph, hops: int) -> MaskedGraph:
    """Restrict ``masked`` to nodes within ``hops`` edges of the target.

    Nothing outside this set can reach the target's features in ``hops``
    rounds of message passing, so the readout is unchanged.
    """
    graph = masked.graph
    reach = np.zeros(len(graph.atoms), dtype=bool)
    reach[masked.target_node] = True
    for _ in range(hops):
        grown = reach.copy()
        grown[graph.dst[reach[graph.src]]] = True
        if (grown == reach).all():
            break
        reach = grown
    if reach.all():
        return masked
    sub = graph.subgraph(reach)
    target = int(reach[: masked.target_node].sum())
    return MaskedGraph(sub, target, masked.true_label, masked.position, masked.meta)


def collate(features: Sequence[GraphFeatures]) -> tuple[GraphFeatures, torch.Tensor]:
    """Disjoint union of several graphs; returns the batch and its target indices."""
    offsets = np.cumsum([0] + [len(f.node_s) for f in features[:-1]])
    targets = torch.as_tensor([o + f.target for o, f in zip(offsets, features)], dtype=torch.long)
    batch = GraphFeatures(
        node_s=torch.cat([f.node_s for f in features]),
        node_v=torch.cat([f.node_v for f in features]),
        edge_index=torch.cat([f.edge_index + int(o) for o, f in zip(offsets, features)], dim=1),
        edge_s=torch.cat([f.edge_s for f in features]),
        edge_v=torch.cat([f.edge_v for f in features]),
        target=-1,
    )
    return batch, targets


# ---------------------------------------------------------------------------
# layers


def _norm(v: torch.Tensor) -> torch.Tensor:
    # smooth at zero so finite differences stay well-behaved
    return torch.sqrt((v * v).sum(dim=-1) + _EPS)


class GVP(nn.Module):
    """One geometric vector perceptron with vector gating.

    ``s``: (..., si) scalars, ``v``: (..., vi, 3) vectors.
    """

    def __init__(self, in_dims: tuple[int, int], out_dims: tuple[int, int], activate: bool = True):
        super().__init__()
        (self.si, self.vi), (self.so, self.vo) = in_dims, out_dims
        self.activate = activate
        self.h = max(self.vi, self.vo)
        self.wh = nn.Linear(self.vi, self.h, bias=False)
        self.ws = nn.Linear(self.si + self.h, self.so)
        if self.vo:
            self.wv = nn.Linear(self.h, self.vo, bias=False)
            self.wg = nn.Linear(self.so, self.vo)

    def forward(self, s, v):
        vh = self.wh(v.transpose(-1, -2))            # (..., 3, h)
        s = self.ws(torch.cat([s, _norm(vh.transpose(-1, -2))], dim=-1))
        if self.vo:
            gate_in = F.silu(s) if self.activate else s
            v = self.wv(vh).transpose(-1, -2)        # (..., vo, 3)
            v = v * torch.sigmoid(self.wg(gate_in)).unsqueeze(-1)
        else:
            v = None
        if self.activate:
            s = F.silu(s)
        return s, v


class GVPLayerNorm(nn.Module):
    def __init__(self, dims: tuple[int, int]):
        super().__init__()
        self.scalar = nn.LayerNorm(dims[0])

    def forward(self, s, v):
        vn = torch.sqrt((v * v).sum(dim=-1).mean(dim=-1, keepdim=True) + _EPS)
        return self.scalar(s), v / vn.unsqueeze(-1)


def _dropout(s, v, p: float, training: bool):
    if not training or p == 0.0:
        return s, v
    s = F.dropout(s, p, training=True)
    keep = torch.bernoulli(torch.full(v.shape[:-1] + (1,), 1.0 - p, dtype=v.dtype))
    return s, v * keep / (1.0 - p)


class GVPConvLayer(nn.Module):
    """Message passing over edges followed by a node-wise feed-forward block."""

    def __init__(self, spec: FeatureSpec):
        super().__init__()
        n, nu = spec.node_scalar_dim, spec.node_vector_dim
        m, eta = spec.edge_scalar_dim, spec.edge_vector_dim
        self.aggregation = spec.aggregation
        self.message = nn.ModuleList([
            GVP((2 * n + m, 2 * nu + eta), (n, nu)),
            GVP((n, nu), (n, nu)),
            GVP((n, nu), (n, nu), activate=False),
        ])
        self.feedforward = nn.ModuleList([
            GVP((n, nu), (4 * n, 2 * nu)),
            GVP((4 * n, 2 * nu), (n, nu), activate=False),
        ])
        self.norm = nn.ModuleList([GVPLayerNorm((n, nu)), GVPLayerNorm((n, nu))])
        self.dropout = 0.0

    def forward(self, s, v, edge_index, edge_s, edge_v):
        src, dst = edge_index
        ms = torch.cat([s[src], edge_s, s[dst]], dim=-1)
        mv = torch.cat([v[src], edge_v, v[dst]], dim=-2)
        for gvp in self.message:
            ms, mv = gvp(ms, mv)
        agg_s = torch.zeros_like(s).index_add_(0, dst, ms)
        agg_v = torch.zeros_like(v).index_add_(0, dst, mv)
        if self.aggregation == "mean":
            count = torch.zeros(len(s), dtype=s.dtype).index_add_(
                0, dst, torch.ones(len(dst), dtype=s.dtype)).clamp(min=1.0)
            agg_s = agg_s / count[:, None]
            agg_v = agg_v / count[:, None, None]
        ds, dv = _dropout(agg_s, agg_v, self.dropout, self.training)
        s, v = self.norm[0](s + ds, v + dv)

        fs, fv = s, v
        for gvp in self.feedforward:
            fs, fv = gvp(fs, fv)
        fs, fv = _dropout(fs, fv, self.dropout, self.training)
        return self.norm[1](s + fs, v + fv)


class GVPScorer(nn.Module):
    """Masked graph -> 20 amino-acid logits read off the target node."""

    def __init__(self, spec: FeatureSpec = FeatureSpec()):
        super().__init__()
        self.spec = spec
        n, nu, o = spec.node_scalar_dim, spec.node_vector_dim, spec.hidden_out_dim
        self.embed = nn.Linear(NODE_INPUT_DIM, n)
        self.layers = nn.ModuleList([GVPConvLayer(spec) for _ in range(spec.num_layers)])
        self.readout = GVP((n, nu), (o, 0))
        self.head_hidden = nn.Linear(o, o)
        self.head_out = nn.Linear(o, NUM_CLASSES)
        self.dropout = 0.0

    def set_dropout(self, p: float):
        self.dropout = p
        for layer in self.layers:
            layer.dropout = p

    def forward(self, feats: GraphFeatures, targets: torch.Tensor, return_intermediates: bool = False):
        s = self.embed(feats.node_s)
        v = feats.node_v
        trace = [(s, v)]
        for layer in self.layers:
            s, v = layer(s, v, feats.edge_index, feats.edge_s, feats.edge_v)
            trace.append((s, v))
        h, _ = self.readout(s[targets], v[targets])
        h = F.silu(self.head_hidden(h))
        h = F.dropout(h, self.dropout, training=self.training and self.dropout > 0)
        logits = self.head_out(h)
        if return_intermediates:
            return logits, trace
        return logits


def build_scorer(spec: FeatureSpec = FeatureSpec(), seed: int = 0) -> GVPScorer:
    """Fresh scorer with seeded fan-in-scaled uniform initialization (float64)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = GVPScorer(spec)
    return model.to(torch.float64)


def model_dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def prepare(masked: MaskedGraph, spec: FeatureSpec, dtype=torch.float64) -> GraphFeatures:
    """Prune to the receptive field, then featurize."""
    return featurize(receptive_field(masked, spec.num_layers), spec, dtype)


def forward(model: GVPScorer, masked: MaskedGraph) -> np.ndarray:
    """Deterministic logits (dropout off) for one masked graph."""
    return forward_many(model, [masked])[0]


def forward_many(model: GVPScorer, graphs: Sequence[MaskedGraph], batch_size: int = 64) -> np.ndarray:
    if not isinstance(model, GVPScorer):
        raise ConfigurationError(f"expected a GVPScorer, got {type(model).__name__}")
    dtype = model_dtype(model)
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            for start in range(0, len(graphs), batch_size):
                chunk = [prepare(g, model.spec, dtype) for g in graphs[start : start + batch_size]]
                batch, targets = collate(chunk)
                out.append(model(batch, targets).to(torch.float64).numpy())
    finally:
        model.train(was_training)
    if not out:
        return np.zeros((0, NUM_CLASSES))
    return np.concatenate(out)


def predicted_label(scores: np.ndarray) -> int:
    """Argmax with ties going to the lowest amino-acid index."""
    return int(np.argmax(scores))


def softmax(scores: np.ndarray) -> np.ndarray:
    z = np.asarray(scores, dtype=np.float64)
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)
