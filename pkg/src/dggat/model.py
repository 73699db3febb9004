"""Attention (GATv2 with edge features) and GCN convolutions plus the full regressor.

Parameters live in a flat, ordered ``dict[str, Tensor]`` so checkpointing and
optimisation need no module hierarchy.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence, Union

import numpy as np

from . import numerics as nx
from .dggr import DGConfig, DGGraph
from .numerics import Tensor

Params = dict[str, Tensor]

CHECKPOINT_FORMAT = "dggat-checkpoint/1"


@dataclass(frozen=True)
class NetworkConfig:
    conv: str = "gatv2"  # "gatv2" | "gcn"
    embed: int = 64
    hidden: int = 64
    depth: int = 3
    heads: int = 4
    head_widths: tuple[int, ...] = (32,)
    leaky_slope: float = 0.2
    concat_heads: bool = True
    last_activation: str = "elu"  # "elu" | "identity"

    def __post_init__(self):
        object.__setattr__(self, "head_widths", tuple(int(w) for w in self.head_widths))
        problems = self.problems()
        if problems:
            raise ValueError("; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        if self.conv not in ("gatv2", "gcn"):
            out.append(f"conv must be 'gatv2' or 'gcn', got {self.conv!r}")
        for name in ("embed", "hidden", "depth", "heads"):
            if not (isinstance(getattr(self, name), int) and getattr(self, name) >= 1):
                out.append(f"{name} must be a positive integer")
        if any(w < 1 for w in self.head_widths):
            out.append("head_widths must be positive")
        if not 0 < self.leaky_slope < 1:
            out.append("leaky_slope must lie in (0, 1)")
        if self.last_activation not in ("elu", "identity"):
            out.append("last_activation must be 'elu' or 'identity'")
        if (
            self.conv == "gatv2" and self.concat_heads and self.depth > 1
            and isinstance(self.heads, int) and self.heads >= 1 and self.hidden % self.heads
        ):
            out.append(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_widths"] = list(self.head_widths)
        return d


@dataclass(frozen=True)
class GATv2Layer:
    """Shapes of one attention layer.

    The score projection acting on ``[x_dst || x_src || e]`` is held as three
    blocks ``W_dst``, ``W_src``, ``W_edge``; ``W_value`` transforms messages.
    """

    f_in: int
    f_out: int
    f_edge: int
    heads: int = 4
    concat_heads: bool = True
    leaky_slope: float = 0.2

    @property
    def width(self) -> int:
        return self.heads * self.f_out if self.concat_heads else self.f_out

    def shapes(self) -> dict[str, tuple[int, ...]]:
        hf = self.heads * self.f_out
        return {
            "W_dst": (self.f_in, hf),
            "W_src": (self.f_in, hf),
            "W_edge": (self.f_edge, hf),
            "a": (hf,),
            "W_value": (self.f_in, hf),
        }


@dataclass(frozen=True)
class GCNLayer:
    f_in: int
    f_out: int

    @property
    def width(self) -> int:
        return self.f_out

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {"W": (self.f_in, self.f_out)}


def conv_layers(cfg: NetworkConfig, edge_dim: int) -> list[Union[GATv2Layer, GCNLayer]]:
    layers = []
    f_in = cfg.embed
    for k in range(cfg.depth):
        last = k == cfg.depth - 1
        if cfg.conv == "gcn":
            layer = GCNLayer(f_in, cfg.hidden)
        else:
            concat = cfg.concat_heads and not last
            f_out = cfg.hidden // cfg.heads if concat else cfg.hidden
            layer = GATv2Layer(f_in, f_out, edge_dim, cfg.heads, concat, cfg.leaky_slope)
        layers.append(layer)
        f_in = layer.width
    return layers


def param_shapes(cfg: NetworkConfig, in_dim: int, edge_dim: int) -> dict[str, tuple[int, ...]]:
    shapes = {"embed.W": (in_dim, cfg.embed)}
    for k, layer in enumerate(conv_layers(cfg, edge_dim)):
        for name, shape in layer.shapes().items():
            shapes[f"conv{k}.{name}"] = shape
    width = cfg.hidden
    for k, w in enumerate(list(cfg.head_widths) + [1]):
        shapes[f"head{k}.W"] = (width, w)
        shapes[f"head{k}.b"] = (w,)
        width = w
    return shapes


def init_params(cfg: NetworkConfig, in_dim: int, edge_dim: int, seed: int) -> Params:
    """Glorot-uniform matrices and attention vectors, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg, in_dim, edge_dim).items():
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            fan_in, fan_out = (shape[0], shape[1]) if len(shape) == 2 else (shape[0], 1)
            if name.endswith(".a"):
                fan_in = fan_in // cfg.heads
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-limit, limit, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# batching


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Disjoint union of several graphs, ready for one forward pass."""

    x: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_attr: np.ndarray
    order: np.ndarray
    node_graph: np.ndarray
    n_graphs: int

    @property
    def n_nodes(self) -> int:
        return self.x.shape[0]

    def bond_graph(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Order-1 edges plus self-loops with symmetric GCN normalisation weights."""
        keep = self.order <= 1
        src, dst = self.src[keep], self.dst[keep]
        deg = np.bincount(dst, minlength=self.n_nodes).astype(np.float64)
        norm = 1.0 / np.sqrt(deg[src] * deg[dst])
        return src, dst, norm


def collate(graphs: Sequence[DGGraph]) -> GraphBatch:
    offsets = np.cumsum([0] + [g.n_nodes for g in graphs])
    return GraphBatch(
        x=np.concatenate([g.node_features for g in graphs], axis=0),
        src=np.concatenate([g.src + o for g, o in zip(graphs, offsets)]),
        dst=np.concatenate([g.dst + o for g, o in zip(graphs, offsets)]),
        edge_attr=np.concatenate([g.edge_features for g in graphs], axis=0),
        order=np.concatenate([g.order for g in graphs]),
        node_graph=np.repeat(np.arange(len(graphs)), [g.n_nodes for g in graphs]),
        n_graphs=len(graphs),
    )


# ---------------------------------------------------------------------------
# convolutions


def gatv2_scores(
    x: Tensor, src: np.ndarray, dst: np.ndarray, edge_attr: Tensor, layer: GATv2Layer,
    params: Params, prefix: str = "",
) -> Tensor:
    """Per-edge, per-head score ``a . LeakyReLU(W [x_dst || x_src || e])``, shape ``[E, H]``."""
    if x.shape[1] != layer.f_in or edge_attr.shape[1] != layer.f_edge:
        raise nx.ShapeError(
            f"layer expects node width {layer.f_in} and edge width {layer.f_edge}, "
            f"got {x.shape[1]} and {edge_attr.shape[1]}"
        )
    p = lambda name: params[prefix + name]  # noqa: E731
    h = nx.gather_sum([
        (nx.matmul(x, p("W_dst")), dst),
        (nx.matmul(x, p("W_src")), src),
        (nx.matmul(edge_attr, p("W_edge")), None),
    ])
    z = nx.leaky_relu(h, layer.leaky_slope)
    return nx.grouped_dot(z, p("a"), layer.heads)


def gatv2_forward(
    x: Tensor, src: np.ndarray, dst: np.ndarray, edge_attr: Tensor, layer: GATv2Layer,
    params: Params, prefix: str = "", activation=nx.elu, return_attention: bool = False,
):
    """One attention layer. Softmax runs over all edges entering a node, self-loop included."""
    n = x.shape[0]
    scores = gatv2_scores(x, src, dst, edge_attr, layer, params, prefix)
    alpha = nx.segment_softmax(scores, dst, n)
    values = nx.take_rows(nx.matmul(x, params[prefix + "W_value"]), src)
    out = nx.segment_weighted_sum(alpha, values, dst, n)
    if not layer.concat_heads and layer.heads > 1:
        out = nx.mean_heads(out, layer.heads)
    out = activation(out)
    return (out, alpha) if return_attention else out


def gcn_forward(
    x: Tensor, src: np.ndarray, dst: np.ndarray, norm: np.ndarray, params: Params,
    prefix: str = "", activation=nx.identity,
) -> Tensor:
    """Symmetric-normalised propagation ``D^-1/2 (A + I) D^-1/2 X W`` over the given edges."""
    h = nx.matmul(x, params[prefix + "W"])
    out = nx.segment_weighted_sum(Tensor(norm), nx.take_rows(h, src), dst, x.shape[0])
    return activation(out)


def forward_network(
    graphs: Union[DGGraph, Sequence[DGGraph], GraphBatch], cfg: NetworkConfig, params: Params
) -> Tensor:
    """Predict one scalar per graph: embed, convolve, mean-pool, MLP head."""
    if isinstance(graphs, DGGraph):
        graphs = [graphs]
    batch = graphs if isinstance(graphs, GraphBatch) else collate(graphs)
    edge_dim = batch.edge_attr.shape[1]
    layers = conv_layers(cfg, edge_dim)

    h = nx.matmul(Tensor(batch.x), params["embed.W"])
    if cfg.conv == "gcn":
        src, dst, norm = batch.bond_graph()
    else:
        src, dst = batch.src, batch.dst
        edge_attr = Tensor(batch.edge_attr)
    for k, layer in enumerate(layers):
        last = k == len(layers) - 1
        act = nx.identity if last and cfg.last_activation == "identity" else nx.elu
        if cfg.conv == "gcn":
            h = gcn_forward(h, src, dst, norm, params, f"conv{k}.", act)
        else:
            h = gatv2_forward(h, src, dst, edge_attr, layer, params, f"conv{k}.", act)

    h = nx.mean_rows(h, batch.node_graph, batch.n_graphs)
    n_head = len(cfg.head_widths) + 1
    for k in range(n_head):
        h = nx.add(nx.matmul(h, params[f"head{k}.W"]), params[f"head{k}.b"])
        if k < n_head - 1:
            h = nx.elu(h)
    return nx.reshape(h, (batch.n_graphs,))


def predict(graphs, cfg: NetworkConfig, params: Params, batch_size: int = 256) -> np.ndarray:
    """Forward pass without recording, in chunks."""
    graphs = list(graphs)
    out = []
    for k in range(0, len(graphs), batch_size):
        out.append(forward_network(graphs[k : k + batch_size], cfg, params).data)
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    network: NetworkConfig
    dg: DGConfig
    vocab: list[int]
    target: str
    scaler_mean: float
    scaler_std: float
    params: Params = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "network": self.network.to_dict(),
            "dg": self.dg.to_dict(),
            "vocab": list(self.vocab),
            "target": self.target,
            "scaler": {"mean": self.scaler_mean, "std": self.scaler_std},
            "params": {
                name: {"shape": list(t.shape), "data": t.data.tolist()}
                for name, t in self.params.items()
            },
        }
        return json.dumps(doc, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        doc = json.loads(text)
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a {CHECKPOINT_FORMAT} document")
        params = {
            name: Tensor(np.array(p["data"], dtype=np.float64).reshape(p["shape"]), requires_grad=True)
            for name, p in doc["params"].items()
        }
        return cls(
            network=NetworkConfig(**doc["network"]),
            dg=DGConfig(**doc["dg"]),
            vocab=[int(z) for z in doc["vocab"]],
            target=doc["target"],
            scaler_mean=float(doc["scaler"]["mean"]),
            scaler_std=float(doc["scaler"]["std"]),
            params=params,
        )


def copy_params(params: Params) -> Params:
    return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in params.items()}
