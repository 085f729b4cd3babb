"""Dual-path graph layers refining impression nodes and prototype nodes.

Each layer updates every graph synchronously from the previous layer's
state.  Impression nodes aggregate their two cycle neighbors through
attention and receive a gated correction toward the prototype; support
prototypes aggregate gated feedback from their own nodes plus a weighted
alignment term against every other support prototype in the episode, while
query prototypes update in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import ClassGraph
from .numerics import (
    Tensor,
    concat,
    logistic,
    matmul,
    mul,
    narrow,
    relu,
    reshape,
    roll_rows,
    softmax,
    sub,
    tile_rows,
    tmean,
    tsum,
)

__all__ = [
    "PGNNConfig",
    "PGNNLayerParams",
    "pgnn_preset_dims",
    "init_pgnn",
    "layer_params",
    "pgnn_param_count",
    "attention_weights",
    "real_node_update",
    "prototype_update_support",
    "prototype_update_query",
    "forward_episode",
]

_PRESET_DIMS = {
    "paper": (512, 256, 128, 128),
    "tiny": (64, 32, 32, 32),
}


def pgnn_preset_dims(name: str) -> tuple[int, ...]:
    try:
        return _PRESET_DIMS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(_PRESET_DIMS)}")


@dataclass(frozen=True)
class PGNNConfig:
    """Layer widths, alignment strength, and the ablation switches.

    layer_dims lists the feature width entering layer 1 followed by each
    layer's output width; (512, 256, 128, 128) means three layers.
    """

    layer_dims: tuple[int, ...]
    align_strength: float = 1.0
    projection_head: bool = True
    no_prototype_node: bool = False
    no_cross_graph_alignment: bool = False
    query_alignment_enabled: bool = False

    def __post_init__(self):
        if len(self.layer_dims) < 2:
            raise ValueError("layer_dims needs an input width and >= 1 output width")
        if any(d < 1 for d in self.layer_dims):
            raise ValueError(f"non-positive layer width in {self.layer_dims}")
        if self.align_strength < 0:
            raise ValueError(f"align_strength must be >= 0, got {self.align_strength}")

    @property
    def num_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]


@dataclass
class PGNNLayerParams:
    """One layer's weights; matrices map row vectors from d_in to d_out.

    w_r / u_r / u_p drive the impression-node update, w_p / u_r2 / u_p2 the
    prototype update; w_alpha is the (d_in, d_in) attention projection and
    w_beta, w_gamma, w_w produce the scalar gates (w_w reads a concatenated
    prototype pair, hence 2*d_in rows).
    """

    w_r: Tensor
    u_r: Tensor
    u_p: Tensor
    w_p: Tensor
    u_r2: Tensor
    u_p2: Tensor
    w_alpha: Tensor
    w_beta: Tensor
    w_gamma: Tensor
    w_w: Tensor


_MESSAGE_INIT_SCALE = 0.1


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_pgnn(cfg: PGNNConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh parameters, named pgnn{l}.{map} plus proj.w when enabled.

    The state maps w_r and w_p start at the (truncated) identity plus small
    noise and the message maps start near zero, so an untrained stack behaves
    like mean aggregation over non-negative features and training only has to
    learn deviations from that baseline.
    """
    params: dict[str, Tensor] = {}
    for l in range(1, cfg.num_layers + 1):
        din, dout = cfg.layer_dims[l - 1], cfg.layer_dims[l]
        for name in ("wr", "ur", "up", "wp", "ur2", "up2"):
            weight = _MESSAGE_INIT_SCALE * _uniform(rng, (din, dout), din)
            if name in ("wr", "wp"):
                weight = weight + np.eye(din, dout)
            params[f"pgnn{l}.{name}"] = Tensor(weight, requires_grad=True)
        params[f"pgnn{l}.walpha"] = Tensor(
            _uniform(rng, (din, din), din), requires_grad=True)
        params[f"pgnn{l}.wbeta"] = Tensor(
            _uniform(rng, (din, 1), din), requires_grad=True)
        params[f"pgnn{l}.wgamma"] = Tensor(
            _uniform(rng, (din, 1), din), requires_grad=True)
        params[f"pgnn{l}.ww"] = Tensor(
            _uniform(rng, (2 * din, 1), 2 * din), requires_grad=True)
    if cfg.projection_head:
        d = cfg.out_dim
        params["proj.w"] = Tensor(_uniform(rng, (d, d), d), requires_grad=True)
    return params


def layer_params(params: dict[str, Tensor], layer: int) -> PGNNLayerParams:
    p = f"pgnn{layer}."
    return PGNNLayerParams(
        w_r=params[p + "wr"], u_r=params[p + "ur"], u_p=params[p + "up"],
        w_p=params[p + "wp"], u_r2=params[p + "ur2"], u_p2=params[p + "up2"],
        w_alpha=params[p + "walpha"], w_beta=params[p + "wbeta"],
        w_gamma=params[p + "wgamma"], w_w=params[p + "ww"])


def pgnn_param_count(cfg: PGNNConfig) -> int:
    n = 0
    for l in range(1, cfg.num_layers + 1):
        din, dout = cfg.layer_dims[l - 1], cfg.layer_dims[l]
        n += 6 * din * dout + din * din + 4 * din
    if cfg.projection_head:
        n += cfg.out_dim * cfg.out_dim
    return n


def attention_weights(h_i: Tensor, neighbors: list[Tensor], w_alpha: Tensor) -> Tensor:
    """Softmax similarity of one node against its neighbors.

    h_i and every neighbor are (1, d) rows; the result is a (len,) vector
    of weights summing to 1.
    """
    if not neighbors:
        raise ValueError("attention needs at least one neighbor")
    qi = matmul(h_i, w_alpha)
    logits = concat(
        [tsum(mul(qi, matmul(hj, w_alpha)), axis=1, keepdims=True) for hj in neighbors],
        axis=0)
    return reshape(softmax(logits, axis=0), (len(neighbors),))


def real_node_update(nodes: Tensor, proto: Tensor | None,
                     lp: PGNNLayerParams) -> Tensor:
    """Update all N impression nodes of one graph at once.

    Per node i: ReLU(W_r h_i + sum_j alpha_ij U_r h_j + beta_i U_p (p - h_i))
    with attention over the two cycle neighbors and beta_i a logistic gate
    of h_i.  A single node has no neighbor term; with two nodes each has
    exactly one neighbor (weight 1).  proto=None drops the gated prototype
    correction entirely.
    """
    n = nodes.data.shape[0]
    total = matmul(nodes, lp.w_r)
    if n >= 2:
        hu = matmul(nodes, lp.u_r)
        if n == 2:
            msg = roll_rows(hu, 1)
        else:
            qa = matmul(nodes, lp.w_alpha)
            lprev = tsum(mul(qa, roll_rows(qa, 1)), axis=1, keepdims=True)
            lnext = tsum(mul(qa, roll_rows(qa, -1)), axis=1, keepdims=True)
            alpha = softmax(concat([lprev, lnext], axis=1), axis=1)
            msg = mul(narrow(alpha, 1, 0, 1), roll_rows(hu, 1)) + \
                mul(narrow(alpha, 1, 1, 1), roll_rows(hu, -1))
        total = total + msg
    if proto is not None:
        beta = logistic(matmul(nodes, lp.w_beta))
        correction = mul(beta, matmul(sub(tile_rows(proto, n), nodes), lp.u_p))
        total = total + correction
    return relu(total)


def prototype_update_support(proto: Tensor, nodes: Tensor,
                             other_protos: list[Tensor], lp: PGNNLayerParams,
                             align_strength: float) -> Tensor:
    """Gated self/feedback update plus cross-graph alignment.

    ReLU(W_p p + gamma * U_r' sum_i (h_i - p)
         + align_strength * sum_{g'} w_{gg'} U_p' (p_{g'} - p))
    where gamma = logistic(W_gamma p) is shared by all nodes of the graph
    and w_{gg'} = logistic(W_w [p ; p_{g'}]).  The alignment term is skipped
    outright when align_strength is 0 or no other prototypes exist, which
    keeps that case bit-identical to the isolated update.
    """
    n = nodes.data.shape[0]
    gamma = logistic(matmul(proto, lp.w_gamma))
    residual = tsum(sub(nodes, tile_rows(proto, n)), axis=0, keepdims=True)
    total = matmul(proto, lp.w_p) + mul(gamma, matmul(residual, lp.u_r2))
    if other_protos and align_strength != 0.0:
        others = concat(other_protos, axis=0)
        g = others.data.shape[0]
        mine = tile_rows(proto, g)
        w = logistic(matmul(concat([mine, others], axis=1), lp.w_w))
        align = tsum(mul(w, matmul(sub(others, mine), lp.u_p2)),
                     axis=0, keepdims=True)
        total = total + mul(align, align_strength)
    return relu(total)


def prototype_update_query(proto: Tensor, nodes: Tensor,
                           lp: PGNNLayerParams) -> Tensor:
    """Isolated prototype update: the support rule with no cross-graph term."""
    return prototype_update_support(proto, nodes, [], lp, 0.0)


def forward_episode(support: list[ClassGraph], query: list[ClassGraph],
                    params: dict[str, Tensor],
                    cfg: PGNNConfig) -> tuple[list[Tensor], list[Tensor]]:
    """Run the layer stack over one episode's graphs.

    Returns the final (1, out_dim) prototype of every support and query
    graph, in input order, after the optional linear projection head.  All
    graphs advance synchronously: every layer-(l+1) quantity is computed
    from layer-l state only.
    """
    sup_state = [(g.node_feats, g.proto_feat) for g in support]
    qry_state = [(g.node_feats, g.proto_feat) for g in query]
    lam = 0.0 if cfg.no_cross_graph_alignment else cfg.align_strength
    for l in range(1, cfg.num_layers + 1):
        lp = layer_params(params, l)
        if cfg.no_prototype_node:
            new_sup = []
            for nodes, _ in sup_state:
                nn = real_node_update(nodes, None, lp)
                new_sup.append((nn, tmean(nn, axis=0, keepdims=True)))
            new_qry = []
            for nodes, _ in qry_state:
                nn = real_node_update(nodes, None, lp)
                new_qry.append((nn, tmean(nn, axis=0, keepdims=True)))
            sup_state, qry_state = new_sup, new_qry
            continue
        sup_protos = [p for _, p in sup_state]
        new_sup = []
        for gi, (nodes, proto) in enumerate(sup_state):
            others = sup_protos[:gi] + sup_protos[gi + 1:]
            nn = real_node_update(nodes, proto, lp)
            new_sup.append((nn, prototype_update_support(proto, nodes, others, lp, lam)))
        new_qry = []
        for nodes, proto in qry_state:
            nn = real_node_update(nodes, proto, lp)
            if cfg.query_alignment_enabled:
                np_ = prototype_update_support(proto, nodes, sup_protos, lp, lam)
            else:
                np_ = prototype_update_query(proto, nodes, lp)
            new_qry.append((nn, np_))
        sup_state, qry_state = new_sup, new_qry
    sup_out = [p for _, p in sup_state]
    qry_out = [p for _, p in qry_state]
    if cfg.projection_head:
        proj = params["proj.w"]
        sup_out = [matmul(p, proj) for p in sup_out]
        qry_out = [matmul(p, proj) for p in qry_out]
    return sup_out, qry_out
