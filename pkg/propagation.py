from __future__ import annotations

import torch

import diff
from config import PropConfig
from dataset import Graph, normalize
from edl import DirichletOpinion


def vacuity_prop(alpha0: torch.Tensor, graph: Graph, *, gamma1: float = 0.5, k: int = 2) -> torch.Tensor:
    """
    Propaga la forza alpha_0 per nodo: s^k = gamma1 s^{k-1} + (1 - gamma1) D^{-1} A s^{k-1}.

    Un nodo isolato non ha vicini e conserva la propria forza.
    """
    _check_gamma("gamma1", gamma1)
    rw = normalize(graph, "rw_noselfloop").matrix
    isolated = graph.degrees() == 0
    s = alpha0
    for _ in range(int(k)):
        neigh = diff.sparse_dense_matmul(rw, s)
        neigh = torch.where(isolated, s, neigh)
        s = float(gamma1) * s + (1.0 - float(gamma1)) * neigh
    return s


def evidence_prop(alpha: torch.Tensor, graph: Graph, *, gamma2: float = 0.1, k: int = 10) -> torch.Tensor:
    """Iterazione stile APPNP: alpha^k = (1 - gamma2) Â alpha^{k-1} + gamma2 alpha^0, Â = D̂^{-1/2}(A+I)D̂^{-1/2}."""
    _check_gamma("gamma2", gamma2)
    norm = normalize(graph, "sym_selfloop").matrix
    a = alpha
    for _ in range(int(k)):
        a = (1.0 - float(gamma2)) * diff.sparse_dense_matmul(norm, a) + float(gamma2) * alpha
    return a


def rescale_strength(op: DirichletOpinion, strength: torch.Tensor) -> DirichletOpinion:
    # p̄ invariato, nuova forza per nodo
    return DirichletOpinion(alpha=op.expected_probs * strength.unsqueeze(1))


def propagate(op: DirichletOpinion, graph: Graph, cfg: PropConfig | None = None) -> DirichletOpinion:
    cfg = cfg or PropConfig()
    if cfg.mode == "none":
        return op
    if op.alpha.shape[0] != graph.num_nodes:
        raise ValueError(f"Opinione con {op.alpha.shape[0]} nodi su un grafo di {graph.num_nodes}")

    out = op
    if cfg.mode in ("evidence", "both"):
        out = DirichletOpinion(alpha=evidence_prop(out.alpha, graph, gamma2=cfg.gamma2, k=cfg.k2))
    if cfg.mode in ("vacuity", "both"):
        out = rescale_strength(out, vacuity_prop(out.strength, graph, gamma1=cfg.gamma1, k=cfg.k1))
    return out


def _check_gamma(name: str, value: float) -> None:
    if not (0.0 <= float(value) <= 1.0):
        raise ValueError(f"{name} deve essere in [0, 1]")
