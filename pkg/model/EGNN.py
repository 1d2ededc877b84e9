from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import torch
import torch.nn as nn

import diff
from config import EgnnConfig
from dataset import Graph, SplitSpec, normalize
from diff import DTYPE, CheckpointMismatchError, FitResult
from edl import DirichletOpinion, expected_ce, kl_to_uniform
from model.GCN import GCN

EvidenceActivation = Literal["exp", "softplus"]

# exp(60) ~ 1e26: oltre questa soglia l'evidenza non cambia più le metriche
_EXP_CLAMP = 60.0


@dataclass(frozen=True)
class EgnnOutput:
    hidden: torch.Tensor
    logits: torch.Tensor
    evidence: torch.Tensor

    @property
    def alpha(self) -> torch.Tensor:
        return self.evidence + 1.0

    def opinion(self) -> DirichletOpinion:
        return DirichletOpinion(alpha=self.alpha.detach())


class EGNN(nn.Module):
    """Stesso GCN del backbone, ma con exp/softplus al posto della softmax: un'evidenza per classe."""

    def __init__(
        self,
        input_dim: int,
        num_classes: int,
        *,
        hidden_dim: int = 64,
        dropout: float = 0.5,
        activation: EvidenceActivation = "exp",
        zero_init_head: bool = False,
        seed: int | None = 0,
    ):
        super().__init__()
        if activation not in ("exp", "softplus"):
            raise ValueError(f"activation non supportata: {activation!r} (attesi exp | softplus)")
        self.activation = activation
        self.gcn = GCN(input_dim, num_classes, hidden_dim=hidden_dim, dropout=dropout, seed=seed)
        if zero_init_head:
            with torch.no_grad():
                self.gcn.w2.zero_()
                self.gcn.b2.zero_()

    @property
    def num_classes(self) -> int:
        return self.gcn.num_classes

    def forward(self, x: torch.Tensor, adj: torch.Tensor, *, generator: torch.Generator | None = None) -> EgnnOutput:
        out = self.gcn(x, adj, generator=generator)
        if self.activation == "exp":
            evidence = diff.exp(out.logits.clamp(max=_EXP_CLAMP))
        else:
            evidence = diff.softplus(out.logits)
        return EgnnOutput(hidden=out.hidden, logits=out.logits, evidence=evidence)

    def meta(self) -> dict:
        return {**self.gcn.meta(), "kind": "egnn", "activation": self.activation}

    @classmethod
    def load(cls, path: str | Path, graph: Graph | None = None) -> "EGNN":
        meta, state = diff.load_params(path)
        if meta.get("kind") != "egnn":
            raise CheckpointMismatchError(f"{path}: checkpoint di tipo {meta.get('kind')!r}, atteso 'egnn'")
        if graph is not None and (int(meta["input_dim"]) != graph.num_features or int(meta["num_classes"]) != graph.num_classes):
            raise CheckpointMismatchError(f"{path}: dimensioni del checkpoint incompatibili con il dataset")
        model = cls(
            int(meta["input_dim"]),
            int(meta["num_classes"]),
            hidden_dim=int(meta["hidden_dim"]),
            dropout=float(meta["dropout"]),
            activation=meta["activation"],
        )
        model.load_state_dict(state)
        model.eval()
        return model


def egnn_loss(alpha: torch.Tensor, labels: torch.Tensor, idx: torch.Tensor, kl_weight: float = 1.0) -> torch.Tensor:
    a = alpha[idx]
    return (expected_ce(a, labels[idx]) + float(kl_weight) * kl_to_uniform(a)).mean()


def train_egnn(graph: Graph, split: SplitSpec, config: EgnnConfig | None = None, *, seed: int = 0) -> FitResult:
    config = config or EgnnConfig()
    if split.train_idx.numel() == 0:
        raise ValueError("Train set vuoto: impossibile addestrare l'EGNN.")
    if split.val_idx.numel() == 0:
        raise ValueError("Validation set vuoto: serve per l'early stopping.")

    model = EGNN(
        graph.num_features,
        graph.num_classes,
        hidden_dim=config.hidden_dim,
        dropout=config.dropout,
        activation=config.activation,
        zero_init_head=config.zero_init_head,
        seed=seed,
    )
    adj = normalize(graph, "sym_selfloop").matrix
    gen = diff.make_generator(seed + 1)

    def train_loss() -> torch.Tensor:
        return egnn_loss(model(graph.features, adj, generator=gen).alpha, graph.labels, split.train_idx, config.kl_weight)

    last: dict[str, torch.Tensor] = {}

    def val_loss() -> float:
        alpha = model(graph.features, adj).alpha
        last["alpha"] = alpha
        return float(egnn_loss(alpha, graph.labels, split.val_idx, config.kl_weight))

    def stats() -> dict[str, float]:
        alpha = last["alpha"]
        return {"mean_u_epi": float((graph.num_classes / alpha.sum(dim=1)).mean())}

    optimizer = diff.make_optimizer(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    return diff.fit(
        model,
        train_loss=train_loss,
        val_loss=val_loss,
        optimizer=optimizer,
        max_epochs=config.max_epochs,
        patience=config.patience,
        min_delta=config.min_delta,
        log_every=config.log_every,
        tag="egnn",
        epoch_stats=stats,
    )


@torch.no_grad()
def egnn_opinion(model: EGNN, graph: Graph) -> DirichletOpinion:
    model.eval()
    out = model(graph.features, normalize(graph, "sym_selfloop").matrix)
    return DirichletOpinion(alpha=out.alpha.to(DTYPE))
