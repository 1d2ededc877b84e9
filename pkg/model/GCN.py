from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import torch
import torch.nn as nn

import diff
from config import BackboneConfig
from dataset import Graph, NormalizedAdjacency, SplitSpec, _require_pandas, normalize
from diff import DTYPE, CheckpointMismatchError, FitResult

FeatureLayer = Literal["last", "second_to_last"]


@dataclass(frozen=True)
class GcnOutput:
    hidden: torch.Tensor
    logits: torch.Tensor
    probs: torch.Tensor


class GCN(nn.Module):
    """
    GCN a due layer per classificazione di nodi.

    z = relu(Â X W1 + b1), logits = Â dropout(z) W2 + b2, p̃ = softmax(logits),
    con Â = D̂^{-1/2}(A+I)D̂^{-1/2}. z è la rappresentazione "second_to_last", i logits la "last".
    """

    def __init__(
        self,
        input_dim: int,
        num_classes: int,
        *,
        hidden_dim: int = 64,
        dropout: float = 0.5,
        seed: int | None = 0,
    ):
        super().__init__()

        if int(input_dim) <= 0:
            raise ValueError("input_dim deve essere > 0")
        if int(num_classes) <= 0:
            raise ValueError("num_classes deve essere > 0")
        if int(hidden_dim) <= 0:
            raise ValueError("hidden_dim deve essere > 0")
        if not (0.0 <= float(dropout) < 1.0):
            raise ValueError("dropout deve essere in [0, 1)")

        self.input_dim = int(input_dim)
        self.num_classes = int(num_classes)
        self.hidden_dim = int(hidden_dim)
        self.dropout = float(dropout)

        self.w1 = nn.Parameter(torch.empty(self.input_dim, self.hidden_dim, dtype=DTYPE))
        self.b1 = nn.Parameter(torch.zeros(self.hidden_dim, dtype=DTYPE))
        self.w2 = nn.Parameter(torch.empty(self.hidden_dim, self.num_classes, dtype=DTYPE))
        self.b2 = nn.Parameter(torch.zeros(self.num_classes, dtype=DTYPE))

        gen = diff.make_generator(seed)
        nn.init.xavier_uniform_(self.w1, generator=gen)
        nn.init.xavier_uniform_(self.w2, generator=gen)

    def forward(self, x: torch.Tensor, adj: torch.Tensor, *, generator: torch.Generator | None = None) -> GcnOutput:
        if x.shape[1] != self.input_dim:
            raise ValueError(f"Feature di dimensione {x.shape[1]}, il modello ne attende {self.input_dim}")
        h = diff.sparse_dense_matmul(adj, diff.dense_matmul(x, self.w1))
        z = diff.relu(diff.add_row_bias(h, self.b1))
        zd = diff.dropout(z, self.dropout, self.training, generator)
        logits = diff.add_row_bias(diff.sparse_dense_matmul(adj, diff.dense_matmul(zd, self.w2)), self.b2)
        return GcnOutput(hidden=z, logits=logits, probs=diff.row_softmax(logits))

    def meta(self) -> dict:
        return {
            "kind": "gcn",
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "hidden_dim": self.hidden_dim,
            "dropout": self.dropout,
        }

    @classmethod
    def load(cls, path: str | Path, graph: Graph | None = None) -> "GCN":
        meta, state = diff.load_params(path)
        if meta.get("kind") != "gcn":
            raise CheckpointMismatchError(f"{path}: checkpoint di tipo {meta.get('kind')!r}, atteso 'gcn'")
        if graph is not None and (int(meta["input_dim"]) != graph.num_features or int(meta["num_classes"]) != graph.num_classes):
            raise CheckpointMismatchError(
                f"{path}: checkpoint per input_dim={meta['input_dim']}, num_classes={meta['num_classes']}; "
                f"il dataset ha {graph.num_features} feature e {graph.num_classes} classi"
            )
        model = cls(int(meta["input_dim"]), int(meta["num_classes"]), hidden_dim=int(meta["hidden_dim"]), dropout=float(meta["dropout"]))
        model.load_state_dict(state)
        model.eval()
        return model


def gcn_forward(
    model: GCN,
    graph: Graph,
    train_flag: bool = False,
    *,
    norm: NormalizedAdjacency | None = None,
    generator: torch.Generator | None = None,
) -> GcnOutput:
    norm = norm or normalize(graph, "sym_selfloop")
    model.train(train_flag)
    return model(graph.features, norm.matrix, generator=generator)


def mean_cross_entropy(logits: torch.Tensor, labels: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    logp = diff.log_row_softmax(logits)
    return -logp[idx, labels[idx]].mean()


def train_backbone(graph: Graph, split: SplitSpec, config: BackboneConfig | None = None, *, seed: int = 0) -> FitResult:
    config = config or BackboneConfig()
    if split.train_idx.numel() == 0:
        raise ValueError("Train set vuoto: impossibile addestrare il backbone.")
    if split.val_idx.numel() == 0:
        raise ValueError("Validation set vuoto: serve per l'early stopping.")

    model = GCN(graph.num_features, graph.num_classes, hidden_dim=config.hidden_dim, dropout=config.dropout, seed=seed)
    norm = normalize(graph, "sym_selfloop")
    gen = diff.make_generator(seed + 1)
    labels = graph.labels

    def train_loss() -> torch.Tensor:
        out = model(graph.features, norm.matrix, generator=gen)
        return mean_cross_entropy(out.logits, labels, split.train_idx)

    last: dict[str, torch.Tensor] = {}

    def val_loss() -> float:
        out = model(graph.features, norm.matrix)
        last["pred"] = out.probs.argmax(dim=1)
        return float(mean_cross_entropy(out.logits, labels, split.val_idx))

    def stats() -> dict[str, float]:
        pred = last["pred"]
        return {
            "train_acc": float((pred[split.train_idx] == labels[split.train_idx]).to(DTYPE).mean()),
            "val_acc": float((pred[split.val_idx] == labels[split.val_idx]).to(DTYPE).mean()),
        }

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
        tag="gcn",
        epoch_stats=stats,
    )


@torch.no_grad()
def backbone_features(model: GCN, graph: Graph, layer: FeatureLayer = "last") -> tuple[torch.Tensor, torch.Tensor]:
    """(feature per la sonda, p̃) dal backbone in eval mode, staccati dal grafo di autograd."""
    out = gcn_forward(model, graph, False)
    if layer == "last":
        feats = out.logits
    elif layer == "second_to_last":
        feats = out.hidden
    else:
        raise ValueError(f"feature_layer non supportato: {layer!r}")
    return feats.detach().clone(), out.probs.detach().clone()


@dataclass(frozen=True)
class BaselineScores:
    entropy: torch.Tensor
    max_score: torch.Tensor
    energy: torch.Tensor
    propagated_energy: torch.Tensor

    def to_frame(self):
        pd = _require_pandas()
        return pd.DataFrame(
            {
                "node_id": list(range(int(self.entropy.shape[0]))),
                "entropy": self.entropy.tolist(),
                "max_score": self.max_score.tolist(),
                "energy": self.energy.tolist(),
                "propagated_energy": self.propagated_energy.tolist(),
            }
        )


def energy_score(logits: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    return -float(temperature) * torch.logsumexp(logits / float(temperature), dim=1)


def propagate_energy(energy: torch.Tensor, graph: Graph, *, gamma: float = 0.2, k: int = 2) -> torch.Tensor:
    """E^k = gamma E^{k-1} + (1 - gamma) D^{-1} A E^{k-1}."""
    rw = normalize(graph, "rw_noselfloop").matrix
    e = energy
    for _ in range(int(k)):
        e = float(gamma) * e + (1.0 - float(gamma)) * diff.sparse_dense_matmul(rw, e)
    return e


@torch.no_grad()
def baseline_scores(
    logits: torch.Tensor,
    probs: torch.Tensor,
    graph: Graph,
    *,
    temperature: float = 1.0,
    gamma: float = 0.2,
    k: int = 2,
) -> BaselineScores:
    entropy = -torch.special.xlogy(probs, probs).sum(dim=1)
    max_score = 1.0 - probs.max(dim=1).values
    energy = energy_score(logits, temperature)
    return BaselineScores(
        entropy=entropy,
        max_score=max_score,
        energy=energy,
        propagated_energy=propagate_energy(energy, graph, gamma=gamma, k=k),
    )
