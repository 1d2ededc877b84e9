from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import torch
import torch.nn as nn

import diff
from config import ProbeConfig
from dataset import Graph, SplitSpec, _require_pandas
from diff import DTYPE, CheckpointMismatchError, FitResult
from edl import DirichletOpinion, UncertaintyScores
from model.GCN import GCN, FeatureLayer, backbone_features
from specfun import digamma

FinalActivation = Literal["none", "exp", "softplus"]

_EXP_CLAMP = 60.0
_PROB_FLOOR = 1e-12
_CONF_FLOOR = 1e-6


@dataclass(frozen=True)
class PclConfig:
    e_id: float = 100.0
    e_ood: float = 0.0

    def __post_init__(self):
        if not (float(self.e_id) > float(self.e_ood) >= 0.0):
            raise ValueError("PclConfig: serve e_id > e_ood >= 0")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1e-2
    lambda2: float = 1e-2

    def __post_init__(self):
        if float(self.lambda1) < 0 or float(self.lambda2) < 0:
            raise ValueError("lambda1 e lambda2 devono essere >= 0")


@dataclass(frozen=True)
class ProbeOutput:
    e_total: torch.Tensor
    q: torch.Tensor
    alpha: torch.Tensor

    @property
    def num_classes(self) -> int:
        return int(self.alpha.shape[1])

    def opinion(self) -> DirichletOpinion:
        # p̃ può andare in underflow a 0 per logit molto negativi
        return DirichletOpinion(alpha=self.alpha.detach().to(DTYPE).clamp(min=torch.finfo(DTYPE).tiny))


class EPN(nn.Module):
    """
    Sonda evidenziale sopra le feature congelate di un backbone.

    q = exp(W1ᵀz + b1) (una componente per classe), e_total = relu(w2ᵀq + b2),
    eventualmente seguito da exp/softplus; alpha = (C + e_total) * p̃.
    Di default w2 = 1 e b2 = 0 sono buffer non addestrabili.
    """

    def __init__(
        self,
        input_dim: int,
        num_classes: int,
        *,
        final_activation: FinalActivation = "none",
        freeze_w2b2: bool = True,
        feature_layer: FeatureLayer = "last",
    ):
        super().__init__()
        if int(input_dim) <= 0:
            raise ValueError("input_dim deve essere > 0")
        if int(num_classes) <= 0:
            raise ValueError("num_classes deve essere > 0")
        if final_activation not in ("none", "exp", "softplus"):
            raise ValueError(f"final_activation non supportata: {final_activation!r}")
        if feature_layer not in ("last", "second_to_last"):
            raise ValueError(f"feature_layer non supportato: {feature_layer!r}")

        self.input_dim = int(input_dim)
        self.num_classes = int(num_classes)
        self.final_activation = final_activation
        self.freeze_w2b2 = bool(freeze_w2b2)
        self.feature_layer = feature_layer

        self.W1 = nn.Parameter(torch.zeros(self.input_dim, self.num_classes, dtype=DTYPE))
        self.b1 = nn.Parameter(torch.zeros(self.num_classes, dtype=DTYPE))
        w2 = torch.ones(self.num_classes, dtype=DTYPE)
        b2 = torch.zeros((), dtype=DTYPE)
        if self.freeze_w2b2:
            self.register_buffer("w2", w2)
            self.register_buffer("b2", b2)
        else:
            self.w2 = nn.Parameter(w2)
            self.b2 = nn.Parameter(b2)

    def forward(self, z: torch.Tensor, probs: torch.Tensor) -> ProbeOutput:
        if z.dim() != 2 or z.shape[1] != self.input_dim:
            raise ValueError(f"feature di shape {tuple(z.shape)}, la sonda attende (N, {self.input_dim})")
        if probs.shape != (z.shape[0], self.num_classes):
            raise ValueError(f"probs di shape {tuple(probs.shape)}, attese ({z.shape[0]}, {self.num_classes})")

        pre = diff.add_row_bias(diff.dense_matmul(z, self.W1), self.b1)
        q = diff.exp(pre.clamp(max=_EXP_CLAMP))
        e_total = diff.relu(q @ self.w2 + self.b2)
        if self.final_activation == "exp":
            e_total = diff.exp(e_total.clamp(max=_EXP_CLAMP))
        elif self.final_activation == "softplus":
            e_total = diff.softplus(e_total)
        alpha = (self.num_classes + e_total).unsqueeze(1) * probs
        return ProbeOutput(e_total=e_total, q=q, alpha=alpha)

    def meta(self) -> dict:
        return {
            "kind": "epn",
            "input_dim": self.input_dim,
            "num_classes": self.num_classes,
            "final_activation": self.final_activation,
            "freeze_w2b2": self.freeze_w2b2,
            "feature_layer": self.feature_layer,
        }

    @classmethod
    def load(cls, path: str | Path, backbone: GCN | None = None) -> "EPN":
        """Il layer delle feature viene dal checkpoint; con backbone controlla anche le dimensioni."""
        meta, state = diff.load_params(path)
        if meta.get("kind") != "epn":
            raise CheckpointMismatchError(f"{path}: checkpoint di tipo {meta.get('kind')!r}, atteso 'epn'")
        layer = meta.get("feature_layer", "last")
        if backbone is not None:
            expected = backbone.num_classes if layer == "last" else backbone.hidden_dim
            if int(meta["input_dim"]) != expected or int(meta["num_classes"]) != backbone.num_classes:
                raise CheckpointMismatchError(
                    f"{path}: sonda su feature_layer={layer!r} con input_dim={meta['input_dim']}, "
                    f"num_classes={meta['num_classes']}; il backbone fornisce {expected} feature e {backbone.num_classes} classi"
                )
        model = cls(
            int(meta["input_dim"]),
            int(meta["num_classes"]),
            final_activation=meta["final_activation"],
            freeze_w2b2=bool(meta["freeze_w2b2"]),
            feature_layer=layer,
        )
        model.load_state_dict(state)
        model.eval()
        return model

    @classmethod
    def cosh_probe(cls, input_dim: int, n: float) -> "EPN":
        """Sonda binaria con W1 = 0, b1 = n(1, -1), w2 = 1, b2 = 0: e_total = 2 cosh(n) per ogni z."""
        probe = cls(input_dim, 2)
        with torch.no_grad():
            probe.b1.copy_(torch.tensor([float(n), -float(n)], dtype=DTYPE))
        return probe

    @classmethod
    def linear_cosh_probe(cls, w: torch.Tensor, b: float = 0.0) -> "EPN":
        """Sonda binaria con W1 = [w, -w], b1 = (b, -b): e_total = 2 cosh(wᵀz + b)."""
        probe = cls(int(w.shape[0]), 2)
        with torch.no_grad():
            probe.W1.copy_(torch.stack([w, -w], dim=1).to(DTYPE))
            probe.b1.copy_(torch.tensor([float(b), -float(b)], dtype=DTYPE))
        return probe


def epn_forward(probe: EPN, features: torch.Tensor, probs: torch.Tensor) -> ProbeOutput:
    row_sums = probs.sum(dim=1)
    if not torch.allclose(row_sums, torch.ones_like(row_sums), atol=1e-6, rtol=0.0):
        raise ValueError("Le righe di probs devono sommare a 1")
    return probe(features, probs)


def _true_class_prob(probs: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return probs.gather(1, y.to(torch.long).unsqueeze(1)).squeeze(1)


def epn_uce_loss(e_total: torch.Tensor, y: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """psi(e_total + C) - psi((e_total + C) p̃_y), con p̃_y >= 1e-12. Una loss per nodo."""
    strength = e_total + probs.shape[1]
    p_y = _true_class_prob(probs, y).clamp(min=_PROB_FLOOR)
    # e_total >= 0 (relu/exp/softplus) e p_y >= 1e-12: argomenti sempre > 0
    psi = digamma(torch.stack([strength, strength * p_y]), check=False)
    return psi[0] - psi[1]


def ice_loss(e_total: torch.Tensor, probs: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """||(C + e_total) p̃ - q||², una loss per nodo."""
    target = (probs.shape[1] + e_total).unsqueeze(1) * probs
    return ((target - q) ** 2).sum(dim=1)


def pcl_loss(e_total: torch.Tensor, r: torch.Tensor, cfg: PclConfig | None = None) -> torch.Tensor:
    """max(0, e_id - e)² + ((1 - r)/r) max(0, e - e_ood)², con r >= 1e-6."""
    cfg = cfg or PclConfig()
    r = r.clamp(min=_CONF_FLOOR)
    pull_up = torch.relu(float(cfg.e_id) - e_total) ** 2
    push_down = torch.relu(e_total - float(cfg.e_ood)) ** 2
    return pull_up + (1.0 - r) / r * push_down


def epn_objective(
    out: ProbeOutput,
    probs: torch.Tensor,
    labels: torch.Tensor,
    labeled_idx: torch.Tensor,
    weights: LossWeights | None = None,
    pcl: PclConfig | None = None,
) -> torch.Tensor:
    """Media EPN-UCE sui nodi etichettati + lambda1 media ICE + lambda2 media PCL su tutti i nodi."""
    if labeled_idx.numel() == 0:
        raise ValueError("epn_objective: insieme di nodi etichettati vuoto")
    uce = epn_uce_loss(out.e_total[labeled_idx], labels[labeled_idx], probs[labeled_idx]).mean()
    return uce + epn_regularizers(out, probs, weights, pcl)


def epn_regularizers(
    out: ProbeOutput, probs: torch.Tensor, weights: LossWeights | None = None, pcl: PclConfig | None = None
) -> torch.Tensor:
    weights = weights or LossWeights()
    total = out.e_total.new_zeros(())
    if weights.lambda1:
        total = total + float(weights.lambda1) * ice_loss(out.e_total, probs, out.q).mean()
    if weights.lambda2:
        r = probs.max(dim=1).values
        total = total + float(weights.lambda2) * pcl_loss(out.e_total, r, pcl).mean()
    return total


def _weights_from(config: ProbeConfig, weights: LossWeights | None) -> LossWeights:
    return weights if weights is not None else LossWeights(config.lambda1, config.lambda2)


def fit_probe(
    features: torch.Tensor,
    probs: torch.Tensor,
    labels: torch.Tensor,
    split: SplitSpec,
    weights: LossWeights | None = None,
    config: ProbeConfig | None = None,
) -> FitResult:
    """Addestra solo la sonda su feature e probabilità già calcolate (costanti per autograd)."""
    config = config or ProbeConfig()
    weights = _weights_from(config, weights)
    pcl = PclConfig(config.e_id, config.e_ood)
    if split.train_idx.numel() == 0:
        raise ValueError("Train set vuoto: impossibile addestrare la sonda.")
    if split.val_idx.numel() == 0:
        raise ValueError("Validation set vuoto: serve per l'early stopping.")

    features = features.detach().to(DTYPE)
    probs = probs.detach().to(DTYPE)
    probe = EPN(
        int(features.shape[1]),
        int(probs.shape[1]),
        final_activation=config.final_activation,
        freeze_w2b2=config.freeze_w2b2,
        feature_layer=config.feature_layer,
    )

    # un solo forward per epoca: UCE su train e val in una chiamata, regolarizzatori condivisi
    n_train = split.train_idx.numel()
    idx = torch.cat([split.train_idx, split.val_idx])
    last: dict[str, torch.Tensor] = {}

    def train_loss() -> torch.Tensor:
        out = probe(features, probs)
        uce = epn_uce_loss(out.e_total[idx], labels[idx], probs[idx])
        reg = epn_regularizers(out, probs, weights, pcl)
        last["e_total"] = out.e_total.detach()
        last["val"] = (uce[n_train:].mean() + reg).detach()
        return uce[:n_train].mean() + reg

    def val_loss() -> float:
        return float(last["val"])

    def stats() -> dict[str, float]:
        return {"mean_e_total": float(last["e_total"].mean())}

    optimizer = diff.make_optimizer(probe.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    return diff.fit(
        probe,
        train_loss=train_loss,
        val_loss=val_loss,
        optimizer=optimizer,
        max_epochs=config.max_epochs,
        patience=config.patience,
        min_delta=config.min_delta,
        log_every=config.log_every,
        tag="epn",
        epoch_stats=stats,
        val_before_step=True,
    )


def train_probe(
    graph: Graph,
    split: SplitSpec,
    backbone: GCN,
    feature_layer: FeatureLayer | None = None,
    weights: LossWeights | None = None,
    config: ProbeConfig | None = None,
) -> FitResult:
    """Sonda sopra un backbone congelato: i suoi parametri non vengono toccati."""
    config = config or ProbeConfig()
    layer = feature_layer or config.feature_layer
    features, probs = backbone_features(backbone, graph, layer)
    return fit_probe(features, probs, graph.labels, split, weights, config.model_copy(update={"feature_layer": layer}))


@torch.no_grad()
def probe_outputs(
    probe: EPN, backbone: GCN, graph: Graph, feature_layer: FeatureLayer | None = None
) -> tuple[ProbeOutput, torch.Tensor]:
    features, probs = backbone_features(backbone, graph, feature_layer or probe.feature_layer)
    probe.eval()
    return probe(features, probs), probs


def probe_uncertainties(out: ProbeOutput, *, offset: float = 1.0) -> UncertaintyScores:
    """u_epi = C / (e_total + C); u_alea = -max alpha / (C + e_total + offset)."""
    strength = out.num_classes + out.e_total.detach()
    u_epi = out.num_classes / strength
    u_alea = -out.alpha.detach().max(dim=1).values / (strength + float(offset))
    return UncertaintyScores(aleatoric=u_alea, epistemic=u_epi)


def probe_frame(out: ProbeOutput, scores: UncertaintyScores | None = None):
    pd = _require_pandas()
    scores = scores or probe_uncertainties(out)
    data = {
        "node_id": list(range(int(out.e_total.shape[0]))),
        "e_total": out.e_total.detach().tolist(),
        "u_alea": scores.aleatoric.tolist(),
        "u_epi": scores.epistemic.tolist(),
    }
    for c in range(out.num_classes):
        data[f"alpha_{c + 1}"] = out.alpha[:, c].detach().tolist()
    return pd.DataFrame(data)
