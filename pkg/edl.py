"""
Algebra delle opinioni di Dirichlet: evidenza, forza, probabilità attese,
incertezza aleatoria/epistemica, loss UCE, bound superiore e KL verso Dir(1).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

from diff import DTYPE
from specfun import digamma, ln_gamma


@dataclass(frozen=True)
class DirichletOpinion:
    alpha: torch.Tensor

    def __post_init__(self):
        if self.alpha.dim() != 2:
            raise ValueError("alpha deve essere una matrice N x C")
        if not bool(torch.isfinite(self.alpha).all()) or bool((self.alpha <= 0).any()):
            raise ValueError("alpha deve essere finito e > 0")

    @classmethod
    def from_evidence(cls, evidence: torch.Tensor) -> "DirichletOpinion":
        if bool((evidence < 0).any()):
            raise ValueError("evidence deve essere >= 0")
        return cls(alpha=evidence.to(DTYPE) + 1.0)

    @property
    def num_classes(self) -> int:
        return int(self.alpha.shape[1])

    @property
    def evidence(self) -> torch.Tensor:
        return self.alpha - 1.0

    @property
    def strength(self) -> torch.Tensor:
        return self.alpha.sum(dim=1)

    @property
    def total_evidence(self) -> torch.Tensor:
        return self.strength - self.num_classes

    @property
    def expected_probs(self) -> torch.Tensor:
        return self.alpha / self.strength.unsqueeze(1)


@dataclass(frozen=True)
class UncertaintyScores:
    aleatoric: torch.Tensor
    epistemic: torch.Tensor


def uncertainties(op: DirichletOpinion, *, offset: float = 0.0) -> UncertaintyScores:
    """
    u_alea = -max_c alpha_c / (alpha_0 + offset), u_epi = C / alpha_0.

    offset = 0 dà esattamente -max p̄; le opinioni dell'EPN usano offset = 1.
    """
    strength = op.strength
    u_alea = -op.alpha.max(dim=1).values / (strength + float(offset))
    u_epi = op.num_classes / strength
    return UncertaintyScores(aleatoric=u_alea, epistemic=u_epi)


def _as_one_hot(y: torch.Tensor, num_classes: int, like: torch.Tensor) -> torch.Tensor:
    if y.dtype in (torch.int64, torch.int32) and y.dim() == like.dim() - 1:
        return torch.nn.functional.one_hot(y.to(torch.long), num_classes).to(like.dtype)
    if y.shape != like.shape:
        raise ValueError(f"y deve essere one-hot {tuple(like.shape)} oppure indici di classe")
    return y.to(like.dtype)


def uce_loss(evidence: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """psi(e_total + C) - sum_c y_c psi(e_c + 1), una loss per riga."""
    num_classes = int(evidence.shape[-1])
    y1 = _as_one_hot(y, num_classes, evidence)
    total = evidence.sum(dim=-1)
    return digamma(total + num_classes) - (y1 * digamma(evidence + 1.0)).sum(dim=-1)


def expected_ce(alpha: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """sum_c y_c (psi(alpha_0) - psi(alpha_c)): la UCE scritta in termini di alpha."""
    y1 = _as_one_hot(y, int(alpha.shape[-1]), alpha)
    return (y1 * (digamma(alpha.sum(dim=-1, keepdim=True)) - digamma(alpha))).sum(dim=-1)


def uce_upper_bound(evidence: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """
    2 / e_y (forma binaria); +inf dove e_y = 0.

    Maggiora la UCE solo per evidenze a un neurone, e_altra = 1 / e_y (e = exp(±(wᵀz + b))):
    per evidenze arbitrarie non vale (es. e = (1, 50)).
    """
    y1 = _as_one_hot(y, int(evidence.shape[-1]), evidence)
    e_y = (y1 * evidence).sum(dim=-1)
    safe = torch.where(e_y > 0, e_y, torch.ones_like(e_y))
    return torch.where(e_y > 0, 2.0 / safe, torch.full_like(e_y, float("inf")))


def kl_to_uniform(alpha: torch.Tensor) -> torch.Tensor:
    """KL[Dir(alpha) || Dir(1)] per riga."""
    num_classes = int(alpha.shape[-1])
    strength = alpha.sum(dim=-1)
    return (
        ln_gamma(strength)
        - ln_gamma(alpha).sum(dim=-1)
        - float(ln_gamma(float(num_classes)))
        + ((alpha - 1.0) * (digamma(alpha) - digamma(strength).unsqueeze(-1))).sum(dim=-1)
    )


def opinion_frame(op: DirichletOpinion, scores: UncertaintyScores | None = None, node_ids: torch.Tensor | None = None):
    from dataset import _require_pandas

    pd = _require_pandas()
    scores = scores or uncertainties(op)
    ids = node_ids if node_ids is not None else torch.arange(op.alpha.shape[0])
    data = {"node_id": ids.tolist()}
    for c in range(op.num_classes):
        data[f"alpha_{c + 1}"] = op.alpha[:, c].tolist()
    data["u_alea"] = scores.aleatoric.tolist()
    data["u_epi"] = scores.epistemic.tolist()
    return pd.DataFrame(data)


def save_opinions(op: DirichletOpinion, path: str | Path, scores: UncertaintyScores | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    opinion_frame(op, scores).to_csv(path, index=False, float_format="%.17g")
    return path
