"""
Oracoli in forma chiusa e verifiche Monte Carlo nel mondo gaussiano binario:
classi -1/+1 con medie -mu/+mu, OOD centrato nell'origine, covarianza comune sigma.

Ogni verify_* restituisce un TheoryReport con un esito per controllo; run_all li
raccoglie in theory_report.json.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

import specfun
from dataset import GaussianSpec
from diff import DTYPE
from metrics import auroc, write_metrics_json
from model.EPN import EPN, epn_uce_loss, ice_loss

_BATCH = 25_000


@dataclass(frozen=True)
class OptimalEnn:
    w_bar: torch.Tensor
    b_bar: float = 0.0

    @classmethod
    def from_spec(cls, spec: GaussianSpec) -> "OptimalEnn":
        return cls(w_bar=spec.sigma_inv_mu(), b_bar=0.0)

    def alphas(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(alpha_{-y}, alpha_{y}) = (exp(-s) + 1, exp(s) + 1) con s = w̄ᵀz + b̄."""
        s = z.to(DTYPE) @ self.w_bar + self.b_bar
        return torch.exp(-s) + 1.0, torch.exp(s) + 1.0

    def uncertainty(self, z: torch.Tensor) -> torch.Tensor:
        a_neg, a_pos = self.alphas(z)
        return 2.0 / (a_neg + a_pos)


@dataclass(frozen=True)
class OptimalClassifier:
    """v*(z) = 2 mu^T sigma^{-1} z; p̃ = (1 - sigmoid(v*), sigmoid(v*)) per le classi (-1, +1)."""

    direction: torch.Tensor

    @classmethod
    def from_spec(cls, spec: GaussianSpec) -> "OptimalClassifier":
        return cls(direction=2.0 * spec.sigma_inv_mu())

    def logit(self, z: torch.Tensor) -> torch.Tensor:
        return z.to(DTYPE) @ self.direction

    def probs(self, z: torch.Tensor) -> torch.Tensor:
        v = self.logit(z)
        return torch.stack([torch.sigmoid(-v), torch.sigmoid(v)], dim=1)

    def neg_log_prob(self, z: torch.Tensor, y_index: torch.Tensor) -> torch.Tensor:
        """-ln p̃_y calcolato come softplus per non perdere precisione nelle code."""
        v = self.logit(z)
        sign = 2.0 * y_index.to(DTYPE) - 1.0
        return torch.nn.functional.softplus(-sign * v)


@dataclass(frozen=True)
class IceOptimalEpn:
    w_p: torch.Tensor
    b_p: float = 0.0

    @classmethod
    def from_spec(cls, spec: GaussianSpec) -> "IceOptimalEpn":
        return cls(w_p=2.0 * spec.sigma_inv_mu(), b_p=0.0)

    def probe(self) -> EPN:
        return EPN.linear_cosh_probe(self.w_p, self.b_p)


def optimal_enn_uncertainty(z: torch.Tensor, spec: GaussianSpec) -> torch.Tensor:
    """U*(z) = 1 / (1 + cosh(mu^T sigma^{-1} z))."""
    return 1.0 / (1.0 + torch.cosh(z.to(DTYPE) @ spec.sigma_inv_mu()))


# ---------------------------------------------------------------------------
# campionamento a batch con seed derivati
# ---------------------------------------------------------------------------


def _batch_seeds(seed: int, n: int, stream: int) -> list[tuple[int, int]]:
    """(seed torch, dimensione) per ogni batch; stream separa campioni indipendenti con lo stesso seed."""
    n_batches = max(1, math.ceil(int(n) / _BATCH))
    children = np.random.SeedSequence([int(seed), int(stream)]).spawn(n_batches)
    sizes = [min(_BATCH, int(n) - i * _BATCH) for i in range(n_batches)]
    return [(int(child.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)), size) for child, size in zip(children, sizes)]


def sample_id(spec: GaussianSpec, n: int, seed: int, stream: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    """Mistura 1/2 N(-mu, S) + 1/2 N(+mu, S); restituisce (z, indice di classe 0 -> -mu, 1 -> +mu)."""
    chol = spec.cholesky()
    mu = spec.mu.to(DTYPE)
    zs, ys = [], []
    for batch_seed, size in _batch_seeds(seed, n, stream):
        gen = torch.Generator().manual_seed(batch_seed)
        y = torch.randint(0, 2, (size,), generator=gen)
        eps = torch.randn(size, spec.dim, generator=gen, dtype=DTYPE)
        sign = (2.0 * y.to(DTYPE) - 1.0).unsqueeze(1)
        zs.append(sign * mu.unsqueeze(0) + eps @ chol.T)
        ys.append(y)
    return torch.cat(zs), torch.cat(ys)


def sample_ood(spec: GaussianSpec, n: int, seed: int, stream: int = 1) -> torch.Tensor:
    chol = spec.cholesky()
    zs = []
    for batch_seed, size in _batch_seeds(seed, n, stream):
        gen = torch.Generator().manual_seed(batch_seed)
        zs.append(torch.randn(size, spec.dim, generator=gen, dtype=DTYPE) @ chol.T)
    return torch.cat(zs)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float | list | None = None
    threshold: float | None = None
    note: str = ""


@dataclass
class TheoryReport:
    name: str
    checks: list[CheckResult] = field(default_factory=list)
    values: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, name: str, passed: bool, value=None, threshold=None, note: str = "") -> None:
        self.checks.append(CheckResult(name, bool(passed), value, threshold, note))

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "checks": [asdict(c) for c in self.checks], "values": self.values}


def _ranking_probability(u_ood: torch.Tensor, u_id: torch.Tensor) -> tuple[float, float, float]:
    """(P(u_ood > u_id), P(u_ood > u_id) + 1/2 P(=), errore standard di quest'ultima) su coppie indipendenti."""
    greater = (u_ood > u_id).to(DTYPE)
    ties = (u_ood == u_id).to(DTYPE)
    adjusted = greater + 0.5 * ties
    n = adjusted.numel()
    se = float(adjusted.std(unbiased=True)) / math.sqrt(n) if n > 1 else float("nan")
    return float(greater.mean()), float(adjusted.mean()), se


# ---------------------------------------------------------------------------
# verifiche
# ---------------------------------------------------------------------------


def theorem1_estimate(spec: GaussianSpec, n_samples: int, seed: int) -> dict:
    z_ood = sample_ood(spec, n_samples, seed)
    z_id, _ = sample_id(spec, n_samples, seed)
    strict, adjusted, se = _ranking_probability(optimal_enn_uncertainty(z_ood, spec), optimal_enn_uncertainty(z_id, spec))
    snr = spec.snr()
    return {
        "mu_norm": float(torch.linalg.vector_norm(spec.mu)),
        "snr": snr,
        "strict": strict,
        "estimate": adjusted,
        "se": se,
        "bound": 1.0 - 8.0 / snr if snr > 8.0 else None,
    }


def verify_theorem1(
    spec: GaussianSpec,
    n_samples: int = 100_000,
    seed: int = 0,
    *,
    sweep: Sequence[float] = (1.0, 2.0, 4.0, 6.0, 8.0),
) -> TheoryReport:
    """P(U*(z_0) > U*(z_ID)) stimata via MC, confrontata con il bound 1 - 8/snr e con uno sweep su ||mu||."""
    report = TheoryReport("theorem1")
    main = theorem1_estimate(spec, n_samples, seed)
    report.values["main"] = main

    if main["bound"] is not None:
        report.add("estimate_above_bound", main["estimate"] >= main["bound"], main["estimate"], main["bound"])
    else:
        report.add("estimate_above_bound", True, main["estimate"], None, "bound vacuo (snr <= 8)")
    if main["snr"] == 0.0:
        report.add("no_separation_at_zero_mean", abs(main["estimate"] - 0.5) < 1e-12, main["estimate"], 0.5)

    sweep_rows = [theorem1_estimate(GaussianSpec(spec.dim, _rescale(spec.mu, r), spec.sigma), n_samples, seed) for r in sweep]
    report.values["sweep"] = sweep_rows
    monotone = all(
        b["estimate"] >= a["estimate"] - 2.0 * math.hypot(a["se"], b["se"]) for a, b in zip(sweep_rows, sweep_rows[1:])
    )
    report.add("monotone_in_mu_norm", monotone, [r["estimate"] for r in sweep_rows])
    return report


def _rescale(mu: torch.Tensor, norm: float) -> torch.Tensor:
    current = float(torch.linalg.vector_norm(mu))
    if current == 0.0:
        d = mu.shape[0]
        return torch.full((d,), float(norm) / math.sqrt(d), dtype=DTYPE)
    return mu.to(DTYPE) * (float(norm) / current)


def verify_theorem2(
    n_grid: Sequence[float] = (1.0, 2.0, 4.0, 8.0),
    spec: GaussianSpec | None = None,
    n_samples: int = 10_000,
    seed: int = 0,
) -> TheoryReport:
    """Sonde θ̃_n: evidenza costante 2 cosh(n), loss UCE che decresce in n, incertezza che non separa ID e OOD."""
    spec = spec or GaussianSpec.isotropic(2, 1.0)
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ValueError("n_grid deve essere strettamente crescente")
    report = TheoryReport("theorem2")

    z_id, y = sample_id(spec, n_samples, seed)
    z_ood = sample_ood(spec, n_samples, seed)
    clf = OptimalClassifier.from_spec(spec)
    probs_id = clf.probs(z_id)
    lower = float(clf.neg_log_prob(z_id, y).mean())
    report.values["lower_bound"] = lower

    rows = []
    for n in n_grid:
        probe = EPN.cosh_probe(spec.dim, n)
        with torch.no_grad():
            out_id = probe(z_id, probs_id)
            out_ood = probe(z_ood, clf.probs(z_ood))
        e_all = torch.cat([out_id.e_total, out_ood.e_total])
        deviation = float((e_all - 2.0 * math.cosh(n)).abs().max())
        loss = float(epn_uce_loss(out_id.e_total, y, probs_id).mean())
        u_id = 2.0 / (2.0 + out_id.e_total)
        u_ood = 2.0 / (2.0 + out_ood.e_total)
        u_all = torch.cat([u_id, u_ood])
        strict, _, _ = _ranking_probability(u_ood, u_id)
        labels = torch.cat([torch.zeros_like(u_id), torch.ones_like(u_ood)])
        rows.append(
            {
                "n": float(n),
                "e_total_deviation": deviation,
                "mean_uce": loss,
                "u_epi_variance": float(u_all.var(unbiased=False)),
                "strict_ranking_probability": strict,
                "ood_auroc": auroc(u_all, labels),
            }
        )
    report.values["grid"] = rows

    report.add("e_total_is_2cosh_n", all(r["e_total_deviation"] < 1e-10 for r in rows), max(r["e_total_deviation"] for r in rows), 1e-10)
    losses = [r["mean_uce"] for r in rows]
    report.add("uce_strictly_decreasing", all(b < a for a, b in zip(losses, losses[1:])), losses)
    report.add("uce_above_lower_bound", all(v > lower for v in losses), min(losses), lower)
    report.add("u_epi_constant", all(r["u_epi_variance"] == 0.0 for r in rows), max(r["u_epi_variance"] for r in rows), 0.0)
    report.add("no_strict_ranking", all(r["strict_ranking_probability"] == 0.0 for r in rows), max(r["strict_ranking_probability"] for r in rows), 0.0)
    report.add("ood_auroc_is_half", all(r["ood_auroc"] == 0.5 for r in rows), [r["ood_auroc"] for r in rows], 0.5)
    return report


def ice_to_proof_target(out, probs: torch.Tensor) -> torch.Tensor:
    """||(C + e_total) p̃ - (1 + q rovesciato)||²: il bersaglio per classe 1 + exp(∓m) usato nella dimostrazione."""
    return ice_loss(out.e_total, probs, 1.0 + out.q.flip(dims=[1]))


def verify_theorem3(
    spec: GaussianSpec | None = None,
    n_samples: int = 10_000,
    seed: int = 0,
    *,
    deltas: Sequence[float] = (1e-2, 1e-1),
    ranking_samples: int = 100_000,
) -> TheoryReport:
    """La sonda con w_P = 2 sigma^{-1} mu, b_P = 0 azzera la ICE e ordina ID/OOD come U*."""
    spec = spec or GaussianSpec.isotropic(2, 1.0)
    report = TheoryReport("theorem3")
    opt = IceOptimalEpn.from_spec(spec)
    clf = OptimalClassifier.from_spec(spec)

    z_id, _ = sample_id(spec, n_samples, seed)
    probs = clf.probs(z_id)

    def mean_ice(w: torch.Tensor, b: float) -> float:
        with torch.no_grad():
            out = EPN.linear_cosh_probe(w, b)(z_id, probs)
        return float(ice_to_proof_target(out, probs).mean())

    at_opt = mean_ice(opt.w_p, opt.b_p)
    report.values["ice_at_optimum"] = at_opt
    report.add("ice_zero_at_optimum", at_opt < 1e-16, at_opt, 1e-16)

    gen = torch.Generator().manual_seed(int(seed))
    direction = torch.randn(spec.dim, generator=gen, dtype=DTYPE)
    direction = direction / torch.linalg.vector_norm(direction)
    perturbed = {}
    for d in deltas:
        perturbed[f"w_plus_{d:g}"] = mean_ice(opt.w_p + d * direction, opt.b_p)
        perturbed[f"w_minus_{d:g}"] = mean_ice(opt.w_p - d * direction, opt.b_p)
        perturbed[f"b_plus_{d:g}"] = mean_ice(opt.w_p, opt.b_p + d)
        perturbed[f"b_minus_{d:g}"] = mean_ice(opt.w_p, opt.b_p - d)
    perturbed["w_scaled_1.1"] = mean_ice(1.1 * opt.w_p, opt.b_p)
    report.values["perturbed"] = perturbed
    report.add("perturbations_raise_ice", all(v > at_opt for v in perturbed.values()), min(perturbed.values()), at_opt)

    # l'incertezza della sonda è 1/(1 + cosh(2 mu^T S^{-1} z)): stessa funzione monotona di |mu^T S^{-1} z| di U*
    z_ood = sample_ood(spec, ranking_samples, seed)
    z_id_r, _ = sample_id(spec, ranking_samples, seed)
    probe = opt.probe()
    with torch.no_grad():
        u_ood = 2.0 / (2.0 + probe(z_ood, clf.probs(z_ood)).e_total)
        u_id = 2.0 / (2.0 + probe(z_id_r, clf.probs(z_id_r)).e_total)
    _, probe_p, _ = _ranking_probability(u_ood, u_id)
    _, enn_p, _ = _ranking_probability(optimal_enn_uncertainty(z_ood, spec), optimal_enn_uncertainty(z_id_r, spec))
    report.values["ranking_probability"] = {"probe": probe_p, "optimal_enn": enn_p}
    report.add("ranking_matches_optimal_enn", abs(probe_p - enn_p) < 1e-12, abs(probe_p - enn_p), 1e-12)
    return report


def lemma1_value(x, a: float, digamma: Callable = specfun.digamma):
    """upsilon(x; a) = psi(x + 2) - psi(a (x + 2))."""
    return digamma(x + 2.0) - digamma(a * (x + 2.0))


def verify_lemma1(
    a_grid: Sequence[float] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
    x_grid: Sequence[float] | None = None,
    *,
    digamma: Callable = specfun.digamma,
    trigamma: Callable = specfun.trigamma,
) -> TheoryReport:
    """upsilon strettamente decrescente, sopra -ln a e con limite -ln a per x -> inf."""
    if any(not (0.0 < a < 1.0) for a in a_grid):
        raise ValueError("a_grid deve stare in (0, 1)")
    x = torch.as_tensor(
        np.concatenate([[0.0], np.logspace(-2, 6, 81)]) if x_grid is None else np.asarray(x_grid, dtype=np.float64),
        dtype=DTYPE,
    )
    report = TheoryReport("lemma1")
    decreasing = above = fd_negative = deriv_negative = True
    limit_err = 0.0
    worst_gap = math.inf

    for a in a_grid:
        v = lemma1_value(x, a, digamma)
        floor = -math.log(a)
        decreasing &= bool((v[1:] < v[:-1]).all())
        gap = float((v - floor).min())
        worst_gap = min(worst_gap, gap)
        above &= gap > 0.0

        h = 1e-3 * torch.clamp(x, min=1.0)
        fd = lemma1_value(x + h, a, digamma) - lemma1_value(x - h, a, digamma)
        fd_negative &= bool((fd < 0).all())

        deriv = trigamma(x + 2.0) - a * trigamma(a * (x + 2.0))
        deriv_negative &= bool((deriv < 0).all())

        far = float(lemma1_value(torch.tensor([1e6], dtype=DTYPE), a, digamma)[0])
        limit_err = max(limit_err, abs(far - floor))

    report.add("strictly_decreasing", decreasing)
    report.add("above_minus_log_a", above, worst_gap, 0.0)
    report.add("finite_differences_negative", fd_negative)
    report.add("trigamma_derivative_negative", deriv_negative)
    report.add("limit_is_minus_log_a", limit_err < 1e-4, limit_err, 1e-4)
    return report


def run_all(
    *,
    dim: int = 2,
    mu_norm: float = 6.0,
    n_samples: int = 100_000,
    loss_samples: int = 10_000,
    loss_mu_norm: float = 1.0,
    seed: int = 0,
    digamma: Callable = specfun.digamma,
) -> list[TheoryReport]:
    """
    verify_theorem1 gira sul mondo (dim, mu_norm); le verifiche sulle loss usano una media
    più piccola (loss_mu_norm) perché con classi molto separate p̃_y arrotonda a 1.
    """
    spec = GaussianSpec.isotropic(dim, mu_norm)
    loss_spec = GaussianSpec.isotropic(dim, loss_mu_norm)
    return [
        verify_theorem1(spec, n_samples, seed),
        verify_theorem2(spec=loss_spec, n_samples=loss_samples, seed=seed),
        verify_theorem3(loss_spec, loss_samples, seed, ranking_samples=n_samples),
        verify_lemma1(digamma=digamma),
    ]


def write_report(reports: Sequence[TheoryReport], path: str | Path) -> Path:
    payload = {"passed": all(r.passed for r in reports), "reports": [r.to_dict() for r in reports]}
    return write_metrics_json(payload, path)
