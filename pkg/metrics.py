from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Literal, Mapping

import numpy as np
import torch

from dataset import Graph, SplitSpec, _require_pandas

DetectionMode = Literal["mis", "ood"]

RESULTS_SCHEMA = "# results-schema v1"
RESULTS_COLUMNS = [
    "run_id",
    "seed",
    "method",
    "propagation",
    "mode",
    "acc",
    "brier",
    "ece",
    "mis_auroc",
    "mis_aupr",
    "ood_auroc",
    "ood_aupr",
    "n_test",
    "n_ood",
]


class UndefinedMetricError(ValueError):
    pass


def _as_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().to("cpu", dtype=torch.float64).numpy()
    return np.asarray(x, dtype=np.float64)


def auroc(scores, labels) -> float:
    """AUROC come statistica di Mann-Whitney U, rank medio sui tie."""
    pd = _require_pandas()
    s = _as_numpy(scores).reshape(-1)
    y = _as_numpy(labels).reshape(-1) >= 0.5
    if s.shape != y.shape:
        raise ValueError("scores e labels devono avere la stessa lunghezza")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUROC non definita: {n_pos} positivi e {n_neg} negativi")

    ranks = pd.Series(s).rank(method="average").to_numpy()
    u = float(ranks[y].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / float(n_pos * n_neg)


def aupr(scores, labels) -> float:
    """
    Average precision a gradini: sum_k (R_k - R_{k-1}) P_k sulle soglie distinte,
    dalla più alta alla più bassa (i tie entrano tutti insieme).
    """
    s = _as_numpy(scores).reshape(-1)
    y = _as_numpy(labels).reshape(-1) >= 0.5
    if s.shape != y.shape:
        raise ValueError("scores e labels devono avere la stessa lunghezza")
    positives_total = int(y.sum())
    if positives_total == 0:
        raise UndefinedMetricError("AUPR non definita: nessun positivo")

    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    tp = np.cumsum(y[order])
    # ultimo indice di ogni gruppo di score uguali
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp_at = tp[ends].astype(np.float64)
    precision = tp_at / (ends + 1.0)
    recall = tp_at / positives_total
    prev_recall = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev_recall) * precision))


def ece(probs, labels, n_bins: int = 10) -> float:
    """Expected calibration error con n_bins bin di uguale ampiezza sulla confidenza max_c p."""
    if int(n_bins) <= 0:
        raise ValueError("n_bins deve essere > 0")
    p = _as_numpy(probs)
    y = _as_numpy(labels).astype(np.int64).reshape(-1)
    if p.ndim != 2 or p.shape[0] != y.shape[0]:
        raise ValueError("probs deve essere N x C con N = len(labels)")
    if y.size == 0:
        raise UndefinedMetricError("ECE non definita su un insieme vuoto")

    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == y).astype(np.float64)
    bins = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, int(n_bins) - 1)

    total = 0.0
    for b in range(int(n_bins)):
        in_bin = bins == b
        if not in_bin.any():
            continue
        total += in_bin.mean() * abs(correct[in_bin].mean() - conf[in_bin].mean())
    return float(total)


def brier(probs, labels) -> float:
    p = _as_numpy(probs)
    y = _as_numpy(labels).astype(np.int64).reshape(-1)
    if y.size == 0:
        raise UndefinedMetricError("Brier non definito su un insieme vuoto")
    one_hot = np.eye(p.shape[1])[y]
    return float(((p - one_hot) ** 2).sum(axis=1).mean())


def accuracy(probs, labels) -> float:
    p = _as_numpy(probs)
    y = _as_numpy(labels).astype(np.int64).reshape(-1)
    if y.size == 0:
        raise UndefinedMetricError("Accuracy non definita su un insieme vuoto")
    return float((p.argmax(axis=1) == y).mean())


@dataclass(frozen=True)
class UncertaintyEstimate:
    """Ingresso comune dei report: probabilità di classe e due punteggi (più alto = più incerto)."""

    name: str
    probs: torch.Tensor
    aleatoric: torch.Tensor
    epistemic: torch.Tensor

    @classmethod
    def from_scores(cls, name: str, probs: torch.Tensor, score: torch.Tensor) -> "UncertaintyEstimate":
        return cls(name=name, probs=probs, aleatoric=score, epistemic=score)


@dataclass(frozen=True)
class MetricsReport:
    acc: float | None = None
    brier: float | None = None
    ece: float | None = None
    mis_auroc: float | None = None
    mis_aupr: float | None = None
    ood_auroc: float | None = None
    ood_aupr: float | None = None
    n_test: int = 0
    n_ood: int = 0

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        updates = {k: v for k, v in asdict(other).items() if v is not None and k not in ("n_test", "n_ood")}
        return replace(self, **updates, n_test=max(self.n_test, other.n_test), n_ood=max(self.n_ood, other.n_ood))

    def to_dict(self) -> dict:
        return asdict(self)


def _id_test_nodes(split: SplitSpec, graph: Graph) -> torch.Tensor:
    test = split.test_idx
    ood = torch.tensor(split.ood_classes, dtype=torch.long)
    return test[~torch.isin(graph.labels[test], ood)]


def _id_report(estimate: UncertaintyEstimate, split: SplitSpec, graph: Graph, ece_bins: int) -> MetricsReport:
    id_test = _id_test_nodes(split, graph)
    if id_test.numel() == 0:
        raise UndefinedMetricError("Nessun nodo di test in-distribution")
    probs = estimate.probs[id_test]
    labels = graph.labels[id_test]
    return MetricsReport(
        acc=accuracy(probs, labels),
        brier=brier(probs, labels),
        ece=ece(probs, labels, ece_bins),
        n_test=int(split.test_idx.numel()),
    )


def detection_report(
    estimate: UncertaintyEstimate,
    split: SplitSpec,
    graph: Graph,
    mode: DetectionMode,
    *,
    ece_bins: int = 10,
) -> MetricsReport:
    """
    mis: nodi di test ID, score = incertezza aleatoria, positivo = predizione sbagliata.
    ood: tutti i nodi di test, score = incertezza epistemica, positivo = classe OOD.
    ACC, Brier ed ECE sono sempre calcolati sui nodi di test ID.
    """
    report = _id_report(estimate, split, graph, ece_bins)
    id_test = _id_test_nodes(split, graph)
    probs = estimate.probs[id_test]
    labels = graph.labels[id_test]

    if mode == "mis":
        wrong = (probs.argmax(dim=1) != labels).to(torch.float64)
        scores = estimate.aleatoric[id_test]
        return replace(report, mis_auroc=auroc(scores, wrong), mis_aupr=aupr(scores, wrong))

    if mode == "ood":
        if not split.ood_classes:
            raise UndefinedMetricError("Report OOD richiesto ma lo split non ha classi OOD")
        test = split.test_idx
        is_ood = torch.isin(graph.labels[test], torch.tensor(split.ood_classes, dtype=torch.long)).to(torch.float64)
        n_ood = int(is_ood.sum())
        if n_ood == 0:
            raise UndefinedMetricError("Nessun nodo OOD nel test set")
        scores = estimate.epistemic[test]
        return replace(report, ood_auroc=auroc(scores, is_ood), ood_aupr=aupr(scores, is_ood), n_ood=n_ood)

    raise ValueError(f"mode non supportato: {mode!r} (attesi mis | ood)")


def full_report(estimate: UncertaintyEstimate, split: SplitSpec, graph: Graph, *, ece_bins: int = 10) -> MetricsReport:
    """
    Report mis (+ ood se lo split ha classi OOD). Se sul test ID non ci sono errori (o sono tutti
    errori) mis_auroc/mis_aupr restano None con una nota a video; le metriche OOD vengono calcolate comunque.
    """
    try:
        report = detection_report(estimate, split, graph, "mis", ece_bins=ece_bins)
    except UndefinedMetricError as exc:
        report = _id_report(estimate, split, graph, ece_bins)
        print(f"Nota: [{estimate.name}] metriche mis non definite ({exc}); mis_auroc/mis_aupr lasciate vuote.")
    if split.ood_classes:
        report = report.merge(detection_report(estimate, split, graph, "ood", ece_bins=ece_bins))
    return report


def write_metrics_json(payload: Mapping, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def append_results_row(path: str | Path, row: Mapping) -> Path:
    """Aggiunge una riga a results.csv; se il file è nuovo scrive il commento di schema e l'header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    unknown = set(row) - set(RESULTS_COLUMNS)
    if unknown:
        raise ValueError(f"Colonne non previste in results.csv: {sorted(unknown)}")
    is_new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="", encoding="utf-8") as f:
        if is_new:
            f.write(RESULTS_SCHEMA + "\n")
        w = csv.DictWriter(f, fieldnames=RESULTS_COLUMNS)
        if is_new:
            w.writeheader()
        w.writerow({k: _fmt(row.get(k)) for k in RESULTS_COLUMNS})
    return path


def read_results(path: str | Path):
    pd = _require_pandas()
    return pd.read_csv(path, comment="#")
