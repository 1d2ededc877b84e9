from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from pathlib import Path
from typing import Sequence

import torch

import theory
from config import ConfigError, DatasetConfig, RunConfig, load_config
from dataset import (
    GaussianSpec,
    Graph,
    SplitSpec,
    generate_csbm_graph,
    load_graph,
    load_split,
    make_loc_split,
    save_graph,
    save_split,
    select_ood_classes,
)
from diff import save_params, seed_everything
from edl import DirichletOpinion, save_opinions, uncertainties
from metrics import MetricsReport, UncertaintyEstimate, append_results_row, full_report, write_metrics_json
from model.EGNN import EGNN, egnn_opinion, train_egnn
from model.EPN import EPN, LossWeights, fit_probe, probe_frame, probe_outputs, probe_uncertainties
from model.GCN import GCN, backbone_features, baseline_scores, gcn_forward, train_backbone
from propagation import propagate

EPN_VARIANTS = ("epn", "epn-ice", "epn-pcl", "epn-reg")
BASELINES = ("entropy", "max-score", "energy", "gnnsafe")
ALL_METHODS = EPN_VARIANTS + ("egnn",) + BASELINES


# ---------------------------------------------------------------------------
# dati e manifest
# ---------------------------------------------------------------------------


def build_graph(cfg: DatasetConfig, seed: int) -> Graph:
    if cfg.path is not None:
        return load_graph(cfg.path)
    spec = GaussianSpec.isotropic(cfg.dim, cfg.mu_norm)
    return generate_csbm_graph(
        spec,
        cfg.n_per_class,
        cfg.p_in,
        cfg.p_out,
        ood_classes=None if cfg.ood_size > 0 else (),
        seed=seed,
        num_id_classes=cfg.num_id_classes,
        ood_size=cfg.ood_size if cfg.ood_size > 0 else None,
    )


def build_split(cfg: RunConfig, graph: Graph) -> SplitSpec:
    s = cfg.split
    split_seed = cfg.split_seed()
    ood = s.ood_classes if s.ood_classes is not None else select_ood_classes(graph.num_classes, s.n_ood, s.ood_setting, split_seed)
    return make_loc_split(
        graph,
        ood,
        per_class_train=s.per_class_train,
        val_fraction=s.val_fraction,
        test_fraction=s.test_fraction,
        seed=split_seed,
    )


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(cfg.canonical_json().encode("utf-8")).hexdigest()


def write_manifest(cfg: RunConfig, out_dir: Path, command: str, outputs: Sequence[str]) -> Path:
    import networkx
    import numpy
    import pandas
    import pydantic

    manifest = {
        "command": command,
        "config": json.loads(cfg.canonical_json()),
        "config_sha256": config_hash(cfg),
        "seed": cfg.seed,
        "outputs": sorted(outputs),
        "versions": {
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": numpy.__version__,
            "pandas": pandas.__version__,
            "networkx": networkx.__version__,
            "pydantic": pydantic.__version__,
        },
    }
    return write_metrics_json(manifest, out_dir / "manifest.json")


def _report_line(tag: str, r: MetricsReport) -> str:
    parts = [f"acc={r.acc:.4f}", f"brier={r.brier:.4f}", f"ece={r.ece:.4f}"]
    parts.append("mis_auroc=n/d" if r.mis_auroc is None else f"mis_auroc={r.mis_auroc:.4f}")
    if r.ood_auroc is not None:
        parts.append(f"ood_auroc={r.ood_auroc:.4f} | ood_aupr={r.ood_aupr:.4f}")
    return f"{tag} | " + " | ".join(parts)


# ---------------------------------------------------------------------------
# valutazione
# ---------------------------------------------------------------------------


def variant_weights(method: str, cfg: RunConfig) -> LossWeights:
    l1, l2 = cfg.probe.lambda1, cfg.probe.lambda2
    return {
        "epn": LossWeights(0.0, 0.0),
        "epn-ice": LossWeights(l1, 0.0),
        "epn-pcl": LossWeights(0.0, l2),
        "epn-reg": LossWeights(l1, l2),
    }[method]


def opinion_estimate(name: str, op: DirichletOpinion, offset: float) -> UncertaintyEstimate:
    scores = uncertainties(op, offset=offset)
    return UncertaintyEstimate(name=name, probs=op.expected_probs, aleatoric=scores.aleatoric, epistemic=scores.epistemic)


def evaluate_methods(
    cfg: RunConfig,
    graph: Graph,
    split: SplitSpec,
    backbone: GCN,
    *,
    methods: Sequence[str],
    prop_modes: Sequence[str],
    seed: int,
    probes: dict[str, EPN] | None = None,
    egnn: EGNN | None = None,
) -> list[tuple[str, str, MetricsReport]]:
    """Un MetricsReport per (metodo, propagazione). Le sonde mancanti vengono addestrate sul backbone congelato."""
    unknown = [m for m in methods if m not in ALL_METHODS]
    if unknown:
        raise ValueError(f"Metodi non supportati: {unknown} (disponibili: {list(ALL_METHODS)})")

    probes = dict(probes or {})
    rows: list[tuple[str, str, MetricsReport]] = []
    bins = cfg.eval.ece_bins

    def with_propagation(method: str, op: DirichletOpinion, offset: float) -> None:
        for mode in prop_modes:
            pcfg = cfg.propagation.model_copy(update={"mode": mode})
            est = opinion_estimate(method, propagate(op, graph, pcfg), offset)
            rows.append((method, mode, full_report(est, split, graph, ece_bins=bins)))

    for method in methods:
        if method in EPN_VARIANTS:
            probe = probes.get(method)
            if probe is None:
                feats, probs = backbone_features(backbone, graph, cfg.probe.feature_layer)
                probe = fit_probe(feats, probs, graph.labels, split, variant_weights(method, cfg), cfg.probe).model
                probes[method] = probe
            out, _ = probe_outputs(probe, backbone, graph)
            with_propagation(method, out.opinion(), cfg.probe.stability_offset)
        elif method == "egnn":
            model = egnn if egnn is not None else train_egnn(graph, split, cfg.egnn, seed=seed).model
            with_propagation(method, egnn_opinion(model, graph), 0.0)

    base = [m for m in methods if m in BASELINES]
    if base:
        with torch.no_grad():
            out = gcn_forward(backbone, graph, False)
        scores = baseline_scores(
            out.logits,
            out.probs,
            graph,
            temperature=cfg.eval.energy_temperature,
            gamma=cfg.eval.gnnsafe_gamma,
            k=cfg.eval.gnnsafe_k,
        )
        by_name = {
            "entropy": scores.entropy,
            "max-score": scores.max_score,
            "energy": scores.energy,
            "gnnsafe": scores.propagated_energy,
        }
        for method in base:
            est = UncertaintyEstimate.from_scores(method, out.probs, by_name[method])
            rows.append((method, "none", full_report(est, split, graph, ece_bins=bins)))
    return rows


def _results_row(run_id: str, seed: int, method: str, prop: str, split: SplitSpec, r: MetricsReport) -> dict:
    return {
        "run_id": run_id,
        "seed": seed,
        "method": method,
        "propagation": prop,
        "mode": "mis+ood" if split.ood_classes else "mis",
        **r.to_dict(),
    }


# ---------------------------------------------------------------------------
# comandi
# ---------------------------------------------------------------------------


def cmd_gen_synthetic(args, cfg: RunConfig) -> int:
    if cfg.dataset.path is not None:
        raise ConfigError("gen-synthetic richiede un dataset sintetico (dataset.path non deve essere impostato)")
    graph = build_graph(cfg.dataset, cfg.seed)
    out = Path(args.out) if args.out else cfg.output_dir / "dataset"
    save_graph(graph, out)
    print(f"OK: grafo sintetico salvato in {out} ({graph.num_nodes} nodi, {graph.num_edges} archi, {graph.num_classes} classi)")
    return 0


def _sibling_splits(checkpoint: Path) -> Path | None:
    # splits.json scritto da train-backbone accanto al checkpoint
    candidate = Path(checkpoint).parent / "splits.json"
    return candidate if candidate.exists() else None


def _load_inputs(cfg: RunConfig, splits_path: Path | None) -> tuple[Graph, SplitSpec]:
    graph = build_graph(cfg.dataset, cfg.seed)
    if splits_path is not None:
        split = load_split(splits_path)
        split.check_against(graph)
    else:
        split = build_split(cfg, graph)
    print(
        f"Grafo: {graph.num_nodes} nodi | {graph.num_edges} archi | {graph.num_classes} classi | "
        f"train={split.train_idx.numel()} val={split.val_idx.numel()} test={split.test_idx.numel()} "
        f"ood_classes={list(split.ood_classes)}"
    )
    return graph, split


def cmd_train_backbone(args, cfg: RunConfig) -> int:
    seed_everything(cfg.seed)
    graph, split = _load_inputs(cfg, args.splits)
    out_dir = cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    result = train_backbone(graph, split, cfg.backbone, seed=cfg.seed)
    model: GCN = result.model
    with torch.no_grad():
        out = gcn_forward(model, graph, False)
    report = full_report(UncertaintyEstimate.from_scores("gcn", out.probs, 1.0 - out.probs.max(dim=1).values), split, graph, ece_bins=cfg.eval.ece_bins)

    save_params(model, out_dir / "backbone.json", {**model.meta(), "best_epoch": result.best_epoch})
    save_split(split, out_dir / "splits.json")
    metrics = {
        "method": "gcn",
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "epochs_run": result.epochs_run,
        "acc": report.acc,
        "brier": report.brier,
        "ece": report.ece,
        "n_test": report.n_test,
    }
    write_metrics_json(metrics, out_dir / "metrics.json")
    write_manifest(cfg, out_dir, "train-backbone", ["backbone.json", "splits.json", "metrics.json"])
    print(_report_line("GCN test", report))
    print(f"OK: backbone (best epoch {result.best_epoch}, val_loss={result.best_val_loss:.5f}) salvato in {out_dir / 'backbone.json'}")
    return 0


def cmd_train_probe(args, cfg: RunConfig) -> int:
    seed_everything(cfg.seed)
    splits = args.splits or _sibling_splits(args.backbone)
    graph, split = _load_inputs(cfg, splits)
    backbone = GCN.load(args.backbone, graph)
    out_dir = cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    before = {k: v.clone() for k, v in backbone.state_dict().items()}
    layer = cfg.probe.feature_layer
    feats, probs = backbone_features(backbone, graph, layer)
    result = fit_probe(feats, probs, graph.labels, split, None, cfg.probe)
    if any(not torch.equal(before[k], v) for k, v in backbone.state_dict().items()):
        raise RuntimeError("Il backbone è stato modificato durante il training della sonda.")
    probe: EPN = result.model

    out, _ = probe_outputs(probe, backbone, graph)
    scores = probe_uncertainties(out, offset=cfg.probe.stability_offset)
    report = full_report(
        UncertaintyEstimate(name="epn", probs=probs, aleatoric=scores.aleatoric, epistemic=scores.epistemic),
        split,
        graph,
        ece_bins=cfg.eval.ece_bins,
    )

    save_params(probe, out_dir / "probe.json", {**probe.meta(), "best_epoch": result.best_epoch})
    probe_frame(out, scores).to_csv(out_dir / "uncertainties.csv", index=False, float_format="%.17g")
    write_metrics_json({"method": "epn", "best_epoch": result.best_epoch, **report.to_dict()}, out_dir / "metrics.json")
    write_manifest(cfg, out_dir, "train-probe", ["probe.json", "uncertainties.csv", "metrics.json"])
    print(_report_line("EPN test", report))
    print(f"OK: sonda salvata in {out_dir / 'probe.json'} (incertezze in {out_dir / 'uncertainties.csv'})")
    return 0


def cmd_train_egnn(args, cfg: RunConfig) -> int:
    seed_everything(cfg.seed)
    graph, split = _load_inputs(cfg, args.splits)
    out_dir = cfg.output_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    result = train_egnn(graph, split, cfg.egnn, seed=cfg.seed)
    model: EGNN = result.model
    op = egnn_opinion(model, graph)
    report = full_report(opinion_estimate("egnn", op, 0.0), split, graph, ece_bins=cfg.eval.ece_bins)

    save_params(model, out_dir / "egnn.json", {**model.meta(), "best_epoch": result.best_epoch})
    save_opinions(op, out_dir / "opinions.csv")
    write_metrics_json({"method": "egnn", "best_epoch": result.best_epoch, **report.to_dict()}, out_dir / "metrics.json")
    write_manifest(cfg, out_dir, "train-egnn", ["egnn.json", "opinions.csv", "metrics.json"])
    print(_report_line("EGNN test", report))
    print(f"OK: EGNN salvato in {out_dir / 'egnn.json'}")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    seed_everything(cfg.seed)
    splits = args.splits or _sibling_splits(args.backbone)
    graph, split = _load_inputs(cfg, splits)
    backbone = GCN.load(args.backbone, graph)
    probes = {"epn-reg": EPN.load(args.probe, backbone)} if args.probe else None
    egnn = EGNN.load(args.egnn, graph) if args.egnn else None
    methods = tuple(args.methods) if args.methods else cfg.eval.methods
    modes = tuple(args.propagation) if args.propagation else cfg.eval.propagation_modes

    rows = evaluate_methods(cfg, graph, split, backbone, methods=methods, prop_modes=modes, seed=cfg.seed, probes=probes, egnn=egnn)
    results = Path(args.results) if args.results else cfg.output_dir / "results.csv"
    run_id = config_hash(cfg)[:12]
    for method, prop, report in rows:
        append_results_row(results, _results_row(run_id, cfg.seed, method, prop, split, report))
        print(_report_line(f"{method:>9s} [{prop}]", report))
    print(f"OK: {len(rows)} righe aggiunte a {results}")
    return 0


def parse_seeds(value: str) -> list[int]:
    """'0..4' -> [0, 1, 2, 3, 4]; '1,3,5' -> [1, 3, 5]."""
    value = value.strip()
    if ".." in value:
        lo, hi = value.split("..", 1)
        seeds = list(range(int(lo), int(hi) + 1))
    else:
        seeds = [int(p) for p in value.split(",") if p.strip()]
    if not seeds:
        raise ValueError(f"--seeds non valido: {value!r}")
    return seeds


def cmd_run(args, cfg: RunConfig) -> int:
    """Pipeline completa in memoria per ogni seed: backbone, sonde, EGNN, baseline, results.csv."""
    results = Path(args.results) if args.results else cfg.output_dir / "results.csv"
    methods = tuple(args.methods) if args.methods else cfg.eval.methods
    modes = tuple(args.propagation) if args.propagation else cfg.eval.propagation_modes
    run_id = config_hash(cfg)[:12]

    for seed in parse_seeds(args.seeds):
        seed_everything(seed)
        seed_cfg = cfg.model_copy(update={"seed": seed})
        graph = build_graph(seed_cfg.dataset, seed)
        split = build_split(seed_cfg, graph)
        fit = train_backbone(graph, split, seed_cfg.backbone, seed=seed)
        print(f"seed {seed} | backbone best epoch {fit.best_epoch} | {fit.seconds:.2f}s")
        rows = evaluate_methods(seed_cfg, graph, split, fit.model, methods=methods, prop_modes=modes, seed=seed)
        for method, prop, report in rows:
            append_results_row(results, _results_row(run_id, seed, method, prop, split, report))
            print(_report_line(f"seed {seed} {method:>9s} [{prop}]", report))
    print(f"OK: risultati aggiunti a {results}")
    return 0


def cmd_verify_theory(args, cfg: RunConfig) -> int:
    reports = theory.run_all(
        dim=int(args.dim),
        mu_norm=float(args.mu_norm),
        n_samples=int(args.n_samples),
        loss_samples=int(args.loss_samples),
        loss_mu_norm=float(args.loss_mu_norm),
        seed=int(args.seed),
    )
    out = Path(args.out)
    theory.write_report(reports, out)
    for report in reports:
        for check in report.checks:
            status = "OK " if check.passed else "KO "
            print(f"{status} {report.name}.{check.name} | value={check.value} | threshold={check.threshold} {check.note}".rstrip())
    passed = all(r.passed for r in reports)
    print(f"{'OK' if passed else 'Errore'}: report teorico salvato in {out}")
    return 0 if passed else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="RunConfig JSON (default: valori di default).")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="a.b.c=VALORE", help="Override di un campo della config.")
    p.add_argument("--splits", type=Path, default=None, help="splits.json da riusare (default: split rigenerato dal seed).")


def build_arg_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description="Evidential Probe Network su GCN: training, propagazione, valutazione OOD.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="Genera un grafo CSBM e lo salva nel formato su disco.")
    _add_config_args(g)
    g.add_argument("--out", type=Path, default=None)
    g.set_defaults(handler=cmd_gen_synthetic)

    b = sub.add_parser("train-backbone", help="Addestra il GCN e salva checkpoint, split e metriche.")
    _add_config_args(b)
    b.set_defaults(handler=cmd_train_backbone)

    pr = sub.add_parser("train-probe", help="Addestra la sonda EPN sopra un backbone congelato.")
    _add_config_args(pr)
    pr.add_argument("--backbone", type=Path, required=True)
    pr.set_defaults(handler=cmd_train_probe)

    e = sub.add_parser("train-egnn", help="Addestra il GCN evidenziale (EGNN).")
    _add_config_args(e)
    e.set_defaults(handler=cmd_train_egnn)

    ev = sub.add_parser("evaluate", help="Valuta metodi e propagazioni, aggiunge righe a results.csv.")
    _add_config_args(ev)
    ev.add_argument("--backbone", type=Path, required=True)
    ev.add_argument("--probe", type=Path, default=None, help="Checkpoint EPN usato per epn-reg.")
    ev.add_argument("--egnn", type=Path, default=None)
    ev.add_argument("--methods", nargs="+", default=None, choices=list(ALL_METHODS))
    ev.add_argument("--propagation", nargs="+", default=None, choices=["none", "vacuity", "evidence", "both"])
    ev.add_argument("--results", type=Path, default=None)
    ev.set_defaults(handler=cmd_evaluate)

    r = sub.add_parser("run", help="Pipeline completa su più seed.")
    _add_config_args(r)
    r.add_argument("--seeds", type=str, default="0..4", help="Es: 0..4 oppure 1,3,5")
    r.add_argument("--methods", nargs="+", default=None, choices=list(ALL_METHODS))
    r.add_argument("--propagation", nargs="+", default=None, choices=["none", "vacuity", "evidence", "both"])
    r.add_argument("--results", type=Path, default=None)
    r.set_defaults(handler=cmd_run)

    t = sub.add_parser("verify-theory", help="Verifiche in forma chiusa e Monte Carlo nel mondo gaussiano.")
    t.add_argument("--dim", type=int, default=2)
    t.add_argument("--mu-norm", type=float, default=6.0)
    t.add_argument("--n-samples", type=int, default=100_000)
    t.add_argument("--loss-samples", type=int, default=10_000)
    t.add_argument("--loss-mu-norm", type=float, default=1.0)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", type=Path, default=Path("outputs/theory_report.json"))
    t.set_defaults(handler=cmd_verify_theory)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides) if hasattr(args, "overrides") else RunConfig()
        return int(args.handler(args, cfg))
    except (ValueError, FileNotFoundError) as exc:
        # ConfigError, UndefinedMetricError e CheckpointMismatchError sono ValueError
        print(f"Errore: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
