import json

import pytest

import main
from config import build_config
from metrics import read_results

TINY = [
    "dataset.dim=4",
    "dataset.n_per_class=30",
    "dataset.ood_size=30",
    "dataset.p_in=0.2",
    "dataset.p_out=0.01",
    "split.per_class_train=5",
    "backbone.max_epochs=5",
    "backbone.hidden_dim=8",
    "probe.max_epochs=5",
    "egnn.max_epochs=5",
    "egnn.hidden_dim=8",
]


def _args(out_dir, *extra):
    args = []
    for item in TINY + [f"output_dir={out_dir}"]:
        args += ["--set", item]
    return args + list(extra)


@pytest.fixture
def trained(tmp_path):
    out = tmp_path / "run"
    assert main.main(["train-backbone", *_args(out)]) == 0
    return out


class TestCli:
    def test_gen_synthetic(self, tmp_path):
        assert main.main(["gen-synthetic", *_args(tmp_path), "--out", str(tmp_path / "data")]) == 0
        meta = json.loads((tmp_path / "data" / "meta.json").read_text(encoding="utf-8"))
        assert meta == {"num_classes": 4, "num_features": 4, "num_nodes": 120}

    def test_train_backbone_outputs(self, trained):
        for name in ("backbone.json", "splits.json", "metrics.json", "manifest.json"):
            assert (trained / name).exists()
        manifest = json.loads((trained / "manifest.json").read_text(encoding="utf-8"))
        assert len(manifest["config_sha256"]) == 64
        assert "torch" in manifest["versions"]

    def test_train_backbone_is_deterministic(self, tmp_path):
        out = tmp_path / "same"
        main.main(["train-backbone", *_args(out)])
        first = {p.name: p.read_bytes() for p in out.iterdir()}
        main.main(["train-backbone", *_args(out)])
        assert {p.name: p.read_bytes() for p in out.iterdir()} == first

    def test_train_probe(self, trained):
        assert main.main(["train-probe", *_args(trained), "--backbone", str(trained / "backbone.json")]) == 0
        header = (trained / "uncertainties.csv").read_text(encoding="utf-8").splitlines()[0]
        assert header.startswith("node_id,e_total,u_alea,u_epi")
        assert json.loads((trained / "metrics.json").read_text(encoding="utf-8"))["method"] == "epn"

    def test_evaluate_appends_rows(self, trained, tmp_path):
        backbone = str(trained / "backbone.json")
        egnn_dir = tmp_path / "egnn"
        assert main.main(["train-egnn", *_args(egnn_dir)]) == 0
        results = tmp_path / "results.csv"
        code = main.main(
            [
                "evaluate",
                *_args(trained),
                "--backbone",
                backbone,
                "--egnn",
                str(egnn_dir / "egnn.json"),
                "--methods",
                "epn",
                "egnn",
                "gnnsafe",
                "--propagation",
                "none",
                "both",
                "--results",
                str(results),
            ]
        )
        assert code == 0
        frame = read_results(results)
        assert list(zip(frame["method"], frame["propagation"])) == [
            ("epn", "none"),
            ("epn", "both"),
            ("egnn", "none"),
            ("egnn", "both"),
            ("gnnsafe", "none"),
        ]
        assert (frame["mode"] == "mis+ood").all()
        assert frame["ood_auroc"].between(0.0, 1.0).all()

    def test_run_multiple_seeds(self, tmp_path):
        results = tmp_path / "results.csv"
        code = main.main(["run", *_args(tmp_path), "--seeds", "0..1", "--methods", "epn-reg", "entropy", "--results", str(results)])
        assert code == 0
        assert read_results(results)["seed"].tolist() == [0, 0, 1, 1]

    def test_run_with_error_free_backbone(self, tmp_path, capsys):
        # cricche disgiunte e medie lontanissime: nessun errore sul test ID
        easy = ["dataset.mu_norm=30", "dataset.p_out=0", "backbone.max_epochs=300", "backbone.lr=0.01"]
        extra = [a for item in easy for a in ("--set", item)]
        results = tmp_path / "results.csv"
        code = main.main(["run", *_args(tmp_path), *extra, "--seeds", "0", "--methods", "epn-reg", "entropy", "--results", str(results)])
        assert code == 0
        frame = read_results(results)
        assert frame["method"].tolist() == ["epn-reg", "entropy"]
        assert (frame["acc"] == 1.0).all()
        assert frame["mis_auroc"].isna().all() and frame["mis_aupr"].isna().all()
        assert frame["ood_auroc"].between(0.0, 1.0).all()
        assert "metriche mis non definite" in capsys.readouterr().out

    def test_verify_theory(self, tmp_path):
        out = tmp_path / "theory.json"
        code = main.main(["verify-theory", "--n-samples", "5000", "--loss-samples", "1000", "--out", str(out)])
        assert code == 0
        assert json.loads(out.read_text(encoding="utf-8"))["passed"] is True


class TestCliErrors:
    def test_bad_config(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text("{ not json", encoding="utf-8")
        assert main.main(["train-backbone", "--config", str(cfg)]) == 2
        assert capsys.readouterr().err.startswith("Errore:")

    def test_missing_backbone(self, tmp_path, capsys):
        code = main.main(["train-probe", *_args(tmp_path), "--backbone", str(tmp_path / "nope.json")])
        assert code == 2
        assert "Checkpoint non trovato" in capsys.readouterr().err

    def test_backbone_dataset_mismatch(self, trained, capsys):
        code = main.main(["train-probe", *_args(trained, "--set", "dataset.dim=6"), "--backbone", str(trained / "backbone.json")])
        assert code == 2
        assert "checkpoint per input_dim" in capsys.readouterr().err

    def test_test_set_without_ood_nodes(self, trained, tmp_path, capsys):
        cfg = build_config({}, TINY)
        graph = main.build_graph(cfg.dataset, cfg.seed)
        payload = json.loads((trained / "splits.json").read_text(encoding="utf-8"))
        assert payload["ood_classes"]
        payload["test_idx"] = [i for i in payload["test_idx"] if int(graph.labels[i]) not in payload["ood_classes"]]
        splits = tmp_path / "id_only.json"
        splits.write_text(json.dumps(payload), encoding="utf-8")
        args = ["evaluate", *_args(trained), "--backbone", str(trained / "backbone.json"), "--splits", str(splits), "--methods", "entropy"]
        assert main.main(args) == 2
        assert "Nessun nodo OOD" in capsys.readouterr().err

    def test_parse_seeds(self):
        assert main.parse_seeds("0..3") == [0, 1, 2, 3]
        assert main.parse_seeds("2,5") == [2, 5]
