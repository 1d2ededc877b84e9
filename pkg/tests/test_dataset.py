import numpy as np
import pytest
import torch

from dataset import (
    GaussianSpec,
    Graph,
    SplitSpec,
    generate_csbm_graph,
    load_graph,
    load_split,
    make_loc_split,
    normalize,
    sample_gaussian_world,
    save_graph,
    save_split,
    select_ood_classes,
)
from diff import DTYPE


def _write_dataset(root, edges: str, features: str, labels: str, meta: str = None):
    root.mkdir(parents=True, exist_ok=True)
    (root / "edges.tsv").write_text(edges, encoding="utf-8")
    (root / "features.csv").write_text(features, encoding="utf-8")
    (root / "labels.csv").write_text(labels, encoding="utf-8")
    n = len(labels.strip().splitlines())
    (root / "meta.json").write_text(meta or f'{{"num_nodes": {n}, "num_features": 1, "num_classes": 2}}', encoding="utf-8")
    return root


class TestGraph:
    def test_two_node_fixture(self, path2):
        assert path2.edge_index.tolist() == [[0, 1], [1, 0]]
        assert path2.num_edges == 1

    def test_rejects_asymmetric_edges(self):
        with pytest.raises(ValueError, match="simmetrico"):
            Graph(torch.zeros(2, 1, dtype=DTYPE), torch.tensor([[0], [1]]), torch.tensor([0, 1]), 2)

    def test_rejects_label_out_of_range(self):
        with pytest.raises(ValueError, match="labels"):
            Graph.from_edges(torch.zeros(2, 1), torch.tensor([0]), torch.tensor([1]), torch.tensor([0, 5]), 2)


class TestNormalize:
    def test_sym_selfloop_path(self, path2):
        torch.testing.assert_close(normalize(path2, "sym_selfloop").dense(), torch.full((2, 2), 0.5, dtype=DTYPE))

    def test_rw_noselfloop_path(self, path2):
        torch.testing.assert_close(normalize(path2, "rw_noselfloop").dense(), torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=DTYPE))

    def test_isolated_node(self):
        g = Graph.from_edges(torch.zeros(1, 1), torch.empty(0), torch.empty(0), torch.tensor([0]), 1)
        assert normalize(g, "rw_noselfloop").dense().tolist() == [[0.0]]
        assert normalize(g, "sym_selfloop").dense().tolist() == [[1.0]]

    def test_sym_selfloop_spectral_radius(self, small_csbm):
        eig = torch.linalg.eigvalsh(normalize(small_csbm, "sym_selfloop").dense())
        assert float(eig.abs().max()) <= 1.0 + 1e-12
        assert float(eig.max()) == pytest.approx(1.0, abs=1e-12)

    def test_unknown_kind(self, path2):
        with pytest.raises(ValueError, match="kind"):
            normalize(path2, "lap")


class TestSplit:
    def test_loc_split_excludes_ood_from_training(self, small_csbm):
        split = make_loc_split(small_csbm, (3,), per_class_train=20, seed=1)
        train_labels = small_csbm.labels[split.train_idx]
        assert split.train_idx.numel() == 60
        assert not bool((train_labels == 3).any())
        assert not bool((small_csbm.labels[split.val_idx] == 3).any())
        assert bool((small_csbm.labels[split.test_idx] == 3).any())

    def test_without_ood(self, small_csbm):
        split = make_loc_split(small_csbm, (), per_class_train=5, seed=0)
        assert split.ood_classes == ()
        split.check_against(small_csbm)

    def test_deterministic(self, small_csbm):
        a = make_loc_split(small_csbm, (3,), seed=7)
        b = make_loc_split(small_csbm, (3,), seed=7)
        assert a.to_dict() == b.to_dict()

    def test_too_few_nodes_per_class(self, small_csbm):
        with pytest.raises(ValueError, match="per_class_train"):
            make_loc_split(small_csbm, (3,), per_class_train=1000)

    def test_overlap_rejected(self):
        with pytest.raises(ValueError, match="disgiunti"):
            SplitSpec(torch.tensor([0, 1]), torch.tensor([1]), torch.tensor([2]))

    def test_save_and_load(self, small_csbm, tmp_path):
        split = make_loc_split(small_csbm, (3,), seed=2)
        assert load_split(save_split(split, tmp_path / "splits.json")).to_dict() == split.to_dict()

    @pytest.mark.parametrize("setting, expected", [("last", (3, 4)), ("first", (0, 1))])
    def test_select_ood_classes(self, setting, expected):
        assert select_ood_classes(5, 2, setting) == expected

    def test_select_random_is_seeded(self):
        assert select_ood_classes(7, 3, "random", seed=4) == select_ood_classes(7, 3, "random", seed=4)


class TestDiskFormat:
    def test_duplicate_edges_and_unlabeled_nodes(self, tmp_path):
        root = _write_dataset(tmp_path / "g", "0\t1\n1\t0\n", "0.5\n-0.5\n2.0\n", "0\n1\n-1\n")
        g = load_graph(root)
        assert g.num_edges == 1
        assert g.labels.tolist() == [0, 1, -1]
        assert g.labeled_mask().tolist() == [True, True, False]

    def test_self_loops_dropped_with_note(self, tmp_path, capsys):
        root = _write_dataset(tmp_path / "g", "0\t0\n0\t1\n", "1\n2\n", "0\n1\n")
        g = load_graph(root)
        assert g.num_edges == 1
        assert "scartati 1 self-loop" in capsys.readouterr().out

    def test_non_numeric_value(self, tmp_path):
        root = _write_dataset(tmp_path / "g", "0\t1\n", "1\nabc\n", "0\n1\n")
        with pytest.raises(ValueError, match="riga 2, colonna 1"):
            load_graph(root)

    def test_edge_out_of_range(self, tmp_path):
        root = _write_dataset(tmp_path / "g", "0\t7\n", "1\n2\n", "0\n1\n")
        with pytest.raises(ValueError, match="fuori range"):
            load_graph(root)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_graph(tmp_path / "nope")

    def test_save_then_load_keeps_graph(self, small_csbm, tmp_path):
        g = load_graph(save_graph(small_csbm, tmp_path / "csbm"))
        assert torch.equal(g.edge_index, small_csbm.edge_index)
        assert torch.equal(g.labels, small_csbm.labels)
        torch.testing.assert_close(g.features, small_csbm.features, rtol=0, atol=0)


class TestGaussianWorld:
    def test_class_means(self):
        spec = GaussianSpec.isotropic(2, 3.0)
        z, y = sample_gaussian_world(spec, 100_000, seed=0)
        torch.testing.assert_close(z[y == 1].mean(dim=0), spec.mu, rtol=0, atol=0.02)
        torch.testing.assert_close(z[y == -1].mean(dim=0), -spec.mu, rtol=0, atol=0.02)
        torch.testing.assert_close(z[y == 0].mean(dim=0), torch.zeros(2, dtype=DTYPE), rtol=0, atol=0.02)

    def test_seeded(self):
        spec = GaussianSpec.isotropic(3, 1.0)
        assert torch.equal(sample_gaussian_world(spec, 10, seed=5)[0], sample_gaussian_world(spec, 10, seed=5)[0])

    def test_not_positive_definite(self):
        with pytest.raises(ValueError, match="Cholesky"):
            GaussianSpec(2, torch.zeros(2, dtype=DTYPE), torch.tensor([[1.0, 2.0], [2.0, 1.0]], dtype=DTYPE))

    def test_snr(self):
        assert GaussianSpec.isotropic(2, 6.0).snr() == pytest.approx(36.0)


class TestCsbm:
    def test_edgeless(self):
        g = generate_csbm_graph(GaussianSpec.isotropic(2, 1.0), 20, 0.0, 0.0, seed=0)
        assert g.num_edges == 0
        assert g.num_classes == 3
        assert g.labels.tolist().count(2) == 20

    def test_disjoint_cliques(self, two_cliques):
        src, dst = two_cliques.edge_index
        assert bool((two_cliques.labels[src] == two_cliques.labels[dst]).all())
        assert two_cliques.num_edges == 2 * (30 * 29 // 2)

    def test_mean_intra_class_degree(self):
        g = generate_csbm_graph(GaussianSpec.isotropic(2, 1.0), 100, 0.05, 0.005, ood_classes=(), seed=1)
        src, dst = g.edge_index
        intra = (g.labels[src] == g.labels[dst]).sum().item() / g.num_nodes
        assert abs(intra - 0.05 * 99) < 2.0

    def test_multiclass_means_and_ood_block(self, small_csbm):
        assert small_csbm.num_classes == 4
        ood_mean = small_csbm.features[small_csbm.labels == 3].mean(dim=0)
        assert float(torch.linalg.vector_norm(ood_mean)) < 1.0

    def test_rejects_p_out_above_p_in(self):
        with pytest.raises(ValueError):
            generate_csbm_graph(GaussianSpec.isotropic(2, 1.0), 10, 0.1, 0.2)
