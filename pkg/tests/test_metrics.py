import math

import numpy as np
import pytest
import torch

from dataset import Graph, SplitSpec
from diff import DTYPE
from metrics import (
    RESULTS_COLUMNS,
    RESULTS_SCHEMA,
    UncertaintyEstimate,
    UndefinedMetricError,
    accuracy,
    append_results_row,
    aupr,
    auroc,
    brier,
    detection_report,
    ece,
    full_report,
    read_results,
)


class TestAuroc:
    def test_perfect(self):
        assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_ties(self):
        assert auroc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5

    def test_four_points(self):
        assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_antisymmetric_and_rank_invariant(self):
        rng = np.random.default_rng(1)
        s = rng.normal(size=200)
        y = rng.random(200) < 0.4
        assert auroc(s, y) + auroc(-s, y) == pytest.approx(1.0, abs=1e-12)
        assert auroc(np.exp(s), y) == auroc(s, y)
        assert auroc(3.0 * s - 7.0, y) == auroc(s, y)

    def test_single_class(self):
        with pytest.raises(UndefinedMetricError):
            auroc([0.1, 0.2], [1, 1])


class TestAupr:
    def test_perfect(self):
        assert aupr([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_four_points(self):
        # ordine: 0.8 (+), 0.4 (-), 0.35 (+), 0.1 (-): 0.5 * 1 + 0.5 * 2/3
        assert aupr([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.5 + 1.0 / 3.0)

    def test_random_scores_match_positive_rate(self):
        rng = np.random.default_rng(0)
        labels = rng.random(20_000) < 0.3
        assert aupr(rng.random(20_000), labels) == pytest.approx(labels.mean(), abs=0.02)

    def test_no_positives(self):
        with pytest.raises(UndefinedMetricError):
            aupr([0.1, 0.2], [0, 0])


class TestCalibration:
    def test_ece_zero_when_confident_and_correct(self):
        assert ece(np.eye(3), [0, 1, 2]) == 0.0

    def test_ece_half_correct(self):
        assert ece(np.array([[1.0, 0.0], [1.0, 0.0]]), [0, 1]) == 0.5

    def test_ece_hand_binned(self):
        probs = np.array([[0.55, 0.45], [0.65, 0.35], [0.95, 0.05], [0.92, 0.08]])
        # bin 6: conf 0.55, acc 1; bin 7: conf 0.65, acc 0; bin 10: conf 0.935, acc 0.5
        expected = 0.25 * 0.45 + 0.25 * 0.65 + 0.5 * 0.435
        assert ece(probs, [0, 1, 0, 1]) == pytest.approx(expected)

    def test_ece_single_bin_is_accuracy_gap(self):
        rng = np.random.default_rng(2)
        probs = rng.dirichlet(np.ones(3), size=50)
        labels = rng.integers(0, 3, size=50)
        gap = abs(accuracy(probs, labels) - probs.max(axis=1).mean())
        assert ece(probs, labels, n_bins=1) == pytest.approx(gap, abs=1e-12)

    def test_ece_bins_validation(self):
        with pytest.raises(ValueError):
            ece(np.eye(2), [0, 1], n_bins=0)

    @pytest.mark.parametrize("num_classes, expected", [(2, 0.5), (4, 0.75)])
    def test_brier_uniform(self, num_classes, expected):
        assert brier(np.full((3, num_classes), 1.0 / num_classes), [0, 1, 0]) == pytest.approx(expected)

    def test_brier_one_hot(self):
        assert brier(np.eye(3), [0, 1, 2]) == 0.0

    def test_accuracy(self):
        assert accuracy(np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]]), [0, 1, 1]) == pytest.approx(2 / 3)


@pytest.fixture
def loc_fixture():
    labels = torch.tensor([0, 1, 0, 1, 2, 2, 0, 1])
    g = Graph.from_edges(torch.zeros(8, 1), torch.tensor([0]), torch.tensor([1]), labels, 3)
    split = SplitSpec(torch.tensor([0, 1]), torch.tensor([]).long(), torch.tensor([2, 3, 4, 5, 6, 7]), (2,))
    probs = torch.tensor(
        [[0.9, 0.1, 0.0], [0.1, 0.9, 0.0], [0.8, 0.2, 0.0], [0.6, 0.4, 0.0], [0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.3, 0.7, 0.0], [0.2, 0.8, 0.0]],
        dtype=DTYPE,
    )
    return g, split, probs


class TestReports:
    def test_oracle_scores(self, loc_fixture):
        g, split, probs = loc_fixture
        wrong = (probs.argmax(dim=1) != g.labels).to(DTYPE)
        is_ood = (g.labels == 2).to(DTYPE)
        est = UncertaintyEstimate("oracle", probs, aleatoric=wrong, epistemic=is_ood)
        report = full_report(est, split, g)
        assert report.mis_auroc == 1.0
        assert report.ood_auroc == 1.0
        assert report.n_test == 6 and report.n_ood == 2
        # test ID: nodi 2, 3, 6, 7 -> sbagliati 3 e 6
        assert report.acc == 0.5

    def test_constant_epistemic(self, loc_fixture):
        g, split, probs = loc_fixture
        est = UncertaintyEstimate.from_scores("const", probs, torch.ones(8, dtype=DTYPE))
        assert detection_report(est, split, g, "ood").ood_auroc == 0.5

    def test_ood_mode_needs_ood_classes(self, loc_fixture):
        g, split, probs = loc_fixture
        no_ood = SplitSpec(split.train_idx, split.val_idx, torch.tensor([2, 3, 6, 7]))
        est = UncertaintyEstimate.from_scores("x", probs, torch.zeros(8, dtype=DTYPE))
        with pytest.raises(UndefinedMetricError):
            detection_report(est, no_ood, g, "ood")
        assert full_report(est, no_ood, g).ood_auroc is None

    def test_all_correct_keeps_ood_metrics(self, loc_fixture, capsys):
        g, split, probs = loc_fixture
        perfect = torch.nn.functional.one_hot(g.labels, 3).to(DTYPE)
        est = UncertaintyEstimate("perfect", perfect, aleatoric=torch.zeros(8, dtype=DTYPE), epistemic=(g.labels == 2).to(DTYPE))
        with pytest.raises(UndefinedMetricError):
            detection_report(est, split, g, "mis")
        report = full_report(est, split, g)
        assert report.acc == 1.0
        assert report.mis_auroc is None and report.mis_aupr is None
        assert report.ood_auroc == 1.0
        assert "metriche mis non definite" in capsys.readouterr().out

    def test_no_id_test_nodes_still_raises(self, loc_fixture):
        g, split, probs = loc_fixture
        only_ood = SplitSpec(split.train_idx, split.val_idx, torch.tensor([4, 5]), (2,))
        est = UncertaintyEstimate.from_scores("x", probs, torch.zeros(8, dtype=DTYPE))
        with pytest.raises(UndefinedMetricError, match="in-distribution"):
            full_report(est, only_ood, g)


class TestResultsFile:
    def test_header_and_append(self, tmp_path):
        path = tmp_path / "results.csv"
        row = {"run_id": "abc", "seed": 0, "method": "epn", "propagation": "none", "mode": "mis", "acc": 0.5}
        append_results_row(path, row)
        append_results_row(path, {**row, "seed": 1})
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == RESULTS_SCHEMA
        assert lines[1] == ",".join(RESULTS_COLUMNS)
        assert len(lines) == 4
        frame = read_results(path)
        assert frame["seed"].tolist() == [0, 1]
        assert math.isnan(frame["ood_auroc"][0])

    def test_unknown_column(self, tmp_path):
        with pytest.raises(ValueError, match="Colonne"):
            append_results_row(tmp_path / "r.csv", {"foo": 1})
