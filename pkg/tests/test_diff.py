import json
import math

import pytest
import torch
import torch.nn as nn

import diff
from diff import DTYPE, CheckpointMismatchError, EarlyStopper, check_gradients, load_params, save_params


class _Scalar(nn.Module):
    def __init__(self, value: float = 1.0):
        super().__init__()
        self.theta = nn.Parameter(torch.tensor([value], dtype=DTYPE))


class TestOps:
    def test_relu_backward_at_negative_input(self):
        x = torch.tensor([-1.0], dtype=DTYPE, requires_grad=True)
        diff.relu(x).sum().backward()
        assert float(x.grad) == 0.0

    def test_softplus_zero(self):
        assert float(diff.softplus(torch.zeros(1, dtype=DTYPE))) == pytest.approx(math.log(2.0), abs=1e-15)

    def test_row_softmax_uniform(self):
        torch.testing.assert_close(diff.row_softmax(torch.zeros(1, 2, dtype=DTYPE)), torch.full((1, 2), 0.5, dtype=DTYPE))

    def test_dense_matmul_shape_mismatch(self):
        with pytest.raises(ValueError, match="incompatibili"):
            diff.dense_matmul(torch.zeros(2, 3, dtype=DTYPE), torch.zeros(2, 3, dtype=DTYPE))

    def test_sparse_matmul_vector(self, path2):
        out = diff.sparse_dense_matmul(path2.adjacency(), torch.tensor([4.0, 2.0], dtype=DTYPE))
        torch.testing.assert_close(out, torch.tensor([2.0, 4.0], dtype=DTYPE))

    def test_dropout_identity_in_eval(self):
        x = torch.randn(5, 3, dtype=DTYPE)
        assert torch.equal(diff.dropout(x, 0.5, train=False), x)

    def test_dropout_scales_kept_units(self):
        x = torch.ones(2000, dtype=DTYPE)
        out = diff.dropout(x, 0.5, train=True, generator=diff.make_generator(0))
        assert set(out.unique().tolist()) <= {0.0, 2.0}


class TestAdam:
    def test_first_step_moves_by_lr(self):
        m = _Scalar(1.0)
        opt = diff.make_optimizer(m.parameters(), lr=1e-3, weight_decay=0.0)
        diff.adam_step(opt, m.theta.sum())
        assert float(m.theta) == pytest.approx(1.0 - 1e-3, abs=1e-9)

    def test_zero_gradient_leaves_value(self):
        m = _Scalar(1.0)
        opt = diff.make_optimizer(m.parameters(), lr=1e-3, weight_decay=0.0)
        diff.adam_step(opt, 0.0 * m.theta.sum())
        assert float(m.theta) == 1.0

    def test_deterministic(self):
        values = []
        for _ in range(2):
            m = _Scalar(0.3)
            opt = diff.make_optimizer(m.parameters(), lr=1e-2)
            for _ in range(5):
                diff.adam_step(opt, (m.theta**2).sum())
            values.append(float(m.theta))
        assert values[0] == values[1]

    def test_no_trainable_parameters(self):
        with pytest.raises(ValueError, match="addestrabile"):
            diff.make_optimizer([])


class TestEarlyStopping:
    def test_restores_best_state(self):
        m = _Scalar(0.0)
        stopper = EarlyStopper(patience=2)
        for epoch, loss in enumerate([3.0, 1.0, 2.0, 2.5], start=1):
            with torch.no_grad():
                m.theta.fill_(float(epoch))
            stopper.update(epoch, loss, m)
        assert stopper.should_stop
        assert stopper.best_epoch == 2
        stopper.restore(m)
        assert float(m.theta) == 2.0

    def test_fit_stops_and_reports(self, capsys):
        m = _Scalar(1.0)
        opt = diff.make_optimizer(m.parameters(), lr=0.0, weight_decay=0.0)
        result = diff.fit(
            m,
            train_loss=lambda: (m.theta**2).sum(),
            val_loss=lambda: 1.0,
            optimizer=opt,
            max_epochs=100,
            patience=3,
            log_every=1,
            tag="test",
        )
        assert result.best_epoch == 1
        assert result.epochs_run == 4
        assert len({row["train_loss"] for row in result.history}) == 1
        out = capsys.readouterr().out
        assert "[test] epoch 001/100" in out
        assert "Early stopping" in out

    def test_validation_before_step_sees_same_parameters(self):
        m = _Scalar(1.0)
        opt = diff.make_optimizer(m.parameters(), lr=0.1, weight_decay=0.0)
        loss = lambda: (m.theta**2).sum()
        result = diff.fit(m, train_loss=loss, val_loss=lambda: float(loss()), optimizer=opt, max_epochs=5, patience=0, val_before_step=True)
        assert all(row["val_loss"] == row["train_loss"] for row in result.history)
        assert result.best_epoch == 5
        assert float(loss()) == result.best_val_loss


class TestGradientCheck:
    def test_quadratic(self):
        theta = torch.tensor([0.3, -1.2, 2.0], dtype=DTYPE, requires_grad=True)
        assert check_gradients(lambda: (theta**2).sum(), [theta]) < 1e-9

    def test_detects_wrong_gradient(self):
        class _Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return (x**2).sum()

            @staticmethod
            def backward(ctx, grad):
                return grad * torch.ones(3, dtype=DTYPE)

        theta = torch.tensor([0.3, -1.2, 2.0], dtype=DTYPE, requires_grad=True)
        assert check_gradients(lambda: _Wrong.apply(theta), [theta]) > 0.1


class TestCheckpoint:
    def test_save_and_load(self, tmp_path):
        m = _Scalar(0.125)
        path = save_params(m, tmp_path / "ckpt.json", {"kind": "test"})
        meta, state = load_params(path)
        assert meta == {"kind": "test"}
        assert torch.equal(state["theta"], m.theta.detach())

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_params(tmp_path / "missing.json")

    def test_malformed_json_reports_position(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"meta": {}, "params": ', encoding="utf-8")
        with pytest.raises(ValueError, match="riga 1"):
            load_params(path)

    def test_shape_mismatch(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"meta": {}, "params": {"w": {"shape": [2, 2], "data": [1.0]}}}), encoding="utf-8")
        with pytest.raises(CheckpointMismatchError):
            load_params(path)


def _path5_adjacency() -> torch.Tensor:
    from dataset import Graph, normalize

    g = Graph.from_edges(torch.zeros(5, 1, dtype=DTYPE), torch.tensor([0, 1, 2, 3]), torch.tensor([1, 2, 3, 4]), torch.zeros(5), 1)
    return normalize(g, "sym_selfloop").matrix


_W = torch.randn(4, 3, dtype=DTYPE, generator=torch.Generator().manual_seed(11))
_BIAS = torch.randn(4, dtype=DTYPE, generator=torch.Generator().manual_seed(12))

OPS = {
    "dense_matmul": lambda x: diff.dense_matmul(x, _W),
    "sparse_dense_matmul": lambda x: diff.sparse_dense_matmul(_path5_adjacency(), x),
    "add_row_bias": lambda x: diff.add_row_bias(x, _BIAS),
    "relu": diff.relu,
    "exp": diff.exp,
    "softplus": diff.softplus,
    "dropout_eval": lambda x: diff.dropout(x, 0.5, train=False),
    "dropout_fixed_mask": lambda x: diff.dropout(x, 0.5, train=True, generator=diff.make_generator(0)),
    "row_softmax": diff.row_softmax,
    "log_row_softmax": diff.log_row_softmax,
}


class TestOpGradients:
    @pytest.mark.parametrize("name", sorted(OPS))
    def test_gradcheck(self, name):
        gen = torch.Generator().manual_seed(5)
        x = torch.randn(5, 4, dtype=DTYPE, generator=gen)
        # lontano dal punto angoloso di relu
        x = torch.where(x.abs() < 0.1, x.sign() * 0.5 + 0.25, x).requires_grad_()
        assert torch.autograd.gradcheck(OPS[name], (x,), eps=1e-6, atol=1e-8, rtol=1e-6)

    @pytest.mark.parametrize("name", ["digamma", "ln_gamma"])
    def test_gradcheck_special_functions(self, name):
        import specfun

        x = (0.2 + 5.0 * torch.rand(5, 4, dtype=DTYPE, generator=torch.Generator().manual_seed(6))).requires_grad_()
        assert torch.autograd.gradcheck(getattr(specfun, name), (x,), eps=1e-6, atol=1e-8, rtol=1e-6)
