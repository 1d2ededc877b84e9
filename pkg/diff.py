"""
Nucleo differenziabile condiviso dai modelli: operazioni elementari in float64,
Adam, early stopping, loop di training generico, gradient check e checkpoint JSON.

Le operazioni sono wrapper funzionali su torch; il backward lo fa autograd.
"""

from __future__ import annotations

import json
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float64


class CheckpointMismatchError(ValueError):
    pass


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.backends.cudnn.deterministic = True
    torch.backends.cudnn.benchmark = False


def make_generator(seed: int | None) -> torch.Generator | None:
    if seed is None:
        return None
    return torch.Generator().manual_seed(int(seed))


def _check_2d(name: str, x: torch.Tensor) -> None:
    if x.dim() != 2:
        raise ValueError(f"{name}: atteso tensore 2D, ricevuto shape {tuple(x.shape)}")


# ---------------------------------------------------------------------------
# operazioni
# ---------------------------------------------------------------------------


def dense_matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _check_2d("dense_matmul(a)", a)
    _check_2d("dense_matmul(b)", b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dense_matmul: shape incompatibili {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def sparse_dense_matmul(adj: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    if adj.dim() != 2 or adj.shape[1] != x.shape[0]:
        raise ValueError(f"sparse_dense_matmul: shape incompatibili {tuple(adj.shape)} x {tuple(x.shape)}")
    if x.dim() == 1:
        return torch.sparse.mm(adj, x.unsqueeze(1)).squeeze(1)
    return torch.sparse.mm(adj, x)


def add_row_bias(x: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    _check_2d("add_row_bias", x)
    if bias.dim() != 1 or bias.shape[0] != x.shape[1]:
        raise ValueError(f"add_row_bias: bias di shape {tuple(bias.shape)} per input {tuple(x.shape)}")
    return x + bias.unsqueeze(0)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


def exp(x: torch.Tensor) -> torch.Tensor:
    return torch.exp(x)


def softplus(x: torch.Tensor) -> torch.Tensor:
    return F.softplus(x)


def dropout(x: torch.Tensor, p: float, train: bool, generator: torch.Generator | None = None) -> torch.Tensor:
    """Inverted dropout: in training le unità tenute sono scalate di 1/(1-p), in eval è l'identità."""
    if not (0.0 <= float(p) < 1.0):
        raise ValueError("dropout p deve essere in [0, 1)")
    if not train or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= float(p)
    return x * keep.to(x.dtype) / (1.0 - float(p))


def row_softmax(x: torch.Tensor) -> torch.Tensor:
    _check_2d("row_softmax", x)
    return torch.softmax(x, dim=1)


def log_row_softmax(x: torch.Tensor) -> torch.Tensor:
    _check_2d("log_row_softmax", x)
    return torch.log_softmax(x, dim=1)


# ---------------------------------------------------------------------------
# ottimizzazione
# ---------------------------------------------------------------------------


def make_optimizer(
    params: Iterable[torch.nn.Parameter],
    *,
    lr: float = 1e-3,
    weight_decay: float = 1e-4,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> torch.optim.Adam:
    # Adam classico: weight_decay * theta sommato al gradiente prima dei momenti (non AdamW)
    trainable = [p for p in params if p.requires_grad]
    if not trainable:
        raise ValueError("Nessun parametro addestrabile passato all'ottimizzatore.")
    return torch.optim.Adam(trainable, lr=float(lr), betas=betas, eps=float(eps), weight_decay=float(weight_decay))


def adam_step(optimizer: torch.optim.Optimizer, loss: torch.Tensor) -> float:
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.item())


class EarlyStopper:
    def __init__(self, *, patience: int = 50, min_delta: float = 0.0):
        if int(patience) < 0:
            raise ValueError("patience deve essere >= 0")
        self.patience = int(patience)
        self.min_delta = float(min_delta)
        self.best_val_loss = math.inf
        self.best_epoch = 0
        self.best_state: dict[str, torch.Tensor] | None = None
        self.epochs_since_improve = 0

    def update(self, epoch: int, val_loss: float, module: torch.nn.Module) -> bool:
        if not math.isfinite(val_loss):
            self.epochs_since_improve += 1
            return False
        if (val_loss + self.min_delta) < self.best_val_loss or self.best_state is None:
            self.best_val_loss = float(val_loss)
            self.best_epoch = int(epoch)
            self.best_state = {k: v.detach().clone() for k, v in module.state_dict().items()}
            self.epochs_since_improve = 0
            return True
        self.epochs_since_improve += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.patience > 0 and self.epochs_since_improve >= self.patience

    def restore(self, module: torch.nn.Module) -> None:
        if self.best_state is not None:
            module.load_state_dict(self.best_state)


@dataclass
class FitResult:
    model: torch.nn.Module
    history: list[dict[str, float]] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    seconds: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.history)


def fit(
    module: torch.nn.Module,
    *,
    train_loss: Callable[[], torch.Tensor],
    val_loss: Callable[[], float],
    optimizer: torch.optim.Optimizer,
    max_epochs: int,
    patience: int = 50,
    min_delta: float = 0.0,
    log_every: int = 0,
    tag: str = "train",
    epoch_stats: Callable[[], Mapping[str, float]] | None = None,
    val_before_step: bool = False,
) -> FitResult:
    """
    Loop di training full-batch con early stopping sulla loss di validazione.

    train_loss() viene chiamata con il modulo in train mode e deve restituire la loss scalare;
    val_loss() viene chiamata in eval mode sotto no_grad, subito prima di epoch_stats(),
    che quindi può riusarne il forward. Restituisce il modulo ripristinato allo snapshot
    con la miglior val loss.

    Con val_before_step=True la validazione avviene prima del passo di Adam, sugli stessi
    parametri della loss di training: val_loss() può riusare il forward di train_loss()
    (solo per moduli senza dropout, per cui train ed eval mode coincidono).
    """
    if int(max_epochs) <= 0:
        raise ValueError("max_epochs deve essere > 0")

    stopper = EarlyStopper(patience=patience, min_delta=min_delta)
    history: list[dict[str, float]] = []
    t0 = time.perf_counter()

    for epoch in range(1, int(max_epochs) + 1):
        module.train()
        loss = train_loss()
        if not val_before_step:
            loss_value = adam_step(optimizer, loss)

        module.eval()
        with torch.no_grad():
            val_value = float(val_loss())
            stats = {k: float(v) for k, v in epoch_stats().items()} if epoch_stats is not None else {}

        stopper.update(epoch, val_value, module)
        if val_before_step:
            loss_value = adam_step(optimizer, loss)
        row = {"epoch": float(epoch), "train_loss": loss_value, "val_loss": val_value, **stats}
        history.append(row)

        if log_every and (epoch == 1 or epoch % int(log_every) == 0):
            extra = "".join(f" | {k}={v:.5f}" for k, v in row.items() if k not in {"epoch", "train_loss", "val_loss"})
            print(f"[{tag}] epoch {epoch:03d}/{int(max_epochs)} | train_loss={loss_value:.5f} | val_loss={val_value:.5f}{extra}")

        if stopper.should_stop:
            if log_every:
                print(f"[{tag}] Early stopping: nessun miglioramento su val_loss per {stopper.patience} epoche.")
            break

    stopper.restore(module)
    module.eval()
    return FitResult(
        model=module,
        history=history,
        best_epoch=stopper.best_epoch,
        best_val_loss=stopper.best_val_loss,
        seconds=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------


def check_gradients(
    closure: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    *,
    h: float = 1e-5,
    max_coords: int = 200,
    seed: int = 0,
    floor: float = 1e-3,
) -> float:
    """
    Differenze finite centrali contro il gradiente di autograd.

    Restituisce il massimo errore relativo |a - n| / max(|a|, |n|, floor) su un
    sottoinsieme casuale di al più max_coords coordinate.
    """
    params = list(params)
    loss = closure()
    if loss.dim() != 0:
        raise ValueError("check_gradients: la closure deve restituire uno scalare")
    grads = torch.autograd.grad(loss, params, allow_unused=True)

    coords = [(pi, j) for pi, p in enumerate(params) for j in range(p.numel())]
    if len(coords) > int(max_coords):
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(coords), size=int(max_coords), replace=False)
        coords = [coords[int(k)] for k in sorted(picked)]

    worst = 0.0
    with torch.no_grad():
        for pi, j in coords:
            flat = params[pi].view(-1)
            g = grads[pi]
            analytic = 0.0 if g is None else float(g.reshape(-1)[j])
            orig = float(flat[j])
            flat[j] = orig + h
            plus = float(closure())
            flat[j] = orig - h
            minus = float(closure())
            flat[j] = orig
            numeric = (plus - minus) / (2.0 * h)
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoint JSON: {"meta": {...}, "params": {name: {"shape": [...], "data": [...]}}}
# ---------------------------------------------------------------------------


def state_to_json(state: Mapping[str, torch.Tensor]) -> dict[str, dict[str, Any]]:
    out: dict[str, dict[str, Any]] = {}
    for name, t in state.items():
        t = t.detach().to("cpu", dtype=DTYPE).contiguous()
        out[name] = {"shape": list(t.shape), "data": [float(v) for v in t.reshape(-1).tolist()]}
    return out


def state_from_json(params: Mapping[str, Mapping[str, Any]]) -> dict[str, torch.Tensor]:
    state: dict[str, torch.Tensor] = {}
    for name, entry in params.items():
        shape = [int(s) for s in entry["shape"]]
        data = torch.tensor([float(v) for v in entry["data"]], dtype=DTYPE)
        if data.numel() != math.prod(shape):
            raise CheckpointMismatchError(f"Parametro {name!r}: {data.numel()} valori per shape {shape}")
        state[name] = data.reshape(shape)
    return state


def save_params(module: torch.nn.Module, path: str | Path, meta: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"meta": dict(meta), "params": state_to_json(module.state_dict())}
    path.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
    return path


def load_params(path: str | Path) -> tuple[dict[str, Any], dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint non trovato: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"Checkpoint non valido ({path}): riga {exc.lineno}, colonna {exc.colno}: {exc.msg}") from exc
    if not isinstance(payload, dict) or "meta" not in payload or "params" not in payload:
        raise CheckpointMismatchError(f"Checkpoint senza chiavi 'meta'/'params': {path}")
    return dict(payload["meta"]), state_from_json(payload["params"])
