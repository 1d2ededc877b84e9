"""
Funzioni speciali per le loss evidenziali: ln Gamma, digamma, trigamma.

Tutto in float64. Ogni funzione accetta un float (e restituisce un float)
oppure un torch.Tensor (e restituisce un tensore della stessa forma).
Su tensori con requires_grad, digamma e ln_gamma sono differenziabili:
il backward di digamma usa trigamma, quello di ln_gamma usa digamma.
"""

from __future__ import annotations

import math
from typing import overload

import torch
from torch.autograd.function import once_differentiable

# sotto questa soglia si sale con la ricorrenza, sopra si usa la serie asintotica;
# con 10 il primo termine scartato della serie della digamma vale ~8e-16
_SHIFT = 10
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class SpecialFunctionDomainError(ValueError):
    pass


def _check_domain(x: torch.Tensor, name: str) -> None:
    bad = ~torch.isfinite(x) | (x <= 0)
    if bool(bad.any()):
        first = float(x[bad].flatten()[0]) if x.dim() else float(x)
        raise SpecialFunctionDomainError(f"{name}(x) definita solo per x > 0 finito, ricevuto x={first!r}")


def _shift_up(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Ricorrenza vettoriale, senza cicli sui dati: restituisce (x + k per k < _SHIFT,
    maschera dei termini attivi x + k < _SHIFT, x_shift >= _SHIFT).
    """
    steps = torch.arange(_SHIFT, dtype=x.dtype, device=x.device)
    xk = x.unsqueeze(-1) + steps
    active = xk < _SHIFT
    return xk, active, x + active.sum(dim=-1).to(x.dtype)


def _digamma_raw(x: torch.Tensor) -> torch.Tensor:
    # psi(x) = psi(x + n) - sum_{k<n} 1/(x + k); 1/x (il termine più grande) sottratto per ultimo
    xk, active, xs = _shift_up(x)
    inv_k = xk.reciprocal().masked_fill(~active, 0.0)
    inv = 1.0 / xs
    inv2 = inv * inv
    tail = inv2 * (
        1.0 / 12.0
        - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0 - inv2 * (691.0 / 32760.0)))))
    )
    return (torch.log(xs) - 0.5 * inv - tail - inv_k[..., 1:].sum(dim=-1)) - inv_k[..., 0]


def _trigamma_raw(x: torch.Tensor) -> torch.Tensor:
    xk, active, xs = _shift_up(x)
    inv2_k = xk.reciprocal().square().masked_fill(~active, 0.0)
    inv = 1.0 / xs
    inv2 = inv * inv
    series = inv * (
        1.0
        + inv
        * (
            0.5
            + inv
            * (
                1.0 / 6.0
                - inv2
                * (
                    1.0 / 30.0
                    - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0 - inv2 * (691.0 / 2730.0))))
                )
            )
        )
    )
    return (series + inv2_k[..., 1:].sum(dim=-1)) + inv2_k[..., 0]


def _ln_gamma_raw(x: torch.Tensor) -> torch.Tensor:
    # Stirling su x >= _SHIFT, poi ln Gamma(x) = ln Gamma(x + n) - sum_{k<n} ln(x + k)
    xk, active, xs = _shift_up(x)
    log_k = torch.log(xk).masked_fill(~active, 0.0)
    inv = 1.0 / xs
    inv2 = inv * inv
    corr = inv * (
        1.0 / 12.0
        - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0 - inv2 * (1.0 / 1188.0 - inv2 * (691.0 / 360360.0)))))
    )
    stirling = (xs - 0.5) * torch.log(xs) - xs + _HALF_LOG_2PI + corr
    return (stirling - log_k[..., 1:].sum(dim=-1)) - log_k[..., 0]


class _Digamma(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x: torch.Tensor) -> torch.Tensor:
        ctx.save_for_backward(x)
        return _digamma_raw(x)

    @staticmethod
    @once_differentiable
    def backward(ctx, grad: torch.Tensor) -> torch.Tensor:
        (x,) = ctx.saved_tensors
        return grad * _trigamma_raw(x)


class _LnGamma(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x: torch.Tensor) -> torch.Tensor:
        ctx.save_for_backward(x)
        return _ln_gamma_raw(x)

    @staticmethod
    @once_differentiable
    def backward(ctx, grad: torch.Tensor) -> torch.Tensor:
        (x,) = ctx.saved_tensors
        return grad * _digamma_raw(x)


def _prepare(x, name: str, check: bool) -> tuple[torch.Tensor, bool]:
    is_scalar = not isinstance(x, torch.Tensor)
    t = torch.as_tensor(x, dtype=torch.float64)
    if t.dtype != torch.float64:
        t = t.to(torch.float64)
    if check:
        _check_domain(t.detach(), name)
    return t, is_scalar


@overload
def digamma(x: float, *, check: bool = True) -> float: ...
@overload
def digamma(x: torch.Tensor, *, check: bool = True) -> torch.Tensor: ...
def digamma(x, *, check: bool = True):
    """
    psi(x), errore assoluto <= 1e-12 su [1e-3, 1e6].

    check=False salta il controllo del dominio (e la sincronizzazione che comporta):
    solo per chiamanti che garantiscono x > 0 per costruzione.
    """
    t, is_scalar = _prepare(x, "digamma", check)
    out = _Digamma.apply(t)
    return float(out) if is_scalar else out


@overload
def trigamma(x: float, *, check: bool = True) -> float: ...
@overload
def trigamma(x: torch.Tensor, *, check: bool = True) -> torch.Tensor: ...
def trigamma(x, *, check: bool = True):
    """psi'(x) (derivata della digamma)."""
    t, is_scalar = _prepare(x, "trigamma", check)
    out = _trigamma_raw(t.detach())
    return float(out) if is_scalar else out


@overload
def ln_gamma(x: float, *, check: bool = True) -> float: ...
@overload
def ln_gamma(x: torch.Tensor, *, check: bool = True) -> torch.Tensor: ...
def ln_gamma(x, *, check: bool = True):
    t, is_scalar = _prepare(x, "ln_gamma", check)
    out = _LnGamma.apply(t)
    return float(out) if is_scalar else out
