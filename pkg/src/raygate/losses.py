"""Loss system: gate BCE, asymmetric multi-label loss, and the
batch-proportion weighting that couples the gate and task terms.

All losses take probabilities (not logits) and clamp them to
[eps, 1 - eps] before any logarithm, so they are finite for inputs on the
closed interval [0, 1]. The asymmetric loss is the negated printed form,
minimized like any cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class LossConfig:
    gamma_pos: float = 0.0
    gamma_neg: float = 2.0
    eps: float = 1e-7
    # "batch_proportion" derives lambda from the batch; a float fixes it.
    lambda_mode: str | float = "batch_proportion"

    def __post_init__(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ValueError("focusing exponents must be >= 0")
        if not 0.0 < self.eps < 0.5:
            raise ValueError("eps must be in (0, 0.5)")
        if isinstance(self.lambda_mode, str):
            if self.lambda_mode != "batch_proportion":
                raise ValueError(f"unknown lambda_mode {self.lambda_mode!r}")
        elif not 0.0 <= float(self.lambda_mode) <= 1.0:
            raise ValueError("fixed lambda must be in [0, 1]")


def _clamp(p: torch.Tensor, eps: float) -> torch.Tensor:
    return p.clamp(min=eps, max=1.0 - eps)


def bce(p: torch.Tensor, y: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Binary cross-entropy -[y ln p + (1-y) ln(1-p)], mean over elements."""
    p = _clamp(torch.as_tensor(p), eps)
    y = torch.as_tensor(y, dtype=p.dtype, device=p.device)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def asymmetric_loss(p: torch.Tensor, y: torch.Tensor, gamma_pos: float = 0.0,
                    gamma_neg: float = 2.0, eps: float = 1e-7) -> torch.Tensor:
    """Asymmetric multi-label loss with separate focusing exponents.

    Positive terms are down-weighted by (1-p)^gamma_pos, negative terms by
    p^gamma_neg; with both exponents zero this is exactly the mean per-class
    BCE. ``p`` and ``y`` are (..., C); the mean is taken over all entries.
    """
    p = _clamp(torch.as_tensor(p), eps)
    y = torch.as_tensor(y, dtype=p.dtype, device=p.device)
    pos = (1.0 - p) ** gamma_pos * torch.log(p)
    neg = p ** gamma_neg * torch.log(1.0 - p)
    return -(y * pos + (1.0 - y) * neg).mean()


def batch_lambda(batch_size: int, prohibited_count: int) -> float:
    """Fraction of the batch carrying prohibited items."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not 0 <= prohibited_count <= batch_size:
        raise ValueError("prohibited_count must be in [0, batch_size]")
    return prohibited_count / batch_size


def resolve_lambda(config: LossConfig, batch_size: int, prohibited_count: int) -> float:
    if config.lambda_mode == "batch_proportion":
        return batch_lambda(batch_size, prohibited_count)
    return float(config.lambda_mode)


def combined_multilabel_loss(ml_loss, gate_loss, lam: float):
    """Total classification loss: lambda * multi-label + gate BCE."""
    return lam * ml_loss + gate_loss


def scaled_task_loss(task_loss, lam: float):
    """Task loss weighted by the prohibited fraction; contributes nothing
    (value and gradient) when lambda is zero."""
    if lam == 0.0:
        return task_loss.detach() * 0.0 if torch.is_tensor(task_loss) else 0.0
    return lam * task_loss
