"""Layer-wise adaptive rate scaling (LARS) optimizer.

Each parameter tensor gets a local learning rate

    local_lr = trust_coefficient * ||w|| / (||g|| + weight_decay * ||w||)

when both norms are positive, and 1 otherwise; the momentum update then
runs at ``global_lr * local_lr`` on the weight-decayed gradient.
Parameter groups flagged ``lars_exclude=True`` (biases, normalization
parameters) skip both the adaptation and weight decay.
"""

from __future__ import annotations

import torch

from .losses import NonFiniteError

__all__ = ["LARS", "split_lars_param_groups"]


class LARS(torch.optim.Optimizer):
    def __init__(
        self,
        params,
        lr: float,
        momentum: float = 0.9,
        weight_decay: float = 0.0,
        trust_coefficient: float = 0.001,
    ):
        if lr < 0:
            raise ValueError(f"invalid learning rate {lr}")
        if momentum < 0:
            raise ValueError(f"invalid momentum {momentum}")
        if weight_decay < 0:
            raise ValueError(f"invalid weight decay {weight_decay}")
        if trust_coefficient <= 0:
            raise ValueError(f"invalid trust coefficient {trust_coefficient}")
        defaults = dict(
            lr=lr,
            momentum=momentum,
            weight_decay=weight_decay,
            trust_coefficient=trust_coefficient,
            lars_exclude=False,
        )
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            momentum = group["momentum"]
            weight_decay = 0.0 if group["lars_exclude"] else group["weight_decay"]
            for p in group["params"]:
                grad = p.grad
                if grad is None:
                    continue
                if not torch.isfinite(grad).all():
                    raise NonFiniteError(
                        "non-finite gradient encountered: run has diverged"
                    )
                if group["lars_exclude"]:
                    local_lr = 1.0
                else:
                    w_norm = torch.linalg.vector_norm(p)
                    g_norm = torch.linalg.vector_norm(grad)
                    if w_norm > 0 and g_norm > 0:
                        local_lr = (
                            group["trust_coefficient"] * w_norm / (g_norm + weight_decay * w_norm)
                        ).item()
                    else:
                        local_lr = 1.0
                update = grad if weight_decay == 0 else grad.add(p, alpha=weight_decay)
                state = self.state[p]
                buf = state.get("momentum_buffer")
                if buf is None:
                    buf = torch.zeros_like(p)
                    state["momentum_buffer"] = buf
                buf.mul_(momentum).add_(update, alpha=group["lr"] * local_lr)
                p.sub_(buf)
        return loss


def split_lars_param_groups(model: torch.nn.Module, weight_decay: float) -> list[dict]:
    """Two groups: weights with adaptation/decay; biases and 1-D
    (normalization) parameters excluded from both."""
    adapted, excluded = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if p.ndim <= 1 or name.endswith(".bias"):
            excluded.append(p)
        else:
            adapted.append(p)
    return [
        {"params": adapted, "weight_decay": weight_decay, "lars_exclude": False},
        {"params": excluded, "weight_decay": 0.0, "lars_exclude": True},
    ]
