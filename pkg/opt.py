from typing import Dict, Iterable

import torch
from torch.optim.lr_scheduler import LambdaLR

from ops import ShapeError


def create_optimizer(params: Iterable[torch.nn.Parameter], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                     weight_decay: float = 0.0) -> torch.optim.Adam:
    if lr <= 0.0:
        raise ValueError(f"Invalid learning rate, should be positive: {lr}")
    if not (0.0 < betas[0] < 1.0 and 0.0 < betas[1] < 1.0):
        raise ValueError(f"Invalid betas, should lie in (0, 1): {betas}")
    if eps <= 0.0:
        raise ValueError(f"Invalid epsilon, should be positive: {eps}")
    params = [p for p in params if p.requires_grad]
    return torch.optim.Adam(params, lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)


def warmup_schedule(optimizer: torch.optim.Optimizer, warmup_steps: int) -> LambdaLR:
    """Linear warmup over ``warmup_steps`` optimizer steps, constant afterwards."""
    if warmup_steps <= 0:
        return LambdaLR(optimizer, lambda step: 1.0)
    return LambdaLR(optimizer, lambda step: min(1.0, (step + 1) / warmup_steps))


def adam_step(optimizer: torch.optim.Adam, params: Dict[str, torch.Tensor], grads: Dict[str, torch.Tensor]):
    """Apply one bias-corrected Adam update with explicitly supplied gradients."""
    if params.keys() != grads.keys():
        raise ShapeError(f"params and grads are not aligned by name: {sorted(params)} vs {sorted(grads)}")
    owned = {id(p) for group in optimizer.param_groups for p in group["params"]}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {tuple(g.shape)}, parameter has {tuple(p.shape)}")
        if id(p) not in owned:
            raise ValueError(f"parameter {name} is not managed by this optimizer")
        p.grad = g.detach().clone().to(p.dtype)
    optimizer.step()
    return params


def get_lr(optimizer):
    for param_group in optimizer.param_groups:
        return param_group['lr']
