import torch
import torch.nn as nn
import torch.nn.functional as F

from ops import cross_entropy


class LMLoss(nn.Module):
    """Next-token cross-entropy: logits[:, :S-1] against tokens[:, 1:S].

    reduction='mean' gives one scalar, 'sequence' one value per sequence.
    """

    def __init__(self, reduction='mean'):
        super().__init__()
        if reduction not in ('mean', 'sequence'):
            raise ValueError(f"reduction should be 'mean' or 'sequence', {reduction}")
        self.reduction = reduction

    def forward(self, logits, tokens):
        batch, seq_len, vocab = logits.shape
        flat_logits = logits[:, :seq_len - 1, :].reshape(-1, vocab)
        flat_targets = tokens[:, 1:seq_len].reshape(-1)
        if self.reduction == 'mean':
            return cross_entropy(flat_logits, flat_targets)
        per_token = cross_entropy(flat_logits, flat_targets, reduction='none')
        return per_token.view(batch, seq_len - 1).mean(dim=1)


class ConstraintLoss(nn.Module):
    """Sum over budgets of max(cost_t - T_t, 0)."""

    def forward(self, costs, targets):
        costs = torch.as_tensor(costs, dtype=torch.float64)
        targets = torch.as_tensor(targets, dtype=torch.float64)
        if costs.shape != targets.shape:
            raise ValueError(f"costs and targets are not aligned: {tuple(costs.shape)} vs {tuple(targets.shape)}")
        return torch.clamp(costs - targets, min=0.0).sum()


class SurrogateL2Loss(nn.Module):
    """The "L2 Loss": squared error between predicted and measured LM loss."""

    def forward(self, predicted, measured):
        return F.mse_loss(predicted, measured.to(predicted.dtype))


_criterion_entrypoints = {
    'lm': LMLoss,
    'constraint': ConstraintLoss,
    'l2': SurrogateL2Loss,
}


def criterion_entrypoint(criterion_name):
    return _criterion_entrypoints[criterion_name]


def is_criterion(criterion_name):
    return criterion_name in _criterion_entrypoints


def create_criterion(criterion_name, **kwargs):
    if is_criterion(criterion_name):
        create_fn = criterion_entrypoint(criterion_name)
        criterion = create_fn(**kwargs)
    else:
        raise RuntimeError('Unknown loss (%s)' % criterion_name)
    return criterion
