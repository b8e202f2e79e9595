import math

import pytest
import torch

from loss import create_criterion, is_criterion
from ops import DTYPE


@pytest.mark.parametrize("costs, targets, expected", [
    ([5.0], [7.0], 0.0),
    ([7.0], [5.0], 2.0),
    ([5.0, 5.0], [4.0, 6.0], 1.0),
])
def test_constraint_hinge(costs, targets, expected):
    criterion = create_criterion('constraint')
    assert float(criterion(torch.tensor(costs, dtype=DTYPE), torch.tensor(targets, dtype=DTYPE))) == expected


def test_constraint_subgradient_is_one_only_where_violated():
    costs = torch.tensor([7.0, 3.0], dtype=DTYPE, requires_grad=True)
    create_criterion('constraint')(costs, torch.tensor([5.0, 5.0], dtype=DTYPE)).backward()
    assert costs.grad.tolist() == [1.0, 0.0]


def test_constraint_rejects_misaligned_lists():
    with pytest.raises(ValueError):
        create_criterion('constraint')(torch.zeros(2, dtype=DTYPE), torch.zeros(3, dtype=DTYPE))


def test_lm_loss_of_zero_logits_is_log_vocab():
    logits = torch.zeros(2, 5, 11, dtype=DTYPE)
    tokens = torch.randint(0, 11, (2, 5))
    assert math.isclose(float(create_criterion('lm')(logits, tokens)), math.log(11), rel_tol=1e-12)
    per_sequence = create_criterion('lm', reduction='sequence')(logits, tokens)
    assert per_sequence.shape == (2,)


def test_l2_loss():
    assert float(create_criterion('l2')(torch.tensor([1.0, 3.0], dtype=DTYPE), torch.tensor([0.0, 1.0]))) == 2.5


def test_unknown_criterion():
    assert not is_criterion('focal')
    with pytest.raises(RuntimeError, match="Unknown loss"):
        create_criterion('focal')
