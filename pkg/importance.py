import copy
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional

import torch

from dataset import CorpusError, sequential_batches
from model import ElasticModel, Selection
from ops import DTYPE, ShapeError


@dataclass
class ImportanceScores:
    head_scores: List[torch.Tensor]    # per layer, [L]
    neuron_scores: List[torch.Tensor]  # per layer, [D]
    sample_count: int

    def __post_init__(self):
        if self.sample_count <= 0:
            raise ValueError(f"sample_count should be positive, {self.sample_count}")
        if any(bool((s < 0).any()) for s in self.head_scores + self.neuron_scores):
            raise ValueError("importance scores should be non-negative")

    def __add__(self, other):
        return ImportanceScores(
            [a + b for a, b in zip(self.head_scores, other.head_scores)],
            [a + b for a, b in zip(self.neuron_scores, other.neuron_scores)],
            self.sample_count + other.sample_count,
        )

    def to_dict(self):
        return {
            "head_scores": [s.tolist() for s in self.head_scores],
            "neuron_scores": [s.tolist() for s in self.neuron_scores],
            "sample_count": self.sample_count,
        }

    @classmethod
    def from_dict(cls, values):
        return cls(
            [torch.tensor(s, dtype=DTYPE) for s in values["head_scores"]],
            [torch.tensor(s, dtype=DTYPE) for s in values["neuron_scores"]],
            int(values["sample_count"]),
        )


@dataclass
class PermutationPlan:
    head_perm: List[torch.Tensor]    # per layer, permutation of range(L)
    neuron_perm: List[torch.Tensor]  # per layer, permutation of range(D)

    def __post_init__(self):
        self.head_perm = [torch.as_tensor(p, dtype=torch.long) for p in self.head_perm]
        self.neuron_perm = [torch.as_tensor(p, dtype=torch.long) for p in self.neuron_perm]
        for perm in self.head_perm + self.neuron_perm:
            if not torch.equal(torch.sort(perm).values, torch.arange(len(perm))):
                raise ValueError(f"not a permutation: {perm.tolist()}")

    @classmethod
    def identity(cls, model: ElasticModel) -> "PermutationPlan":
        config = model.config
        return cls([torch.arange(config.num_heads)] * config.num_layers,
                   [torch.arange(config.mlp_hidden)] * config.num_layers)

    def inverse(self):
        return PermutationPlan([torch.argsort(p) for p in self.head_perm],
                               [torch.argsort(p) for p in self.neuron_perm])

    def to_dict(self):
        return {"head_perm": [p.tolist() for p in self.head_perm],
                "neuron_perm": [p.tolist() for p in self.neuron_perm]}

    @classmethod
    def from_dict(cls, values):
        return cls(values["head_perm"], values["neuron_perm"])


def head_importance(head_outputs: torch.Tensor) -> torch.Tensor:
    """L1 norm per head of attention outputs [B, L, S, H]."""
    return head_outputs.abs().sum(dim=(0, 2, 3))


def neuron_importance(x: torch.Tensor, w1: torch.Tensor) -> torch.Tensor:
    """L1 norm per hidden neuron of the pre-activation X W1^T."""
    pre = torch.matmul(x, w1.t())
    return pre.abs().reshape(-1, w1.shape[0]).sum(dim=0)


def _score_batch(model, tokens):
    config = model.config
    heads = [torch.zeros(config.num_heads, dtype=DTYPE) for _ in range(config.num_layers)]
    neurons = [torch.zeros(config.mlp_hidden, dtype=DTYPE) for _ in range(config.num_layers)]

    def taps(layer, name, value):
        if name == "heads":
            heads[layer] += head_importance(value)
        elif name == "mlp_input":
            neurons[layer] += neuron_importance(value, model.blocks[layer].w1)

    with torch.no_grad():
        model(tokens, sel=Selection.full(config), taps=taps)
    return ImportanceScores(heads, neurons, len(tokens))


def score_importance(model: ElasticModel, calib_tokens: torch.Tensor, num_samples: int = 512,
                     batch_size: int = 32, workers: int = 1) -> ImportanceScores:
    """Accumulated activation magnitudes of every head and MLP neuron over a calibration set.

    Batches may be scored by several threads; partial sums are combined in batch order.
    """
    if num_samples < 1:
        raise ValueError(f"num_samples should be at least 1, {num_samples}")
    if len(calib_tokens) == 0:
        raise CorpusError("calibration set is empty")
    batches = sequential_batches(calib_tokens[:num_samples], batch_size)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(lambda b: _score_batch(model, b), batches))
    else:
        partials = [_score_batch(model, b) for b in batches]
    total = partials[0]
    for partial in partials[1:]:
        total = total + partial
    return total


def build_plan(scores: ImportanceScores) -> PermutationPlan:
    """Indices by decreasing score; ties keep the lower original index first."""
    def order(s):
        return torch.sort(-s, stable=True).indices

    return PermutationPlan([order(s) for s in scores.head_scores], [order(s) for s in scores.neuron_scores])


def apply_plan(model: ElasticModel, plan: PermutationPlan) -> ElasticModel:
    """Reorder heads and neurons in place; the full model computes the same function afterwards."""
    config = model.config
    if len(plan.head_perm) != config.num_layers or len(plan.neuron_perm) != config.num_layers:
        raise ShapeError(f"plan covers {len(plan.head_perm)} layers, model has {config.num_layers}")
    with torch.no_grad():
        for block, head_perm, neuron_perm in zip(model.blocks, plan.head_perm, plan.neuron_perm):
            if len(head_perm) != config.num_heads or len(neuron_perm) != config.mlp_hidden:
                raise ShapeError(f"plan sizes {len(head_perm)}/{len(neuron_perm)} do not match "
                                 f"{config.num_heads} heads / {config.mlp_hidden} neurons")
            for name in ("wq", "wk", "wv"):
                weight = getattr(block, name)
                weight.copy_(weight[head_perm])
            wo = block.wo.view(config.num_heads, config.head_dim, config.embed_dim)
            block.wo.copy_(wo[head_perm].reshape(-1, config.embed_dim))
            block.w1.copy_(block.w1[neuron_perm])
            block.w2.copy_(block.w2[neuron_perm])
    return model


def zero_shot_slicing(model: ElasticModel, tokens: torch.Tensor, fraction: float = 0.5,
                      batch_size: int = 32) -> Dict[str, float]:
    """Perplexity when only MLPs, or only MHAs, are cut to the candidate nearest ``fraction`` width."""
    config = model.config
    k_mlp = min(range(config.candidates_per_layer),
                key=lambda j: abs(config.mlp_widths[j] / config.mlp_hidden - fraction))
    k_mha = min(range(config.candidates_per_layer),
                key=lambda j: abs(config.head_counts[j] / config.num_heads - fraction))
    full = config.candidates_per_layer - 1
    selections = {
        "full": Selection.full(config),
        "mlp": Selection((full,) * config.num_layers, (k_mlp,) * config.num_layers),
        "mha": Selection((k_mha,) * config.num_layers, (full,) * config.num_layers),
    }
    result = {}
    with torch.no_grad():
        for name, sel in selections.items():
            losses = [float(model.lm_loss(b, sel)) * len(b) for b in sequential_batches(tokens, batch_size)]
            result[name] = float(torch.exp(torch.tensor(sum(losses) / len(tokens))))
    return result


def permutation_ablation(model: ElasticModel, calib_tokens: torch.Tensor, eval_tokens: torch.Tensor,
                         num_samples: int = 512, fraction: float = 0.5, batch_size: int = 32,
                         sorted_model: Optional[ElasticModel] = None) -> Dict[str, float]:
    """Zero-shot sliced perplexity before and after importance sorting."""
    before = zero_shot_slicing(model, eval_tokens, fraction, batch_size)
    if sorted_model is None:
        sorted_model = copy.deepcopy(model)
        scores = score_importance(sorted_model, calib_tokens, num_samples, batch_size)
        apply_plan(sorted_model, build_plan(scores))
    after = zero_shot_slicing(sorted_model, eval_tokens, fraction, batch_size)
    return {**{f"unsorted_{k}": v for k, v in before.items()}, **{f"sorted_{k}": v for k, v in after.items()}}
