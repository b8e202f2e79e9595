import math
from typing import Dict, Optional, Sequence

import pandas as pd
import torch

from dataset import Corpus, sequential_batches
from latency import CostTable, build_cost_table, expected_cost, selection_cost
from model import DenseSubnetwork, ElasticModel, Selection
from router import DynamicGate, DynamicRouter, Router, route_static


def evaluate_loss(model, tokens: torch.Tensor, sel: Optional[Selection] = None, batch_size: int = 32,
                  max_batches: Optional[int] = None, gating=None) -> float:
    """Mean next-token loss over ``tokens``, weighted by batch size."""
    batches = sequential_batches(tokens, batch_size, max_batches)
    if not batches:
        raise ValueError("no tokens to evaluate")
    total, count = 0.0, 0
    with torch.no_grad():
        for batch in batches:
            if isinstance(model, DenseSubnetwork):
                loss = model.lm_loss(batch)
            else:
                loss = model.lm_loss(batch, sel=sel, gating=gating)
            total += float(loss) * len(batch)
            count += len(batch)
    return total / count


def perplexity(loss: float) -> float:
    return math.exp(loss)


def evaluate_routed(model: ElasticModel, routers: Router, table: CostTable, budget: float, tokens: torch.Tensor,
                    batch_size: int = 32) -> Dict:
    """Loss, parameter count and cost of the routed sub-network at one budget.

    Dynamic routing reports token-frequency-weighted parameters and cost.
    """
    if isinstance(routers, DynamicRouter):
        params_table = build_cost_table(model, "parameter-count")
        total, count, freqs = 0.0, 0, torch.zeros(routers.num_slots, routers.num_candidates, dtype=torch.float64)
        with torch.no_grad():
            for batch in sequential_batches(tokens, batch_size):
                gate = DynamicGate(routers, budget, straight_through=False)
                total += float(model.lm_loss(batch, gating=gate)) * len(batch)
                freqs += gate.frequencies() * len(batch)
                count += len(batch)
        freqs /= count
        return {"budget": budget, "params": float(expected_cost(params_table, freqs)),
                "cost": float(expected_cost(table, freqs)), "loss": total / count, "selection": "dynamic"}
    sel, _ = route_static(routers, budget)
    return {"budget": budget, "params": model.count_params(sel), "cost": selection_cost(table, sel),
            "loss": evaluate_loss(model, tokens, sel, batch_size), "selection": sel.describe()}


def evaluate_budgets(model: ElasticModel, routers: Router, table: CostTable, budgets: Sequence[float],
                     tokens: torch.Tensor, batch_size: int = 32) -> pd.DataFrame:
    rows = [evaluate_routed(model, routers, table, b, tokens, batch_size) for b in budgets]
    frame = pd.DataFrame(rows, columns=["budget", "params", "cost", "loss", "selection"])
    frame.insert(4, "perplexity", frame["loss"].map(perplexity))
    return frame


def domain_degradation(model: ElasticModel, routers: Router, table: CostTable, corpus: Corpus,
                       budgets: Sequence[float], batch_size: int = 32) -> pd.DataFrame:
    """PPL of the routed sub-network over PPL of the full model, per validation domain."""
    rows = []
    for domain in corpus.domains:
        tokens = corpus.domain_tokens(domain)
        if len(tokens) == 0:
            continue
        ppl_full = perplexity(evaluate_loss(model, tokens, Selection.full(model.config), batch_size))
        for budget in budgets:
            ppl_sub = perplexity(evaluate_routed(model, routers, table, budget, tokens, batch_size)["loss"])
            rows.append({"domain": domain, "budget": budget, "ppl_full": ppl_full, "ppl_sub": ppl_sub,
                         "ratio": ppl_sub / ppl_full})
    return pd.DataFrame(rows, columns=["domain", "budget", "ppl_full", "ppl_sub", "ratio"])


def layer_degradation(model: ElasticModel, tokens: torch.Tensor, fractions: Sequence[float] = (0.75, 0.5),
                      batch_size: int = 32) -> pd.DataFrame:
    """Loss increase when a single MHA or MLP is cut to the candidate nearest each width fraction."""
    config = model.config
    full = Selection.full(config)
    base = evaluate_loss(model, tokens, full, batch_size)
    rows = []
    for layer in range(config.num_layers):
        for slot, sizes, maximum in (("mha", config.head_counts, config.num_heads),
                                     ("mlp", config.mlp_widths, config.mlp_hidden)):
            for fraction in fractions:
                j = min(range(config.candidates_per_layer), key=lambda c: abs(sizes[c] / maximum - fraction))
                slots = list(full.slots)
                slots[2 * layer + (slot == "mlp")] = j
                loss = evaluate_loss(model, tokens, Selection.from_slots(slots), batch_size)
                rows.append({"layer": layer, "slot": slot, "fraction": fraction, "candidate": j,
                             "loss": loss, "delta": loss - base})
    return pd.DataFrame(rows, columns=["layer", "slot", "fraction", "candidate", "loss", "delta"])


def architecture_profile(model: ElasticModel, routers: Router, budgets: Sequence[float]) -> pd.DataFrame:
    """Width fraction chosen per slot by static routers at each budget."""
    config = model.config
    rows = []
    for budget in budgets:
        sel, _ = route_static(routers, budget)
        for layer, (h, d) in enumerate(zip(sel.mha, sel.mlp)):
            rows.append({"budget": budget, "layer": layer, "slot": "mha", "candidate": h,
                         "width_fraction": config.head_counts[h] / config.num_heads})
            rows.append({"budget": budget, "layer": layer, "slot": "mlp", "candidate": d,
                         "width_fraction": config.mlp_widths[d] / config.mlp_hidden})
    return pd.DataFrame(rows, columns=["budget", "layer", "slot", "candidate", "width_fraction"])
