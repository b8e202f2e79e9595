import math

import pytest
import torch

from evaluation import (architecture_profile, domain_degradation, evaluate_budgets, evaluate_loss, evaluate_routed,
                        layer_degradation, perplexity)
from latency import build_cost_table
from model import DenseSubnetwork, Selection
from ops import Rng
from router import DynamicRouter, RouterConfig, StaticRouter


@pytest.fixture
def static_router(tiny_config):
    return StaticRouter.for_model(tiny_config, RouterConfig(), Rng(0))


def test_loss_is_weighted_by_batch_size(tiny_model, tiny_corpus):
    tokens = tiny_corpus.validation
    whole = evaluate_loss(tiny_model, tokens, batch_size=len(tokens))
    assert evaluate_loss(tiny_model, tokens, batch_size=3) == pytest.approx(whole, rel=1e-12)
    with pytest.raises(ValueError):
        evaluate_loss(tiny_model, tokens[:0])


def test_dense_and_elastic_losses_agree(tiny_model, tiny_config, tiny_corpus):
    sel = Selection((0, 2), (1, 3))
    dense = DenseSubnetwork.from_elastic(tiny_model, sel)
    tokens = tiny_corpus.validation
    assert evaluate_loss(dense, tokens) == pytest.approx(evaluate_loss(tiny_model, tokens, sel), abs=1e-12)


def test_perplexity():
    assert perplexity(0.0) == 1.0
    assert perplexity(math.log(7.0)) == pytest.approx(7.0)


def test_budget_table(tiny_model, tiny_corpus, static_router):
    table = build_cost_table(tiny_model, seq_len=16)
    frame = evaluate_budgets(tiny_model, static_router, table, (0.5, 1.0), tiny_corpus.validation, 4)
    assert list(frame.columns) == ["budget", "params", "cost", "loss", "perplexity", "selection"]
    full = frame[frame["budget"] == 1.0].iloc[0]
    assert full["params"] == tiny_model.count_params()
    assert full["cost"] == pytest.approx(table.full_cost)


def test_dynamic_routing_reports_weighted_cost(tiny_model, tiny_config, tiny_corpus):
    router = DynamicRouter.for_model(tiny_config, RouterConfig(dynamic=True), Rng(0))
    table = build_cost_table(tiny_model, seq_len=16)
    row = evaluate_routed(tiny_model, router, table, 0.6, tiny_corpus.validation, 4)
    assert row["selection"] == "dynamic"
    minimal = tiny_model.count_params(Selection.minimal(tiny_config))
    assert minimal - 1e-9 <= row["params"] <= tiny_model.count_params() + 1e-9
    assert math.isfinite(row["loss"])


def test_domain_ratios(tiny_model, tiny_corpus, static_router):
    table = build_cost_table(tiny_model, seq_len=16)
    frame = domain_degradation(tiny_model, static_router, table, tiny_corpus, (1.0,), 4)
    assert set(frame["domain"]) == {"easy", "hard"}
    assert frame["ratio"].to_numpy() == pytest.approx([1.0, 1.0], abs=1e-12)


def test_layer_degradation_rows(tiny_model, tiny_config, tiny_corpus):
    frame = layer_degradation(tiny_model, tiny_corpus.validation, (0.5,), 4)
    assert len(frame) == 2 * tiny_config.num_layers
    assert set(frame["candidate"]) == {1}


def test_architecture_profile(tiny_model, tiny_config, static_router):
    frame = architecture_profile(tiny_model, static_router, (0.5, 1.0))
    assert len(frame) == 2 * 2 * tiny_config.num_layers
    assert (frame[frame["budget"] == 1.0]["width_fraction"] == 1.0).all()
    assert frame["width_fraction"].between(0.0, 1.0).all()


def test_evaluation_leaves_gradients_untouched(tiny_model, tokens):
    evaluate_loss(tiny_model, tokens)
    assert all(p.grad is None for p in tiny_model.parameters())
    assert torch.is_grad_enabled()
