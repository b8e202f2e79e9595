import pytest
import torch

from latency import (BudgetTarget, CostTable, MeasurementError, build_cost_table, constraint_loss, expected_cost,
                     selection_cost)
from model import Selection
from ops import DTYPE


@pytest.mark.parametrize("kind", ["analytic-flops", "parameter-count"])
def test_costs_strictly_increase(tiny_model, kind):
    table = build_cost_table(tiny_model, kind, seq_len=8)
    assert bool((table.mha[:, 1:] > table.mha[:, :-1]).all())
    assert bool((table.mlp[:, 1:] > table.mlp[:, :-1]).all())


def test_measured_table_is_monotone(tiny_model):
    table = build_cost_table(tiny_model, "measured-latency", repeats=1, warmup=0, batch_size=1, seq_len=4)
    assert table.kind == "measured-latency"
    assert bool((table.mlp[:, 1:] > table.mlp[:, :-1]).all())
    assert table.overhead >= 0


def test_parameter_table_matches_slice_shapes(tiny_model):
    config = tiny_model.config
    table = build_cost_table(tiny_model, "parameter-count")
    for j, d in enumerate(config.mlp_widths):
        assert float(table.mlp[0, j]) == 2 * d * config.embed_dim
    assert table.full_cost == tiny_model.count_params(Selection.full(config))
    sel = Selection((0, 2), (3, 1))
    assert selection_cost(table, sel) == tiny_model.count_params(sel)


def test_analytic_attention_cost_is_linear_in_heads(tiny_model):
    config = tiny_model.config
    table = build_cost_table(tiny_model, "analytic-flops", seq_len=8)
    per_head = table.mha[0] / torch.tensor(config.head_counts, dtype=DTYPE)
    assert torch.allclose(per_head, per_head[0].expand_as(per_head), rtol=1e-15)


def test_selection_cost_definitions(tiny_model):
    config = tiny_model.config
    table = build_cost_table(tiny_model, seq_len=8)
    assert selection_cost(table, Selection.full(config)) == pytest.approx(table.full_cost, rel=1e-15)
    minimal = table.overhead + float(table.mha[:, 0].sum() + table.mlp[:, 0].sum())
    assert selection_cost(table, Selection.minimal(config)) == pytest.approx(minimal, rel=1e-15)
    a, b = Selection((1, 1), (1, 1)), Selection((1, 1), (3, 1))
    delta = float(table.mlp[0, 3] - table.mlp[0, 1])
    assert selection_cost(table, b) - selection_cost(table, a) == pytest.approx(delta, rel=1e-12)


def test_normalized_table_and_expected_cost(tiny_model):
    table = build_cost_table(tiny_model, seq_len=8).normalized()
    assert table.full_cost == pytest.approx(1.0, rel=1e-14)
    one_hot = torch.zeros(tiny_model.config.num_slots, 4, dtype=DTYPE)
    one_hot[:, -1] = 1.0
    assert float(expected_cost(table, one_hot)) == pytest.approx(1.0, rel=1e-14)
    with pytest.raises(ValueError):
        expected_cost(table, one_hot[:, :3])


@pytest.mark.parametrize("costs, targets, expected", [([5.0], [7.0], 0.0), ([7.0], [5.0], 2.0),
                                                      ([5.0, 5.0], [4.0, 6.0], 1.0)])
def test_constraint_loss(costs, targets, expected):
    assert float(constraint_loss(costs, targets)) == expected


def test_constraint_loss_with_budget_targets(tiny_model):
    table = build_cost_table(tiny_model, seq_len=8)
    targets = [BudgetTarget.from_fraction(table, 0.5)]
    assert float(constraint_loss([0.4 * table.full_cost], targets)) == 0.0
    with pytest.raises(ValueError):
        constraint_loss([1.0, 2.0], targets)
    with pytest.raises(ValueError):
        BudgetTarget.from_fraction(table, 1.5)


def test_csv_round_trip(tmp_path, tiny_model):
    table = build_cost_table(tiny_model, seq_len=8)
    table.to_csv(tmp_path / "lut.csv")
    assert (tmp_path / "lut.csv").read_text().startswith("# kind=analytic-flops")
    loaded = CostTable.from_csv(tmp_path / "lut.csv")
    assert loaded.kind == table.kind and loaded.overhead == table.overhead
    assert torch.equal(loaded.mha, table.mha) and torch.equal(loaded.mlp, table.mlp)


def test_table_validation():
    with pytest.raises(ValueError):
        CostTable("parameter-count", [[1.0, 1.0]], [[1.0, 2.0]], 0.0)
    with pytest.raises(ValueError):
        CostTable("parameter-count", [[-1.0, 1.0]], [[1.0, 2.0]], 0.0)
    with pytest.raises(RuntimeError, match="Unknown cost kind"):
        CostTable("energy", [[1.0, 2.0]], [[1.0, 2.0]], 0.0)


def test_timing_failure_is_a_measurement_error(tiny_model, monkeypatch):
    def broken(*args, **kwargs):
        raise RuntimeError("device lost")

    monkeypatch.setattr(tiny_model.blocks[0], "attend", broken)
    with pytest.raises(MeasurementError):
        build_cost_table(tiny_model, "measured-latency", repeats=1, warmup=0, seq_len=4)
    with pytest.raises(ValueError):
        build_cost_table(tiny_model, "measured-latency", repeats=0)
