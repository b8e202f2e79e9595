import numpy as np
import pandas as pd
import pytest

from latency import build_cost_table, selection_cost
from model import Selection
from ops import Rng
from router import RouterConfig, StaticRouter
from scaling import (ParetoPoint, ScalingFit, UnderdeterminedFitError, eval_law, fit_scaling_law,
                     matched_cost_summary, pareto_sweep, points_to_frame, random_matched_cloud,
                     write_pareto_csv)

TRUE_FIT = ScalingFit(2.0, 0.5, 1.7, 0.0, 8)


def _synthetic(fit=TRUE_FIT, shift=0.0):
    n = np.geomspace(0.2, 200.0, 8)
    return [(float(a), float(b) + shift) for a, b in zip(n, eval_law(fit, n))]


def test_law_at_critical_size():
    fit = ScalingFit(3.5, 0.7, 1.25, 0.0, 0)
    assert eval_law(fit, 3.5) == pytest.approx(2.25, abs=1e-15)


def test_published_fit_evaluates_at_its_critical_size():
    fit = ScalingFit(1.680, 52.74, 1.729, 0.0, 0)
    assert eval_law(fit, 1.680) == pytest.approx(2.729, abs=1e-12)


def test_law_rejects_non_positive_size():
    with pytest.raises(ValueError):
        eval_law(TRUE_FIT, 0.0)
    with pytest.raises(ValueError):
        eval_law(TRUE_FIT, np.array([1.0, -2.0]))


def test_law_is_vectorized():
    values = eval_law(TRUE_FIT, np.array([1.0, 2.0, 4.0]))
    assert values.shape == (3,)
    assert np.all(np.diff(values) < 0)


def test_fit_recovers_noiseless_parameters():
    fit = fit_scaling_law(_synthetic())
    assert fit.n_c == pytest.approx(2.0, rel=1e-2)
    assert fit.alpha == pytest.approx(0.5, rel=1e-2)
    assert fit.e_n == pytest.approx(1.7, rel=1e-2)
    assert fit.rmse < 1e-6
    assert fit.n_points == 8


def test_constant_shift_moves_only_the_floor():
    base = fit_scaling_law(_synthetic())
    shifted = fit_scaling_law(_synthetic(shift=0.3))
    assert shifted.e_n - base.e_n == pytest.approx(0.3, rel=1e-2)
    assert shifted.alpha == pytest.approx(base.alpha, rel=1e-2)
    assert shifted.n_c == pytest.approx(base.n_c, rel=1e-2)


def test_fit_on_nearly_flat_losses_stays_positive():
    points = [(336, 5.5478), (400, 5.54798), (400, 5.54798), (400, 5.54798), (592, 5.548008), (848, 5.547496),
              (1104, 5.547836), (1104, 5.547836)]
    fit = fit_scaling_law(points)
    assert fit.n_c > 0 and fit.alpha > 0 and fit.e_n > 0
    assert np.isfinite(fit.rmse) and fit.rmse < 1e-3
    assert np.all(np.abs(eval_law(fit, np.array([336.0, 1104.0])) - 5.5478) < 1e-2)



def test_fit_is_deterministic_with_duplicates():
    points = _synthetic() + _synthetic()[:3]
    a, b = fit_scaling_law(points), fit_scaling_law(points)
    assert (a.n_c, a.alpha, a.e_n) == (b.n_c, b.alpha, b.e_n)


def test_fit_accepts_pareto_points():
    points = [ParetoPoint("p", n, n, loss) for n, loss in _synthetic()]
    assert fit_scaling_law(points).e_n == pytest.approx(1.7, rel=1e-2)


def test_too_few_points():
    with pytest.raises(UnderdeterminedFitError):
        fit_scaling_law(_synthetic()[:3])
    with pytest.raises(UnderdeterminedFitError):
        fit_scaling_law([(1.0, 3.0)] * 6)


def test_fit_csv(tmp_path):
    fit = fit_scaling_law(_synthetic())
    fit.to_csv(tmp_path / "fit.csv")
    frame = pd.read_csv(tmp_path / "fit.csv")
    assert list(frame.columns) == ["N_c", "alpha_N", "E_N", "rmse", "n_points"]
    assert frame.loc[0, "E_N"] == fit.e_n


def test_pareto_points_use_non_embedding_parameters(tiny_model, tiny_config, tiny_corpus):
    table = build_cost_table(tiny_model, "parameter-count")
    selections = [Selection.uniform(tiny_config, j) for j in range(4)]
    points = pareto_sweep(tiny_model, table, tiny_corpus.validation, selections=selections, batch_size=4)
    assert [p.cost for p in points] == sorted(p.cost for p in points)
    for point in points:
        sel = Selection.parse(point.selection)
        assert point.params == tiny_model.count_params(sel)
        assert point.cost == selection_cost(table, sel)
    assert points[-1].params == tiny_model.count_params()


def test_routed_points_carry_their_budget(tiny_model, tiny_corpus):
    table = build_cost_table(tiny_model, seq_len=16)
    router = StaticRouter.for_model(tiny_model.config, RouterConfig(), Rng(0))
    points = pareto_sweep(tiny_model, table, tiny_corpus.validation, routers=router, budgets=(0.5, 1.0), batch_size=4)
    assert sorted(p.budget for p in points) == [0.5, 1.0]
    assert points[-1].cost == pytest.approx(table.full_cost)


def test_parallel_sweep_matches_serial(tiny_model, tiny_config, tiny_corpus):
    table = build_cost_table(tiny_model, seq_len=16)
    selections = [Selection.uniform(tiny_config, j) for j in range(4)]
    serial = pareto_sweep(tiny_model, table, tiny_corpus.validation, selections=selections, batch_size=4)
    parallel = pareto_sweep(tiny_model, table, tiny_corpus.validation, selections=selections, batch_size=4, workers=2)
    assert [p.loss for p in serial] == [p.loss for p in parallel]


def test_matched_cloud_stays_in_band(tiny_model, tiny_config, tiny_corpus):
    table = build_cost_table(tiny_model, seq_len=16)
    floor = selection_cost(table, Selection.minimal(tiny_config)) / table.full_cost
    budget = floor + 0.5 * (1.0 - floor)
    cloud = random_matched_cloud(tiny_model, table, tiny_corpus.validation, budget, count=5, band=0.05,
                                 rng=Rng(5), batch_size=4)
    assert 0 < len(cloud) <= 5
    for point in cloud:
        assert abs(point.cost / table.full_cost / budget - 1.0) <= 0.05
    summary = matched_cost_summary(cloud, cloud[0].loss)
    assert summary["count"] == len(cloud) and 0.0 <= summary["routed_rank"] <= 1.0


def test_budget_below_the_cost_floor_has_no_matches(tiny_model, tiny_config, tiny_corpus):
    table = build_cost_table(tiny_model, seq_len=16)
    floor = selection_cost(table, Selection.minimal(tiny_config)) / table.full_cost
    with pytest.raises(ValueError):
        random_matched_cloud(tiny_model, table, tiny_corpus.validation, 0.5 * floor, count=5, max_draws=500)

def test_pareto_csv(tmp_path):
    points = [ParetoPoint("b", 20.0, 2.0, 3.0), ParetoPoint("a", 10.0, 1.0, 4.0, 0.5)]
    write_pareto_csv(points, tmp_path / "pareto.csv")
    frame = pd.read_csv(tmp_path / "pareto.csv")
    assert list(frame.columns) == ["budget", "params", "cost", "loss", "selection"]
    assert list(frame["selection"]) == ["a", "b"]
    assert list(frame["budget"]) == [0.5, 1.0]
    assert list(points_to_frame(points)["cost"]) == [1.0, 2.0]


def test_pareto_point_validation():
    with pytest.raises(ValueError):
        ParetoPoint("x", 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        ParetoPoint("x", 1.0, 1.0, float("nan"))
