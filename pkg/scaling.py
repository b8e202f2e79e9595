from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from scipy.optimize import minimize

from elastic import sample_selection
from evaluation import evaluate_loss, evaluate_routed
from latency import CostTable, selection_cost
from model import ElasticModel, Selection
from ops import Rng
from router import Router

PARETO_COLUMNS = ["budget", "params", "cost", "loss", "selection"]


class UnderdeterminedFitError(ValueError):
    pass


@dataclass
class ParetoPoint:
    selection: str
    params: float
    cost: float
    loss: float
    budget: float = float("nan")

    def __post_init__(self):
        if not self.params > 0:
            raise ValueError(f"params should be positive, {self.params}")
        if not np.isfinite(self.loss):
            raise ValueError(f"loss should be finite, {self.loss}")


@dataclass
class ScalingFit:
    n_c: float
    alpha: float
    e_n: float
    rmse: float
    n_points: int

    def __post_init__(self):
        if self.n_c <= 0 or self.alpha <= 0 or self.e_n < 0:
            raise ValueError(f"fit needs N_c > 0, alpha_N > 0, E_N >= 0, got {self.n_c}, {self.alpha}, {self.e_n}")

    def to_frame(self):
        return pd.DataFrame([{"N_c": self.n_c, "alpha_N": self.alpha, "E_N": self.e_n,
                              "rmse": self.rmse, "n_points": self.n_points}])

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def eval_law(fit: ScalingFit, n: Union[float, np.ndarray]):
    """L(N) = (N / N_c)^(-alpha_N) + E_N."""
    n = np.asarray(n, dtype=np.float64)
    if np.any(n <= 0):
        raise ValueError(f"N should be positive, {n}")
    value = (n / fit.n_c) ** (-fit.alpha) + fit.e_n
    return float(value) if value.ndim == 0 else value


def _as_pairs(points) -> Tuple[np.ndarray, np.ndarray]:
    pairs = [(p.params, p.loss) if isinstance(p, ParetoPoint) else tuple(p) for p in points]
    n = np.array([float(a) for a, _ in pairs], dtype=np.float64)
    loss = np.array([float(b) for _, b in pairs], dtype=np.float64)
    return n, loss


def _residuals(theta, log_n, loss):
    log_nc, log_alpha, log_e = theta
    with np.errstate(over="ignore", invalid="ignore"):
        pred = np.exp(-np.exp(log_alpha) * (log_n - log_nc)) + np.exp(log_e)
    return pred - loss


def _objective(theta, log_n, loss):
    r = _residuals(theta, log_n, loss)
    value = float(np.dot(r, r))
    return value if np.isfinite(value) else 1e300


def _bounds(log_n, loss):
    # N_c near the sampled sizes; alpha_N and E_N kept strictly positive
    span = np.log(100.0)
    return [(log_n.min() - span, log_n.max() + span),
            (np.log(1e-4), np.log(1e3)),
            (np.log(1e-8), np.log(max(loss.max(), 1e-8)))]


def fit_scaling_law(points: Iterable, seed: int = 0, starts: int = 8) -> ScalingFit:
    """Least-squares fit of L(N) by bounded Nelder-Mead over (log N_c, log alpha_N, log E_N), multi-start."""
    n, loss = _as_pairs(points)
    if len(np.unique(n)) < 4:
        raise UnderdeterminedFitError(f"need at least 4 distinct N, got {len(np.unique(n))}")
    if np.any(n <= 0) or not np.all(np.isfinite(loss)):
        raise ValueError("points need positive N and finite loss")
    log_n = np.log(n)
    bounds = _bounds(log_n, loss)
    lower, upper = np.array(bounds).T
    gen = Rng(seed, "scaling-fit").numpy
    base = np.array([log_n.mean(), np.log(0.5), np.log(max(loss.min() * 0.9, 1e-6))])
    initial = [base] + [base + gen.normal(0.0, 1.0, size=3) for _ in range(starts - 1)]
    options = {"xatol": 1e-12, "fatol": 1e-20, "maxiter": 20000, "maxfev": 40000}

    best = None
    for x0 in initial:
        result = minimize(_objective, np.clip(x0, lower, upper), args=(log_n, loss), method="Nelder-Mead",
                          bounds=bounds, options=options)
        if best is None or result.fun < best.fun:
            best = result
    # restart from the best simplex
    best = minimize(_objective, best.x, args=(log_n, loss), method="Nelder-Mead", bounds=bounds, options=options)

    x = np.clip(best.x, lower, upper)
    r = _residuals(x, log_n, loss)
    return ScalingFit(float(np.exp(x[0])), float(np.exp(x[1])), float(np.exp(x[2])),
                      float(np.sqrt(np.mean(r ** 2))), int(len(n)))


def _evaluate(model: ElasticModel, table: CostTable, tokens: torch.Tensor, sel: Selection,
              batch_size: int, budget: float = float("nan")) -> ParetoPoint:
    return ParetoPoint(sel.describe(), model.count_params(sel), selection_cost(table, sel),
                       evaluate_loss(model, tokens, sel, batch_size), budget)


def _map(fn, items, workers: int):
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def pareto_sweep(model: ElasticModel, table: CostTable, tokens: torch.Tensor, routers: Optional[Router] = None,
                 budgets: Sequence[float] = (), selections: Sequence[Selection] = (), batch_size: int = 32,
                 workers: int = 1) -> List[ParetoPoint]:
    """Routed points (one per budget) and explicit Selections, sorted by cost."""
    if len(tokens) == 0:
        raise ValueError("validation corpus is empty")
    points = []
    if routers is not None:
        for budget in budgets:
            row = evaluate_routed(model, routers, table, budget, tokens, batch_size)
            points.append(ParetoPoint(row["selection"], row["params"], row["cost"], row["loss"], budget))
    full = table.full_cost
    points += _map(lambda sel: _evaluate(model, table, tokens, sel, batch_size, selection_cost(table, sel) / full),
                   list(selections), workers)
    return sorted(points, key=lambda p: p.cost)


def random_selection_cloud(model: ElasticModel, table: CostTable, tokens: torch.Tensor, count: int = 200,
                           rng: Optional[Rng] = None, batch_size: int = 32, workers: int = 1) -> List[ParetoPoint]:
    rng = rng or Rng(0, "cloud")
    selections = [sample_selection(rng, model.config) for _ in range(count)]
    return pareto_sweep(model, table, tokens, selections=selections, batch_size=batch_size, workers=workers)


def random_matched_cloud(model: ElasticModel, table: CostTable, tokens: torch.Tensor, budget: float,
                         count: int = 200, band: float = 0.02, rng: Optional[Rng] = None, batch_size: int = 32,
                         workers: int = 1, max_draws: int = 200000) -> List[ParetoPoint]:
    """Random Selections whose normalized cost lies within ``band`` (relative) of ``budget``."""
    rng = rng or Rng(0, "matched-cloud")
    full = table.full_cost
    selections = []
    for _ in range(max_draws):
        sel = sample_selection(rng, model.config)
        if abs(selection_cost(table, sel) / full / budget - 1.0) <= band:
            selections.append(sel)
            if len(selections) == count:
                break
    if not selections:
        raise ValueError(f"no random Selection within {band:.0%} of budget {budget}")
    return pareto_sweep(model, table, tokens, selections=selections, batch_size=batch_size, workers=workers)


def matched_cost_summary(cloud: Sequence[ParetoPoint], routed_loss: float) -> Dict[str, float]:
    losses = np.array([p.loss for p in cloud])
    return {
        "count": int(len(losses)),
        "p25": float(np.percentile(losses, 25)),
        "median": float(np.median(losses)),
        "routed": float(routed_loss),
        "routed_rank": float((losses < routed_loss).mean()),
    }


def points_to_frame(points: Sequence[ParetoPoint]) -> pd.DataFrame:
    frame = pd.DataFrame([asdict(p) for p in points], columns=["selection", "params", "cost", "loss", "budget"])
    return frame[PARETO_COLUMNS].sort_values("cost", kind="mergesort").reset_index(drop=True)


def write_pareto_csv(points: Sequence[ParetoPoint], path):
    frame = points_to_frame(points)
    if frame[["params", "cost", "loss"]].isna().any().any():
        raise ValueError("Pareto points should carry no NaN fields")
    frame["budget"] = frame["budget"].fillna(frame["cost"] / frame["cost"].max())
    frame.to_csv(path, index=False, float_format="%.10g")
