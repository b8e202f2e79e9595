"""Per-layer, per-candidate cost lookup tables and the budget hinge loss."""
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import pandas as pd
import torch

from loss import create_criterion
from model import ElasticModel, ModelConfig, Selection, causal_mask
from ops import DTYPE, Rng

COST_KINDS = ("analytic-flops", "parameter-count", "measured-latency")


class MeasurementError(RuntimeError):
    pass


@dataclass
class CostTable:
    kind: str
    mha: torch.Tensor  # [N, K]
    mlp: torch.Tensor  # [N, K]
    overhead: float

    def __post_init__(self):
        if self.kind not in COST_KINDS:
            raise RuntimeError('Unknown cost kind (%s)' % self.kind)
        self.mha = torch.as_tensor(self.mha, dtype=DTYPE)
        self.mlp = torch.as_tensor(self.mlp, dtype=DTYPE)
        self.overhead = float(self.overhead)
        if self.mha.shape != self.mlp.shape or self.mha.dim() != 2:
            raise ValueError(f"mha and mlp costs should both be [N, K], {tuple(self.mha.shape)} vs {tuple(self.mlp.shape)}")
        for name, costs in (("mha", self.mha), ("mlp", self.mlp)):
            if not bool(torch.isfinite(costs).all()) or bool((costs < 0).any()):
                raise ValueError(f"{name} costs should be finite and non-negative")
            if costs.shape[1] > 1 and not bool((costs[:, 1:] > costs[:, :-1]).all()):
                raise ValueError(f"{name} costs should strictly increase with the candidate index")
        if not np.isfinite(self.overhead) or self.overhead < 0:
            raise ValueError(f"overhead should be finite and non-negative, {self.overhead}")

    @property
    def num_layers(self):
        return int(self.mha.shape[0])

    @property
    def num_candidates(self):
        return int(self.mha.shape[1])

    @property
    def full_cost(self):
        return self.overhead + float(self.mha[:, -1].sum() + self.mlp[:, -1].sum())

    def normalized(self):
        """Costs as fractions of the full model, so budgets T-hat compare directly."""
        full = self.full_cost
        return CostTable(self.kind, self.mha / full, self.mlp / full, self.overhead / full)

    def as_tensor(self):
        """Slot-interleaved costs [2N, K]: row 2i is layer i's MHA, row 2i+1 its MLP."""
        return torch.stack([self.mha, self.mlp], dim=1).reshape(-1, self.num_candidates)

    def to_frame(self):
        rows = []
        for layer in range(self.num_layers):
            for slot, costs in (("mha", self.mha), ("mlp", self.mlp)):
                for candidate in range(self.num_candidates):
                    rows.append({"layer": layer, "slot": slot, "candidate": candidate,
                                 "cost": float(costs[layer, candidate])})
        return pd.DataFrame(rows, columns=["layer", "slot", "candidate", "cost"])

    def to_csv(self, path):
        path = Path(path)
        with path.open("w", encoding="utf-8", newline="") as f:
            f.write(f"# kind={self.kind} overhead={self.overhead!r}\n")
            self.to_frame().to_csv(f, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path) -> "CostTable":
        path = Path(path)
        with path.open("rt", encoding="utf-8") as f:
            header = f.readline().lstrip("#").split()
        fields = dict(item.split("=", 1) for item in header)
        frame = pd.read_csv(path, skiprows=1)
        n = int(frame["layer"].max()) + 1
        k = int(frame["candidate"].max()) + 1
        costs = {}
        for slot in ("mha", "mlp"):
            part = frame[frame["slot"] == slot].sort_values(["layer", "candidate"])
            costs[slot] = torch.tensor(part["cost"].to_numpy().reshape(n, k), dtype=DTYPE)
        return cls(fields["kind"], costs["mha"], costs["mlp"], float(fields["overhead"]))


@dataclass(frozen=True)
class BudgetTarget:
    value: float       # in the table's units
    normalized: float  # value / full cost

    def __post_init__(self):
        if not 0.0 < self.normalized <= 1.0:
            raise ValueError(f"normalized budget should lie in (0, 1], {self.normalized}")

    @classmethod
    def from_fraction(cls, table: CostTable, fraction: float) -> "BudgetTarget":
        return cls(float(fraction) * table.full_cost, float(fraction))


def _analytic_flops(config: ModelConfig, batch_size: int, seq_len: int):
    b, s, c, hd = batch_size, seq_len, config.embed_dim, config.head_dim
    # QKV + output projections 8·B·S·C·hH, scores and weighted sum 4·B·S²·hH
    mha = [[h * hd * b * s * (8 * c + 4 * s) for h in config.head_counts] for _ in range(config.num_layers)]
    # two projections 4·B·S·C·d, activation B·S·d
    mlp = [[d * b * s * (4 * c + 1) for d in config.mlp_widths] for _ in range(config.num_layers)]
    norms = (2 * config.num_layers + 1) * 5 * b * s * c
    overhead = norms + b * s * c + 2 * b * s * c * config.vocab_size
    return mha, mlp, overhead


def _parameter_counts(config: ModelConfig):
    c, hd = config.embed_dim, config.head_dim
    mha = [[4 * h * hd * c for h in config.head_counts] for _ in range(config.num_layers)]
    mlp = [[2 * d * c for d in config.mlp_widths] for _ in range(config.num_layers)]
    overhead = 4 * c * config.num_layers + 2 * c
    return mha, mlp, overhead


def _median_ms(fn, repeats, warmup):
    try:
        with torch.no_grad():
            for _ in range(warmup):
                fn()
            samples = []
            for _ in range(repeats):
                start = time.perf_counter()
                fn()
                samples.append((time.perf_counter() - start) * 1e3)
    except Exception as e:
        raise MeasurementError(f"timing failed: {e}") from e
    value = float(np.median(samples))
    if not np.isfinite(value) or value < 0:
        raise MeasurementError(f"timing produced {value}")
    return value


def _monotone(row):
    out = []
    for j, value in enumerate(row):
        value = value + 1e-9 * j
        out.append(max(value, out[-1] + 1e-9) if out else value)
    return out


def _measured_latency(model: ElasticModel, repeats: int, warmup: int, batch_size: int, seq_len: int):
    config = model.config
    rng = Rng(0, "latency")
    x = rng.normal((batch_size, seq_len, config.embed_dim))
    tokens = rng.randint(config.vocab_size, (batch_size, seq_len))
    mask = causal_mask(seq_len)
    mha, mlp = [], []
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        for block in model.blocks:
            # each layer timed in isolation
            mha.append(_monotone([_median_ms(lambda h=h: block.attend(x, mask, h), repeats, warmup)
                                  for h in config.head_counts]))
            mlp.append(_monotone([_median_ms(lambda d=d: block.feed_forward(x, d), repeats, warmup)
                                  for d in config.mlp_widths]))
        full = _median_ms(lambda: model(tokens), repeats, warmup)
    finally:
        torch.set_num_threads(previous)
    overhead = max(full - sum(m[-1] for m in mha) - sum(m[-1] for m in mlp), 0.0)
    return mha, mlp, overhead


def build_cost_table(model: ElasticModel, kind: str = "analytic-flops", repeats: int = 30, warmup: int = 5,
                     batch_size: int = 2, seq_len: int = 64) -> CostTable:
    config = model.config
    seq_len = min(seq_len, config.context_len)
    if kind == "analytic-flops":
        mha, mlp, overhead = _analytic_flops(config, batch_size, seq_len)
    elif kind == "parameter-count":
        mha, mlp, overhead = _parameter_counts(config)
    elif kind == "measured-latency":
        if repeats < 1:
            raise ValueError(f"repeats should be at least 1, {repeats}")
        mha, mlp, overhead = _measured_latency(model, repeats, warmup, batch_size, seq_len)
    else:
        raise RuntimeError('Unknown cost kind (%s)' % kind)
    return CostTable(kind, torch.tensor(mha, dtype=DTYPE), torch.tensor(mlp, dtype=DTYPE), overhead)


def selection_cost(table: CostTable, sel: Selection) -> float:
    if sel.num_layers != table.num_layers:
        raise ValueError(f"selection covers {sel.num_layers} layers, table has {table.num_layers}")
    total = table.overhead
    for layer, (mha_choice, mlp_choice) in enumerate(zip(sel.mha, sel.mlp)):
        total += float(table.mha[layer, mha_choice]) + float(table.mlp[layer, mlp_choice])
    return total


def expected_cost(table: CostTable, probs: torch.Tensor) -> torch.Tensor:
    """Probability-weighted LUT cost; probs is [2N, K] in slot order."""
    costs = table.as_tensor()
    if probs.shape != costs.shape:
        raise ValueError(f"probabilities {tuple(probs.shape)} do not match slots {tuple(costs.shape)}")
    return table.overhead + (probs * costs).sum()


def constraint_loss(costs: Union[torch.Tensor, Sequence[float]],
                    targets: Sequence[Union[BudgetTarget, float]]) -> torch.Tensor:
    if isinstance(costs, torch.Tensor):
        costs = costs.reshape(-1)
    else:
        costs = torch.tensor([float(c) for c in costs], dtype=DTYPE)
    values = torch.tensor([t.value if isinstance(t, BudgetTarget) else float(t) for t in targets], dtype=DTYPE)
    if len(costs) != len(values):
        raise ValueError(f"{len(costs)} costs for {len(values)} budget targets")
    return create_criterion('constraint')(costs, values)
