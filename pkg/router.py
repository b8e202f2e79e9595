"""Budget routers, the loss surrogate and the router training protocol.

A router maps a normalized budget T-hat (and, for the dynamic variant, the
current hidden state of every token) to K logits for each of the 2N choice
slots; slot 2i is the MHA of layer i and slot 2i+1 its MLP.
"""
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call
from tqdm import tqdm

from checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from dataset import Corpus, cycle, make_loader, sequential_batches
from latency import CostTable, constraint_loss, expected_cost
from loss import create_criterion
from model import DenseSubnetwork, ElasticModel, ModelConfig, Selection, _lm_loss
from ops import DTYPE, Rng, ShapeError, gelu, softmax
from opt import create_optimizer


@dataclass
class RouterConfig:
    targets: Tuple[float, ...] = (0.5, 0.6, 0.7)
    lam: float = 1.0
    tau: float = 0.05
    ema_decay: float = 0.95
    temperature: float = 1.0
    gumbel: bool = True
    sm_input: str = "softmax"
    dynamic: bool = False
    static_hidden: int = 16
    dynamic_embed: int = 32
    sm_hidden: int = 64
    steps: int = 500
    batch_size: int = 64
    router_lr: float = 1e-2
    sm_lr: float = 1e-3
    finetune_steps: int = 200
    finetune_lr: float = 1e-4
    cost_margin: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.targets = tuple(float(t) for t in self.targets)
        if not self.targets:
            raise ValueError("router training needs at least one budget target")
        for t in self.targets:
            _check_budget(t)
        if self.sm_input not in ("softmax", "logits"):
            raise ValueError(f"sm_input should be 'softmax' or 'logits', {self.sm_input}")
        if self.temperature <= 0:
            raise ValueError(f"temperature should be positive, {self.temperature}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema_decay should lie in [0, 1), {self.ema_decay}")
        if self.tau < 0:
            raise ValueError(f"tau should be non-negative, {self.tau}")
        if not 0.0 <= self.cost_margin < 1.0:
            raise ValueError(f"cost_margin should lie in [0, 1), {self.cost_margin}")

    @classmethod
    def from_dict(cls, values):
        values = dict(values)
        if "tau" in values and values["tau"] in ("inf", "Infinity"):
            values["tau"] = math.inf
        return cls(**values)

    def to_dict(self):
        values = asdict(self)
        values["targets"] = list(self.targets)
        if math.isinf(self.tau):
            values["tau"] = "inf"
        return values


def _check_budget(budget: float):
    if not 0.0 < float(budget) <= 1.0:
        raise ValueError(f"normalized budget should lie in (0, 1], {budget}")


class StaticRouter(nn.Module):
    """One small perceptron per slot: T-hat -> hidden -> K logits."""

    def __init__(self, num_slots: int, num_candidates: int, hidden: int = 16, rng: Optional[Rng] = None):
        super().__init__()
        self.num_slots = num_slots
        self.num_candidates = num_candidates
        self.hidden = hidden
        self.w1 = nn.Parameter(torch.zeros(num_slots, hidden, dtype=DTYPE))
        self.b1 = nn.Parameter(torch.zeros(num_slots, hidden, dtype=DTYPE))
        self.w2 = nn.Parameter(torch.zeros(num_slots, hidden, num_candidates, dtype=DTYPE))
        self.b2 = nn.Parameter(torch.zeros(num_slots, num_candidates, dtype=DTYPE))
        if rng is not None:
            self.reset_parameters(rng)

    @classmethod
    def for_model(cls, config: ModelConfig, router_config: RouterConfig, rng: Optional[Rng] = None):
        return cls(config.num_slots, config.candidates_per_layer, router_config.static_hidden, rng)

    def reset_parameters(self, rng: Rng):
        init = rng.stream("static-router")
        with torch.no_grad():
            self.w1.copy_(init.normal(self.w1.shape, 1.0))
            self.b1.zero_()
            # output layer starts at zero: every slot ties and routes to its smallest candidate
            self.w2.zero_()
            self.b2.zero_()

    def zero_(self):
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self

    def forward(self, budget):
        """Logits [2N, K]."""
        t = torch.as_tensor(budget, dtype=DTYPE)
        h = gelu(t * self.w1 + self.b1)
        return torch.einsum("sh,shk->sk", h, self.w2) + self.b2


class DynamicRouter(nn.Module):
    """Per-token routing: gelu(T W + LN(h) W_H^T) W_R for each slot, LN without gain or bias."""

    def __init__(self, num_slots: int, num_candidates: int, embed_dim: int, width: int = 32,
                 rng: Optional[Rng] = None):
        super().__init__()
        self.num_slots = num_slots
        self.num_candidates = num_candidates
        self.embed_dim = embed_dim
        self.width = width
        self.w = nn.Parameter(torch.zeros(num_slots, width, dtype=DTYPE))
        self.w_h = nn.Parameter(torch.zeros(num_slots, width, embed_dim, dtype=DTYPE))
        self.w_r = nn.Parameter(torch.zeros(num_slots, width, num_candidates, dtype=DTYPE))
        if rng is not None:
            self.reset_parameters(rng)

    @classmethod
    def for_model(cls, config: ModelConfig, router_config: RouterConfig, rng: Optional[Rng] = None):
        return cls(config.num_slots, config.candidates_per_layer, config.embed_dim,
                   router_config.dynamic_embed, rng)

    def reset_parameters(self, rng: Rng):
        init = rng.stream("dynamic-router")
        with torch.no_grad():
            self.w.copy_(init.normal(self.w.shape, 1.0))
            self.w_h.copy_(init.normal(self.w_h.shape, 1.0 / math.sqrt(self.embed_dim)))
            self.w_r.zero_()

    def zero_(self):
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self

    def forward(self, budget, hidden, slot):
        """Logits [B, S, K] for one slot."""
        if not 0 <= slot < self.num_slots:
            raise IndexError(f"slot {slot} outside [0, {self.num_slots - 1}]")
        if hidden.dim() != 3 or hidden.shape[-1] != self.embed_dim:
            raise ShapeError(f"hidden should be [B, S, {self.embed_dim}], got {tuple(hidden.shape)}")
        t = torch.as_tensor(budget, dtype=DTYPE)
        h = F.layer_norm(hidden, hidden.shape[-1:])
        pre = t * self.w[slot] + torch.matmul(h, self.w_h[slot].t())
        return torch.matmul(gelu(pre), self.w_r[slot])


Router = Union[StaticRouter, DynamicRouter]


class SurrogateModel(nn.Module):
    """Predicts the LM loss of the routed sub-network from the concatenated router outputs r."""

    def __init__(self, input_dim: int, hidden: int = 64, embed_dim: Optional[int] = None, rng: Optional[Rng] = None):
        super().__init__()
        self.input_dim = input_dim
        self.hidden = hidden
        self.embed_dim = embed_dim
        self.w_s1 = nn.Parameter(torch.zeros(hidden, input_dim, dtype=DTYPE))
        self.b1 = nn.Parameter(torch.zeros(hidden, dtype=DTYPE))
        self.w_s2 = nn.Parameter(torch.zeros(hidden, 1, dtype=DTYPE))
        self.b2 = nn.Parameter(torch.zeros(1, dtype=DTYPE))
        self.hidden_proj = nn.Parameter(torch.zeros(hidden, embed_dim, dtype=DTYPE)) if embed_dim else None
        if rng is not None:
            self.reset_parameters(rng)

    @classmethod
    def for_model(cls, config: ModelConfig, router_config: RouterConfig, rng: Optional[Rng] = None):
        embed_dim = config.embed_dim if router_config.dynamic else None
        return cls(config.num_slots * config.candidates_per_layer, router_config.sm_hidden, embed_dim, rng)

    def reset_parameters(self, rng: Rng):
        init = rng.stream("surrogate")
        with torch.no_grad():
            self.w_s1.copy_(init.normal(self.w_s1.shape, 1.0 / math.sqrt(self.input_dim)))
            self.w_s2.copy_(init.normal(self.w_s2.shape, 1.0 / math.sqrt(self.hidden)))
            if self.hidden_proj is not None:
                self.hidden_proj.copy_(init.normal(self.hidden_proj.shape, 1.0 / math.sqrt(self.embed_dim)))

    def warm_start(self, value: float):
        """Predict ``value`` everywhere; the hidden layer keeps its random weights."""
        with torch.no_grad():
            self.w_s2.zero_()
            self.b2.fill_(float(value))

    def forward(self, r, h_n=None):
        pre = torch.matmul(r, self.w_s1.t()) + self.b1
        if h_n is not None:
            if self.hidden_proj is None:
                raise ShapeError("this surrogate takes no hidden state")
            pre = pre + torch.matmul(h_n, self.hidden_proj.t())
        return (torch.matmul(gelu(pre), self.w_s2) + self.b2).squeeze(-1)


def surrogate_forward(sm: SurrogateModel, r: torch.Tensor, h_n: Optional[torch.Tensor] = None) -> torch.Tensor:
    """One predicted loss per row of r ([K*2N] gives a scalar, [B, K*2N] gives [B])."""
    if r.shape[-1] != sm.input_dim:
        raise ShapeError(f"router output of length {r.shape[-1]}, surrogate expects {sm.input_dim}")
    if h_n is not None and h_n.shape[:-1] != r.shape[:-1]:
        raise ShapeError(f"hidden state {tuple(h_n.shape)} not aligned with router output {tuple(r.shape)}")
    return sm(r, h_n)


def _hard(logits, budget=None):
    # torch.argmax returns the first maximal index; the full budget always takes the largest candidate
    if budget is not None and float(budget) == 1.0:
        choices = torch.full(logits.shape[:-1], logits.shape[-1] - 1, dtype=torch.long)
    else:
        choices = torch.argmax(logits, dim=-1)
    return choices, F.one_hot(choices, logits.shape[-1]).to(DTYPE)


def route_static(routers: StaticRouter, budget: float) -> Tuple[Selection, torch.Tensor]:
    _check_budget(budget)
    with torch.no_grad():
        logits = routers(budget)
    choices, _ = _hard(logits, budget)
    return Selection.from_slots(choices.tolist()), logits


def route_dynamic(routers: DynamicRouter, budget: float, hidden: torch.Tensor, slot: int):
    """Per-token hard choices [B, S] and logits [B, S, K]."""
    _check_budget(budget)
    with torch.no_grad():
        logits = routers(budget, hidden, slot)
    choices, _ = _hard(logits, budget)
    return choices, logits


class StaticGate:
    """Gating for the elastic forward from a static router at one budget.

    The realized choice is the hard argmax (optionally Gumbel-perturbed). ``relaxed``
    holds that one-hot with the softmax gradient attached; with ``straight_through``
    it is also what the forward sees.
    """

    def __init__(self, router: StaticRouter, budget: float, temperature: float = 1.0,
                 noise: Optional[Rng] = None, straight_through: bool = True):
        self.logits = router(budget)
        self.probs = softmax(self.logits / temperature)
        scores = self.logits.detach() / temperature
        if noise is not None:
            scores = scores + noise.gumbel(scores.shape)
        self.choices, hard = _hard(scores, budget)
        self.relaxed = hard - self.probs.detach() + self.probs
        self.weights = self.relaxed if straight_through else hard

    def selection(self):
        return Selection.from_slots(self.choices.tolist())

    def slot_probs(self):
        return self.probs

    def __call__(self, slot, hidden):
        return self.weights[slot]


class DynamicGate:
    """Per-token gating from a dynamic router; records probabilities and choices per slot."""

    def __init__(self, router: DynamicRouter, budget: float, temperature: float = 1.0,
                 noise: Optional[Rng] = None, straight_through: bool = True):
        self.router = router
        self.budget = budget
        self.temperature = temperature
        self.noise = noise
        self.straight_through = straight_through
        self.probs: Dict[int, torch.Tensor] = {}
        self.choices: Dict[int, torch.Tensor] = {}
        self.relaxed: Dict[int, torch.Tensor] = {}

    def __call__(self, slot, hidden):
        logits = self.router(self.budget, hidden.detach(), slot)
        probs = softmax(logits / self.temperature)
        scores = logits.detach() / self.temperature
        if self.noise is not None:
            scores = scores + self.noise.gumbel(scores.shape)
        choices, hard = _hard(scores, self.budget)
        self.probs[slot] = probs
        self.choices[slot] = choices
        self.relaxed[slot] = hard - probs.detach() + probs
        return self.relaxed[slot] if self.straight_through else hard

    def slot_probs(self):
        """Token-averaged probabilities [2N, K]."""
        return torch.stack([self.probs[s].mean(dim=(0, 1)) for s in sorted(self.probs)])

    def sequence_choices(self):
        """Per-sequence realized choice frequencies flattened in slot order [B, 2N*K], carrying the softmax gradient."""
        per_slot = torch.stack([self.relaxed[s].mean(dim=1) for s in sorted(self.relaxed)], dim=1)
        return per_slot.reshape(per_slot.shape[0], -1)

    def frequencies(self):
        """Fraction of tokens taking each candidate [2N, K]."""
        k = self.router.num_candidates
        return torch.stack([F.one_hot(self.choices[s].reshape(-1), k).to(DTYPE).mean(dim=0)
                            for s in sorted(self.choices)])


def make_gate(routers: Router, budget: float, temperature: float = 1.0, noise: Optional[Rng] = None,
              straight_through: bool = True):
    if isinstance(routers, DynamicRouter):
        return DynamicGate(routers, budget, temperature, noise, straight_through)
    return StaticGate(routers, budget, temperature, noise, straight_through)


@dataclass
class RouterTrainState:
    tau: float = 0.05
    lam: float = 1.0
    phase: str = "sm-only"
    sm_error_ema: float = math.inf
    step: int = 0
    logs: List[Dict] = field(default_factory=list)

    @property
    def gate_open(self):
        return self.sm_error_ema < self.tau

    def update_ema(self, value: float, decay: float):
        if math.isinf(self.sm_error_ema):
            self.sm_error_ema = float(value)
        else:
            self.sm_error_ema = decay * self.sm_error_ema + (1.0 - decay) * float(value)
        self.phase = "joint" if self.gate_open else "sm-only"

    def to_frame(self):
        return pd.DataFrame(self.logs, columns=["step", "l2_loss", "lm_loss", "latency_loss", "phase",
                                                "sm_error_ema", "sm_grad_applied"])

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.10g")


@contextmanager
def frozen(module: nn.Module):
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)


def _router_inputs(gate, sm_input):
    # "softmax": the realized one-hot choices carrying the softmax gradient
    if isinstance(gate, DynamicGate):
        if sm_input == "logits":
            raise ValueError("dynamic routers feed the surrogate with probabilities")
        return gate.sequence_choices()
    r = gate.relaxed if sm_input == "softmax" else gate.logits
    return r.reshape(1, -1)


def routed_loss(model: ElasticModel, routers: Router, tokens: torch.Tensor, budget: float) -> float:
    """LM loss of the noise-free routed forward at one budget."""
    with torch.no_grad():
        if isinstance(routers, DynamicRouter):
            return float(model.lm_loss(tokens, gating=DynamicGate(routers, budget, straight_through=False)))
        sel, _ = route_static(routers, budget)
        return float(model.lm_loss(tokens, sel))


def _hinge_targets(targets, config):
    # the hinge sits below each budget so the argmax Selection stays inside it
    return [float(t) * (1.0 - config.cost_margin) for t in targets]


def _routed_sample(model: ElasticModel, routers: Router, tokens: torch.Tensor, budget: float,
                   config: RouterConfig, noise: Optional[Rng]):
    """Realize the hard routed forward; returns (gate, per-row true loss, h_N or None)."""
    gate = make_gate(routers, budget, config.temperature, noise, straight_through=False)
    if isinstance(gate, DynamicGate):
        logits, hidden = model(tokens, gating=gate, return_hidden=True)
        true = _lm_loss(logits.detach(), tokens, 'sequence')
        return gate, true, hidden.detach().mean(dim=1)
    with torch.no_grad():
        true = model.lm_loss(tokens, gate.selection()).reshape(1)
    return gate, true, None


def train_routers(model: ElasticModel, routers: Router, sm: SurrogateModel, table: CostTable,
                  targets: Sequence[float], corpus: Corpus, config: RouterConfig,
                  state: Optional[RouterTrainState] = None, logger=None,
                  progress: bool = True) -> Tuple[Router, SurrogateModel, RouterTrainState]:
    """Threshold-gated router training against a frozen model.

    Every step the surrogate is fitted to the true loss of the realized
    Selections; the routers always follow the latency hinge on expected cost,
    and follow the surrogate's gradient only while its error EMA is below tau.
    The logged lm_loss is the noise-free routed loss on one fixed batch.
    """
    if not targets:
        raise ValueError("router training needs at least one budget target")
    for t in targets:
        _check_budget(t)
    state = state or RouterTrainState(tau=config.tau, lam=config.lam)
    table = table.normalized()
    rng = Rng(config.seed)
    batches = cycle(make_loader(corpus.train, config.batch_size, rng.stream("router-data")))
    monitor = next(iter(make_loader(corpus.train, config.batch_size, rng.stream("router-monitor"))))
    hinge_targets = _hinge_targets(targets, config)
    noise = rng.stream("gumbel") if config.gumbel else None
    l2 = create_criterion('l2')
    router_optimizer = create_optimizer(routers.parameters(), lr=config.router_lr)
    sm_optimizer = create_optimizer(sm.parameters(), lr=config.sm_lr)
    sm_params = dict(sm.named_parameters())

    with frozen(model):
        for _ in tqdm(range(config.steps), disable=not progress):
            tokens = next(batches)
            samples = [_routed_sample(model, routers, tokens, t, config, noise) for t in targets]
            if state.step == 0 and math.isinf(state.sm_error_ema):
                sm.warm_start(float(torch.cat([true for _, true, _ in samples]).mean()))

            sm_optimizer.zero_grad(set_to_none=True)
            sm_loss = sum(l2(sm(_router_inputs(gate, config.sm_input).detach(), h), true)
                          for gate, true, h in samples) / len(samples)
            sm_loss.backward()
            sm_optimizer.step()
            state.update_ema(float(sm_loss.detach()), config.ema_decay)

            costs = torch.stack([expected_cost(table, gate.slot_probs()) for gate, _, _ in samples])
            latency_loss = constraint_loss(costs, hinge_targets)
            router_loss = state.lam * latency_loss
            applied = state.gate_open
            if applied:
                detached = {name: p.detach() for name, p in sm_params.items()}
                predicted = [functional_call(sm, detached, (_router_inputs(gate, config.sm_input), h)).mean()
                             for gate, _, h in samples]
                router_loss = router_loss + sum(predicted) / len(predicted)
            router_optimizer.zero_grad(set_to_none=True)
            if router_loss.requires_grad:
                router_loss.backward()
                router_optimizer.step()

            lm_loss = sum(routed_loss(model, routers, monitor, t) for t in targets) / len(targets)
            state.logs.append({
                "step": state.step,
                "l2_loss": float(sm_loss.detach()),
                "lm_loss": lm_loss,
                "latency_loss": float(latency_loss.detach()),
                "phase": state.phase,
                "sm_error_ema": state.sm_error_ema,
                "sm_grad_applied": applied,
            })
            if logger is not None:
                logger.add_scalar("Router/l2_loss", float(sm_loss.detach()), state.step)
                logger.add_scalar("Router/lm_loss", lm_loss, state.step)
                logger.add_scalar("Router/latency_loss", float(latency_loss.detach()), state.step)
                logger.add_scalar("Router/sm_error_ema", state.sm_error_ema, state.step)
            state.step += 1
    return routers, sm, state


def joint_finetune(model: ElasticModel, routers: Router, corpus: Corpus, table: CostTable,
                   targets: Sequence[float], config: RouterConfig, steps: Optional[int] = None, logger=None,
                   progress: bool = True) -> Tuple[ElasticModel, Router]:
    """Fine-tune model and routers together on routed LM loss plus the latency hinge; the surrogate is not used."""
    steps = config.finetune_steps if steps is None else steps
    if steps == 0:
        return model, routers
    table = table.normalized()
    rng = Rng(config.seed)
    batches = cycle(make_loader(corpus.train, config.batch_size, rng.stream("finetune-data")))
    optimizer = torch.optim.Adam([
        {"params": [p for p in model.parameters() if p.requires_grad], "lr": config.finetune_lr},
        {"params": list(routers.parameters()), "lr": config.router_lr},
    ])
    model.train()
    for step in tqdm(range(steps), disable=not progress):
        tokens = next(batches)
        optimizer.zero_grad(set_to_none=True)
        lm_losses, costs = [], []
        for t in targets:
            gate = make_gate(routers, t, config.temperature)
            lm_losses.append(model.lm_loss(tokens, gating=gate))
            costs.append(expected_cost(table, gate.slot_probs()))
        latency_loss = constraint_loss(torch.stack(costs), _hinge_targets(targets, config))
        loss = sum(lm_losses) + config.lam * latency_loss
        loss.backward()
        optimizer.step()
        if logger is not None:
            logger.add_scalar("Finetune/lm_loss", float(sum(lm_losses)) / len(lm_losses), step)
            logger.add_scalar("Finetune/latency_loss", float(latency_loss), step)
    model.eval()
    return model, routers


def extract_subnetwork(model: ElasticModel, routers: StaticRouter, budget: float) -> DenseSubnetwork:
    sel, _ = route_static(routers, budget)
    return DenseSubnetwork.from_elastic(model, sel)


def router_decision_stats(routers: Router, model: ElasticModel, corpus: Corpus, budget: float,
                          batch_size: int = 32) -> pd.DataFrame:
    """Candidate frequency per slot and validation domain (columns slot, candidate, domain, frequency)."""
    _check_budget(budget)
    k = routers.num_candidates
    rows = []
    for domain in corpus.domains:
        tokens = corpus.domain_tokens(domain)
        if len(tokens) == 0:
            continue
        counts = torch.zeros(routers.num_slots, k, dtype=DTYPE)
        with torch.no_grad():
            for batch in sequential_batches(tokens, batch_size):
                if isinstance(routers, DynamicRouter):
                    gate = DynamicGate(routers, budget, straight_through=False)
                    model(batch, gating=gate)
                    counts += gate.frequencies() * batch.numel()
                else:
                    sel, _ = route_static(routers, budget)
                    counts += F.one_hot(torch.tensor(sel.slots), k).to(DTYPE) * batch.numel()
        frequencies = counts / counts.sum(dim=1, keepdim=True)
        for slot in range(routers.num_slots):
            for candidate in range(k):
                rows.append({"slot": slot, "candidate": candidate, "domain": domain,
                             "frequency": float(frequencies[slot, candidate])})
    return pd.DataFrame(rows, columns=["slot", "candidate", "domain", "frequency"])


def save_routers(stem, routers: Router, sm: Optional[SurrogateModel], config: RouterConfig,
                 meta: Optional[Dict] = None):
    meta = dict(meta or {})
    meta["router_config"] = config.to_dict()
    meta["router_type"] = "dynamic" if isinstance(routers, DynamicRouter) else "static"
    meta["num_slots"] = routers.num_slots
    meta["num_candidates"] = routers.num_candidates
    if isinstance(routers, DynamicRouter):
        meta["embed_dim"] = routers.embed_dim
    tensors = {f"router.{name}": value for name, value in routers.state_dict().items()}
    if sm is not None:
        meta["sm_input_dim"] = sm.input_dim
        meta["sm_embed_dim"] = sm.embed_dim
        tensors.update({f"sm.{name}": value for name, value in sm.state_dict().items()})
    save_checkpoint(stem, tensors, "routers", meta)


def load_routers(stem) -> Tuple[Router, Optional[SurrogateModel], RouterConfig, Dict]:
    tensors, kind, meta = load_checkpoint(stem)
    if kind != "routers":
        raise CheckpointError(f"checkpoint {stem} holds {kind!r}, not routers")
    config = RouterConfig.from_dict(meta["router_config"])
    if meta["router_type"] == "dynamic":
        routers = DynamicRouter(meta["num_slots"], meta["num_candidates"], meta["embed_dim"], config.dynamic_embed)
    else:
        routers = StaticRouter(meta["num_slots"], meta["num_candidates"], config.static_hidden)
    routers.load_state_dict({k[len("router."):]: v for k, v in tensors.items() if k.startswith("router.")})
    sm = None
    if "sm_input_dim" in meta:
        sm = SurrogateModel(meta["sm_input_dim"], config.sm_hidden, meta["sm_embed_dim"])
        sm.load_state_dict({k[len("sm."):]: v for k, v in tensors.items() if k.startswith("sm.")})
    return routers, sm, config, meta
