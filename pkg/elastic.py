from dataclasses import asdict, dataclass, field
from typing import Dict, List, Sequence, Tuple

import pandas as pd
import torch
from tqdm import tqdm

from dataset import Corpus, CorpusError, cycle, make_loader
from evaluation import evaluate_loss
from model import ElasticModel, ModelConfig, Selection
from ops import Rng
from opt import create_optimizer, get_lr, warmup_schedule

UNIFORM_WIDTHS = (0.25, 0.5, 0.75, 1.0)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    seq_len: int = 64
    num_sampled: int = 3
    lr: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.0
    seed: int = 0
    val_interval: int = 100
    val_batches: int = 4
    num_random_references: int = 2
    always_include_full: bool = True
    log_interval: int = 20

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps should be at least 1, {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size should be at least 1, {self.batch_size}")
        if self.num_sampled < 0:
            raise ValueError(f"num_sampled should be non-negative, {self.num_sampled}")
        if self.seq_len < 2:
            raise ValueError(f"seq_len should be at least 2, {self.seq_len}")

    @classmethod
    def from_dict(cls, values):
        return cls(**dict(values))

    def to_dict(self):
        return asdict(self)


@dataclass
class TrajectoryLog:
    records: List[Dict] = field(default_factory=list)

    def add(self, step: int, name: str, loss: float, selection: str = ""):
        if self.records and step < self.records[-1]["step"]:
            raise ValueError(f"trajectory steps should be monotone, {step} after {self.records[-1]['step']}")
        self.records.append({"step": step, "name": name, "loss": loss, "selection": selection})

    @property
    def steps(self):
        return sorted({r["step"] for r in self.records})

    def final(self, name: str) -> float:
        return [r["loss"] for r in self.records if r["name"] == name][-1]

    def to_frame(self):
        return pd.DataFrame(self.records, columns=["step", "name", "loss", "selection"])

    def to_csv(self, path):
        self.to_frame()[["step", "name", "loss"]].to_csv(path, index=False, float_format="%.10g")


def sample_selection(rng: Rng, config: ModelConfig) -> Selection:
    """Every MHA and MLP choice drawn independently and uniformly."""
    draws = rng.randint(config.candidates_per_layer, (config.num_slots,))
    return Selection.from_slots(draws.tolist())


def reference_selections(config: ModelConfig, fractions: Sequence[float] = UNIFORM_WIDTHS) -> Dict[str, Selection]:
    references = {}
    for fraction in fractions:
        j = min(range(config.candidates_per_layer),
                key=lambda c: abs(config.mlp_widths[c] / config.mlp_hidden - fraction))
        references[f"uniform-{int(round(fraction * 100))}"] = Selection.uniform(config, j)
    return references


def accumulate_joint_gradients(model: ElasticModel, tokens: torch.Tensor,
                               selections: Sequence[Tuple[str, Selection]]) -> Dict[str, float]:
    """Backpropagate the summed LM loss of every listed sub-network into the shared weights."""
    losses = {}
    for name, sel in selections:
        loss = model.lm_loss(tokens, sel)
        loss.backward()
        losses[name] = float(loss.detach())
    return losses


def joint_step(model, tokens, k, rng, optimizer, include_full=True, scheduler=None):
    """One optimizer step on the full model (optional) plus k random sub-networks; returns the loss per name."""
    selections = [("full", Selection.full(model.config))] if include_full else []
    selections += [(f"sample-{i}", sample_selection(rng, model.config)) for i in range(k)]
    optimizer.zero_grad(set_to_none=True)
    losses = accumulate_joint_gradients(model, tokens, selections)
    optimizer.step()
    if scheduler is not None:
        scheduler.step()
    return losses


def validate(model: ElasticModel, tokens: torch.Tensor, config: TrainConfig, rng: Rng, step: int,
             log: TrajectoryLog, logger=None):
    references = {"full": Selection.full(model.config), **reference_selections(model.config)}
    for i in range(config.num_random_references):
        references[f"random-{i}"] = sample_selection(rng, model.config)
    for name, sel in references.items():
        loss = evaluate_loss(model, tokens, sel, config.batch_size, config.val_batches)
        log.add(step, name, loss, sel.describe())
        if logger is not None:
            logger.add_scalar(f"Val/{name}", loss, step)
    return log


def run_elastic_ct(model: ElasticModel, corpus: Corpus, config: TrainConfig, logger=None,
                   progress: bool = True) -> Tuple[ElasticModel, TrajectoryLog]:
    """Elastic continued training: each step sums the loss of the full model and k random sub-networks.

    With num_sampled == 0 this is ordinary language-model training.
    """
    if len(corpus.train) == 0:
        raise CorpusError("training split is empty")
    rng = Rng(config.seed)
    loader = make_loader(corpus.train, config.batch_size, rng.stream("data"))
    batches = cycle(loader)
    sampling = rng.stream("sampling")
    resampling = rng.stream("references")
    # batches are cropped to the configured window
    window = min(config.seq_len, corpus.seq_len)
    val_tokens = (corpus.validation if len(corpus.validation) else corpus.train)[:, :window]

    optimizer = create_optimizer(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    scheduler = warmup_schedule(optimizer, config.warmup_steps)
    log = TrajectoryLog()

    model.train()
    running = 0.0
    for step in tqdm(range(config.steps), disable=not progress):
        tokens = next(batches)[:, :window]
        losses = joint_step(model, tokens, config.num_sampled, sampling, optimizer,
                            include_full=config.always_include_full, scheduler=scheduler)
        running += sum(losses.values())
        if (step + 1) % config.log_interval == 0:
            train_loss = running / config.log_interval
            if logger is not None:
                logger.add_scalar("Train/loss", train_loss, step)
                logger.add_scalar("Train/lr", get_lr(optimizer), step)
            running = 0.0
        if (step + 1) % config.val_interval == 0 or step + 1 == config.steps:
            validate(model, val_tokens, config, resampling, step + 1, log, logger)
            if progress:
                print(f"[Val] step {step + 1}/{config.steps} || full loss {log.final('full'):4.4} || "
                      f"lr {get_lr(optimizer):.2e}")
    model.eval()
    return model, log
