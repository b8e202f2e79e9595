"""Stage functions of the conversion pipeline.

Each stage reads the artifacts of the stages before it from the output
directory and writes its own into a sub-directory named after it; no stage
touches another stage's files.
"""
import dataclasses
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import pandas as pd
from torch.utils.tensorboard import SummaryWriter

from checkpoint import exists, load_model, save_model
from dataset import Corpus, CorpusConfig, load_corpus
from elastic import TrainConfig, reference_selections, run_elastic_ct
from evaluation import (architecture_profile, domain_degradation, evaluate_budgets, evaluate_loss,
                        layer_degradation)
from importance import apply_plan, build_plan, permutation_ablation, score_importance
from latency import CostTable, build_cost_table
from model import ElasticModel, ModelConfig
from ops import Rng
from router import (DynamicRouter, RouterConfig, StaticRouter, SurrogateModel, extract_subnetwork, joint_finetune,
                    load_routers, route_static, router_decision_stats, save_routers, train_routers)
from scaling import (ScalingFit, fit_scaling_law, matched_cost_summary, pareto_sweep, random_matched_cloud,
                     random_selection_cloud, write_pareto_csv)
from util import (draw_pareto, draw_router_histogram, draw_router_losses, draw_trajectory, read_json,
                  write_json)

STAGES = ("pretrain", "sort", "elastic-ct", "build-lut", "train-routers", "finetune", "extract", "eval",
          "pareto", "fit-law", "report")


class StageOrderError(RuntimeError):
    pass


@dataclass
class ImportanceConfig:
    num_samples: int = 512
    batch_size: int = 32
    ablation_fraction: float = 0.5


@dataclass
class LatencyConfig:
    kind: str = "analytic-flops"
    repeats: int = 30
    warmup: int = 5
    batch_size: int = 2
    seq_len: int = 64


@dataclass
class EvalConfig:
    budgets: Tuple[float, ...] = (0.5, 0.7, 1.0)
    batch_size: int = 32
    layer_fractions: Tuple[float, ...] = (0.75, 0.5)
    histogram_budget: float = 0.6


@dataclass
class ScalingConfig:
    budgets: Tuple[float, ...] = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)
    random_count: int = 200
    band: float = 0.02
    starts: int = 8


@dataclass
class PipelineConfig:
    seed: int
    out_dir: str = "./output"
    model: ModelConfig = field(default_factory=ModelConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(num_sampled=0))
    train: TrainConfig = field(default_factory=TrainConfig)
    importance: ImportanceConfig = field(default_factory=ImportanceConfig)
    latency: LatencyConfig = field(default_factory=LatencyConfig)
    router: RouterConfig = field(default_factory=RouterConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    scaling: ScalingConfig = field(default_factory=ScalingConfig)
    tensorboard: bool = True
    workers: int = 1

    def __post_init__(self):
        # every stage draws from the pipeline seed
        self.pretrain = dataclasses.replace(self.pretrain, seed=self.seed)
        self.train = dataclasses.replace(self.train, seed=self.seed)
        self.router = dataclasses.replace(self.router, seed=self.seed)
        for path in self.corpus.paths:
            if not Path(path).exists():
                raise FileNotFoundError(f"corpus path {path} does not exist")

    @property
    def out(self):
        return Path(self.out_dir)

    def to_dict(self):
        values = dataclasses.asdict(self)
        values["router"] = self.router.to_dict()
        return values


_sections = {
    "model": ModelConfig.from_dict,
    "corpus": lambda v: CorpusConfig(**v),
    "pretrain": lambda v: TrainConfig.from_dict({"num_sampled": 0, **v}),
    "train": TrainConfig.from_dict,
    "importance": lambda v: ImportanceConfig(**v),
    "latency": lambda v: LatencyConfig(**v),
    "router": RouterConfig.from_dict,
    "eval": lambda v: EvalConfig(**v),
    "scaling": lambda v: ScalingConfig(**v),
}


def load_config(path=None, seed: Optional[int] = None, out_dir: Optional[str] = None) -> PipelineConfig:
    """Config file sections over dataclass defaults; explicit arguments override the file."""
    values = dict(read_json(path)) if path else {}
    if seed is not None:
        values["seed"] = seed
    if out_dir is not None:
        values["out_dir"] = out_dir
    if "seed" not in values:
        raise ValueError("config needs a seed (config file or --seed)")
    kwargs = {}
    for key, value in values.items():
        if key in _sections:
            kwargs[key] = _sections[key](dict(value))
        elif key in ("seed", "out_dir", "tensorboard", "workers"):
            kwargs[key] = value
        else:
            raise ValueError(f"unknown config section {key}")
    return PipelineConfig(**kwargs)


class Artifacts:
    """Paths of every stage's outputs inside the output directory."""

    def __init__(self, out: Path):
        self.out = Path(out)

    def stage_dir(self, stage: str) -> Path:
        path = self.out / stage
        path.mkdir(parents=True, exist_ok=True)
        return path

    pretrain_model = property(lambda self: self.out / "pretrain" / "model")
    sorted_model = property(lambda self: self.out / "sort" / "model")
    elastic_model = property(lambda self: self.out / "elastic-ct" / "model")
    cost_table = property(lambda self: self.out / "build-lut" / "cost_table.csv")
    routers = property(lambda self: self.out / "train-routers" / "routers")
    finetuned_model = property(lambda self: self.out / "finetune" / "model")
    finetuned_routers = property(lambda self: self.out / "finetune" / "routers")
    pareto = property(lambda self: self.out / "pareto" / "pareto.csv")
    fit = property(lambda self: self.out / "fit-law" / "scaling_fit.csv")


def _require(stage: str, needed: str, path: Path, checkpoint: bool = True):
    present = exists(path) if checkpoint else path.exists()
    if not present:
        raise StageOrderError(f"stage '{stage}' needs the output of stage '{needed}' ({path}); "
                              f"run 'elastron {needed}' first")


def _corpus(config: PipelineConfig) -> Corpus:
    return load_corpus(config.corpus, Rng(config.seed))


@contextmanager
def _writer(config: PipelineConfig, stage: str):
    if not config.tensorboard:
        yield None
        return
    writer = SummaryWriter(log_dir=str(config.out / "tensorboard" / stage))
    try:
        yield writer
    finally:
        writer.close()


def _meta(config: PipelineConfig, stage: str, corpus: Optional[Corpus] = None, **extra) -> Dict:
    meta = {"stage": stage, "seed": config.seed}
    if corpus is not None:
        meta["corpus_digest"] = corpus.digest()
    meta.update(extra)
    return meta


def _load_elastic(stem) -> ElasticModel:
    model, _ = load_model(stem)
    if not isinstance(model, ElasticModel):
        raise StageOrderError(f"{stem} does not hold an elastic model")
    return model


def stage_pretrain(config: PipelineConfig, budget=None):
    art = Artifacts(config.out)
    out = art.stage_dir("pretrain")
    corpus = _corpus(config)
    model = ElasticModel(config.model, Rng(config.seed))
    with _writer(config, "pretrain") as writer:
        model, log = run_elastic_ct(model, corpus, config.pretrain, logger=writer)
    log.to_csv(out / "trajectory.csv")
    save_model(model, art.pretrain_model, _meta(config, "pretrain", corpus, train=config.pretrain.to_dict()))
    return model


def stage_sort(config: PipelineConfig, budget=None):
    art = Artifacts(config.out)
    _require("sort", "pretrain", art.pretrain_model)
    out = art.stage_dir("sort")
    corpus = _corpus(config)
    model = _load_elastic(art.pretrain_model)
    scores = score_importance(model, corpus.train, config.importance.num_samples, config.importance.batch_size,
                              workers=config.workers)
    plan = build_plan(scores)
    original = _load_elastic(art.pretrain_model)
    apply_plan(model, plan)
    eval_tokens = corpus.validation if len(corpus.validation) else corpus.train
    ablation = permutation_ablation(original, corpus.train, eval_tokens, config.importance.num_samples,
                                    config.importance.ablation_fraction, config.importance.batch_size,
                                    sorted_model=model)
    pd.DataFrame([ablation]).to_csv(out / "zero_shot.csv", index=False, float_format="%.10g")
    save_model(model, art.sorted_model, _meta(config, "sort", corpus, scores=scores.to_dict(), plan=plan.to_dict()))
    return model


def stage_elastic_ct(config: PipelineConfig, budget=None):
    art = Artifacts(config.out)
    _require("elastic-ct", "sort", art.sorted_model)
    out = art.stage_dir("elastic-ct")
    corpus = _corpus(config)
    model = _load_elastic(art.sorted_model)
    with _writer(config, "elastic-ct") as writer:
        model, log = run_elastic_ct(model, corpus, config.train, logger=writer)
    log.to_csv(out / "trajectory.csv")
    save_model(model, art.elastic_model, _meta(config, "elastic-ct", corpus, train=config.train.to_dict()))
    return model


def stage_build_lut(config: PipelineConfig, budget=None):
    art = Artifacts(config.out)
    _require("build-lut", "elastic-ct", art.elastic_model)
    art.stage_dir("build-lut")
    model = _load_elastic(art.elastic_model)
    lat = config.latency
    table = build_cost_table(model, lat.kind, lat.repeats, lat.warmup, lat.batch_size, lat.seq_len)
    table.to_csv(art.cost_table)
    return table


def _new_routers(config: PipelineConfig):
    rng = Rng(config.seed, "routers")
    if config.router.dynamic:
        routers = DynamicRouter.for_model(config.model, config.router, rng)
    else:
        routers = StaticRouter.for_model(config.model, config.router, rng)
    return routers, SurrogateModel.for_model(config.model, config.router, rng)


def stage_train_routers(config: PipelineConfig, budget=None):
    art = Artifacts(config.out)
    _require("train-routers", "elastic-ct", art.elastic_model)
    _require("train-routers", "build-lut", art.cost_table, checkpoint=False)
    out = art.stage_dir("train-routers")
    corpus = _corpus(config)
    model = _load_elastic(art.elastic_model)
    table = CostTable.from_csv(art.cost_table)
    routers, sm = _new_routers(config)
    with _writer(config, "train-routers") as writer:
        routers, sm, state = train_routers(model, routers, sm, table, config.router.targets, corpus,
                                           config.router, logger=writer)
    state.to_csv(out / "router_losses.csv")
    save_routers(art.routers, routers, sm, config.router, _meta(config, "train-routers", corpus))
    return routers


def stage_finetune(config: PipelineConfig, budget=None):
    art = Artifacts(config.out)
    _require("finetune", "train-routers", art.routers)
    art.stage_dir("finetune")
    corpus = _corpus(config)
    model = _load_elastic(art.elastic_model)
    table = CostTable.from_csv(art.cost_table)
    routers, _, router_config, _ = load_routers(art.routers)
    with _writer(config, "finetune") as writer:
        model, routers = joint_finetune(model, routers, corpus, table, router_config.targets, router_config,
                                        logger=writer)
    save_model(model, art.finetuned_model, _meta(config, "finetune", corpus))
    # the surrogate is dropped from here on
    save_routers(art.finetuned_routers, routers, None, router_config, _meta(config, "finetune", corpus))
    return model, routers


def _finetuned(config: PipelineConfig, stage: str):
    art = Artifacts(config.out)
    _require(stage, "finetune", art.finetuned_model)
    _require(stage, "finetune", art.finetuned_routers)
    model = _load_elastic(art.finetuned_model)
    routers, _, _, _ = load_routers(art.finetuned_routers)
    return model, routers


def stage_extract(config: PipelineConfig, budget=None):
    art = Artifacts(config.out)
    model, routers = _finetuned(config, "extract")
    if isinstance(routers, DynamicRouter):
        raise StageOrderError("extract needs static routers; dynamic routing has no single sub-network")
    out = art.stage_dir("extract")
    budgets = [budget] if budget is not None else list(config.eval.budgets)
    corpus = _corpus(config)
    tokens = corpus.validation if len(corpus.validation) else corpus.train
    rows = []
    for b in budgets:
        dense = extract_subnetwork(model, routers, b)
        sel, _ = route_static(routers, b)
        stem = out / f"subnet_{b:g}"
        save_model(dense, stem, _meta(config, "extract", budget=b, selection=sel.describe()))
        rows.append({"budget": b, "selection": sel.describe(), "params": dense.count_params(),
                     "loss": evaluate_loss(dense, tokens, batch_size=config.eval.batch_size)})
    pd.DataFrame(rows).to_csv(out / "summary.csv", index=False, float_format="%.10g")
    return rows


def stage_eval(config: PipelineConfig, budget=None):
    art = Artifacts(config.out)
    model, routers = _finetuned(config, "eval")
    out = art.stage_dir("eval")
    corpus = _corpus(config)
    table = CostTable.from_csv(art.cost_table)
    tokens = corpus.validation if len(corpus.validation) else corpus.train
    budgets = list(config.eval.budgets) if budget is None else [budget]
    bs = config.eval.batch_size
    evaluate_budgets(model, routers, table, budgets, tokens, bs).to_csv(out / "budgets.csv", index=False,
                                                                         float_format="%.10g")
    domain_degradation(model, routers, table, corpus, budgets, bs).to_csv(out / "domains.csv", index=False,
                                                                          float_format="%.10g")
    layer_degradation(model, tokens, config.eval.layer_fractions, bs).to_csv(out / "layers.csv", index=False,
                                                                             float_format="%.10g")
    router_decision_stats(routers, model, corpus, config.eval.histogram_budget, bs).to_csv(
        out / "router_histogram.csv", index=False, float_format="%.10g")
    if isinstance(routers, StaticRouter):
        architecture_profile(model, routers, budgets).to_csv(out / "architecture.csv", index=False,
                                                             float_format="%.10g")


def stage_pareto(config: PipelineConfig, budget=None):
    art = Artifacts(config.out)
    model, routers = _finetuned(config, "pareto")
    out = art.stage_dir("pareto")
    corpus = _corpus(config)
    table = CostTable.from_csv(art.cost_table)
    tokens = corpus.validation if len(corpus.validation) else corpus.train
    sc, bs = config.scaling, config.eval.batch_size
    rng = Rng(config.seed, "pareto")
    references = list(reference_selections(model.config).values())
    routed = pareto_sweep(model, table, tokens, routers, sorted(set(sc.budgets) | set(config.router.targets)),
                          batch_size=bs)
    points = sorted(routed + pareto_sweep(model, table, tokens, selections=references, batch_size=bs,
                                          workers=config.workers), key=lambda p: p.cost)
    write_pareto_csv(points, art.pareto)
    cloud = random_selection_cloud(model, table, tokens, sc.random_count, rng.stream("cloud"), bs, config.workers)
    write_pareto_csv(cloud, out / "random_cloud.csv")
    rows = []
    for point in routed:
        if point.budget not in config.router.targets:
            continue
        matched = random_matched_cloud(model, table, tokens, point.cost / table.full_cost, sc.random_count,
                                       sc.band, rng.stream(f"matched/{point.budget:g}"), bs, config.workers)
        rows.append({"budget": point.budget, **matched_cost_summary(matched, point.loss)})
    pd.DataFrame(rows).to_csv(out / "matched.csv", index=False, float_format="%.10g")
    return points


def stage_fit_law(config: PipelineConfig, budget=None):
    art = Artifacts(config.out)
    _require("fit-law", "pareto", art.pareto, checkpoint=False)
    art.stage_dir("fit-law")
    frame = pd.read_csv(art.pareto)
    points = list(zip(frame["params"], frame["loss"]))
    fit = fit_scaling_law(points, seed=config.seed, starts=config.scaling.starts)
    fit.to_csv(art.fit)
    return fit


def stage_report(config: PipelineConfig, budget=None):
    art = Artifacts(config.out)
    _require("report", "fit-law", art.fit, checkpoint=False)
    out = art.stage_dir("report")
    rows = []
    for path in sorted(config.out.glob("*/*.csv")):
        if path.parent.name == "report":
            continue
        frame = pd.read_csv(path, comment="#")
        rows.append({"stage": path.parent.name, "file": path.name, "rows": len(frame),
                     "columns": ";".join(frame.columns)})
    pd.DataFrame(rows, columns=["stage", "file", "rows", "columns"]).to_csv(out / "index.csv", index=False)

    pareto = pd.read_csv(art.pareto)
    cloud_path = config.out / "pareto" / "random_cloud.csv"
    cloud = pd.read_csv(cloud_path) if cloud_path.exists() else None
    fit_row = pd.read_csv(art.fit).iloc[0]
    fit = ScalingFit(fit_row["N_c"], fit_row["alpha_N"], fit_row["E_N"], fit_row["rmse"], int(fit_row["n_points"]))
    draw_pareto(pareto, out / "pareto.png", cloud, fit)
    for stage in ("pretrain", "elastic-ct"):
        path = config.out / stage / "trajectory.csv"
        if path.exists():
            draw_trajectory(pd.read_csv(path), out / f"{stage}_trajectory.png")
    losses = config.out / "train-routers" / "router_losses.csv"
    if losses.exists():
        draw_router_losses(pd.read_csv(losses), out / "router_losses.png", config.router.tau)
    histogram = config.out / "eval" / "router_histogram.csv"
    if histogram.exists():
        draw_router_histogram(pd.read_csv(histogram), out / "router_histogram.png")
    return rows


_stage_entrypoints = {
    "pretrain": stage_pretrain,
    "sort": stage_sort,
    "elastic-ct": stage_elastic_ct,
    "build-lut": stage_build_lut,
    "train-routers": stage_train_routers,
    "finetune": stage_finetune,
    "extract": stage_extract,
    "eval": stage_eval,
    "pareto": stage_pareto,
    "fit-law": stage_fit_law,
    "report": stage_report,
}


def is_stage(stage_name):
    return stage_name in _stage_entrypoints


def run_stage(stage_name, config: PipelineConfig, budget: Optional[float] = None):
    if not is_stage(stage_name):
        raise RuntimeError('Unknown stage (%s)' % stage_name)
    config.out.mkdir(parents=True, exist_ok=True)
    write_json(config.to_dict(), config.out / "config.json")
    print(f"[{stage_name}] out: {config.out}")
    return _stage_entrypoints[stage_name](config, budget)


def run_all(config: PipelineConfig):
    for stage in STAGES:
        run_stage(stage, config)
