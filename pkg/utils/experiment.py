"""
Shared experiment pipeline behind the CLI commands.

One seed drives the whole chain (benchmark graph, split, shift, pretraining,
initialization, selection, masking), so two arms run with the same seed are a
paired comparison: they share the graph, the backbone and the candidate set.
"""
import copy
import logging
import time
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from utils.backbone import accuracy, forward, parameter_count, pretrain
from utils.graph_store import (
    apply_orthogonal_shift, load_dataset, make_degree_concept_split, make_preferential_attachment,
    make_random_split, make_synthetic_sbm, normalize,
)
from utils.iamae import adapt, infer
from utils.intervention import initialize

logger = logging.getLogger(__name__)

ADAPTED_COLUMNS = ["accuracy_adapted", "id_accuracy_adapted", "id_retention", "selected",
                   "tunable_param_count", "decoder_param_count", "intervention_flops"]


@dataclass
class Benchmark:
    """Source graph for pretraining, target graph for adaptation, shared split"""
    name: str
    source: object
    target: object
    masks: object
    rotation: object = None


def build_benchmark(data_cfg, seed):
    """
    Graph, split and shift for one seed.

    ``covariate`` rotates the test rows' features with a Haar Q, ``degree``
    splits by degree quantile, ``none`` leaves the random split unshifted.
    """
    if data_cfg.source == "files":
        g, masks = load_dataset(data_cfg.edge_file, data_cfg.feature_file, data_cfg.label_file, data_cfg.split_file)
    else:
        if data_cfg.source == "sbm":
            g = make_synthetic_sbm(data_cfg.n, data_cfg.classes, data_cfg.p_in, data_cfg.p_out,
                                   data_cfg.feature_dim, seed, mean_scale=data_cfg.mean_scale)
        else:
            g = make_preferential_attachment(data_cfg.n, data_cfg.attachment, data_cfg.classes,
                                             data_cfg.feature_dim, seed, mean_scale=data_cfg.mean_scale,
                                             homophily=data_cfg.homophily)
        if data_cfg.shift == "degree":
            masks = make_degree_concept_split(g, data_cfg.quantile, seed=seed, val_fraction=data_cfg.val_fraction)
        else:
            masks = make_random_split(g.n, data_cfg.train_fraction, data_cfg.val_fraction, seed)

    rotation = None
    target = g
    if data_cfg.shift == "covariate":
        target, rotation = apply_orthogonal_shift(g, seed, nodes=masks.indices("test"))
    name = f"{data_cfg.source}-{data_cfg.shift}"
    return Benchmark(name, g, target, masks, rotation)


@dataclass
class ResultRow:
    seed: int
    split: str
    arm: str
    accuracy_frozen: float
    accuracy_adapted: float = float("nan")
    id_accuracy_frozen: float = float("nan")
    id_accuracy_adapted: float = float("nan")
    id_retention: float = float("nan")
    selected: int = 0
    tunable_param_count: int = 0
    backbone_param_count: int = 0
    decoder_param_count: int = 0
    intervention_flops: int = 0
    wall_time: float = 0.0


def _retention(adapted, frozen):
    return adapted / frozen if frozen > 0 else float("nan")


def evaluate_frozen(bb, bench, seed, arm="frozen"):
    target_bb = bb.with_graph(normalize(bench.target.adj))
    logits, _ = forward(target_bb, bench.target.features)
    labels = bench.target.labels
    id_acc = accuracy(logits.data, labels, bench.masks.indices("train"))
    return ResultRow(
        seed=seed, split=bench.name, arm=arm,
        accuracy_frozen=accuracy(logits.data, labels, bench.masks.indices("test")),
        id_accuracy_frozen=id_acc, backbone_param_count=parameter_count(bb),
    )


def evaluate_adapted(bb, bench, variant, mask, mode, seed, arm, decoder_param_count=0, wall_time=0.0):
    """Frozen and adapted accuracies on the test (OOD) and train (ID) nodes"""
    row = evaluate_frozen(bb, bench, seed, arm=arm)
    target_bb = bb.with_graph(normalize(bench.target.adj))
    logits = infer(target_bb, bench.target.features, variant, mask, mode=mode)
    labels = bench.target.labels
    row.accuracy_adapted = accuracy(logits, labels, bench.masks.indices("test"))
    row.id_accuracy_adapted = accuracy(logits, labels, bench.masks.indices("train"))
    row.id_retention = _retention(row.id_accuracy_adapted, row.id_accuracy_frozen)
    row.selected = mask.size
    row.tunable_param_count = variant.parameter_count()
    row.decoder_param_count = decoder_param_count
    row.intervention_flops = variant.flops(mask.size)
    row.wall_time = wall_time
    return row


def adapt_seed(cfg, bb, bench, seed, arm="adapted"):
    """
    Initialize, adapt and evaluate one intervention on a prepared benchmark.

    Returns:
    - (ResultRow, adapted variant, AdaptReport)
    """
    started = time.perf_counter()
    target_bb = bb.with_graph(normalize(bench.target.adj))
    variant = initialize(cfg.intervention.kind, bb.dims, cfg.intervention.rank, cfg.intervention.layers, seed)
    variant, report = adapt(target_bb, bench.target, bench.masks, cfg.selection, variant,
                            cfg.masking, cfg.ssl, seed)
    elapsed = time.perf_counter() - started
    row = evaluate_adapted(bb, bench, variant, report.mask, cfg.run.mode, seed, arm,
                           decoder_param_count=report.decoder_param_count, wall_time=elapsed)
    logger.info("seed %d arm %s: frozen %.4f adapted %.4f (|P| = %d)",
                seed, arm, row.accuracy_frozen, row.accuracy_adapted, row.selected)
    return row, variant, report


def run_seed(cfg, seed, arm="adapted"):
    """Full chain for one seed: benchmark, pretraining, adaptation, evaluation"""
    bench = build_benchmark(cfg.data, seed)
    bb = pretrain(bench.source, bench.masks, cfg.backbone, seed)
    row, _, _ = adapt_seed(cfg, bb, bench, seed, arm=arm)
    return row


def with_overrides(cfg, overrides):
    arm_cfg = copy.deepcopy(cfg)
    for key, value in overrides.items():
        arm_cfg.set(key, value)
    return arm_cfg.validate()


def ablation_arms(kind="full"):
    """
    Named override sets for the ablation table.

    ``variant``, ``objective``, ``selection`` and ``decoder`` vary one factor;
    ``full`` crosses variants, objectives and selection strategies.
    """
    variants = {v: {"intervention.kind": v} for v in ("loreft", "direft", "uv")}
    objectives = {o: {"ssl.objective": o} for o in ("mae_uniform", "iamae", "entropy_only")}
    selections = {
        "bernoulli": {"selection.mode": "bernoulli"},
        "top10": {"selection.mode": "top_fraction", "selection.fraction": 0.1},
        "random10": {"selection.mode": "random_fraction", "selection.fraction": 0.1},
        "all-test": {"selection.mode": "all", "selection.candidate_set": "test_only"},
        "all-nodes": {"selection.mode": "all", "selection.candidate_set": "all_nodes"},
    }
    decoders = {d: {"ssl.decoder": d} for d in ("gcn", "mlp", "linear")}
    if kind == "variant":
        return variants
    if kind == "objective":
        return objectives
    if kind == "selection":
        return selections
    if kind == "decoder":
        return decoders
    arms = {}
    for v, v_over in variants.items():
        for o in ("mae_uniform", "iamae"):
            for s in ("bernoulli", "top10", "random10"):
                arms[f"{v}/{o}/{s}"] = {**v_over, **objectives[o], **selections[s]}
    return arms


def run_paired(cfg, arms, seeds, progress=None):
    """
    Every arm on every seed, pretraining once per seed.

    Returns a DataFrame of ResultRows including one ``frozen`` row per seed.
    """
    prepared = {name: with_overrides(cfg, overrides) for name, overrides in arms.items()}
    seeds = list(seeds)
    iterator = progress(seeds) if progress is not None else seeds
    rows = []
    for seed in iterator:
        bench = build_benchmark(cfg.data, seed)
        bb = pretrain(bench.source, bench.masks, cfg.backbone, seed)
        rows.append(evaluate_frozen(bb, bench, seed))
        for name, arm_cfg in prepared.items():
            row, _, _ = adapt_seed(arm_cfg, bb, bench, seed, arm=name)
            rows.append(row)
    return pd.DataFrame([asdict(r) for r in rows])


def aggregate(table, by="arm"):
    """Mean and standard deviation of every numeric column per ``by`` group"""
    numeric = table.select_dtypes(include=[np.number]).drop(columns=["seed"], errors="ignore")
    grouped = numeric.groupby(table[by], sort=False)
    means = grouped.mean().add_suffix("_mean")
    stds = grouped.std(ddof=0).add_suffix("_std")
    summary = pd.concat([means, stds], axis=1).reset_index()
    summary.insert(1, "seeds", grouped.size().values)
    return summary


def with_summary_rows(table):
    """Per-seed rows followed by ``mean`` and ``std`` rows over the numeric columns"""
    numeric = table.select_dtypes(include=[np.number]).drop(columns=["seed"], errors="ignore")
    mean = numeric.mean()
    std = numeric.std(ddof=0)
    summary = pd.DataFrame([mean, std])
    summary.insert(0, "seed", ["mean", "std"])
    out = pd.concat([table.astype({"seed": object}), summary], ignore_index=True)
    return out[table.columns]


def sweep(cfg, key, values, seeds, progress=None):
    """Paired runs for each value of one config key; one aggregate row per value"""
    arms = {f"{key}={value}": {key: value} for value in values}
    table = run_paired(cfg, arms, seeds, progress=progress)
    summary = aggregate(table[table["arm"] != "frozen"])
    summary.insert(0, "key", key)
    summary.insert(1, "value", [str(v) for v in values])
    return table, summary
