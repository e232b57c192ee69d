import logging
from pathlib import Path

from commands.common import check_data_paths, output_dir, progress_factory, seed_dir
from utils.backbone import load_backbone
from utils.experiment import adapt_seed, build_benchmark
from utils.graph_store import normalize
from utils.intervention import save_intervention
from utils.selection import write_mask

logger = logging.getLogger(__name__)


def backbone_path(config, args, seed):
    checkpoint = getattr(args, "checkpoint", None)
    if checkpoint:
        return Path(checkpoint)
    return Path(config.run.out_dir) / f"seed-{seed}" / "backbone.json"


def run_adapt_command(config, args):
    """
    Adapt an intervention on every seed's target graph

    Writes intervention.json, adapt_report.jsonl and mask.txt next to the
    backbone checkpoint. A changed backbone fingerprint aborts the run.

    Returns:
    - list of intervention checkpoint paths
    """
    check_data_paths(config)
    output_dir(config)
    paths = []
    for seed in progress_factory(args, "adapt")(config.run.seeds):
        bench = build_benchmark(config.data, seed)
        bb = load_backbone(backbone_path(config, args, seed), normalize(bench.source.adj))
        _, variant, report = adapt_seed(config, bb, bench, seed)

        directory = seed_dir(config, seed)
        path = directory / "intervention.json"
        save_intervention(variant, path)
        report.to_jsonl(directory / "adapt_report.jsonl")
        write_mask(report.mask, directory / "mask.txt")
        paths.append(path)
    return paths
