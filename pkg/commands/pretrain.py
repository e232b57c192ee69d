import json
import logging

from commands.common import check_data_paths, output_dir, progress_factory, seed_dir
from utils.backbone import accuracy, forward, pretrain, save_backbone
from utils.experiment import build_benchmark

logger = logging.getLogger(__name__)


def run_pretrain_command(config, args):
    """
    Pretrain one backbone per seed

    Returns:
    - list of checkpoint paths
    """
    check_data_paths(config)
    output_dir(config)
    paths = []
    for seed in progress_factory(args, "pretrain")(config.run.seeds):
        bench = build_benchmark(config.data, seed)
        history = []
        bb = pretrain(bench.source, bench.masks, config.backbone, seed, history=history)
        directory = seed_dir(config, seed)
        path = directory / "backbone.json"
        save_backbone(bb, path)
        with open(directory / "pretrain_log.jsonl", "w", encoding="utf-8") as f:
            for row in history:
                f.write(json.dumps(row, sort_keys=True) + "\n")

        logits, _ = forward(bb, bench.source.features)
        logger.info("seed %d: train acc %.4f, val acc %.4f, checkpoint %s", seed,
                    accuracy(logits.data, bench.source.labels, bench.masks.indices("train")),
                    accuracy(logits.data, bench.source.labels, bench.masks.indices("val")), path)
        paths.append(path)
    return paths
