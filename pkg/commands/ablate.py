import logging

from commands.common import check_data_paths, maybe_record, output_dir, progress_factory, write_table
from utils.experiment import ablation_arms, aggregate, run_paired

logger = logging.getLogger(__name__)


def run_ablate_command(config, args):
    """
    Paired ablation over intervention variants, objectives, selection
    strategies or decoders (``--arms``)

    Returns:
    - (per-seed table, per-arm summary)
    """
    check_data_paths(config)
    out = output_dir(config)
    arms = ablation_arms(getattr(args, "arms", "full"))
    table = run_paired(config, arms, config.run.seeds, progress=progress_factory(args, "ablate"))
    summary = aggregate(table)
    write_table(table, out, "ablation")
    write_table(summary, out, "ablation_summary")
    for record in summary.to_dict(orient="records"):
        logger.info("%-32s frozen %.4f adapted %.4f", record["arm"],
                    record["accuracy_frozen_mean"], record["accuracy_adapted_mean"])
    maybe_record(config, table, "ablate")
    return table, summary
