import dataclasses
import logging
import time

from reply_compression import parse_notation, run_grid
from reply_compression.harness import DeskSettings, ExperimentConfig, GridSpec

# --- CONFIGURE LOGGING ---
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    handlers=[
        logging.StreamHandler(),
    ],
)
logger = logging.getLogger(__name__)


def run_end_to_end_test():
    """
    Trains a small baseline and a dropped model on a reduced synthetic corpus and prints
    the comparison table.
    """
    logger.info(" Starting end-to-end pipeline test...")

    settings = DeskSettings()
    settings = dataclasses.replace(
        settings,
        corpus=dataclasses.replace(settings.corpus, num_pairs=5000, val_count=300, test_count=300),
        model=dataclasses.replace(settings.model, pretrain_steps=300, pretrain_texts=4000),
        train=dataclasses.replace(settings.train, max_epochs=3),
    )
    grid = GridSpec(
        "end-to-end",
        [
            ExperimentConfig("M4R4", "M4R4"),
            ExperimentConfig("M2R2", "M2R2", selection="odd"),
        ],
        "M4R4",
    )
    logger.info(f"Models: {[parse_notation(c.notation).canonical for c in grid.configs]}")

    try:
        start = time.perf_counter()
        report = run_grid(grid, settings, out_dir="runs/end-to-end")
        elapsed = time.perf_counter() - start

        logger.info(f"Grid execution time: {elapsed:.4f} seconds")
        logger.info("✅ End-to-end pipeline test executed.")
        print(report.render())
    except Exception as e:
        logger.error(f"❌ End-to-end pipeline test FAILED: {e}", exc_info=True)
        print(f"❌ End-to-end pipeline test FAILED: {e}")


if __name__ == "__main__":
    run_end_to_end_test()
