import contextlib
import io
import json
import logging
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import pandas as pd

from reply_compression.cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, main
from reply_compression.corpus import load_corpus
from reply_compression.evaluation import EVAL_COLUMNS
from reply_compression.response_set import encode_response_set, load_response_set

logger = logging.getLogger(__name__)

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    handlers=[logging.StreamHandler()],
)

TINY_CONFIG = {
    "corpus": {
        "num_pairs": 300,
        "num_topics": 2,
        "templates_per_topic": 2,
        "reply_templates_per_topic": 3,
        "noise": 0.0,
        "val_count": 40,
        "test_count": 40,
        "vocab_size": 200,
    },
    "model": {
        "hidden_size": 8,
        "num_heads": 2,
        "ff_size": 16,
        "message_layers": 2,
        "response_layers": 2,
        "max_len": 48,
        "pretrain_steps": 3,
        "pretrain_texts": 40,
        "pretrain_batch": 8,
    },
    "train": {"max_epochs": 2, "batch_size": 16, "base_lr": 1e-3, "warmup_steps": 0},
    "eval": {"alpha_grid": [0.0, 1.0], "tune_instances": 40},
}


class CliTestCase(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)
        self.out = self.root / "runs"
        self.config = self.root / "tiny.json"
        self.config.write_text(json.dumps(TINY_CONFIG), encoding="utf-8")

    def tearDown(self):
        self._tmp.cleanup()

    def run_cli(self, *argv):
        stdout = io.StringIO()
        with contextlib.redirect_stdout(stdout):
            code = main(["--config", str(self.config), "--out", str(self.out), *argv])
        return code, stdout.getvalue()


class TestPipeline(CliTestCase):
    def test_end_to_end(self):
        logger.info("Running: test_end_to_end")
        code, _ = self.run_cli("gen-corpus")
        self.assertEqual(code, EXIT_OK)
        self.assertEqual(len(list(load_corpus(self.out / "corpus.jsonl"))), 300)

        code, _ = self.run_cli("build-response-set")
        self.assertEqual(code, EXIT_OK)
        response_set = load_response_set(self.out / "response_set.json")
        self.assertGreater(len(response_set), 0)

        code, printed = self.run_cli("train", "--notation", "(M1R1, f_emb)")
        self.assertEqual(code, EXIT_OK)
        self.assertIn("(M1R1, f_emb)", printed)
        self.assertTrue((self.out / "checkpoint.rcc").exists())
        self.assertTrue((self.out / "vocab.txt").exists())
        report = json.loads((self.out / "train_report.json").read_text(encoding="utf-8"))
        self.assertIn("best_epoch", report)

        code, printed = self.run_cli("suggest", "any news on the invoice? asap", "--alpha", "0.5")
        self.assertEqual(code, EXIT_OK)
        lines = [json.loads(line) for line in printed.splitlines()]
        self.assertTrue(1 <= len(lines) <= 3)
        self.assertEqual([line["rank"] for line in lines], list(range(1, len(lines) + 1)))
        self.assertTrue({line["text"] for line in lines} <= set(response_set.texts))
        self.assertEqual(len({line["cluster"] for line in lines}), len(lines))

        code, _ = self.run_cli("evaluate")
        self.assertEqual(code, EXIT_OK)
        frame = pd.read_csv(self.out / "evaluation.csv")
        self.assertEqual(list(frame.columns), EVAL_COLUMNS)
        self.assertEqual(frame.loc[0, "config"], "M1R1")
        self.assertTrue(0.0 <= frame.loc[0, "w_rouge"] <= 1.0)

    def test_suggest_reuses_the_response_cache(self):
        logger.info("Running: test_suggest_reuses_the_response_cache")
        self.assertEqual(self.run_cli("gen-corpus")[0], EXIT_OK)
        self.assertEqual(self.run_cli("build-response-set")[0], EXIT_OK)
        self.assertEqual(self.run_cli("train", "--notation", "M1R1")[0], EXIT_OK)
        cache = self.out / "response_cache.rcc"
        self.assertFalse(cache.exists())

        code, first = self.run_cli("suggest", "see you at the meeting", "--alpha", "0.5")
        self.assertEqual(code, EXIT_OK)
        self.assertTrue(cache.exists())

        with patch("reply_compression.cli.encode_response_set", wraps=encode_response_set) as spy:
            code, again = self.run_cli("suggest", "see you at the meeting", "--alpha", "0.5")
            self.assertEqual(code, EXIT_OK)
            self.assertEqual(spy.call_count, 0)
            self.assertEqual(again, first)

            # a new checkpoint makes the saved encodings stale
            self.assertEqual(self.run_cli("--seed", "5", "train", "--notation", "M1R1")[0], EXIT_OK)
            self.assertEqual(self.run_cli("suggest", "see you at the meeting")[0], EXIT_OK)
            self.assertEqual(spy.call_count, 1)

    def test_pretrain_then_train_from_weights(self):
        logger.info("Running: test_pretrain_then_train_from_weights")
        self.assertEqual(self.run_cli("gen-corpus", "--pairs", "200")[0], EXIT_OK)
        code, printed = self.run_cli("pretrain", "--steps", "2")
        self.assertEqual(code, EXIT_OK)
        weights = self.out / "pretrained_pretrained.rcw"
        self.assertTrue(weights.exists())
        self.assertIn("2-layer", printed)

        code, _ = self.run_cli(
            "train", "--notation", "M1R2", "--pretrained", str(weights), "--selection", "odd"
        )
        self.assertEqual(code, EXIT_OK)


class TestExitCodes(CliTestCase):
    def test_unknown_grid(self):
        self.assertEqual(self.run_cli("ablate", "no-such-grid")[0], EXIT_USAGE)

    def test_bad_notation(self):
        self.assertEqual(self.run_cli("gen-corpus", "--pairs", "100")[0], EXIT_OK)
        self.assertEqual(self.run_cli("train", "--notation", "M0R1")[0], EXIT_USAGE)

    def test_missing_corpus(self):
        self.assertEqual(self.run_cli("build-response-set")[0], EXIT_USAGE)

    def test_argument_errors_exit_with_usage_code(self):
        with contextlib.redirect_stderr(io.StringIO()):
            with self.assertRaises(SystemExit) as ctx:
                main(["no-such-command"])
        self.assertEqual(ctx.exception.code, EXIT_USAGE)

    def test_suggest_without_checkpoint_is_a_failure(self):
        self.assertEqual(self.run_cli("suggest", "hello")[0], EXIT_FAILURE)

    def test_missing_report(self):
        self.assertEqual(self.run_cli("report", "drop")[0], EXIT_USAGE)

    def test_bad_config(self):
        self.config.write_text("{not json", encoding="utf-8")
        with contextlib.redirect_stderr(io.StringIO()):
            self.assertEqual(self.run_cli("gen-corpus")[0], EXIT_USAGE)
        self.config.write_text(json.dumps({"optimizer": {}}), encoding="utf-8")
        with contextlib.redirect_stderr(io.StringIO()):
            self.assertEqual(self.run_cli("gen-corpus")[0], EXIT_USAGE)


if __name__ == "__main__":
    unittest.main()
