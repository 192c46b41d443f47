import json
import logging
import math
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import torch

from reply_compression import tensor as T
from reply_compression.container import ContainerError
from reply_compression.encoder import EncoderWeights, FreezeSpec, RandomInit, build_encoder
from reply_compression.harness import (
    CorpusSettings,
    DeskSettings,
    EvalSettings,
    ExperimentConfig,
    ExperimentResult,
    GridSpec,
    Init,
    ModelSettings,
    NotationError,
    TrainSettings,
    _get_pretrained_weights,
    build_table,
    builtin_grids,
    load_config,
    parse_notation,
    render_table,
    run_experiment,
    run_grid,
)

logger = logging.getLogger(__name__)

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    handlers=[logging.StreamHandler()],
)

TINY = DeskSettings(
    corpus=CorpusSettings(
        num_pairs=300,
        num_topics=2,
        templates_per_topic=2,
        reply_templates_per_topic=3,
        noise=0.0,
        val_count=40,
        test_count=40,
        vocab_size=200,
    ),
    model=ModelSettings(
        hidden_size=8,
        num_heads=2,
        ff_size=16,
        message_layers=2,
        response_layers=2,
        max_len=48,
        pretrain_steps=5,
        pretrain_texts=50,
        pretrain_batch=8,
    ),
    train=TrainSettings(max_epochs=2, batch_size=16, base_lr=1e-3, warmup_steps=0),
    eval=EvalSettings(alpha_grid=(0.0, 1.0), tune_instances=40),
)


def _fake_pretrain(config, texts, steps, seed, **kwargs):
    return EncoderWeights.from_encoder(build_encoder(config, RandomInit(seed)))


class TestNotation(unittest.TestCase):
    def test_plain_model(self):
        n = parse_notation("M2R2")
        self.assertEqual((n.message_layers, n.response_layers), (2, 2))
        self.assertTrue(n.freeze.is_empty)

    def test_embeddings_frozen(self):
        n = parse_notation("(M3R3, f_emb)")
        self.assertEqual(n.freeze, FreezeSpec(0, 0, True, True))

    def test_freeze_layers(self):
        self.assertEqual(parse_notation("(M6R12, fm3r6)").freeze, FreezeSpec(3, 6, True, True))

    def test_bare_freeze_token_uses_base(self):
        n = parse_notation("fm0r6", base=(6, 12))
        self.assertEqual((n.message_layers, n.response_layers), (6, 12))
        self.assertEqual(n.freeze, FreezeSpec(0, 6, False, True))

    def test_round_trip(self):
        for text in (
            "M6R12",
            "M3R3",
            "M2R2",
            "(M6R12, fm3r6)",
            "(M6R12, fm0r6)",
            "(M6R12, fm3r0)",
            "(M3R3, f_emb)",
            "(M3R3, fm1r1)",
            "(M6R12, f_all)",
        ):
            with self.subTest(notation=text):
                self.assertEqual(parse_notation(text).canonical, text)

    def test_full_depth_freeze_renders_as_f_all(self):
        self.assertEqual(parse_notation("(M2R2, fm2r2)").canonical, "(M2R2, f_all)")

    def test_malformed(self):
        for text in ("M6", "(M6R12)", "(M6R12, fm7r0)", "(M6R12, frozen)", "fm0r6", "M0R2", ""):
            with self.subTest(notation=text):
                with self.assertRaises(NotationError) as ctx:
                    parse_notation(text)
                self.assertIn("MxRy", str(ctx.exception))


class TestSettings(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self._tmp.cleanup)
        self.path = Path(self._tmp.name) / "settings.json"

    def _load(self, payload):
        self.path.write_text(json.dumps(payload), encoding="utf-8")
        return load_config(self.path)

    def test_sections_override_defaults(self):
        settings = self._load({"corpus": {"num_pairs": 100}, "eval": {"alpha_grid": [0, 2]}})
        self.assertEqual(settings.corpus.num_pairs, 100)
        self.assertEqual(settings.corpus.vocab_size, CorpusSettings().vocab_size)
        self.assertEqual(settings.eval.alpha_grid, (0, 2))
        hash(settings)

    def test_unknown_key(self):
        with self.assertRaises(ValueError):
            self._load({"model": {"depth": 3}})

    def test_unknown_section(self):
        with self.assertRaises(ValueError):
            self._load({"optim": {}})

    def test_invalid_json(self):
        self.path.write_text("{broken", encoding="utf-8")
        with self.assertRaises(ValueError):
            load_config(self.path)


class TestGrids(unittest.TestCase):
    def test_builtin_grid_names(self):
        self.assertEqual(
            set(builtin_grids()),
            {"downsample", "selection", "drop", "freeze", "hybrid", "init-ablation", "dataset-size"},
        )

    def test_selection_grid_compares_strategies_at_equal_size(self):
        grid = builtin_grids()["selection"]
        self.assertEqual({c.notation for c in grid.configs}, {"M2R2"})
        self.assertEqual(len({c.selection for c in grid.configs}), 4)

    def test_hybrid_grid_members(self):
        notations = {c.notation for c in builtin_grids()["hybrid"].configs}
        self.assertTrue({"M4R4", "M2R2", "(M2R2, f_emb)", "(M2R2, fm1r1)"} <= notations)

    def test_init_ablation_covers_every_init_and_fraction(self):
        grid = builtin_grids()["init-ablation"]
        full = {(c.init, c.data_fraction) for c in grid.configs if c.notation == "M4R4"}
        self.assertEqual(full, {(i, f) for i in Init for f in (1.0, 0.1, 0.01)})
        self.assertEqual(grid.baseline_config.init, Init.PRETRAINED)

    def test_init_ablation_covers_frozen_and_dropped_models(self):
        grid = builtin_grids()["init-ablation"]
        frozen = {c.init for c in grid.configs if c.notation == "(M4R4, fm2r2)"}
        self.assertEqual(frozen, set(Init))
        dropped = {(c.init, c.data_fraction) for c in grid.configs if c.notation == "M2R2"}
        self.assertEqual(dropped, {(i, f) for i in Init for f in (1.0, 0.1, 0.01)})
        self.assertTrue(all(c.selection.value == "odd" for c in grid.configs if c.notation == "M2R2"))

    def test_freeze_grid_includes_over_freezing(self):
        notations = [c.notation for c in builtin_grids()["freeze"].configs]
        for expected in ("(M4R4, fm4r2)", "(M4R4, fm2r4)", "(M4R4, fm2r1)", "(M4R4, fm2r2)"):
            self.assertIn(expected, notations)
        self.assertEqual(len(notations), len(set(notations)))

    def test_shallow_settings_collapse_duplicate_members(self):
        logger.info("Running: grids on one- and two-layer encoders")
        for layers in (1, 2):
            settings = DeskSettings(model=ModelSettings(message_layers=layers, response_layers=layers))
            grids = builtin_grids(settings)
            for grid in grids.values():
                names = [c.name for c in grid.configs]
                self.assertEqual(len(names), len(set(names)), grid.name)
        two = builtin_grids(DeskSettings(model=ModelSettings(message_layers=2, response_layers=2)))
        self.assertEqual([c.name for c in two["drop"].configs], ["M2R2", "M1R1"])
        self.assertEqual(
            [c.notation for c in two["freeze"].configs if c.name.startswith("(M2R2, fm")],
            ["(M2R2, fm1r1)", "(M2R2, fm2r1)", "(M2R2, fm1r2)", "(M2R2, fm1r0)", "(M2R2, fm0r1)", "(M2R2, fm2r2)"],
        )

    def test_grids_follow_model_settings(self):
        settings = DeskSettings(model=ModelSettings(message_layers=6, response_layers=12))
        drop = builtin_grids(settings)["drop"]
        self.assertEqual(drop.baseline, "M6R12")
        self.assertIn("M3R6", {c.notation for c in drop.configs})

    def test_invalid_members(self):
        with self.assertRaises(NotationError):
            ExperimentConfig("bad", "M2")
        with self.assertRaises(ValueError):
            ExperimentConfig("bad", "M2R2", data_fraction=0.0)
        with self.assertRaises(ValueError):
            GridSpec("g", [ExperimentConfig("a", "M1R1")], "missing")
        with self.assertRaises(ValueError):
            GridSpec("g", [ExperimentConfig("a", "M1R1"), ExperimentConfig("a", "M2R2")], "a")


def _result(name, scores, wall_clock=10.0, test_hash="h", params=1000):
    return ExperimentResult(
        name=name,
        notation="M2R2",
        total_params=params,
        trainable_params=params,
        wall_clock_s=wall_clock,
        median_epoch_s=1.0,
        epochs_to_best=3,
        alpha=1.0,
        w_rouge=sum(scores) / len(scores),
        instance_scores=tuple(scores),
        test_hash=test_hash,
        encode_ms=0.5,
    )


BASE_SCORES = [0.5, 0.6, 0.4, 0.7, 0.3, 0.5]


class TestBuildTable(unittest.TestCase):
    def test_repeated_baseline_shows_no_change(self):
        table = build_table([_result("base", BASE_SCORES), _result("again", BASE_SCORES)], "base")
        row = table.set_index("config").loc["again"]
        self.assertEqual(row["verdict"], "no change")
        self.assertFalse(row["significant"])
        self.assertEqual(row["p_vs_baseline"], 1.0)
        self.assertEqual(row["w_rouge_delta_pct"], 0.0)

    def test_faster_run_with_noise_is_a_compression_success(self):
        noisy = [s + d for s, d in zip(BASE_SCORES, [0.01, -0.01, 0.02, -0.02, 0.0, 0.0])]
        table = build_table(
            [_result("base", BASE_SCORES), _result("fast", noisy, wall_clock=6.0, params=600)], "base"
        )
        row = table.set_index("config").loc["fast"]
        self.assertEqual(row["verdict"], "compression success")
        self.assertAlmostEqual(row["wall_clock_delta_pct"], -40.0)
        self.assertAlmostEqual(row["param_reduction_pct"], 40.0)
        self.assertGreater(row["p_vs_baseline"], 0.05)

    def test_significant_drop_gets_a_dagger(self):
        worse = [s - 0.2 + d for s, d in zip(BASE_SCORES, [0.001, -0.001, 0.002, -0.002, 0.0, 0.001])]
        table = build_table([_result("base", BASE_SCORES), _result("worse", worse)], "base")
        row = table.set_index("config").loc["worse"]
        self.assertTrue(row["significant"])
        self.assertEqual(row["verdict"], "relevance drop")
        self.assertIn("†", render_table(table))

    def test_failed_and_incomparable_rows(self):
        failed = ExperimentResult("broken", "M1R1", status="failed", error="boom")
        other = _result("other", BASE_SCORES, test_hash="different")
        table = build_table([_result("base", BASE_SCORES), failed, other], "base").set_index("config")
        self.assertEqual(table.loc["broken", "status"], "failed: boom")
        self.assertTrue(math.isnan(table.loc["broken", "p_vs_baseline"]))
        self.assertTrue(math.isnan(table.loc["other", "p_vs_baseline"]))
        self.assertEqual(table.loc["other", "verdict"], "")


class TestRunGrid(unittest.TestCase):
    def test_failed_member_does_not_stop_the_grid(self):
        logger.info("Running: test_failed_member_does_not_stop_the_grid")
        grid = GridSpec(
            "mini",
            [ExperimentConfig("base", "M2R2"), ExperimentConfig("broken", "M1R1"), ExperimentConfig("copy", "M2R2")],
            "base",
        )
        results = {
            "base": _result("base", BASE_SCORES),
            "broken": ExperimentResult("broken", "M1R1", status="failed", error="boom"),
            "copy": _result("copy", BASE_SCORES),
        }
        with tempfile.TemporaryDirectory() as tmp, patch(
            "reply_compression.harness.run_experiment",
            side_effect=lambda cfg, settings, precision: results[cfg.name],
        ) as mock_run:
            report = run_grid(grid, TINY, out_dir=tmp)
            for name in ("mini.csv", "mini_eval.csv", "mini.txt"):
                self.assertTrue((Path(tmp) / name).exists(), name)
        self.assertEqual(mock_run.call_count, 3)
        self.assertEqual([r.name for r in report.results], ["base", "broken", "copy"])
        self.assertEqual(report.test_hashes, {"h"})
        self.assertIn("failed: boom", report.render())

    def test_run_experiment_turns_errors_into_failed_rows(self):
        with patch("reply_compression.harness._run_experiment", side_effect=RuntimeError("out of memory")):
            result = run_experiment(ExperimentConfig("x", "M1R1"), TINY, "test64")
        self.assertFalse(result.ok)
        self.assertIn("out of memory", result.error)


class TestPretrainedCache(unittest.TestCase):
    def setUp(self):
        T.set_precision("test64")

    @patch("reply_compression.harness.pretrain_mlm", side_effect=_fake_pretrain)
    def test_memory_then_disk_cache(self, mock_pretrain):
        first = _get_pretrained_weights(Init.PRETRAINED, TINY, "test64")
        again = _get_pretrained_weights(Init.PRETRAINED, TINY, "test64")
        self.assertIs(first, again)
        self.assertEqual(mock_pretrain.call_count, 1)

        _get_pretrained_weights.cache_clear()
        from_disk = _get_pretrained_weights(Init.PRETRAINED, TINY, "test64")
        self.assertEqual(mock_pretrain.call_count, 1)
        for key, value in first.tensors.items():
            self.assertTrue(torch.equal(from_disk.tensors[key], value), key)

    @patch("reply_compression.harness.pretrain_mlm", side_effect=_fake_pretrain)
    def test_corrupt_cache_is_rebuilt(self, mock_pretrain):
        _get_pretrained_weights(Init.PRETRAINED, TINY, "test64")
        _get_pretrained_weights.cache_clear()
        with patch(
            "reply_compression.harness.load_encoder_weights",
            side_effect=ContainerError("truncated"),
        ), self.assertLogs("reply_compression.harness", level="WARNING") as logs:
            weights = _get_pretrained_weights(Init.PRETRAINED, TINY, "test64")
        self.assertEqual(mock_pretrain.call_count, 2)
        self.assertEqual(weights.num_layers, 2)
        self.assertTrue(any("corrupted" in line for line in logs.output))


class TestRunExperiment(unittest.TestCase):
    def test_tiny_experiment_is_reproducible(self):
        logger.info("Running: test_tiny_experiment_is_reproducible")
        cfg = ExperimentConfig("M1R1 odd", "M1R1", selection="odd")
        first = run_experiment(cfg, TINY, "test64")
        second = run_experiment(cfg, TINY, "test64")
        self.assertTrue(first.ok, first.error)
        self.assertEqual(len(first.instance_scores), TINY.corpus.test_count)
        self.assertTrue(0.0 <= first.w_rouge <= 1.0)
        self.assertIn(first.alpha, TINY.eval.alpha_grid)
        for attr in (
            "instance_scores",
            "w_rouge",
            "alpha",
            "best_validation_loss",
            "test_hash",
            "total_params",
            "trainable_params",
            "epochs_to_best",
        ):
            self.assertEqual(getattr(first, attr), getattr(second, attr), attr)

    def test_tiny_grid_table_is_reproducible(self):
        logger.info("Running: test_tiny_grid_table_is_reproducible")
        grid = GridSpec(
            "repro",
            [
                ExperimentConfig("M2R2", "M2R2"),
                ExperimentConfig("M1R1 odd", "M1R1", selection="odd"),
                ExperimentConfig("(M2R2, fm1r1)", "(M2R2, fm1r1)"),
            ],
            "M2R2",
        )
        timing = ["wall_clock_s", "wall_clock_delta_pct", "median_epoch_s", "encode_ms", "verdict"]
        tables = []
        with tempfile.TemporaryDirectory() as tmp:
            for attempt in ("first", "second"):
                report = run_grid(grid, TINY, precision="test64", out_dir=Path(tmp) / attempt)
                self.assertTrue(all(r.ok for r in report.results))
                tables.append(report.table.drop(columns=timing).to_csv(index=False))
        self.assertEqual(tables[0], tables[1])


if __name__ == "__main__":
    unittest.main()
