"""
Command-line entry point: ``reply-compression <subcommand>``.

Exit codes: 0 success, 1 usage error, 2 run failure.
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import pandas as pd

from . import tensor as T
from .corpus import Vocab, load_corpus, split_dataset, train_vocab, write_corpus
from .container import ContainerError
from .encoder import FromWeights, LayerSelection, RandomInit, select_layers
from .evaluation import EvalInstance, w_rouge, write_evaluation_csv
from .harness import (
    DeskSettings,
    Init,
    NotationError,
    builtin_grids,
    load_config,
    parse_notation,
    render_table,
    run_grid,
)
from .matching import (
    MatchingModel,
    load_checkpoint,
    load_encoder_weights,
    model_from_checkpoint,
    pretrain_mlm,
    save_checkpoint,
    save_encoder_weights,
    train,
)
from .ranker import suggest, suggest_many, tune_alpha
from .response_set import (
    Blocklist,
    StaleCacheError,
    build_response_set,
    check_cache,
    default_min_freq,
    encode_response_set,
    load_response_cache,
    load_response_set,
    save_response_cache,
    save_response_set,
)
from .synthetic import generate_corpus, generate_domain_text, generate_generic_text

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2

CORPUS_FILE = "corpus.jsonl"
VOCAB_FILE = "vocab.txt"
RESPONSE_SET_FILE = "response_set.json"
CHECKPOINT_FILE = "checkpoint.rcc"
RESPONSE_CACHE_FILE = "response_cache.rcc"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _corpus_path(args) -> Path:
    return Path(args.corpus) if args.corpus else Path(args.out) / CORPUS_FILE


def _read_pairs(args):
    path = _corpus_path(args)
    if not path.exists():
        raise UsageError(f"Corpus {path} not found; run gen-corpus or pass --corpus")
    return list(load_corpus(path))


def _split(args, settings: DeskSettings, pairs, fraction: float = 1.0):
    c = settings.corpus
    return split_dataset(pairs, c.val_count, c.test_count, fraction, seed=c.seed)


def _vocab(args, settings: DeskSettings, pairs) -> Vocab:
    path = Path(args.out) / VOCAB_FILE
    if path.exists():
        return Vocab.load(path)
    train_pairs = _split(args, settings, pairs).train
    vocab = train_vocab(
        [p.message for p in train_pairs] + [p.reply for p in train_pairs],
        target_size=settings.corpus.vocab_size,
    )
    vocab.save(path)
    return vocab


# ==========================================
# SUBCOMMANDS
# ==========================================
def cmd_gen_corpus(args, settings: DeskSettings) -> int:
    spec = settings.corpus.spec()
    if args.pairs is not None:
        spec = dataclasses.replace(spec, num_pairs=args.pairs)
    pairs = generate_corpus(spec)
    path = _out(args) / CORPUS_FILE
    write_corpus(pairs, path)
    print(f"Wrote {len(pairs)} pairs to {path}")
    return EXIT_OK


def cmd_pretrain(args, settings: DeskSettings) -> int:
    pairs = _read_pairs(args)
    vocab = _vocab(args, settings, pairs)
    m = settings.model
    steps = m.pretrain_steps if args.steps is None else args.steps
    if args.kind == Init.DOMAIN_PRETRAINED.value:
        texts = generate_domain_text(settings.corpus.spec(), m.pretrain_texts, seed=args.seed + 1)
    else:
        texts = generate_generic_text(m.pretrain_texts, seed=args.seed)
    config = m.encoder_config(max(m.message_layers, m.response_layers), len(vocab))
    weights = pretrain_mlm(
        config, texts, steps, args.seed, vocab=vocab, batch_size=m.pretrain_batch, max_len=m.max_len
    )
    path = _out(args) / f"pretrained_{args.kind}.rcw"
    save_encoder_weights(weights, path)
    print(f"Wrote {config.num_layers}-layer encoder weights to {path}")
    return EXIT_OK


def cmd_build_response_set(args, settings: DeskSettings) -> int:
    pairs = _read_pairs(args)
    replies = [p.reply for p in _split(args, settings, pairs).train]
    min_freq = args.min_freq or default_min_freq(len(replies), settings.eval.min_freq_rate)
    blocklist = Blocklist.load(args.blocklist) if args.blocklist else None
    response_set = build_response_set(replies, min_freq, blocklist)
    path = _out(args) / RESPONSE_SET_FILE
    save_response_set(response_set, path)
    print(f"Wrote {len(response_set)} responses to {path}")
    return EXIT_OK


def cmd_train(args, settings: DeskSettings) -> int:
    pairs = _read_pairs(args)
    vocab = _vocab(args, settings, pairs)
    notation = parse_notation(args.notation)
    m = settings.model
    cfg_m = m.encoder_config(notation.message_layers, len(vocab))
    cfg_r = m.encoder_config(notation.response_layers, len(vocab))
    if args.pretrained:
        source = load_encoder_weights(args.pretrained)

        def init(layers):
            if layers == source.num_layers:
                return FromWeights(source)
            return FromWeights(select_layers(source, LayerSelection(args.selection, layers)))

        msg_init, rsp_init = init(notation.message_layers), init(notation.response_layers)
    else:
        msg_init, rsp_init = RandomInit(args.seed), RandomInit(args.seed + 1)
    model = MatchingModel.build(
        cfg_m,
        cfg_r,
        vocab,
        message_init=msg_init,
        response_init=rsp_init,
        freeze=notation.freeze,
        max_message_len=m.max_len,
        max_response_len=m.max_len,
    )
    split = _split(args, settings, pairs, args.fraction)
    checkpoint, report = train(model, split, settings.train.train_config(args.seed))
    out = _out(args)
    save_checkpoint(checkpoint, out / CHECKPOINT_FILE)
    (out / "train_report.json").write_text(
        json.dumps(dataclasses.asdict(report), indent=2), encoding="utf-8"
    )
    print(
        f"{notation.canonical}: best epoch {report.best_epoch}, validation loss "
        f"{report.best_validation_loss:.5f}, wall clock to best {report.wall_clock_to_best:.2f}s"
    )
    return EXIT_OK


def _serving_model(args):
    out = Path(args.out)
    checkpoint = load_checkpoint(args.checkpoint or out / CHECKPOINT_FILE)
    vocab = Vocab.load(out / VOCAB_FILE)
    model = model_from_checkpoint(checkpoint, vocab)
    response_set = load_response_set(args.response_set or out / RESPONSE_SET_FILE)
    cache_path = out / RESPONSE_CACHE_FILE
    if cache_path.exists():
        try:
            cached = load_response_cache(response_set, cache_path)
            check_cache(model, cached)
            logger.info(f"Reusing response cache {cache_path}")
            return model, cached
        except (ContainerError, StaleCacheError) as e:
            logger.warning(f"Re-encoding responses: {e}")
    encoded = encode_response_set(model, response_set)
    save_response_cache(encoded, _out(args) / RESPONSE_CACHE_FILE)
    return model, encoded


def cmd_evaluate(args, settings: DeskSettings) -> int:
    pairs = _read_pairs(args)
    model, response_set = _serving_model(args)
    split = _split(args, settings, pairs)
    ev = settings.eval
    weights = ev.rouge_weights()
    alpha = tune_alpha(
        model, split.validation[: ev.tune_instances], response_set, ev.alpha_grid, ev.tau, weights
    )
    blocks = suggest_many(model, [p.message for p in split.test], response_set, alpha, ev.tau)
    instances = [EvalInstance(p.reply, b.texts) for p, b in zip(split.test, blocks)]
    total, trainable = model.param_counts()
    score = w_rouge(instances, weights)
    row = {
        "config": model.notation,
        "total_params": total,
        "trainable_params": trainable,
        "wall_clock_s": float("nan"),
        "w_rouge": score,
        "p_vs_baseline": float("nan"),
        "significant": False,
    }
    write_evaluation_csv([row], _out(args) / "evaluation.csv")
    print(f"{model.notation}: alpha {alpha}, w-Rouge {score:.5f} on {len(instances)} test pairs")
    return EXIT_OK


def cmd_suggest(args, settings: DeskSettings) -> int:
    message = args.message if args.message is not None else sys.stdin.read().strip()
    if not message:
        raise UsageError("No message given")
    model, response_set = _serving_model(args)
    block = suggest(model, message, response_set, args.alpha, args.tau)
    for rank_, c in enumerate(block.candidates, 1):
        print(
            json.dumps(
                {
                    "rank": rank_,
                    "text": c.text,
                    "final_score": round(c.final_score, 6),
                    "match_score": round(c.match_score, 6),
                    "lm_score": round(c.lm_score, 6),
                    "cluster": c.cluster_id,
                }
            )
        )
    return EXIT_OK


def cmd_ablate(args, settings: DeskSettings) -> int:
    grids = builtin_grids(settings)
    if args.grid not in grids:
        raise UsageError(f"Unknown grid '{args.grid}'; choose from {sorted(grids)}")
    report = run_grid(
        grids[args.grid],
        settings,
        parallel=args.parallel,
        max_workers=args.workers,
        precision=args.precision,
        out_dir=_out(args),
    )
    print(report.render())
    return EXIT_FAILURE if not any(r.ok for r in report.results) else EXIT_OK


def cmd_report(args, settings: DeskSettings) -> int:
    path = Path(args.out) / f"{args.grid}.csv"
    if not path.exists():
        raise UsageError(f"No report for grid '{args.grid}' at {path}")
    table = pd.read_csv(path, keep_default_na=False, na_values=["nan", "NaN", ""])
    table["verdict"] = table["verdict"].fillna("")
    print(render_table(table))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reply-compression", description=__doc__.splitlines()[1])
    parser.add_argument("--config", help="JSON settings file with corpus/model/train/eval sections")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--precision", choices=[p.value for p in T.Precision], default="fast32")
    parser.add_argument("--out", default="runs", help="output directory")
    parser.add_argument(
        "--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"]
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-corpus", help="generate the synthetic message/reply corpus")
    p.add_argument("--pairs", type=int)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("pretrain", help="masked-LM pretrain a source encoder")
    p.add_argument("--corpus")
    p.add_argument(
        "--kind",
        choices=[Init.PRETRAINED.value, Init.DOMAIN_PRETRAINED.value],
        default=Init.PRETRAINED.value,
    )
    p.add_argument("--steps", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("build-response-set", help="threshold and filter corpus replies")
    p.add_argument("--corpus")
    p.add_argument("--min-freq", type=int)
    p.add_argument("--blocklist", help="file with one blocked n-gram per line")
    p.set_defaults(func=cmd_build_response_set)

    p = sub.add_parser("train", help="fine-tune a matching model")
    p.add_argument("--corpus")
    p.add_argument("--notation", default="M4R4")
    p.add_argument("--pretrained", help="encoder weights from the pretrain subcommand")
    p.add_argument("--selection", default="bottom", choices=["bottom", "top", "even", "odd"])
    p.add_argument("--fraction", type=float, default=1.0)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (
        ("evaluate", cmd_evaluate, "tune alpha and report w-Rouge on the test split"),
        ("suggest", cmd_suggest, "print three suggestions for a message"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint")
        p.add_argument("--response-set")
        if name == "evaluate":
            p.add_argument("--corpus")
        else:
            p.add_argument("message", nargs="?")
            p.add_argument("--alpha", type=float, default=1.0)
            p.add_argument("--tau", type=float, default=0.5)
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="run a built-in ablation grid")
    p.add_argument("grid")
    p.add_argument("--parallel", action="store_true")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render a saved grid report")
    p.add_argument("grid")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler()],
    )
    try:
        settings = load_config(args.config) if args.config else DeskSettings()
    except (OSError, ValueError) as e:
        print(f"reply-compression: error: {e}", file=sys.stderr)
        return EXIT_USAGE

    T.set_precision(args.precision)
    T.seed_everything(args.seed)
    try:
        return args.func(args, settings)
    except (UsageError, NotationError) as e:
        print(f"reply-compression: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
