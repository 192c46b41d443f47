from .corpus import MRPair, Vocab, load_corpus, split_dataset, tokenize, train_vocab
from .encoder import (
    EncoderConfig,
    FreezeSpec,
    LayerSelection,
    SelectionStrategy,
    build_encoder,
    count_params,
    select_layers,
)
from .evaluation import compare_runs, rouge_n, t_test_two_sided, w_rouge
from .harness import builtin_grids, parse_notation, run_grid
from .matching import MatchingModel, TrainConfig, pretrain_mlm, symmetric_loss, train
from .ranker import cluster_responses, rank, suggest, tune_alpha
from .response_set import Blocklist, build_response_set, encode_response_set
from .synthetic import SyntheticCorpusSpec, generate_corpus

# Get version from pyproject.toml using importlib.metadata
try:
    from importlib.metadata import version, PackageNotFoundError

    try:
        __version__ = version("reply-compression")  # Matches 'name' in pyproject.toml
    except PackageNotFoundError:
        # package is not installed, e.g., when running source directly
        __version__ = "unknown"
except ImportError:
    __version__ = "unknown"

__all__ = [
    "MRPair",
    "Vocab",
    "load_corpus",
    "split_dataset",
    "tokenize",
    "train_vocab",
    "EncoderConfig",
    "FreezeSpec",
    "LayerSelection",
    "SelectionStrategy",
    "build_encoder",
    "count_params",
    "select_layers",
    "compare_runs",
    "rouge_n",
    "t_test_two_sided",
    "w_rouge",
    "builtin_grids",
    "parse_notation",
    "run_grid",
    "MatchingModel",
    "TrainConfig",
    "pretrain_mlm",
    "symmetric_loss",
    "train",
    "cluster_responses",
    "rank",
    "suggest",
    "tune_alpha",
    "Blocklist",
    "build_response_set",
    "encode_response_set",
    "SyntheticCorpusSpec",
    "generate_corpus",
    "__version__",
]
