"""
Experiment harness: model notation, desk-scale settings and JSON configuration, the
built-in ablation grids and their orchestration into comparison tables.
"""

import dataclasses
import enum
import hashlib
import json
import logging
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from . import tensor as T
from .container import ContainerError
from .corpus import DatasetSplit, Vocab, split_dataset, train_vocab
from .encoder import (
    EncoderConfig,
    EncoderWeights,
    FreezeSpec,
    FromWeights,
    LayerSelection,
    RandomInit,
    SelectionStrategy,
    select_layers,
)
from .evaluation import (
    EVAL_COLUMNS,
    EvalInstance,
    RunSummary,
    WRougeWeights,
    compare_runs,
    per_instance_w_rouge,
    write_evaluation_csv,
)
from .matching import (
    MatchingModel,
    TrainConfig,
    load_encoder_weights,
    pretrain_mlm,
    save_encoder_weights,
    train,
)
from .ranker import suggest_many, tune_alpha
from .response_set import ResponseSet, build_response_set, default_min_freq, encode_response_set
from .synthetic import (
    SyntheticCorpusSpec,
    generate_corpus,
    generate_domain_text,
    generate_generic_text,
)

logger = logging.getLogger(__name__)


# ==========================================
# NOTATION
# ==========================================
NOTATION_GRAMMAR = (
    "MxRy | (MxRy, fmIrJ) | (MxRy, f_emb) | (MxRy, f_all); "
    "bare fmIrJ / f_emb / f_all need a base model"
)
_MODEL_RE = re.compile(r"M(\d+)R(\d+)")
_FM_RE = re.compile(r"fm(\d+)r(\d+)")


class NotationError(ValueError):
    def __init__(self, text: str, reason: str = ""):
        detail = f": {reason}" if reason else ""
        super().__init__(f"Cannot parse notation '{text}'{detail}; expected {NOTATION_GRAMMAR}")
        self.text = text


@dataclass(frozen=True)
class Notation:
    message_layers: int
    response_layers: int
    freeze: FreezeSpec = FreezeSpec()

    @property
    def model(self) -> str:
        return f"M{self.message_layers}R{self.response_layers}"

    @property
    def canonical(self) -> str:
        return render_notation(self)


def _parse_freeze(text: str, token: str, x: int, y: int) -> FreezeSpec:
    if token == "f_emb":
        return FreezeSpec.embeddings_only()
    if token == "f_all":
        return FreezeSpec.all_frozen(x, y)
    match = _FM_RE.fullmatch(token)
    if not match:
        raise NotationError(text, f"unknown freeze token '{token}'")
    spec = FreezeSpec.fm_r(int(match.group(1)), int(match.group(2)))
    try:
        spec.validate(x, y)
    except ValueError as e:
        raise NotationError(text, str(e)) from e
    return spec


def parse_notation(text: str, base: Optional[Tuple[int, int]] = None) -> Notation:
    """
    Parses model notation such as "M6R12", "(M6R12, fm3r6)" or "(M3R3, f_emb)".

    Parameters:
    - text (str): notation string.
    - base (tuple[int, int]): (x, y) layer counts used for a bare freeze token like "fm0r6".

    Returns:
    - Notation: layer counts and the freeze specification.
    """
    stripped = text.strip()
    if stripped.startswith("(") and stripped.endswith(")"):
        parts = [p.strip() for p in stripped[1:-1].split(",")]
        if len(parts) != 2:
            raise NotationError(text, "a parenthesized form needs exactly two parts")
    else:
        parts = [stripped]

    model = _MODEL_RE.fullmatch(parts[0])
    if model is None:
        if len(parts) == 1 and base is not None:
            x, y = base
            return Notation(x, y, _parse_freeze(text, parts[0], x, y))
        raise NotationError(text, "missing MxRy model")
    x, y = int(model.group(1)), int(model.group(2))
    if x < 1 or y < 1:
        raise NotationError(text, "layer counts must be at least 1")
    if len(parts) == 1:
        return Notation(x, y)
    return Notation(x, y, _parse_freeze(text, parts[1], x, y))


def render_notation(notation: Notation) -> str:
    x, y, f = notation.message_layers, notation.response_layers, notation.freeze
    model = notation.model
    if f.is_empty:
        return model
    if f == FreezeSpec.embeddings_only():
        return f"({model}, f_emb)"
    if f == FreezeSpec.all_frozen(x, y):
        return f"({model}, f_all)"
    if f == FreezeSpec.fm_r(f.frozen_message_layers, f.frozen_response_layers):
        return f"({model}, fm{f.frozen_message_layers}r{f.frozen_response_layers})"
    raise NotationError(str(f), "freeze specification has no notation")


# ==========================================
# SETTINGS
# ==========================================
@dataclass(frozen=True)
class CorpusSettings:
    num_pairs: int = 50_000
    num_topics: int = 8
    templates_per_topic: int = 4
    reply_templates_per_topic: int = 6
    noise: float = 0.1
    seed: int = 0
    val_count: int = 1000
    test_count: int = 1000
    vocab_size: int = 2000

    def spec(self) -> SyntheticCorpusSpec:
        return SyntheticCorpusSpec(
            num_topics=self.num_topics,
            templates_per_topic=self.templates_per_topic,
            reply_templates_per_topic=self.reply_templates_per_topic,
            num_pairs=self.num_pairs,
            noise=self.noise,
            seed=self.seed,
        )


@dataclass(frozen=True)
class ModelSettings:
    hidden_size: int = 64
    num_heads: int = 4
    ff_size: int = 256
    message_layers: int = 4
    response_layers: int = 4
    max_len: int = 32
    pretrain_steps: int = 2000
    pretrain_texts: int = 20_000
    pretrain_batch: int = 32
    pretrain_seed: int = 0

    def encoder_config(self, num_layers: int, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(
            num_layers=num_layers,
            hidden_size=self.hidden_size,
            num_heads=self.num_heads,
            ff_size=self.ff_size,
            vocab_size=vocab_size,
            max_positions=self.max_len,
        )


@dataclass(frozen=True)
class TrainSettings:
    max_epochs: int = 20
    batch_size: int = 32
    accumulation_steps: int = 1
    base_lr: float = 3e-4
    warmup_steps: int = 200
    decay: float = 0.9995

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            max_epochs=self.max_epochs,
            batch_size=self.batch_size,
            accumulation_steps=self.accumulation_steps,
            schedule=T.LearningRateSchedule(self.base_lr, self.warmup_steps, self.decay),
            seed=seed,
        )


@dataclass(frozen=True)
class EvalSettings:
    alpha_grid: Tuple[float, ...] = (0.0, 0.5, 1.0, 2.0, 4.0)
    tau: float = 0.5
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    min_freq_rate: float = 1e-4
    tune_instances: int = 500

    def rouge_weights(self) -> WRougeWeights:
        return WRougeWeights(*self.weights)


@dataclass(frozen=True)
class DeskSettings:
    corpus: CorpusSettings = CorpusSettings()
    model: ModelSettings = ModelSettings()
    train: TrainSettings = TrainSettings()
    eval: EvalSettings = EvalSettings()


def _override(section, values: Dict, name: str):
    known = {f.name: f for f in dataclasses.fields(section)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ValueError(f"Unknown keys in config section '{name}': {unknown}")
    cleaned = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return dataclasses.replace(section, **cleaned)


def load_config(path, base: Optional[DeskSettings] = None) -> DeskSettings:
    """
    Reads a JSON config whose sections (corpus, model, train, eval) override ``base``.
    """
    base = base or DeskSettings()
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValueError(f"Config {path} is not valid JSON: {e}") from e
    if not isinstance(payload, dict):
        raise ValueError(f"Config {path} must be a JSON object")
    sections = {f.name for f in dataclasses.fields(DeskSettings)}
    unknown = sorted(set(payload) - sections)
    if unknown:
        raise ValueError(f"Unknown config sections: {unknown}; expected {sorted(sections)}")
    updates = {
        name: _override(getattr(base, name), values, name) for name, values in payload.items()
    }
    return dataclasses.replace(base, **updates)


# ==========================================
# EXPERIMENTS AND GRIDS
# ==========================================
class Init(str, enum.Enum):
    RANDOM = "random"
    PRETRAINED = "pretrained"
    DOMAIN_PRETRAINED = "domain_pretrained"


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    notation: str
    init: Init = Init.PRETRAINED
    selection: SelectionStrategy = SelectionStrategy.BOTTOM
    data_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "init", Init(self.init))
        object.__setattr__(self, "selection", SelectionStrategy(self.selection))
        if self.selection is SelectionStrategy.EXPLICIT:
            raise ValueError("Grids select layers by strategy, not explicit indices")
        if not 0 < self.data_fraction <= 1:
            raise ValueError(f"data_fraction must be in (0, 1], got {self.data_fraction}")
        parse_notation(self.notation)

    @property
    def parsed(self) -> Notation:
        return parse_notation(self.notation)


@dataclass(frozen=True)
class GridSpec:
    name: str
    configs: Tuple[ExperimentConfig, ...]
    baseline: str

    def __post_init__(self):
        object.__setattr__(self, "configs", tuple(self.configs))
        names = [c.name for c in self.configs]
        if len(set(names)) != len(names):
            raise ValueError(f"Grid '{self.name}' has duplicate config names")
        if names.count(self.baseline) != 1:
            raise ValueError(f"Grid '{self.name}' must contain exactly one baseline '{self.baseline}'")

    @property
    def baseline_config(self) -> ExperimentConfig:
        return next(c for c in self.configs if c.name == self.baseline)


def builtin_grids(settings: Optional[DeskSettings] = None) -> Dict[str, GridSpec]:
    """Desk-scale analogs of the downsampling, dropping, freezing and initialization studies."""
    m = (settings or DeskSettings()).model
    x, y = m.message_layers, m.response_layers
    full = f"M{x}R{y}"
    hx, hy = max(1, x // 2), max(1, y // 2)
    half = f"M{hx}R{hy}"
    E = ExperimentConfig
    odd = SelectionStrategy.ODD
    freezes = [
        f"fm{hx}r{hy}",
        f"fm{x}r{hy}",
        f"fm{hx}r{y}",
        f"fm{hx}r{max(1, hy // 2)}",
        f"fm{hx}r0",
        f"fm0r{hy}",
        f"fm{x}r{y}",
    ]
    fractions = (1.0, 0.1, 0.01)

    grids = [
        _grid(
            "downsample",
            [E(f"{full} {int(f * 100)}%", full, data_fraction=f) for f in (1.0, 0.9, 0.4, 0.1)],
            f"{full} 100%",
        ),
        _grid(
            "selection",
            [E(f"{s.value.title()}-{hx}", half, selection=s) for s in (
                SelectionStrategy.BOTTOM,
                SelectionStrategy.TOP,
                SelectionStrategy.EVEN,
                SelectionStrategy.ODD,
            )],
            f"Bottom-{hx}",
        ),
        _grid(
            "drop",
            [E(full, full), E(half, half, selection=odd), E("M1R1", "M1R1", selection=odd)],
            full,
        ),
        _grid(
            "freeze",
            [E(full, full), E(f"({full}, f_emb)", f"({full}, f_emb)")]
            + [E(f"({full}, {fz})", f"({full}, {fz})") for fz in freezes]
            + [E("all frozen", f"({full}, f_all)", init=Init.RANDOM)],
            full,
        ),
        _grid(
            "hybrid",
            [
                E(full, full),
                E(half, half, selection=odd),
                E(f"({half}, f_emb)", f"({half}, f_emb)", selection=odd),
                E(f"({half}, fm1r1)", f"({half}, fm1r1)", selection=odd),
            ],
            full,
        ),
        _grid(
            "init-ablation",
            [
                E(f"{init.value} {full} {_pct(f)}", full, init=init, data_fraction=f)
                for init in Init
                for f in fractions
            ]
            + [
                E(f"{init.value} ({full}, fm{hx}r{hy}) 100%", f"({full}, fm{hx}r{hy})", init=init)
                for init in Init
            ]
            + [
                E(f"{init.value} {half} {_pct(f)}", half, init=init, selection=odd, data_fraction=f)
                for init in Init
                for f in fractions
            ],
            f"pretrained {full} 100%",
        ),
        _grid(
            "dataset-size",
            [
                cfg
                for f in fractions
                for cfg in (
                    E(f"{full} {_pct(f)}", full, data_fraction=f),
                    E(f"{half} {_pct(f)}", half, selection=odd, data_fraction=f),
                    E(f"({full}, fm{hx}r{hy}) {_pct(f)}", f"({full}, fm{hx}r{hy})", data_fraction=f),
                )
            ],
            f"{full} 100%",
        ),
    ]
    return {g.name: g for g in grids}


def _grid(name: str, configs: Iterable[ExperimentConfig], baseline: str) -> GridSpec:
    # shallow encoders map several members onto the same model; keep the first
    distinct = {}
    for cfg in configs:
        distinct.setdefault(cfg.name, cfg)
    return GridSpec(name, list(distinct.values()), baseline)


def _pct(fraction: float) -> str:
    return f"{fraction * 100:g}%"


@dataclass
class ExperimentResult:
    name: str
    notation: str
    status: str = "ok"
    error: str = ""
    total_params: int = 0
    trainable_params: int = 0
    wall_clock_s: float = float("nan")
    total_wall_clock_s: float = float("nan")
    median_epoch_s: float = float("nan")
    epochs_to_best: int = 0
    best_validation_loss: float = float("nan")
    alpha: float = float("nan")
    w_rouge: float = float("nan")
    instance_scores: Tuple[float, ...] = ()
    test_hash: str = ""
    encode_ms: float = float("nan")

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def summary(self) -> RunSummary:
        return RunSummary(
            config=self.name,
            wall_clock_s=self.wall_clock_s,
            instance_scores=self.instance_scores,
            test_hash=self.test_hash,
            total_params=self.total_params,
            trainable_params=self.trainable_params,
        )


# ==========================================
# SHARED DATA AND PRETRAINED WEIGHTS
# ==========================================
@dataclass
class SharedData:
    corpus: list
    vocab: Vocab
    response_set: ResponseSet
    splits: Dict[float, DatasetSplit] = field(default_factory=dict)

    def split(self, settings: DeskSettings, fraction: float) -> DatasetSplit:
        if fraction not in self.splits:
            c = settings.corpus
            self.splits[fraction] = split_dataset(
                self.corpus, c.val_count, c.test_count, fraction, seed=c.seed
            )
        return self.splits[fraction]


@lru_cache(maxsize=4)
def shared_data(settings: DeskSettings) -> SharedData:
    """Corpus, vocabulary and response set shared by every member of a grid."""
    corpus = generate_corpus(settings.corpus.spec())
    c = settings.corpus
    full = split_dataset(corpus, c.val_count, c.test_count, 1.0, seed=c.seed)
    texts = [p.message for p in full.train] + [p.reply for p in full.train]
    vocab = train_vocab(texts, target_size=c.vocab_size)
    replies = [p.reply for p in full.train]
    response_set = build_response_set(
        replies, default_min_freq(len(replies), settings.eval.min_freq_rate)
    )
    data = SharedData(corpus, vocab, response_set)
    data.splits[1.0] = full
    return data


def _cache_key(kind: Init, settings: DeskSettings, precision: str) -> str:
    payload = json.dumps(
        [
            kind.value,
            dataclasses.asdict(settings.model),
            dataclasses.asdict(settings.corpus),
            precision,
        ],
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@lru_cache(maxsize=8)
def _get_pretrained_weights(
    kind: Init, settings: DeskSettings, precision: str
) -> EncoderWeights:
    """
    MLM-pretrained source encoder for ``kind``, cached in memory and under ``.cache/``.

    Parameters:
    - kind (Init): PRETRAINED uses generic text, DOMAIN_PRETRAINED same-generator text.
    - settings (DeskSettings): model dims, pretraining budget and corpus settings.
    - precision (str): precision the weights were produced in.

    Returns:
    - EncoderWeights: encoder with as many layers as the larger base encoder.
    """
    cache_dir = ".cache"
    os.makedirs(cache_dir, exist_ok=True)
    cache_path = os.path.join(cache_dir, f"pretrained_{kind.value}_{_cache_key(kind, settings, precision)}.rcw")

    if os.path.exists(cache_path):
        try:
            weights = load_encoder_weights(cache_path)
            logger.info(f"Loading cached pretrained weights from {cache_path}")
            return weights
        except (ContainerError, ValueError, KeyError, TypeError) as e:
            logger.warning(f"Cache file {cache_path} is corrupted. Rebuilding. Error: {e}")

    m = settings.model
    vocab = shared_data(settings).vocab
    config = m.encoder_config(max(m.message_layers, m.response_layers), len(vocab))
    if kind is Init.DOMAIN_PRETRAINED:
        texts = generate_domain_text(
            settings.corpus.spec(), m.pretrain_texts, seed=settings.corpus.seed + 1
        )
    else:
        texts = generate_generic_text(m.pretrain_texts, seed=m.pretrain_seed)
    logger.info(f"Pretraining '{kind.value}' source encoder for {m.pretrain_steps} steps...")
    weights = pretrain_mlm(
        config,
        texts,
        m.pretrain_steps,
        m.pretrain_seed,
        vocab=vocab,
        batch_size=m.pretrain_batch,
        max_len=m.max_len,
    )
    save_encoder_weights(weights, cache_path)
    return weights


def _initializer(source: Optional[EncoderWeights], layers: int, selection: SelectionStrategy, seed: int):
    if source is None:
        return RandomInit(seed)
    if layers == source.num_layers:
        return FromWeights(source)
    return FromWeights(select_layers(source, LayerSelection(selection, layers)))


# ==========================================
# RUNNING
# ==========================================
def build_model(cfg: ExperimentConfig, settings: DeskSettings, precision: str) -> MatchingModel:
    data = shared_data(settings)
    notation = cfg.parsed
    m = settings.model
    vocab_size = len(data.vocab)
    source = None
    if cfg.init is not Init.RANDOM:
        source = _get_pretrained_weights(cfg.init, settings, precision)
    return MatchingModel.build(
        m.encoder_config(notation.message_layers, vocab_size),
        m.encoder_config(notation.response_layers, vocab_size),
        data.vocab,
        message_init=_initializer(source, notation.message_layers, cfg.selection, cfg.seed),
        response_init=_initializer(source, notation.response_layers, cfg.selection, cfg.seed + 1),
        freeze=notation.freeze,
        max_message_len=m.max_len,
        max_response_len=m.max_len,
    )


def _encode_latency_ms(model: MatchingModel, messages: Sequence[str], limit: int = 200) -> float:
    timings = []
    for message in messages[:limit]:
        start = time.perf_counter()
        model.encode_messages([message])
        timings.append(time.perf_counter() - start)
    return float(np.median(timings) * 1000.0) if timings else float("nan")


def _run_experiment(cfg: ExperimentConfig, settings: DeskSettings, precision: str) -> ExperimentResult:
    T.seed_everything(cfg.seed)
    data = shared_data(settings)
    split = data.split(settings, cfg.data_fraction)
    model = build_model(cfg, settings, precision)

    _, report = train(model, split, settings.train.train_config(cfg.seed))
    response_set = encode_response_set(model, data.response_set)
    ev = settings.eval
    weights = ev.rouge_weights()
    alpha = tune_alpha(
        model, split.validation[: ev.tune_instances], response_set, ev.alpha_grid, ev.tau, weights
    )
    messages = [p.message for p in split.test]
    blocks = suggest_many(model, messages, response_set, alpha, ev.tau)
    scores = tuple(
        per_instance_w_rouge(EvalInstance(p.reply, b.texts), weights)
        for p, b in zip(split.test, blocks)
    )
    return ExperimentResult(
        name=cfg.name,
        notation=cfg.parsed.canonical,
        total_params=report.total_params,
        trainable_params=report.trainable_params,
        wall_clock_s=report.wall_clock_to_best,
        total_wall_clock_s=report.total_wall_clock,
        median_epoch_s=report.median_epoch_seconds,
        epochs_to_best=report.epochs_to_best,
        best_validation_loss=report.best_validation_loss,
        alpha=alpha,
        w_rouge=float(np.mean(scores)),
        instance_scores=scores,
        test_hash=split.test_hash,
        encode_ms=_encode_latency_ms(model, messages),
    )


def run_experiment(
    cfg: ExperimentConfig, settings: Optional[DeskSettings] = None, precision: str = "fast32"
) -> ExperimentResult:
    """Runs one grid member; any failure becomes a failed result instead of an exception."""
    settings = settings or DeskSettings()
    logger.info(f"Running experiment '{cfg.name}' ({cfg.notation}, init={cfg.init.value})")
    with T.use_precision(precision):
        try:
            result = _run_experiment(cfg, settings, precision)
        except Exception as e:
            logger.error(f"Error running experiment '{cfg.name}': {e}")
            return ExperimentResult(name=cfg.name, notation=cfg.notation, status="failed", error=str(e))
    logger.info(
        f"'{cfg.name}': w-Rouge {result.w_rouge:.5f}, wall clock {result.wall_clock_s:.2f}s"
    )
    return result


@dataclass
class GridReport:
    grid: str
    baseline: str
    results: List[ExperimentResult]
    table: pd.DataFrame

    @property
    def test_hashes(self) -> set:
        return {r.test_hash for r in self.results if r.ok}

    def render(self) -> str:
        return render_table(self.table)


def build_table(results: Sequence[ExperimentResult], baseline: str) -> pd.DataFrame:
    """One row per member with deltas and significance against the baseline row."""
    base = next((r for r in results if r.name == baseline), None)
    base_ok = base is not None and base.ok
    rows = []
    for r in results:
        row = {
            "config": r.name,
            "notation": r.notation,
            "status": r.status if r.ok else f"failed: {r.error}",
            "total_params": r.total_params,
            "trainable_params": r.trainable_params,
            "param_reduction_pct": float("nan"),
            "wall_clock_s": r.wall_clock_s,
            "wall_clock_delta_pct": float("nan"),
            "median_epoch_s": r.median_epoch_s,
            "epochs_to_best": r.epochs_to_best,
            "encode_ms": r.encode_ms,
            "alpha": r.alpha,
            "w_rouge": r.w_rouge,
            "w_rouge_delta_pct": float("nan"),
            "p_vs_baseline": float("nan"),
            "significant": False,
            "verdict": "",
            "test_hash": r.test_hash,
        }
        if r.ok and base_ok:
            try:
                comparison = compare_runs(base.summary(), r.summary())
            except ValueError as e:
                logger.error(f"Cannot compare '{r.name}' with the baseline: {e}")
            else:
                row.update(
                    param_reduction_pct=100.0 * (1 - r.total_params / base.total_params),
                    wall_clock_delta_pct=comparison.delta_wall_clock_pct,
                    w_rouge_delta_pct=comparison.delta_w_rouge_pct,
                    p_vs_baseline=comparison.significance.p_value,
                    significant=comparison.dagger,
                    verdict=comparison.verdict,
                )
        rows.append(row)
    return pd.DataFrame(rows)


def render_table(table: pd.DataFrame) -> str:
    """Aligned plain-text table with a dagger on significant w-Rouge changes."""
    view = pd.DataFrame(
        {
            "Config": table["config"],
            "#Params": table["total_params"],
            "Trainable": table["trainable_params"],
            "Time (s)": table["wall_clock_s"].map(lambda v: f"{v:.2f}"),
            "dTime %": table["wall_clock_delta_pct"].map(lambda v: f"{v:+.1f}"),
            "Epoch (s)": table["median_epoch_s"].map(lambda v: f"{v:.2f}"),
            "Encode (ms)": table["encode_ms"].map(lambda v: f"{v:.3f}"),
            "w-Rouge": [
                f"{w:.5f}{'†' if s else ''}" for w, s in zip(table["w_rouge"], table["significant"])
            ],
            "Verdict": table["verdict"],
            "Status": table["status"],
        }
    )
    return view.to_string(index=False)


def _warm_pretrained(grid: GridSpec, settings: DeskSettings, precision: str) -> None:
    with T.use_precision(precision):
        for kind in sorted({c.init for c in grid.configs if c.init is not Init.RANDOM}):
            _get_pretrained_weights(kind, settings, precision)


def run_grid(
    grid: GridSpec,
    settings: Optional[DeskSettings] = None,
    *,
    parallel: bool = False,
    max_workers: Optional[int] = None,
    precision: str = "fast32",
    out_dir=None,
) -> GridReport:
    """
    Runs every member of ``grid`` and compares it with the baseline.

    Members run sequentially by default; ``parallel`` runs them in worker processes that
    share nothing but the on-disk pretrained-weights cache. A failed member becomes a
    failed row and the grid carries on.
    """
    settings = settings or DeskSettings()
    logger.info(f"Running grid '{grid.name}' with {len(grid.configs)} members")

    if parallel:
        _warm_pretrained(grid, settings, precision)
        results: List[Optional[ExperimentResult]] = [None] * len(grid.configs)
        with ProcessPoolExecutor(max_workers=max_workers) as executor:
            future_to_index = {
                executor.submit(run_experiment, cfg, settings, precision): i
                for i, cfg in enumerate(grid.configs)
            }
            for future in as_completed(future_to_index):
                i = future_to_index[future]
                cfg = grid.configs[i]
                try:
                    results[i] = future.result()
                except Exception as e:
                    logger.error(f"Error running experiment '{cfg.name}' in a worker: {e}")
                    results[i] = ExperimentResult(cfg.name, cfg.notation, status="failed", error=str(e))
    else:
        results = [run_experiment(cfg, settings, precision) for cfg in grid.configs]

    hashes = {r.test_hash for r in results if r.ok}
    if len(hashes) > 1:
        logger.error(f"Grid '{grid.name}' rows were evaluated on different test sets: {hashes}")

    table = build_table(results, grid.baseline)
    report = GridReport(grid.name, grid.baseline, results, table)
    if out_dir is not None:
        write_grid_report(report, out_dir)
    return report


def write_grid_report(report: GridReport, out_dir) -> Dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "table": out / f"{report.grid}.csv",
        "eval": out / f"{report.grid}_eval.csv",
        "text": out / f"{report.grid}.txt",
    }
    report.table.to_csv(paths["table"], index=False)
    write_evaluation_csv(report.table[EVAL_COLUMNS], paths["eval"])
    paths["text"].write_text(report.render() + "\n", encoding="utf-8")
    logger.info(f"Wrote grid '{report.grid}' report to {out}")
    return paths
