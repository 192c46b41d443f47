"""
BERT-style transformer encoder with CLS pooling, and the compression machinery built
around its weight schema: layer selection for dropping, freeze specifications and
parameter counting.
"""

import enum
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import Dict, Optional, Set, Tuple, Union

import torch
from torch import nn

from . import tensor as T
from .corpus import TokenBatch

logger = logging.getLogger(__name__)

INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int
    hidden_size: int = 64
    num_heads: int = 4
    ff_size: int = 256
    vocab_size: int = 2000
    max_positions: int = 32
    # rows in the segment table; every token uses segment id 0
    type_vocab_size: int = 2
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.hidden_size % self.num_heads:
            raise ValueError(
                f"hidden_size {self.hidden_size} is not divisible by num_heads {self.num_heads}"
            )
        if min(self.hidden_size, self.ff_size, self.vocab_size, self.max_positions) < 1:
            raise ValueError("encoder dimensions must be positive")
        if self.type_vocab_size < 1:
            raise ValueError("type_vocab_size must be >= 1")

    @classmethod
    def bert_base(cls, num_layers: int = 12) -> "EncoderConfig":
        return cls(
            num_layers=num_layers,
            hidden_size=768,
            num_heads=12,
            ff_size=3072,
            vocab_size=30522,
            max_positions=512,
        )

    @classmethod
    def desk(
        cls, num_layers: int = 4, vocab_size: int = 2000, max_positions: int = 32
    ) -> "EncoderConfig":
        return cls(num_layers=num_layers, vocab_size=vocab_size, max_positions=max_positions)

    def with_layers(self, num_layers: int) -> "EncoderConfig":
        return replace(self, num_layers=num_layers)

    def same_dims(self, other: "EncoderConfig") -> bool:
        return replace(self, num_layers=other.num_layers) == other


def embedding_schema(config: EncoderConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    h = config.hidden_size
    return OrderedDict(
        [
            ("emb.tok", (config.vocab_size, h)),
            ("emb.pos", (config.max_positions, h)),
            ("emb.seg", (config.type_vocab_size, h)),
            ("emb.ln.g", (h,)),
            ("emb.ln.b", (h,)),
        ]
    )


def layer_schema(config: EncoderConfig, n: int) -> "OrderedDict[str, Tuple[int, ...]]":
    h, f = config.hidden_size, config.ff_size
    schema = OrderedDict()
    for proj in ("q", "k", "v", "o"):
        schema[f"layer.{n}.attn.{proj}.w"] = (h, h)
        schema[f"layer.{n}.attn.{proj}.b"] = (h,)
    schema[f"layer.{n}.ln1.g"] = (h,)
    schema[f"layer.{n}.ln1.b"] = (h,)
    schema[f"layer.{n}.ff.w1"] = (h, f)
    schema[f"layer.{n}.ff.b1"] = (f,)
    schema[f"layer.{n}.ff.w2"] = (f, h)
    schema[f"layer.{n}.ff.b2"] = (h,)
    schema[f"layer.{n}.ln2.g"] = (h,)
    schema[f"layer.{n}.ln2.b"] = (h,)
    return schema


def weight_schema(config: EncoderConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Every weight key of an encoder with its shape, in serialization order."""
    schema = embedding_schema(config)
    for n in range(config.num_layers):
        schema.update(layer_schema(config, n))
    return schema


def _numel(shape) -> int:
    return math.prod(shape)


# ==========================================
# MODULES
# ==========================================
def _param(*shape) -> nn.Parameter:
    return nn.Parameter(torch.empty(*shape))


class _Projection(nn.Module):
    def __init__(self, d_in, d_out):
        super().__init__()
        self.w = _param(d_in, d_out)
        self.b = _param(d_out)

    def forward(self, x):
        return T.add(T.matmul(x, self.w), self.b)


class _Norm(nn.Module):
    def __init__(self, h, eps):
        super().__init__()
        self.g = _param(h)
        self.b = _param(h)
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.g, self.b, self.eps)


class _Embeddings(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        h = config.hidden_size
        self.tok = _param(config.vocab_size, h)
        self.pos = _param(config.max_positions, h)
        self.seg = _param(config.type_vocab_size, h)
        self.ln = _Norm(h, config.layer_norm_eps)

    def forward(self, ids):
        width = ids.shape[1]
        positions = torch.arange(width, device=ids.device)
        segments = torch.zeros(width, dtype=torch.long, device=ids.device)
        x = T.embedding(ids, self.tok)
        x = T.add(x, T.embedding(positions, self.pos))
        x = T.add(x, T.embedding(segments, self.seg))
        return self.ln(x)


class _Attention(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        h = config.hidden_size
        self.num_heads = config.num_heads
        self.q = _Projection(h, h)
        self.k = _Projection(h, h)
        self.v = _Projection(h, h)
        self.o = _Projection(h, h)

    def _heads(self, x):
        b, t, h = x.shape
        return x.reshape(b, t, self.num_heads, h // self.num_heads).transpose(1, 2)

    def forward(self, x, key_padding):
        b, t, h = x.shape
        head_dim = h // self.num_heads
        q, k, v = self._heads(self.q(x)), self._heads(self.k(x)), self._heads(self.v(x))
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(head_dim))
        scores = T.masked_fill(scores, key_padding, float("-inf"))
        context = T.matmul(T.softmax(scores), v)
        context = context.transpose(1, 2).reshape(b, t, h)
        return self.o(context)


class _FeedForward(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        h, f = config.hidden_size, config.ff_size
        self.w1 = _param(h, f)
        self.b1 = _param(f)
        self.w2 = _param(f, h)
        self.b2 = _param(h)

    def forward(self, x):
        inner = T.gelu(T.add(T.matmul(x, self.w1), self.b1))
        return T.add(T.matmul(inner, self.w2), self.b2)


class _Layer(nn.Module):
    """Post-layernorm block: x -> LN(x + attn(x)) -> LN(x + ff(x))."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.attn = _Attention(config)
        self.ln1 = _Norm(config.hidden_size, config.layer_norm_eps)
        self.ff = _FeedForward(config)
        self.ln2 = _Norm(config.hidden_size, config.layer_norm_eps)

    def forward(self, x, key_padding):
        x = self.ln1(T.add(x, self.attn(x, key_padding)))
        return self.ln2(T.add(x, self.ff(x)))


class Encoder(nn.Module):
    """
    Transformer encoder whose ``state_dict`` keys are exactly ``weight_schema(config)``.
    """

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        self.emb = _Embeddings(config)
        self.layer = nn.ModuleList([_Layer(config) for _ in range(config.num_layers)])

    def hidden_states(self, batch: TokenBatch) -> torch.Tensor:
        ids, mask = batch.ids, batch.mask
        if ids.shape[1] > self.config.max_positions:
            raise ValueError(
                f"Sequence length {ids.shape[1]} exceeds max positions {self.config.max_positions}"
            )
        key_padding = ~mask[:, None, None, :]
        x = self.emb(ids)
        for block in self.layer:
            x = block(x, key_padding)
        return x

    def forward(self, batch: TokenBatch) -> torch.Tensor:
        return self.hidden_states(batch)[:, 0]


def encode(encoder: Encoder, batch: TokenBatch) -> torch.Tensor:
    """Returns the batch x H matrix of final-layer CLS vectors."""
    return encoder(batch)


# ==========================================
# WEIGHTS AND INITIALISATION
# ==========================================
@dataclass
class EncoderWeights:
    config: EncoderConfig
    tensors: Dict[str, torch.Tensor]

    def __post_init__(self):
        schema = weight_schema(self.config)
        orphans = sorted(set(self.tensors) - set(schema))
        if orphans:
            raise ValueError(f"Orphan weight keys for this config: {orphans[:5]}")
        for key, shape in schema.items():
            if key not in self.tensors:
                raise ValueError(f"Missing weight key '{key}'")
            if tuple(self.tensors[key].shape) != shape:
                raise ValueError(
                    f"Weight '{key}' has shape {tuple(self.tensors[key].shape)}, expected {shape}"
                )

    @property
    def num_layers(self) -> int:
        return self.config.num_layers

    @classmethod
    def from_encoder(cls, encoder: Encoder) -> "EncoderWeights":
        return cls(
            encoder.config,
            OrderedDict((k, v.detach().clone()) for k, v in encoder.state_dict().items()),
        )


@dataclass(frozen=True)
class RandomInit:
    seed: int = 0


@dataclass(frozen=True)
class FromWeights:
    weights: EncoderWeights


def _random_init(encoder: Encoder, seed: int) -> None:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        with torch.no_grad():
            for name, p in encoder.named_parameters():
                leaf = name.rsplit(".", 1)[-1]
                if leaf == "g":
                    p.fill_(1.0)
                elif leaf in ("b", "b1", "b2"):
                    p.zero_()
                else:
                    nn.init.trunc_normal_(p, std=INIT_STD, a=-2 * INIT_STD, b=2 * INIT_STD)


def build_encoder(
    config: EncoderConfig, init: Union[RandomInit, FromWeights] = RandomInit()
) -> Encoder:
    """
    Builds an encoder with random or copied weights.

    Parameters:
    - config (EncoderConfig): target architecture.
    - init (RandomInit | FromWeights): truncated-normal init (sigma 0.02, layernorm gains 1,
      biases 0), or a verbatim copy of the embedding block and the first
      ``config.num_layers`` layer blocks of a source.

    Returns:
    - Encoder: the initialised encoder.
    """
    encoder = Encoder(config)
    if isinstance(init, RandomInit):
        _random_init(encoder, init.seed)
        return encoder

    source = init.weights
    if not config.same_dims(source.config):
        raise ValueError(
            f"Source weights have dims {source.config}, incompatible with {config}"
        )
    if source.num_layers < config.num_layers:
        raise ValueError(
            f"Source has {source.num_layers} layers but {config.num_layers} were requested; "
            f"use select_layers first"
        )
    with torch.no_grad():
        for key, p in encoder.state_dict(keep_vars=True).items():
            p.copy_(source.tensors[key].to(p.dtype))
    return encoder


# ==========================================
# LAYER DROPPING
# ==========================================
class SelectionStrategy(str, enum.Enum):
    BOTTOM = "bottom"
    TOP = "top"
    EVEN = "even"
    ODD = "odd"
    EXPLICIT = "explicit"


@dataclass(frozen=True)
class LayerSelection:
    strategy: SelectionStrategy
    keep_count: int
    indices: Tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "strategy", SelectionStrategy(self.strategy))
        if self.keep_count < 1:
            raise ValueError(f"keep_count must be >= 1, got {self.keep_count}")
        if self.strategy is SelectionStrategy.EXPLICIT and len(self.indices) != self.keep_count:
            raise ValueError("Explicit selection needs exactly keep_count indices")

    def resolve(self, source_layers: int) -> Tuple[int, ...]:
        k = self.keep_count
        if k > source_layers:
            raise ValueError(f"Cannot keep {k} of {source_layers} layers")
        if self.strategy is SelectionStrategy.BOTTOM:
            return tuple(range(k))
        if self.strategy is SelectionStrategy.TOP:
            return tuple(range(source_layers - k, source_layers))
        if self.strategy is SelectionStrategy.EXPLICIT:
            indices = tuple(self.indices)
            if any(i < 0 or i >= source_layers for i in indices):
                raise ValueError(
                    f"Explicit layer indices {indices} out of range for {source_layers} layers"
                )
            if any(b <= a for a, b in zip(indices, indices[1:])):
                raise ValueError(f"Explicit layer indices {indices} must be strictly increasing")
            return indices

        start = 0 if self.strategy is SelectionStrategy.EVEN else 1
        candidates = list(range(start, source_layers, 2))
        m = len(candidates)
        if k > m:
            raise ValueError(
                f"{self.strategy.value} selection has only {m} candidates in {source_layers} layers"
            )
        if k == 1:
            return (candidates[0],)
        return tuple(candidates[int(math.floor(j * (m - 1) / (k - 1) + 0.5))] for j in range(k))


def select_layers(source: EncoderWeights, sel: LayerSelection) -> EncoderWeights:
    """Keeps the selected layer blocks, re-stacked contiguously in their original order."""
    indices = sel.resolve(source.num_layers)
    config = source.config.with_layers(len(indices))
    tensors = OrderedDict(
        (key, source.tensors[key].clone()) for key in embedding_schema(source.config)
    )
    for new, old in enumerate(indices):
        prefix = f"layer.{old}."
        for key in layer_schema(source.config, old):
            tensors[f"layer.{new}." + key[len(prefix):]] = source.tensors[key].clone()
    logger.info(
        f"Selected layers {list(indices)} of {source.num_layers} ({sel.strategy.value})"
    )
    return EncoderWeights(config, tensors)


# ==========================================
# FREEZING AND COUNTING
# ==========================================
@dataclass(frozen=True)
class FreezeSpec:
    frozen_message_layers: int = 0
    frozen_response_layers: int = 0
    freeze_message_embeddings: bool = False
    freeze_response_embeddings: bool = False

    def __post_init__(self):
        if self.frozen_message_layers < 0 or self.frozen_response_layers < 0:
            raise ValueError("Frozen layer counts must be non-negative")

    @classmethod
    def fm_r(cls, i: int, j: int) -> "FreezeSpec":
        """Bottom i message / j response layers, plus the embeddings of each side with a frozen layer."""
        return cls(i, j, i > 0, j > 0)

    @classmethod
    def embeddings_only(cls) -> "FreezeSpec":
        return cls(0, 0, True, True)

    @classmethod
    def all_frozen(cls, message_layers: int, response_layers: int) -> "FreezeSpec":
        return cls(message_layers, response_layers, True, True)

    @property
    def is_empty(self) -> bool:
        return self == FreezeSpec()

    def validate(self, message_layers: int, response_layers: int) -> None:
        if self.frozen_message_layers > message_layers:
            raise ValueError(
                f"Cannot freeze {self.frozen_message_layers} of {message_layers} message layers"
            )
        if self.frozen_response_layers > response_layers:
            raise ValueError(
                f"Cannot freeze {self.frozen_response_layers} of {response_layers} response layers"
            )


def encoder_frozen_keys(
    config: EncoderConfig, frozen_layers: int, freeze_embeddings: bool
) -> Set[str]:
    keys = set(embedding_schema(config)) if freeze_embeddings else set()
    for n in range(frozen_layers):
        keys.update(layer_schema(config, n))
    return keys


def frozen_keys(
    freeze: Optional[FreezeSpec], msg_cfg: EncoderConfig, rsp_cfg: EncoderConfig
) -> Set[str]:
    """Prefixed (``msg.``/``rsp.``) keys excluded from updates under ``freeze``."""
    freeze = freeze or FreezeSpec()
    freeze.validate(msg_cfg.num_layers, rsp_cfg.num_layers)
    keys = {
        "msg." + k
        for k in encoder_frozen_keys(
            msg_cfg, freeze.frozen_message_layers, freeze.freeze_message_embeddings
        )
    }
    keys.update(
        "rsp." + k
        for k in encoder_frozen_keys(
            rsp_cfg, freeze.frozen_response_layers, freeze.freeze_response_embeddings
        )
    )
    return keys


def count_params(
    msg_cfg: EncoderConfig, rsp_cfg: EncoderConfig, freeze: Optional[FreezeSpec] = None
) -> Tuple[int, int]:
    """
    Counts parameters of a message/response encoder pair without allocating them.

    Returns:
    - tuple[int, int]: (total, trainable) where trainable excludes frozen blocks.
    """
    sizes = {"msg." + k: _numel(s) for k, s in weight_schema(msg_cfg).items()}
    sizes.update({"rsp." + k: _numel(s) for k, s in weight_schema(rsp_cfg).items()})
    total = sum(sizes.values())
    frozen = sum(sizes[k] for k in frozen_keys(freeze, msg_cfg, rsp_cfg))
    return total, total - frozen
