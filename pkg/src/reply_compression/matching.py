"""
Bi-encoder matching model: symmetric in-batch matching loss, the training loop with
validation checkpoint selection and wall-clock accounting, masked-LM pretraining of
encoders, and checkpoint persistence.
"""

import hashlib
import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import torch
from torch import nn

from . import tensor as T
from .container import ContainerError, read_container, write_container
from .corpus import (
    CLS_ID,
    MASK_ID,
    RESERVED_TOKENS,
    SEP_ID,
    DatasetSplit,
    TokenBatch,
    Vocab,
    encode_texts,
)
from .encoder import (
    Encoder,
    EncoderConfig,
    EncoderWeights,
    FreezeSpec,
    FromWeights,
    RandomInit,
    build_encoder,
    count_params,
    frozen_keys,
    weight_schema,
)

logger = logging.getLogger(__name__)

IGNORE_INDEX = -100


class CheckpointError(ContainerError):
    """A checkpoint does not match the format or the model it is loaded into."""


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, report, checkpoint=None):
        super().__init__(message)
        self.report = report
        self.checkpoint = checkpoint


def trim(batch: TokenBatch) -> TokenBatch:
    width = max(int(batch.mask.sum(dim=1).max()), 1)
    return TokenBatch(batch.ids[:, :width], batch.mask[:, :width])


# ==========================================
# MODEL
# ==========================================
class MatchingModel(nn.Module):
    """
    Two unshared encoders: ``msg`` (x layers) and ``rsp`` (y layers), i.e. MxRy.
    """

    def __init__(
        self,
        msg: Encoder,
        rsp: Encoder,
        vocab: Vocab,
        freeze: Optional[FreezeSpec] = None,
        max_message_len: int = 32,
        max_response_len: int = 32,
    ):
        super().__init__()
        shared = {p.data_ptr() for p in msg.parameters()} & {
            p.data_ptr() for p in rsp.parameters()
        }
        if shared:
            raise ValueError("Message and response encoders must not share tensors")
        for cfg in (msg.config, rsp.config):
            if cfg.vocab_size < len(vocab):
                raise ValueError(
                    f"Encoder vocab_size {cfg.vocab_size} is smaller than the vocabulary ({len(vocab)})"
                )
        self.msg = msg
        self.rsp = rsp
        self.vocab = vocab
        self.max_message_len = max_message_len
        self.max_response_len = max_response_len
        self.freeze = freeze or FreezeSpec()
        self._fingerprint: Optional[str] = None
        self.apply_freeze()

    @classmethod
    def build(
        cls,
        msg_cfg: EncoderConfig,
        rsp_cfg: EncoderConfig,
        vocab: Vocab,
        *,
        message_init: Union[RandomInit, FromWeights] = RandomInit(0),
        response_init: Union[RandomInit, FromWeights] = RandomInit(1),
        freeze: Optional[FreezeSpec] = None,
        max_message_len: int = 32,
        max_response_len: int = 32,
    ) -> "MatchingModel":
        return cls(
            build_encoder(msg_cfg, message_init),
            build_encoder(rsp_cfg, response_init),
            vocab,
            freeze=freeze,
            max_message_len=max_message_len,
            max_response_len=max_response_len,
        )

    @property
    def message_encoder(self) -> Encoder:
        return self.msg

    @property
    def response_encoder(self) -> Encoder:
        return self.rsp

    @property
    def notation(self) -> str:
        return f"M{self.msg.config.num_layers}R{self.rsp.config.num_layers}"

    def frozen_keys(self):
        return frozen_keys(self.freeze, self.msg.config, self.rsp.config)

    def apply_freeze(self) -> None:
        frozen = self.frozen_keys()
        for name, p in self.named_parameters():
            p.requires_grad_(name not in frozen)

    def trainable_parameters(self) -> "OrderedDict[str, nn.Parameter]":
        return OrderedDict((n, p) for n, p in self.named_parameters() if p.requires_grad)

    def param_counts(self) -> Tuple[int, int]:
        return count_params(self.msg.config, self.rsp.config, self.freeze)

    def tokenize_messages(self, texts: Sequence[str], trim: bool = True) -> TokenBatch:
        return encode_texts(self.vocab, texts, self.max_message_len, trim=trim)

    def tokenize_responses(self, texts: Sequence[str], trim: bool = True) -> TokenBatch:
        return encode_texts(self.vocab, texts, self.max_response_len, trim=trim)

    @torch.no_grad()
    def encode_messages(self, texts: Sequence[str]) -> torch.Tensor:
        return self.msg(self.tokenize_messages(texts))

    @torch.no_grad()
    def encode_responses(self, texts: Sequence[str]) -> torch.Tensor:
        return self.rsp(self.tokenize_responses(texts))

    def fingerprint(self) -> str:
        """
        Digest of every weight; identifies the checkpoint a response cache belongs to.

        Computed once and kept until ``invalidate_fingerprint``; ``train`` and
        ``restore_checkpoint`` invalidate it, any other in-place weight edit must too.
        """
        if self._fingerprint is None:
            self._fingerprint = self._hash_weights()
        return self._fingerprint

    def invalidate_fingerprint(self) -> None:
        self._fingerprint = None

    def _hash_weights(self) -> str:
        h = hashlib.sha256()
        for key, value in self.state_dict().items():
            h.update(key.encode("utf-8"))
            h.update(value.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()[:16]


# ==========================================
# LOSS
# ==========================================
def symmetric_loss(
    msg_vecs: torch.Tensor, rsp_vecs: torch.Tensor, temperature: float = 1.0
) -> torch.Tensor:
    """
    Symmetric in-batch matching loss.

    Scores are raw dot products S = M R^T; the loss averages the cross-entropy of
    each row of S and of each row of S^T against the diagonal.
    """
    if msg_vecs.dim() != 2 or msg_vecs.shape != rsp_vecs.shape:
        raise ValueError(
            f"symmetric_loss: expected two n x H matrices, got {tuple(msg_vecs.shape)} "
            f"and {tuple(rsp_vecs.shape)}"
        )
    n = msg_vecs.shape[0]
    if n == 0:
        raise ValueError("symmetric_loss: empty batch")
    if not (bool(torch.isfinite(msg_vecs).all()) and bool(torch.isfinite(rsp_vecs).all())):
        raise T.NonFiniteError("symmetric_loss: non-finite encodings")
    scores = T.matmul(msg_vecs, T.transpose(rsp_vecs))
    if temperature != 1.0:
        scores = T.scale(scores, 1.0 / temperature)
    diag = torch.arange(n)
    rows = T.log_softmax(scores)[diag, diag]
    cols = T.log_softmax(T.transpose(scores))[diag, diag]
    return T.scale(T.add(T.reduce_mean(rows), T.reduce_mean(cols)), -0.5)


# ==========================================
# CHECKPOINTS
# ==========================================
@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, torch.Tensor]"
    message_config: EncoderConfig
    response_config: EncoderConfig
    freeze: FreezeSpec
    vocab_hash: str
    seed: int
    epoch: int = -1
    validation_loss: float = float("nan")
    wall_clock_s: float = 0.0
    max_message_len: int = 32
    max_response_len: int = 32

    def __post_init__(self):
        expected = self.expected_schema()
        for key, shape in expected.items():
            if key not in self.tensors:
                raise CheckpointError(f"Checkpoint is missing '{key}'", key)
            if tuple(self.tensors[key].shape) != shape:
                raise CheckpointError(
                    f"Checkpoint tensor '{key}' has shape {tuple(self.tensors[key].shape)}, "
                    f"expected {shape}",
                    key,
                )
        for key in self.tensors:
            if key not in expected:
                raise CheckpointError(f"Checkpoint has unexpected tensor '{key}'", key)

    def expected_schema(self):
        schema = OrderedDict(
            ("msg." + k, s) for k, s in weight_schema(self.message_config).items()
        )
        schema.update(("rsp." + k, s) for k, s in weight_schema(self.response_config).items())
        return schema

    @property
    def notation(self) -> str:
        return f"M{self.message_config.num_layers}R{self.response_config.num_layers}"

    def header(self) -> Dict:
        return {
            "message_config": asdict(self.message_config),
            "response_config": asdict(self.response_config),
            "freeze": asdict(self.freeze),
            "vocab_hash": self.vocab_hash,
            "seed": self.seed,
            "max_message_len": self.max_message_len,
            "max_response_len": self.max_response_len,
            "metadata": {
                "epoch": self.epoch,
                "validation_loss": self.validation_loss,
                "wall_clock_s": self.wall_clock_s,
            },
        }


def checkpoint_from_model(
    model: MatchingModel,
    seed: int,
    epoch: int = -1,
    validation_loss: float = float("nan"),
    wall_clock_s: float = 0.0,
) -> Checkpoint:
    tensors = OrderedDict(
        (k, v.detach().clone()) for k, v in model.state_dict().items()
    )
    return Checkpoint(
        tensors=tensors,
        message_config=model.msg.config,
        response_config=model.rsp.config,
        freeze=model.freeze,
        vocab_hash=model.vocab.digest,
        seed=seed,
        epoch=epoch,
        validation_loss=validation_loss,
        wall_clock_s=wall_clock_s,
        max_message_len=model.max_message_len,
        max_response_len=model.max_response_len,
    )


def save_checkpoint(c: Checkpoint, path) -> None:
    write_container(path, "checkpoint", c.header(), c.tensors)
    logger.info(f"Saved {c.notation} checkpoint (epoch {c.epoch}) to {path}")


def load_checkpoint(path) -> Checkpoint:
    try:
        header, tensors = read_container(path, "checkpoint")
    except ContainerError as e:
        logger.error(f"Cannot read checkpoint {path}: {e}")
        raise CheckpointError(str(e), e.key) from e
    meta = header.get("metadata", {})
    return Checkpoint(
        tensors=tensors,
        message_config=EncoderConfig(**header["message_config"]),
        response_config=EncoderConfig(**header["response_config"]),
        freeze=FreezeSpec(**header["freeze"]),
        vocab_hash=header["vocab_hash"],
        seed=header["seed"],
        epoch=meta.get("epoch", -1),
        validation_loss=meta.get("validation_loss", float("nan")),
        wall_clock_s=meta.get("wall_clock_s", 0.0),
        max_message_len=header.get("max_message_len", 32),
        max_response_len=header.get("max_response_len", 32),
    )


def restore_checkpoint(model: MatchingModel, c: Checkpoint) -> MatchingModel:
    """Copies checkpoint weights into ``model`` after checking every key and shape."""
    state = model.state_dict()
    for key, value in state.items():
        if key not in c.tensors:
            raise CheckpointError(f"Checkpoint has no tensor for '{key}'", key)
        if c.tensors[key].shape != value.shape:
            raise CheckpointError(
                f"Shape mismatch for '{key}': checkpoint {tuple(c.tensors[key].shape)}, "
                f"model {tuple(value.shape)}",
                key,
            )
    for key in c.tensors:
        if key not in state:
            raise CheckpointError(f"Checkpoint tensor '{key}' has no place in the model", key)
    if c.vocab_hash != model.vocab.digest:
        raise CheckpointError("Checkpoint was trained with a different vocabulary", "vocab_hash")
    with torch.no_grad():
        for key, value in model.state_dict(keep_vars=True).items():
            value.copy_(c.tensors[key].to(value.dtype))
    model.invalidate_fingerprint()
    return model


def model_from_checkpoint(c: Checkpoint, vocab: Vocab) -> MatchingModel:
    model = MatchingModel.build(
        c.message_config,
        c.response_config,
        vocab,
        freeze=c.freeze,
        max_message_len=c.max_message_len,
        max_response_len=c.max_response_len,
    )
    return restore_checkpoint(model, c)


def save_encoder_weights(weights: EncoderWeights, path) -> None:
    write_container(path, "encoder", {"config": asdict(weights.config)}, weights.tensors)


def load_encoder_weights(path) -> EncoderWeights:
    header, tensors = read_container(path, "encoder")
    return EncoderWeights(EncoderConfig(**header["config"]), tensors)


# ==========================================
# TRAINING
# ==========================================
@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 20
    batch_size: int = 32
    accumulation_steps: int = 1
    schedule: T.LearningRateSchedule = field(default_factory=T.LearningRateSchedule)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    validate_every: int = 1
    temperature: float = 1.0

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.accumulation_steps < 1:
            raise ValueError("accumulation_steps must be >= 1")
        if self.validate_every < 1:
            raise ValueError("validate_every must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.batch_size == 1:
            logger.warning("batch_size 1 gives a degenerate (always zero) matching loss")


@dataclass
class TrainReport:
    notation: str
    validation_losses: List[float]
    best_epoch: int
    wall_clock_to_best: float
    total_wall_clock: float
    epoch_seconds: List[float]
    total_params: int
    trainable_params: int
    diverged: bool = False

    @property
    def epochs_to_best(self) -> int:
        return self.best_epoch + 1

    @property
    def best_validation_loss(self) -> float:
        return self.validation_losses[self.best_epoch] if self.best_epoch >= 0 else float("nan")

    @property
    def median_epoch_seconds(self) -> float:
        if not self.epoch_seconds:
            return 0.0
        ordered = sorted(self.epoch_seconds)
        mid = len(ordered) // 2
        return ordered[mid] if len(ordered) % 2 else 0.5 * (ordered[mid - 1] + ordered[mid])


@torch.no_grad()
def validation_loss(
    model: MatchingModel,
    messages: TokenBatch,
    responses: TokenBatch,
    batch_size: int,
    temperature: float = 1.0,
) -> float:
    """Mean symmetric loss over consecutive validation batches."""
    model.eval()
    total, batches = 0.0, 0
    for start in range(0, len(messages), batch_size):
        index = torch.arange(start, min(start + batch_size, len(messages)))
        loss = symmetric_loss(
            model.msg(trim(messages.select(index))),
            model.rsp(trim(responses.select(index))),
            temperature,
        )
        total += float(loss)
        batches += 1
    return total / batches


def train(
    model: MatchingModel, data: DatasetSplit, cfg: TrainConfig = TrainConfig()
) -> Tuple[Checkpoint, TrainReport]:
    """
    Fine-tunes ``model`` and returns the best-validation checkpoint with its report.

    Each epoch shuffles the training pairs with a seeded generator, accumulates
    ``accumulation_steps`` micro-batch gradients per Adam step (frozen tensors are
    neither differentiated nor updated) and computes the validation loss. Wall clock
    starts after tokenization and includes validation passes; ``wall_clock_to_best`` is
    the elapsed time when the best checkpoint was produced. The model is left holding
    the best weights.
    """
    if not data.train or not data.validation:
        raise ValueError("Training needs non-empty train and validation sets")
    model.invalidate_fingerprint()

    train_msgs = model.tokenize_messages([p.message for p in data.train], trim=False)
    train_rsps = model.tokenize_responses([p.reply for p in data.train], trim=False)
    val_msgs = model.tokenize_messages([p.message for p in data.validation], trim=False)
    val_rsps = model.tokenize_responses([p.reply for p in data.validation], trim=False)

    params = OrderedDict(model.named_parameters())
    freeze_mask = {n: not p.requires_grad for n, p in params.items()}
    trainable = model.trainable_parameters()
    state = T.AdamState(params, freeze_mask, cfg.schedule, cfg.betas, cfg.eps)
    total_params, trainable_params = model.param_counts()
    generator = torch.Generator().manual_seed(cfg.seed)
    n = len(train_msgs)

    logger.info(
        f"Training {model.notation} on {n} pairs: {trainable_params}/{total_params} "
        f"trainable parameters, up to {cfg.max_epochs} epochs"
    )

    losses: List[float] = []
    epoch_seconds: List[float] = []
    best_loss, best_epoch, best_state, wall_to_best = math.inf, -1, None, 0.0
    diverged = False
    start = time.perf_counter()

    for epoch in range(cfg.max_epochs):
        epoch_start = time.perf_counter()
        try:
            if trainable:
                model.train()
                order = torch.randperm(n, generator=generator)
                micro = [order[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
                for group_start in range(0, len(micro), cfg.accumulation_steps):
                    summed = None
                    for index in micro[group_start : group_start + cfg.accumulation_steps]:
                        loss = symmetric_loss(
                            model.msg(trim(train_msgs.select(index))),
                            model.rsp(trim(train_rsps.select(index))),
                            cfg.temperature,
                        )
                        grads = T.backward(loss, trainable)
                        summed = (
                            grads
                            if summed is None
                            else {k: summed[k] + g for k, g in grads.items()}
                        )
                    T.adam_step(state, summed)
            if (epoch + 1) % cfg.validate_every and epoch + 1 != cfg.max_epochs:
                epoch_seconds.append(time.perf_counter() - epoch_start)
                continue
            val = validation_loss(model, val_msgs, val_rsps, cfg.batch_size, cfg.temperature)
        except T.NonFiniteError as e:
            logger.error(f"Training diverged in epoch {epoch}: {e}")
            val = float("nan")
        epoch_seconds.append(time.perf_counter() - epoch_start)

        if not math.isfinite(val):
            diverged = True
            break
        losses.append(val)
        logger.info(f"{model.notation} epoch {epoch}: validation loss {val:.5f}")
        if val < best_loss:
            best_loss, best_epoch = val, len(losses) - 1
            wall_to_best = time.perf_counter() - start
            best_state = OrderedDict(
                (k, v.detach().clone()) for k, v in model.state_dict().items()
            )

    total_wall = time.perf_counter() - start
    model.invalidate_fingerprint()
    report = TrainReport(
        notation=model.notation,
        validation_losses=losses,
        best_epoch=best_epoch,
        wall_clock_to_best=wall_to_best,
        total_wall_clock=total_wall,
        epoch_seconds=epoch_seconds,
        total_params=total_params,
        trainable_params=trainable_params,
        diverged=diverged,
    )

    checkpoint = None
    if best_state is not None:
        model.load_state_dict(best_state)
        checkpoint = checkpoint_from_model(
            model, cfg.seed, epoch=best_epoch, validation_loss=best_loss, wall_clock_s=wall_to_best
        )
    if diverged:
        raise TrainingDivergedError(
            f"{model.notation} diverged after {len(losses)} validated epochs", report, checkpoint
        )
    logger.info(
        f"{model.notation}: best validation loss {best_loss:.5f} at epoch {best_epoch} "
        f"after {wall_to_best:.2f}s (total {total_wall:.2f}s)"
    )
    return checkpoint, report


# ==========================================
# MASKED-LM PRETRAINING
# ==========================================
def mask_tokens(
    ids: torch.Tensor,
    mask: torch.Tensor,
    vocab_size: int,
    generator: torch.Generator,
    mask_prob: float = 0.15,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Chooses ``mask_prob`` of the real (non-special) positions as prediction targets;
    of those 80% become [MASK], 10% a random piece and 10% stay unchanged.

    Returns:
    - tuple[Tensor, Tensor]: corrupted ids and labels (IGNORE_INDEX off-target).
    """
    candidates = mask & (ids != CLS_ID) & (ids != SEP_ID)
    selected = (torch.rand(ids.shape, generator=generator) < mask_prob) & candidates
    labels = torch.where(selected, ids, torch.full_like(ids, IGNORE_INDEX))
    roll = torch.rand(ids.shape, generator=generator)
    random_ids = torch.randint(
        len(RESERVED_TOKENS), vocab_size, ids.shape, generator=generator
    )
    corrupted = ids.clone()
    corrupted[selected & (roll < 0.8)] = MASK_ID
    replace = selected & (roll >= 0.8) & (roll < 0.9)
    corrupted[replace] = random_ids[replace]
    return corrupted, labels


def masked_lm_loss(
    encoder: Encoder, bias: torch.Tensor, batch: TokenBatch, labels: torch.Tensor
) -> torch.Tensor:
    """Cross-entropy of the tied-embedding MLM head over target positions."""
    hidden = encoder.hidden_states(batch)
    logits = T.add(T.matmul(hidden, T.transpose(encoder.emb.tok)), bias)
    targets = labels != IGNORE_INDEX
    log_probs = T.log_softmax(logits)[targets]
    picked = log_probs.gather(-1, labels[targets].unsqueeze(-1)).squeeze(-1)
    return T.scale(T.reduce_mean(picked), -1.0)


@torch.no_grad()
def evaluate_mlm(
    weights: EncoderWeights,
    texts: Sequence[str],
    vocab: Vocab,
    max_len: int = 32,
    seed: int = 0,
) -> float:
    """Held-out MLM loss of encoder weights with a zero output bias."""
    encoder = build_encoder(weights.config, FromWeights(weights))
    encoder.eval()
    batch = encode_texts(vocab, texts, max_len)
    ids, labels = mask_tokens(
        batch.ids, batch.mask, weights.config.vocab_size, torch.Generator().manual_seed(seed)
    )
    if not bool((labels != IGNORE_INDEX).any()):
        raise ValueError("Held-out texts produced no masked positions")
    bias = torch.zeros(weights.config.vocab_size)
    return float(masked_lm_loss(encoder, bias, TokenBatch(ids, batch.mask), labels))


def pretrain_mlm(
    config: EncoderConfig,
    corpus: Iterable[str],
    steps: int,
    seed: int = 0,
    *,
    vocab: Vocab,
    batch_size: int = 32,
    max_len: int = 32,
    schedule: Optional[T.LearningRateSchedule] = None,
) -> EncoderWeights:
    """
    Pretrains a randomly initialised encoder with masked-token prediction.

    Parameters:
    - config (EncoderConfig): encoder architecture.
    - corpus (Iterable[str]): pretraining texts.
    - steps (int): optimiser steps; 0 returns the random initialisation unchanged.
    - seed (int): drives initialisation, batch sampling and masking.
    - vocab (Vocab): tokenizer vocabulary.

    Returns:
    - EncoderWeights: weights usable as a ``FromWeights`` initialisation.
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    encoder = build_encoder(config, RandomInit(seed))
    if steps == 0:
        return EncoderWeights.from_encoder(encoder)
    texts = [t for t in corpus if t.strip()]
    if not texts:
        raise ValueError("Cannot pretrain on an empty corpus")
    if config.vocab_size < len(vocab):
        raise ValueError("config.vocab_size is smaller than the vocabulary")

    batch = encode_texts(vocab, texts, max_len, trim=False)
    bias = nn.Parameter(torch.zeros(config.vocab_size))
    params = OrderedDict(encoder.named_parameters())
    params["mlm.bias"] = bias
    state = T.AdamState(
        params,
        {name: False for name in params},
        schedule or T.LearningRateSchedule(base_lr=1e-3, warmup_steps=min(100, steps)),
    )
    generator = torch.Generator().manual_seed(seed)
    encoder.train()
    for step in range(steps):
        index = torch.randint(0, len(batch), (batch_size,), generator=generator)
        sample = trim(batch.select(index))
        ids, labels = mask_tokens(sample.ids, sample.mask, config.vocab_size, generator)
        if not bool((labels != IGNORE_INDEX).any()):
            continue
        loss = masked_lm_loss(encoder, bias, TokenBatch(ids, sample.mask), labels)
        T.adam_step(state, T.backward(loss, params))
        if step % 100 == 0:
            logger.debug(f"MLM step {step}: loss {float(loss):.4f}")
    logger.info(f"Pretrained {config.num_layers}-layer encoder for {steps} MLM steps")
    return EncoderWeights.from_encoder(encoder)
