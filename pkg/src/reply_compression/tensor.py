"""
Checked tensor numerics on top of torch.

Every encoder and loss computation in the package goes through the primitives defined
here, so shape errors name the primitive that failed and non-finite activations stop a
run at the first operation that produced them. The module also owns the precision
modes, the warmup/decay learning-rate schedule and the freeze-aware Adam step.
"""

import contextlib
import enum
import logging
import math
import random
from dataclasses import dataclass, field
from typing import Dict, Iterator, Mapping, Optional, Sequence

import numpy as np
import torch

logger = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    """Raised when a primitive produces NaN or Inf values."""


class Precision(str, enum.Enum):
    TEST64 = "test64"
    FAST32 = "fast32"

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self is Precision.TEST64 else torch.float32


_CHECK_FINITE = True


def set_precision(precision) -> Precision:
    """
    Switches the default floating dtype used for new parameters and activations.

    Parameters:
    - precision (Precision | str): "test64" or "fast32".

    Returns:
    - Precision: the precision now in force.
    """
    precision = Precision(precision)
    torch.set_default_dtype(precision.dtype)
    logger.debug(f"Default precision set to {precision.value}")
    return precision


def current_precision() -> Precision:
    if torch.get_default_dtype() == torch.float64:
        return Precision.TEST64
    return Precision.FAST32


@contextlib.contextmanager
def use_precision(precision) -> Iterator[Precision]:
    previous = current_precision()
    try:
        yield set_precision(precision)
    finally:
        set_precision(previous)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    """Temporarily enables or disables the NaN/Inf guard on primitive outputs."""
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = previous


def _finite(name: str, out: torch.Tensor) -> torch.Tensor:
    if _CHECK_FINITE and out.is_floating_point() and not bool(torch.isfinite(out).all()):
        raise NonFiniteError(f"{name}: produced non-finite values (shape {tuple(out.shape)})")
    return out


def _shape_error(name: str, *tensors: torch.Tensor) -> ValueError:
    shapes = ", ".join(str(tuple(t.shape)) for t in tensors)
    return ValueError(f"{name}: operand shapes do not conform: {shapes}")


# ==========================================
# PRIMITIVES
# ==========================================
def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise _shape_error("matmul", a, b)
    try:
        out = torch.matmul(a, b)
    except RuntimeError as e:
        raise _shape_error("matmul", a, b) from e
    return _finite("matmul", out)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as e:
        raise _shape_error("add", a, b) from e
    return _finite("add", a + b)


def scale(a: torch.Tensor, factor: float) -> torch.Tensor:
    return _finite("scale", a * factor)


def transpose(a: torch.Tensor, dim0: int = -2, dim1: int = -1) -> torch.Tensor:
    if a.dim() < 2:
        raise _shape_error("transpose", a)
    return a.transpose(dim0, dim1)


def softmax(a: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis."""
    if a.dim() < 1 or a.shape[-1] == 0:
        raise _shape_error("softmax", a)
    return _finite("softmax", torch.softmax(a, dim=-1))


def log_softmax(a: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or a.shape[-1] == 0:
        raise _shape_error("log_softmax", a)
    return _finite("log_softmax", torch.log_softmax(a, dim=-1))


def layer_norm(
    x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-12
) -> torch.Tensor:
    """Normalises the last axis with the population variance, then applies gain and bias."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise _shape_error("layer_norm", x, gain, bias)
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    out = centered / torch.sqrt(var + eps) * gain + bias
    return _finite("layer_norm", out)


def gelu(x: torch.Tensor) -> torch.Tensor:
    # exact erf form, as in BERT
    return _finite("gelu", 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0))))


def embedding(ids: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    if table.dim() != 2 or ids.dtype not in (torch.int32, torch.int64):
        raise _shape_error("embedding", ids, table)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ValueError(
            f"embedding: ids out of range for table with {table.shape[0]} rows"
        )
    return _finite("embedding", table[ids])


def concat(tensors: Sequence[torch.Tensor], dim: int = 0) -> torch.Tensor:
    if not tensors:
        raise ValueError("concat: no operands")
    try:
        out = torch.cat(list(tensors), dim=dim)
    except RuntimeError as e:
        raise _shape_error("concat", *tensors) from e
    return _finite("concat", out)


def masked_fill(x: torch.Tensor, mask: torch.Tensor, value: float) -> torch.Tensor:
    """Fills positions where ``mask`` is true. ``value`` may be -inf for attention masking."""
    try:
        torch.broadcast_shapes(x.shape, mask.shape)
    except RuntimeError as e:
        raise _shape_error("masked_fill", x, mask) from e
    return x.masked_fill(mask, value)


def reduce_mean(x: torch.Tensor, dim: Optional[int] = None) -> torch.Tensor:
    if x.numel() == 0:
        raise _shape_error("reduce_mean", x)
    out = x.mean() if dim is None else x.mean(dim=dim)
    return _finite("reduce_mean", out)


def log(x: torch.Tensor) -> torch.Tensor:
    return _finite("log", torch.log(x))


def exp(x: torch.Tensor) -> torch.Tensor:
    return _finite("exp", torch.exp(x))


# ==========================================
# BACKWARD
# ==========================================
def backward(
    loss: torch.Tensor, params: Mapping[str, torch.Tensor]
) -> Dict[str, torch.Tensor]:
    """
    Runs reverse-mode differentiation from a scalar loss.

    Parameters:
    - loss (torch.Tensor): scalar loss attached to the autograd graph.
    - params (Mapping[str, torch.Tensor]): named parameters to differentiate against.

    Returns:
    - dict[str, torch.Tensor]: gradient per parameter; parameters the loss does not
      depend on get an exact zero gradient. The graph is released afterwards.
    """
    if loss.dim() != 0 and loss.numel() != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    names = [n for n, p in params.items() if p.requires_grad]
    if not loss.requires_grad or not names:
        return {n: torch.zeros_like(p) for n, p in params.items()}

    grads = torch.autograd.grad(
        loss.reshape(()), [params[n] for n in names], allow_unused=True
    )
    result = {n: torch.zeros_like(p) for n, p in params.items()}
    for name, grad in zip(names, grads):
        if grad is not None:
            result[name] = grad
    return result


# ==========================================
# OPTIMISATION
# ==========================================
@dataclass(frozen=True)
class LearningRateSchedule:
    """Linear warmup to ``base_lr`` followed by per-step exponential decay."""

    base_lr: float = 3e-4
    warmup_steps: int = 200
    decay: float = 0.9995

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.warmup_steps < 0:
            raise ValueError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")

    def lr_at(self, step: int) -> float:
        if step < 0:
            raise ValueError(f"step must be >= 0, got {step}")
        if step < self.warmup_steps:
            return self.base_lr * (step / self.warmup_steps)
        return self.base_lr * self.decay ** (step - self.warmup_steps)


def lr_at(schedule: LearningRateSchedule, step: int) -> float:
    return schedule.lr_at(step)


@dataclass
class AdamState:
    """
    Adam moments for the trainable subset of a parameter set.

    Moment buffers live inside a ``torch.optim.Adam`` built over trainable tensors only,
    so a frozen tensor never gets ``exp_avg``/``exp_avg_sq`` state.
    """

    params: Dict[str, torch.nn.Parameter]
    freeze_mask: Dict[str, bool]
    schedule: LearningRateSchedule = field(default_factory=LearningRateSchedule)
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    t: int = 0
    optimizer: Optional[torch.optim.Adam] = None

    def __post_init__(self):
        missing = set(self.params) - set(self.freeze_mask)
        if missing:
            raise ValueError(f"freeze_mask has no entry for: {sorted(missing)}")
        trainable = self.trainable_names()
        if trainable and self.optimizer is None:
            self.optimizer = torch.optim.Adam(
                [self.params[n] for n in trainable],
                lr=self.schedule.base_lr,
                betas=self.betas,
                eps=self.eps,
            )

    def trainable_names(self):
        return [n for n in self.params if not self.freeze_mask[n]]

    def moments(self, name: str):
        """Returns (m, v) for a parameter, or None when nothing was ever allocated."""
        if self.optimizer is None:
            return None
        state = self.optimizer.state.get(self.params[name])
        if not state:
            return None
        return state["exp_avg"], state["exp_avg_sq"]


def adam_step(
    state: AdamState,
    grads: Mapping[str, torch.Tensor],
) -> Dict[str, torch.nn.Parameter]:
    """
    Applies one bias-corrected Adam update to the trainable parameters.

    Parameters:
    - state (AdamState): optimiser state holding params, freeze mask and schedule.
    - grads (Mapping[str, torch.Tensor]): gradient per parameter name; entries for frozen
      parameters are ignored.

    Returns:
    - dict[str, torch.nn.Parameter]: the (updated in place) parameters.
    """
    trainable = state.trainable_names()
    for name in trainable:
        grad = grads.get(name)
        if grad is None:
            raise ValueError(f"adam_step: missing gradient for trainable '{name}'")
        if grad.shape != state.params[name].shape:
            raise _shape_error(f"adam_step[{name}]", state.params[name], grad)
        if not bool(torch.isfinite(grad).all()):
            raise NonFiniteError(f"adam_step: non-finite gradient for '{name}'")

    state.t += 1
    if state.optimizer is None:
        return state.params

    lr = state.schedule.lr_at(state.t)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    for name in trainable:
        state.params[name].grad = grads[name].detach().to(state.params[name].dtype)
    state.optimizer.step()
    for name in trainable:
        state.params[name].grad = None
    return state.params
