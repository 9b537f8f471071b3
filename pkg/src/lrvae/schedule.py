"""Layered dropout: monotone per-node preserve rates over the latent code.

Index 0 is the "top" of the latent (emotion end) and the last index is the
"bottom" (identity end).  The emotion task uses a decreasing schedule, the
identity task an increasing one, so each task's information is pushed toward
the nodes it is least likely to lose.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .autodiff import Tensor, as_tensor
from .errors import DimensionError, ValidationError

DEFAULT_P_MAX = 0.95
DEFAULT_P_MIN = 0.05


class Direction(str, Enum):
    DECREASING = "decreasing"
    INCREASING = "increasing"


class Form(str, Enum):
    LINEAR = "linear"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class PreserveRateSchedule:
    rates: np.ndarray
    direction: Direction
    form: Form
    p_max: float
    p_min: float

    def __post_init__(self):
        rates = np.asarray(self.rates, dtype=np.float64)
        rates.setflags(write=False)
        object.__setattr__(self, "rates", rates)

    def __len__(self) -> int:
        return int(self.rates.shape[0])

    def to_dict(self) -> dict:
        return {
            "size": len(self),
            "p_max": self.p_max,
            "p_min": self.p_min,
            "direction": self.direction.value,
            "form": self.form.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreserveRateSchedule":
        return build_schedule(d["size"], d["p_max"], d["p_min"], d["direction"], d["form"])


@dataclass(frozen=True)
class DropoutMask:
    bits: np.ndarray
    stream: str = ""


def build_schedule(
    size: int,
    p_max: float = DEFAULT_P_MAX,
    p_min: float = DEFAULT_P_MIN,
    direction: Direction | str = Direction.DECREASING,
    form: Form | str = Form.LINEAR,
) -> PreserveRateSchedule:
    """Build a monotone preserve-rate vector of length ``size``.

    Linear form interpolates evenly from ``p_max`` to ``p_min``; the
    exponential form interpolates geometrically.  Both endpoints are exact.
    Increasing schedules are the mirror image of decreasing ones.
    """
    direction = Direction(direction)
    form = Form(form)
    if int(size) != size or size < 2:
        raise ValidationError(f"schedule size must be an integer >= 2, got {size}")
    if not (0.0 <= p_min <= p_max <= 1.0):
        raise ValidationError(f"need 0 <= p_min <= p_max <= 1, got p_min={p_min}, p_max={p_max}")
    size = int(size)
    t = np.arange(size, dtype=np.float64) / (size - 1)
    if form is Form.LINEAR or p_min == p_max:
        rates = p_max - (p_max - p_min) * t
    elif p_min == 0.0:
        # geometric interpolation to an exact zero is undefined; decay to the
        # smallest positive float and pin the endpoint
        rates = p_max * (np.finfo(np.float64).tiny / p_max) ** t
    else:
        rates = p_max * (p_min / p_max) ** t
    rates[0], rates[-1] = p_max, p_min
    # float rounding must not break monotonicity
    rates = np.minimum.accumulate(np.clip(rates, p_min, p_max))
    if direction is Direction.INCREASING:
        rates = rates[::-1].copy()
    return PreserveRateSchedule(rates, direction, form, float(p_max), float(p_min))


def _check_width(x: np.ndarray, schedule: PreserveRateSchedule) -> None:
    if x.ndim != 2 or x.shape[1] != len(schedule):
        raise DimensionError(f"input shape {x.shape} does not match schedule length {len(schedule)}")


def sample_mask(shape: tuple[int, int], schedule: PreserveRateSchedule, rng: np.random.Generator) -> np.ndarray:
    """Independent Bernoulli(p_i) draws, one per (sample, node)."""
    return (rng.random(shape) < schedule.rates).astype(np.float64)


def apply_dropout_train(
    x: Tensor, schedule: PreserveRateSchedule, rng: np.random.Generator
) -> tuple[Tensor, DropoutMask]:
    x = as_tensor(x)
    _check_width(x.data, schedule)
    bits = sample_mask(x.shape, schedule, rng)
    return x * bits, DropoutMask(bits, stream=schedule.direction.value)


def apply_dropout_eval(x, schedule: PreserveRateSchedule):
    """Deterministic expectation of the train-mode output: ``x * p``.

    Scaling activations is equivalent to scaling the rows of the next
    layer's weights by ``p``.
    """
    if isinstance(x, Tensor):
        _check_width(x.data, schedule)
        return x * schedule.rates
    arr = np.asarray(x, dtype=np.float64)
    _check_width(arr, schedule)
    return arr * schedule.rates
