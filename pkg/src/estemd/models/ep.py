"""Effective precipitation: the share of rainfall retained by the soil."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Union

from estemd.errors import NoDataError
from estemd.model import Record


@dataclass(frozen=True)
class EpModel:
    threshold_mm: float = 5.0
    coefficient: float = 0.75

    def __call__(self, rain_mm: float) -> float:
        return (rain_mm - self.threshold_mm) * self.coefficient


EP_MODEL = EpModel()


def effective_precipitation(rain_mm: float) -> float:
    """``(rain_mm - 5) * 0.75`` in millimetres. Not clamped at zero."""
    return (rain_mm - EP_MODEL.threshold_mm) * EP_MODEL.coefficient


def mean_of_outputs(records: Iterable[Union[Record, Mapping, float]]) -> float:
    """Arithmetic mean of the VALUE field over EP records (or bare numbers)."""
    total = 0.0
    n = 0
    for r in records:
        if isinstance(r, Record):
            v = r.value["VALUE"]
        elif isinstance(r, Mapping):
            v = r.get("VALUE", r.get("value"))
        else:
            v = r
        total += v
        n += 1
    if n == 0:
        raise NoDataError("no EP records to average")
    return total / n
