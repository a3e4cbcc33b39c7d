"""Statement nodes. Expressions are the shared nodes from :mod:`estemd.expr`."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional, Union

from estemd.engine.operators import WindowSpec
from estemd.expr import Expr
from estemd.model import ScalarType


@dataclass(frozen=True)
class Star:
    pass


@dataclass(frozen=True)
class SelectItem:
    expr: Union[Expr, Star]
    alias: Optional[str] = None


@dataclass(frozen=True)
class Select:
    items: tuple
    source: str
    where: Optional[Expr] = None
    window: Optional[WindowSpec] = None
    group_by: tuple = ()
    emit: Optional[str] = None  # "CHANGES" | "ABSENCE" | None
    limit: Optional[int] = None


@dataclass(frozen=True)
class ColumnDef:
    name: str
    type: ScalarType
    not_null: bool = False


@dataclass(frozen=True)
class CreateStream:
    name: str
    columns: tuple = ()
    properties: tuple = ()  # of (NAME, python value)
    query: Optional[Select] = None

    def prop(self, name: str, default: Any = None) -> Any:
        for k, v in self.properties:
            if k == name.upper():
                return v
        return default


@dataclass(frozen=True)
class ShowTopics:
    pass


@dataclass(frozen=True)
class ShowStreams:
    pass


@dataclass(frozen=True)
class ShowQueries:
    pass


@dataclass(frozen=True)
class Terminate:
    query_id: str


Statement = Union[CreateStream, Select, ShowTopics, ShowStreams, ShowQueries, Terminate]
