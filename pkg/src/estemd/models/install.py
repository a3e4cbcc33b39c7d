"""Case-study installer: topics and persistent queries for the monitoring models.

Works against anything offering ``list_topics``, ``create_topic``,
``stream_names`` and ``run_statement`` -- the in-process
:class:`~estemd.eql.QueryEngine` or a wire :class:`~estemd.wire.Client`.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources

from estemd.engine.operators import WindowSpec
from estemd.eql import ast
from estemd.eql.analyzer import analyze
from estemd.eql.parser import parse_script
from estemd.eql.printer import format_statement
from estemd.expr import Call, Literal
from estemd.model import ScalarType, canon

DEFAULT_WINDOW_MS = 5 * 60_000

# display names of the averaged topics, keyed by template file
AVERAGE_TOPICS = {
    "avg_temperature": "Avg_Temperature",
    "avg_humidity": "Avg_Humidity",
    "avg_soil_moisture": "Avg_SoilMoisture",
    "avg_atmos_pressure": "Avg_AtmosPressure",
}
DROUGHT_TOPICS = ("DEP", "EDI")


@dataclass(frozen=True)
class ModelTemplate:
    name: str
    text: str
    source: ast.CreateStream
    query: ast.CreateStream

    @property
    def source_topic(self) -> str:
        return self.source.prop("TOPIC", self.source.name)

    def statements(self) -> list[ast.CreateStream]:
        return [self.source, self.query]


def load_template(name: str) -> ModelTemplate:
    text = resources.files("estemd.models").joinpath("templates", f"{name}.eql").read_text()
    source, query = parse_script(text)
    return ModelTemplate(name, text, source, query)


def template_names() -> list[str]:
    return ["ep", *AVERAGE_TOPICS]


def check_template(template: ModelTemplate) -> None:
    """Analyse both statements against a catalog holding only the template's source."""
    created = analyze(template.source, {})
    analyze(template.query, {created.stream.name: created.stream})


def with_window(stmt: ast.CreateStream, window: WindowSpec) -> ast.CreateStream:
    return replace(stmt, query=replace(stmt.query, window=window))


def clamped(stmt: ast.CreateStream) -> ast.CreateStream:
    """Wrap every projected expression of the EP query in ``GREATEST(expr, 0.0)``."""
    items = tuple(
        replace(item, expr=Call("GREATEST", (item.expr, Literal(0.0, ScalarType.FLOAT))))
        for item in stmt.query.items
    )
    return replace(stmt, query=replace(stmt.query, items=items))


@dataclass
class InstallReport:
    created_topics: list = field(default_factory=list)
    created_streams: list = field(default_factory=list)
    query_ids: list = field(default_factory=list)
    existing: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "created_topics": self.created_topics,
            "created_streams": self.created_streams,
            "query_ids": self.query_ids,
            "existing": self.existing,
        }


def install_case_study(
    target,
    *,
    full: bool = False,
    window_ms: int = DEFAULT_WINDOW_MS,
    clamp: bool = False,
    drought_topics: bool = False,
) -> InstallReport:
    """Create the EP pipeline (and optionally the averaging models). Idempotent."""
    report = InstallReport()
    initial = {canon(t) for t in target.list_topics()}
    before = set(initial)
    streams = {canon(s) for s in target.stream_names()}

    def ensure_topic(name: str) -> None:
        if canon(name) in before:
            report.existing.append(name)
            return
        target.create_topic(name)
        before.add(canon(name))

    def run(stmt: ast.CreateStream) -> None:
        if canon(stmt.name) in streams:
            report.existing.append(stmt.name)
            return
        result = target.run_statement(format_statement(stmt))
        streams.add(canon(stmt.name))
        report.created_streams.append(stmt.name)
        if result.get("query_id"):
            report.query_ids.append(result["query_id"])

    ep = load_template("ep")
    run(ep.source)
    run(clamped(ep.query) if clamp else ep.query)
    if full:
        window = WindowSpec.tumbling(window_ms)
        for name, topic in AVERAGE_TOPICS.items():
            ensure_topic(topic)
            tpl = load_template(name)
            run(tpl.source)
            run(with_window(tpl.query, window))
    if drought_topics:
        for name in DROUGHT_TOPICS:
            ensure_topic(name)
    report.created_topics = [t for t in target.list_topics() if canon(t) not in initial]
    return report
