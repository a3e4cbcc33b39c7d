"""File and generator connectors with single-message transforms."""
from estemd.connect.config import ConnectConfig, SinkConfig, SourceConfig, load_config
from estemd.connect.generator import RAIN_SCHEMA, Lcg, RainParams, generate_rain, iter_rain, write_rain_file
from estemd.connect.parsers import coerce_cell, parse_csv_line, parse_header, parse_jsonl_line
from estemd.connect.sink import SinkConnector, csv_line, jsonl_line, run_sink, truncate_torn_tail
from estemd.connect.source import SourceConnector, dlq_topic, run_source
from estemd.connect.transforms import TransformSpec, apply_transforms, cast_value

__all__ = [
    "ConnectConfig",
    "Lcg",
    "RAIN_SCHEMA",
    "RainParams",
    "SinkConfig",
    "SinkConnector",
    "SourceConfig",
    "SourceConnector",
    "TransformSpec",
    "apply_transforms",
    "cast_value",
    "coerce_cell",
    "csv_line",
    "dlq_topic",
    "generate_rain",
    "iter_rain",
    "jsonl_line",
    "load_config",
    "parse_csv_line",
    "parse_header",
    "parse_jsonl_line",
    "run_sink",
    "run_source",
    "truncate_torn_tail",
    "write_rain_file",
]
