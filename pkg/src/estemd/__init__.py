"""Event-stream processing engine for environmental monitoring data."""
from estemd.broker import Broker, Consumer, TopicDescription
from estemd.model import ProducerRecord, Record, ScalarType, Schema, Field, Timestamp, TopicSpec

__version__ = "0.1.0"

__all__ = [
    "Broker",
    "Consumer",
    "Field",
    "ProducerRecord",
    "Record",
    "ScalarType",
    "Schema",
    "Timestamp",
    "TopicDescription",
    "TopicSpec",
]
