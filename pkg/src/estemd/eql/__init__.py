"""EQL: a small streaming-SQL dialect compiled to engine topologies."""
from estemd.eql.analyzer import AnalyzedCreate, AnalyzedSelect, StreamInfo, analyze
from estemd.eql.lexer import Token, tokenize
from estemd.eql.parser import parse, parse_script, split_statements
from estemd.eql.planner import plan
from estemd.eql.printer import format_expr, format_statement
from estemd.eql.session import QueryEngine, QueryHandle, StatementResult

__all__ = [
    "AnalyzedCreate",
    "AnalyzedSelect",
    "QueryEngine",
    "QueryHandle",
    "StatementResult",
    "StreamInfo",
    "Token",
    "analyze",
    "format_expr",
    "format_statement",
    "parse",
    "parse_script",
    "plan",
    "split_statements",
    "tokenize",
]
