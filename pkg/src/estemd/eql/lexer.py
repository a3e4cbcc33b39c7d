"""Tokenizer for EQL. Keywords and identifiers are case-insensitive."""
from __future__ import annotations

from dataclasses import dataclass

from estemd.errors import EqlSyntaxError

KEYWORDS = frozenset(
    """
    SELECT FROM WHERE CREATE STREAM AS WITH WINDOW TUMBLING HOPPING SIZE ADVANCE BY
    GROUP EMIT CHANGES ABSENCE LIMIT SHOW TERMINATE AND OR NOT TRUE FALSE NULL
    SECONDS MINUTES HOURS
    """.split()
)

KEYWORD = "keyword"
IDENT = "identifier"
INTEGER = "integer"
FLOAT = "float"
STRING = "text"
OPERATOR = "operator"
PUNCT = "punctuation"
EOF = "eof"

_TWO_CHAR_OPS = ("<=", ">=", "!=", "<>")
_ONE_CHAR_OPS = "+-*/=<>"
_PUNCT = "(),;"


class LexError(EqlSyntaxError):
    code = "lex_error"


@dataclass(frozen=True)
class Token:
    kind: str
    text: str  # canonical: upper case for keywords/identifiers, unescaped for strings
    start: int  # byte offsets into the UTF-8 input
    end: int

    def __repr__(self) -> str:
        return f"{self.kind}:{self.text}"


def _is_ident_start(c: str) -> bool:
    return c == "_" or ("a" <= c <= "z") or ("A" <= c <= "Z")


def _is_ident_char(c: str) -> bool:
    return _is_ident_start(c) or ("0" <= c <= "9")


def tokenize(text: str) -> list[Token]:
    """Split ``text`` into tokens, skipping whitespace and ``--`` comments."""
    tokens: list[Token] = []
    i = 0
    n = len(text)
    # byte offset of text[i]; advanced alongside i
    b = 0

    def blen(s: str) -> int:
        return len(s.encode("utf-8", "surrogatepass"))

    while i < n:
        c = text[i]
        if c in " \t\r\n\f\v":
            i += 1
            b += 1
            continue
        if c == "-" and text.startswith("--", i):
            j = text.find("\n", i)
            j = n if j < 0 else j
            b += blen(text[i:j])
            i = j
            continue
        start_b = b
        if _is_ident_start(c):
            j = i + 1
            while j < n and _is_ident_char(text[j]):
                j += 1
            word = text[i:j].upper()
            tokens.append(Token(KEYWORD if word in KEYWORDS else IDENT, word, start_b, start_b + (j - i)))
            b += j - i
            i = j
            continue
        if c.isascii() and (c.isdigit() or (c == "." and i + 1 < n and text[i + 1].isascii() and text[i + 1].isdigit())):
            j = i
            while j < n and text[j].isascii() and text[j].isdigit():
                j += 1
            kind = INTEGER
            if j < n and text[j] == ".":
                kind = FLOAT
                j += 1
                while j < n and text[j].isascii() and text[j].isdigit():
                    j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isascii() and text[k].isdigit():
                    while k < n and text[k].isascii() and text[k].isdigit():
                        k += 1
                    kind = FLOAT
                    j = k
            if j < n and _is_ident_start(text[j]):
                raise LexError(f"malformed number {text[i:j + 1]!r}", start_b)
            tokens.append(Token(kind, text[i:j], start_b, start_b + (j - i)))
            b += j - i
            i = j
            continue
        if c == "'":
            j = i + 1
            parts = []
            while True:
                k = text.find("'", j)
                if k < 0:
                    raise LexError("unterminated text literal", start_b)
                parts.append(text[j:k])
                if k + 1 < n and text[k + 1] == "'":
                    parts.append("'")
                    j = k + 2
                    continue
                j = k + 1
                break
            width = blen(text[i:j])
            tokens.append(Token(STRING, "".join(parts), start_b, start_b + width))
            b += width
            i = j
            continue
        two = text[i : i + 2]
        if two in _TWO_CHAR_OPS:
            tokens.append(Token(OPERATOR, "!=" if two == "<>" else two, start_b, start_b + 2))
            i += 2
            b += 2
            continue
        if c in _ONE_CHAR_OPS:
            tokens.append(Token(OPERATOR, c, start_b, start_b + 1))
            i += 1
            b += 1
            continue
        if c in _PUNCT:
            tokens.append(Token(PUNCT, c, start_b, start_b + 1))
            i += 1
            b += 1
            continue
        raise LexError(f"illegal character {c!r}", start_b)
    return tokens
