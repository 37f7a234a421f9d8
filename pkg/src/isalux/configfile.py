"""Flat `key = value` configuration text (a small TOML subset).

Supported values: quoted strings, integers, floats, booleans, and arrays of
numbers. Comments start with '#'. Parsing a serialized config yields the
original values exactly (round-trip identity).
"""
from __future__ import annotations

import re

from .errors import DataError

_KEY_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")


def _parse_scalar(text: str, lineno: int):
    text = text.strip()
    if text.startswith('"') and text.endswith('"') and len(text) >= 2:
        return text[1:-1]
    if text == "true":
        return True
    if text == "false":
        return False
    if re.fullmatch(r"[+-]?\d+", text):
        return int(text)
    try:
        return float(text)
    except ValueError:
        raise DataError(f"line {lineno}: cannot parse value {text!r}") from None


def _strip_comment(line: str) -> str:
    out = []
    in_str = False
    for ch in line:
        if ch == '"':
            in_str = not in_str
        if ch == "#" and not in_str:
            break
        out.append(ch)
    return "".join(out)


def parse(text: str) -> dict:
    """Parse config text to an ordered {key: value} dict."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if not _KEY_RE.match(key):
            raise DataError(f"line {lineno}: invalid key {key!r}")
        if key in values:
            raise DataError(f"line {lineno}: duplicate key {key!r}")
        val = val.strip()
        if val.startswith("["):
            if not val.endswith("]"):
                raise DataError(f"line {lineno}: unterminated array")
            inner = val[1:-1].strip()
            items = [s.strip() for s in inner.split(",")] if inner else []
            values[key] = [_parse_scalar(s, lineno) for s in items if s]
        else:
            values[key] = _parse_scalar(val, lineno)
    return values


def _format_scalar(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize(values: dict) -> str:
    lines = []
    for key, v in values.items():
        if isinstance(v, (list, tuple)):
            body = ", ".join(_format_scalar(x) for x in v)
            lines.append(f"{key} = [{body}]")
        else:
            lines.append(f"{key} = {_format_scalar(v)}")
    return "\n".join(lines) + "\n"
