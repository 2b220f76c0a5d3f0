"""Key-value text config files.

One ``key = value`` per line; ``#`` starts a comment; blank lines ignored.
Values stay strings here and are typed by the consumer.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

from .errors import ArgumentError


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ArgumentError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ArgumentError(f"config line {lineno}: empty key")
        out[key] = value
    return out


def read_kv(path: str | Path) -> dict[str, str]:
    try:
        return parse_kv(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ArgumentError(f"config file not found: {path}") from exc


def dump_kv(d: dict) -> str:
    return "".join(f"{k} = {d[k]}\n" for k in sorted(d))


def config_hash(d: dict) -> str:
    return hashlib.sha256(dump_kv(d).encode()).hexdigest()[:16]
