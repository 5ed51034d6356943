"""Flat key=value text files used for configs and run manifests.

One `key=value` pair per line, `#` starts a comment, keys are written in
insertion order so outputs are byte-stable for fixed inputs.
"""

from __future__ import annotations

from .errors import TensorFormatError


def write_kv(path, items: dict) -> None:
    lines = [f"{k}={v}\n" for k, v in items.items()]
    with open(path, "w", encoding="ascii") as f:
        f.writelines(lines)


def format_kv(items: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in items.items())


def read_kv(path) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if "=" not in text:
                raise TensorFormatError(f"{path}:{lineno}: expected key=value, got {text!r}")
            key, value = text.split("=", 1)
            out[key.strip()] = value.strip()
    return out
