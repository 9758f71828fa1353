"""Plain-text ``key = value`` manifests."""
from __future__ import annotations

import math
from pathlib import Path

from . import __version__


def format_value(v) -> str:
    if isinstance(v, bool) or v is None:
        return str(v)
    if isinstance(v, float):
        return f"{v:.16e}" if math.isfinite(v) else str(v)
    if isinstance(v, (list, tuple)):
        return ", ".join(format_value(x) for x in v)
    return str(v)


def write_manifest(path, entries: dict) -> None:
    """Write ``entries`` (flattened one level) followed by the code version."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, val in entries.items():
        if isinstance(val, dict):
            for sub, v in val.items():
                lines.append(f"{key}.{sub} = {format_value(v)}")
        else:
            lines.append(f"{key} = {format_value(val)}")
    if not any(line.startswith("code_version ") for line in lines):
        lines.append(f"code_version = {__version__}")
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out
