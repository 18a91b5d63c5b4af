from typing import Any, Iterable, List, Optional, Sequence
import json
import math

import numpy as np
from colorama import Fore, Style

TABLE_DIGITS = 10
JSON_DIGITS = 17


def format_number(value: Any, digits: int = TABLE_DIGITS) -> str:
    """Render a number for human tables.

    Parameters:
    - value: int, float, numpy scalar or None
    - digits: significant digits for floats (integers are printed exactly)

    Non-finite values render as ``inf``, ``-inf`` or ``nan``; None renders as ``-``.
    """
    if value is None:
        return "-"
    if isinstance(value, (bool, np.bool_)):
        return "yes" if value else "no"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        x = float(value)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return f"{x:.{digits}g}"
    return str(value)


def to_jsonable(obj: Any) -> Any:
    """Convert numpy values to plain Python for ``dumps_json``.

    Infinite values become the strings ``"inf"``/``"-inf"`` and NaN becomes
    null, so the output is strict JSON.
    """
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def render_table(headers: Sequence[str], rows: Iterable[Sequence[Any]], color: bool = False) -> str:
    cells: List[List[str]] = [[format_number(c) for c in row] for row in rows]
    widths = [len(h) for h in headers]
    for row in cells:
        for idx, cell in enumerate(row):
            widths[idx] = max(widths[idx], len(cell))
    if color:
        header = "  ".join(Fore.CYAN + Style.BRIGHT + h.ljust(widths[i]) + Style.RESET_ALL for i, h in enumerate(headers))
    else:
        header = "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))
    lines = [header.rstrip(), "  ".join("-" * w for w in widths)]
    for row in cells:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
    return "\n".join(lines) + "\n"


def dumps_json(obj: Any, indent: Optional[int] = None) -> str:
    """``json.dumps`` layout with every float written to JSON_DIGITS significant digits."""
    return _encode(to_jsonable(obj), indent, 0)


def _encode(obj: Any, indent: Optional[int], level: int) -> str:
    if isinstance(obj, float):
        return format(obj, f".{JSON_DIGITS}g")
    if isinstance(obj, dict):
        parts = [json.dumps(k) + ": " + _encode(v, indent, level + 1) for k, v in obj.items()]
        return _wrap("{", "}", parts, indent, level)
    if isinstance(obj, list):
        return _wrap("[", "]", [_encode(v, indent, level + 1) for v in obj], indent, level)
    return json.dumps(obj)


def _wrap(open_: str, close: str, parts: List[str], indent: Optional[int], level: int) -> str:
    if not parts:
        return open_ + close
    if indent is None:
        return open_ + ", ".join(parts) + close
    pad = " " * indent
    inner = ",\n".join(pad * (level + 1) + p for p in parts)
    return f"{open_}\n{inner}\n{pad * level}{close}"
