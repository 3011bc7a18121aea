"""
Wall-clock budgets and elapsed-time formatting.

A budget is bare seconds ("250", "2.5"), a number with a unit suffix
("500ms", "250s", "4m", "1h") or a timecode ("04:10", "00:04:10.5").
"""
from __future__ import annotations

import re


_UNIT_SECONDS = {"ms": 1e-3, "s": 1.0, "m": 60.0, "h": 3600.0}
_SUFFIXED = re.compile(r"(?P<number>\d+(?:\.\d*)?|\.\d+)\s*(?P<unit>ms|s|m|h)?")
_SECONDS = re.compile(r"\d+(?:\.\d+)?")


def format_elapsed(seconds: float | None) -> str:
    """Format a duration as HH:MM:SS.mmm; None and negative values read as zero."""
    total_ms = 0 if seconds is None else max(0, int(round(seconds * 1000.0)))
    hours, remainder = divmod(total_ms, 3_600_000)
    minutes, remainder = divmod(remainder, 60_000)
    whole, milliseconds = divmod(remainder, 1_000)
    return f"{hours:02d}:{minutes:02d}:{whole:02d}.{milliseconds:03d}"


def timecode_seconds(text: str) -> float:
    """
    Seconds in an MM:SS[.fff] or HH:MM:SS[.fff] timecode.

    Components above 59 are accepted and normalized, so "1:70.5" is 130.5 s.
    """
    parts = text.strip().split(":")
    if len(parts) not in (2, 3):
        raise ValueError("Unsupported timecode format.")
    names = ("hours", "minutes")[3 - len(parts):]
    total = 0
    for name, component in zip(names, parts[:-1]):
        if not component.isdigit():
            raise ValueError(f"Invalid {name} component.")
        total = total * 60 + int(component)
    if _SECONDS.fullmatch(parts[-1]) is None:
        raise ValueError("Invalid seconds component.")
    return total * 60 + float(parts[-1])


def parse_duration(value: str | int | float) -> float:
    """Parse a wall-clock budget into positive seconds."""
    if isinstance(value, (int, float)):
        seconds = float(value)
    else:
        text = str(value).strip().lower()
        if not text:
            raise ValueError("Duration is empty.")
        if ":" in text:
            seconds = timecode_seconds(text)
        else:
            match = _SUFFIXED.fullmatch(text)
            if match is None:
                raise ValueError(f"Invalid duration {text!r}.")
            seconds = float(match["number"]) * _UNIT_SECONDS[match["unit"] or "s"]
    if not seconds > 0:
        raise ValueError("Duration must be positive.")
    return seconds
