"""Helpers shared by the line-oriented text formats."""

from __future__ import annotations

import math

from .errors import FormatError


def fmt(x: float) -> str:
    """Format a float with 17 significant digits.

    17 digits uniquely identify an IEEE-754 double, so parsing the result
    recovers the original value exactly.
    """
    return format(float(x), ".16e")


def parse_float(token: str, line_no: int) -> float:
    try:
        value = float(token)
    except ValueError:
        raise FormatError(f"expected a number, got {token!r}", line=line_no) from None
    if not math.isfinite(value):
        raise FormatError(f"non-finite value {token!r} rejected", line=line_no)
    return value


def parse_int(token: str, line_no: int) -> int:
    try:
        return int(token)
    except ValueError:
        raise FormatError(f"expected an integer, got {token!r}", line=line_no) from None


class LineCursor:
    """Sequential reader over numbered lines.

    Blank lines are always skipped; '#' comment lines are skipped once
    `allow_comments` has been called (the formats only permit comments
    after their header line).
    """

    def __init__(self, text: str):
        self._lines = text.splitlines()
        self._pos = 0
        self._comments_ok = False

    def allow_comments(self) -> None:
        self._comments_ok = True

    def next(self, expect: str) -> tuple[int, str]:
        """Return (line_no, stripped_line) or raise FormatError at end of input."""
        while self._pos < len(self._lines):
            index = self._pos
            self._pos += 1
            line = self._lines[index].strip()
            if not line:
                continue
            if self._comments_ok and line.startswith("#"):
                continue
            return index + 1, line
        raise FormatError(f"unexpected end of input, expected {expect}",
                          line=len(self._lines) + 1)

    def expect_end(self) -> None:
        """Raise FormatError if any non-blank, non-comment content remains."""
        while self._pos < len(self._lines):
            index = self._pos
            self._pos += 1
            line = self._lines[index].strip()
            if not line:
                continue
            if self._comments_ok and line.startswith("#"):
                continue
            raise FormatError(f"unexpected extra content {line!r}", line=index + 1)
