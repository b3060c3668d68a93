"""Structural marker tokens of the note-context grammar.

Markers are segment values, not substrings: downstream code treats them as
atomic symbols with their own reserved vocabulary ids, so note text that
happens to contain "<M>" or "|" can never forge structure.
"""

from __future__ import annotations

import enum


class Marker(enum.Enum):
    """The eight structural markers of the serialized note-context."""

    HINT = "H"
    NOTE_TYPE = "T"
    GENDER = "G"
    AGE = "A"
    MEDS = "M"
    LABS = "L"
    NOTE = "N"
    DELIM = "|"

    @property
    def printed(self) -> str:
        """Canonical debug rendering: <H>, <T>, ... and bare | for DELIM."""
        if self is Marker.DELIM:
            return "|"
        return f"<{self.value}>"


# Fixed order used for reserved-id assignment and the vocab file format.
MARKER_ORDER: tuple[Marker, ...] = (
    Marker.HINT,
    Marker.NOTE_TYPE,
    Marker.GENDER,
    Marker.AGE,
    Marker.MEDS,
    Marker.LABS,
    Marker.NOTE,
    Marker.DELIM,
)
