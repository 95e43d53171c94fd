"""Identified 3D landmark points used for registration evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple


class Landmark(NamedTuple):
    """One labeled point in continuous 0-based voxel coordinates."""

    id: str
    x: float
    y: float
    z: float


@dataclass(frozen=True)
class LandmarkSet:
    """An ordered set of labeled points with unique ids."""

    entries: tuple[Landmark, ...]

    def __post_init__(self) -> None:
        entries = tuple(
            Landmark(str(e[0]), float(e[1]), float(e[2]), float(e[3]))
            for e in self.entries
        )
        seen: set[str] = set()
        for e in entries:
            if e.id in seen:
                raise ValueError(f"duplicate landmark id {e.id!r}")
            seen.add(e.id)
            if not all(math.isfinite(c) for c in (e.x, e.y, e.z)):
                raise ValueError(f"non-finite coordinate in landmark {e.id!r}")
        object.__setattr__(self, "entries", entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def ids(self) -> set[str]:
        return {e.id for e in self.entries}

    def by_id(self) -> dict[str, Landmark]:
        return {e.id: e for e in self.entries}

    @classmethod
    def from_rows(cls, rows: Iterable[tuple]) -> "LandmarkSet":
        return cls(tuple(Landmark(str(r[0]), float(r[1]), float(r[2]), float(r[3])) for r in rows))
