"""The frozen Places8 category table."""

from __future__ import annotations

import re
from dataclasses import dataclass

from ..fingerprint import fingerprint

PLACES8_CLASSES = (
    "bathroom",
    "bedroom",
    "child's room",
    "classroom",
    "dressing room",
    "living room",
    "studio",
    "swimming pool",
)

# class -> original scene categories, in table order
PLACES8_SOURCES = {
    "bathroom": ("bathroom", "shower"),
    "bedroom": ("bedchamber", "bedroom", "hotel room", "berth", "dorm room", "youth hostel"),
    "child's room": ("child's room", "nursery", "playroom"),
    "classroom": ("classroom", "kindergarden classroom"),
    "dressing room": ("closet", "dressing room"),
    "living room": ("home theater", "living room", "recreation room", "television room", "waiting room"),
    "studio": ("television studio",),
    "swimming pool": ("jacuzzi", "swimming pool"),
}

_LETTER_PREFIX = re.compile(r"^[a-z]/")


def normalize_category(name: str) -> str:
    """Matching key for a scene category name.

    Lower-cases, maps ``_`` to spaces, drops apostrophes, a leading
    single-letter directory (``/b/bedroom``) and an ``/indoor`` qualifier.
    Other qualifiers (``/outdoor``) are kept, so such categories stay unmapped.
    """
    key = name.strip().lower().replace("_", " ").replace("'", "").strip("/")
    key = _LETTER_PREFIX.sub("", key)
    if key.endswith("/indoor"):
        key = key[: -len("/indoor")]
    return " ".join(key.split())


@dataclass(frozen=True)
class RemapTable:
    mapping: dict  # original category (display form) -> class name
    classes: tuple[str, ...]

    def __post_init__(self):
        keys = [normalize_category(k) for k in self.mapping]
        if len(set(keys)) != len(keys):
            raise ValueError("remap table has colliding category keys")
        stray = set(self.mapping.values()) - set(self.classes)
        if stray:
            raise ValueError(f"remap targets outside the class list: {sorted(stray)}")
        object.__setattr__(self, "_lookup", dict(zip(keys, self.mapping.values())))

    def lookup(self, category: str) -> str | None:
        return self._lookup.get(normalize_category(category))

    def __len__(self) -> int:
        return len(self.mapping)

    def sources_of(self, cls: str) -> list[str]:
        return [k for k, v in self.mapping.items() if v == cls]

    @property
    def fingerprint(self) -> str:
        return fingerprint({"mapping": self.mapping, "classes": list(self.classes)})


def build_remap_table() -> RemapTable:
    """23 original categories onto the 8 target classes."""
    mapping = {orig: cls for cls, origs in PLACES8_SOURCES.items() for orig in origs}
    return RemapTable(mapping=mapping, classes=PLACES8_CLASSES)
