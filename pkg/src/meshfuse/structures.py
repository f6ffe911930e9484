"""Canonical identifiers for the 15 subcortical structures."""

from __future__ import annotations

# Brain stem first, then left/right pairs in fixed anatomical order.
STRUCTURES: tuple[str, ...] = (
    "brainstem",
    "thalamus_l",
    "thalamus_r",
    "caudate_l",
    "caudate_r",
    "putamen_l",
    "putamen_r",
    "pallidum_l",
    "pallidum_r",
    "hippocampus_l",
    "hippocampus_r",
    "amygdala_l",
    "amygdala_r",
    "accumbens_l",
    "accumbens_r",
)

STRUCTURE_INDEX = {name: i for i, name in enumerate(STRUCTURES)}

NUM_STRUCTURES = len(STRUCTURES)


def validate_structure(name: str) -> str:
    if name not in STRUCTURE_INDEX:
        raise ValueError(f"unknown structure id {name!r}; expected one of {STRUCTURES}")
    return name
