"""Replicated zinc measurements (ppm) from the Meuse floodplain survey."""

from data.models import DuplicatePairs

ZINC_DUPLICATES = [
    (123, 123),
    (154, 165),
    (175, 165),
    (193, 213),
    (234, 252),
    (261, 274),
    (377, 441),
    (377, 380),
    (407, 454),
    (466, 502),
    (473, 547),
    (596, 682),
    (750, 823),
    (919, 1155),
    (1319, 1463),
    (1542, 1566),
    (1572, 1524),
    (1671, 1842),
]


def zinc_duplicates() -> DuplicatePairs:
    return DuplicatePairs(ZINC_DUPLICATES)
