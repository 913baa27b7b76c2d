"""64-bit message tags.

Layout, most significant first: kind (4 bits), epoch mod 4096 (12 bits), then
three 16-bit fields whose meaning depends on the kind.
"""

from __future__ import annotations

import enum

FIELD = 0xFFFF
EPOCH_MASK = 0xFFF


class TagKind(enum.IntEnum):
    P2P = 1
    COLL = 2
    STATE = 3
    DATA = 4
    CTRL = 5


def pack_tag(kind: int, epoch: int, x: int = 0, y: int = 0, z: int = 0) -> int:
    for v in (x, y, z):
        if not 0 <= v <= FIELD:
            raise ValueError(f"tag field {v} does not fit in 16 bits")
    return (int(kind) << 60) | ((epoch & EPOCH_MASK) << 48) | (x << 32) | (y << 16) | z


def unpack_tag(tag: int) -> tuple[TagKind, int, int, int, int]:
    return (TagKind(tag >> 60), (tag >> 48) & EPOCH_MASK,
            (tag >> 32) & FIELD, (tag >> 16) & FIELD, tag & FIELD)
