"""Stable hashing used to fan one pipeline seed out to per-image RNG streams."""

from __future__ import annotations

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(text: str) -> int:
    """64-bit FNV-1a of the UTF-8 encoding of *text*."""
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def per_image_seed(base_seed: int, image_id: str) -> int:
    """Per-image RNG seed: base XOR FNV-1a(image_id), independent of scheduling."""
    return (int(base_seed) ^ fnv1a64(image_id)) & _MASK64
