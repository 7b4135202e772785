"""Pure-Python versions of the compiled kernels.

Same API as ``_kernels``; used when the extension is not built or when
``EDGEKV_PURE_PYTHON=1`` is set.
"""

from __future__ import annotations

BACKEND = "python"

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data, seed: int = FNV_OFFSET) -> int:
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = seed
    for b in memoryview(data).cast("B"):
        h = ((h ^ b) * FNV_PRIME) & _MASK
    return h


class SeqSlot:
    __slots__ = ("v_a", "v_b", "_buf", "_len", "_meta")

    def __init__(self) -> None:
        self.v_a = 0
        self.v_b = 0
        self._buf = bytearray(0)
        self._len = 0
        self._meta = None

    def begin_write(self) -> None:
        self.v_a += 1

    def fill(self, payload, meta) -> None:
        n = len(payload)
        if n > len(self._buf):
            self._buf = bytearray(max(n, 2 * len(self._buf)))
        self._len = n
        self._meta = meta
        self._buf[:n] = payload

    def end_write(self) -> None:
        self.v_b = self.v_a

    def read_begin(self) -> int:
        return self.v_b

    def copy_out(self):
        buf, meta, n = self._buf, self._meta, self._len
        n = min(n, len(buf))
        return meta, bytes(memoryview(buf)[:n])

    def read_validate(self, seen_b: int) -> bool:
        return self.v_a == seen_b

    def guard(self) -> tuple[int, int]:
        return (self.v_a, self.v_b)

    @property
    def capacity(self) -> int:
        return len(self._buf)
