# cython: language_level=3
"""Compiled hot kernels: FNV-1a hashing and the seqlock slot.

Both release the GIL around the byte loops so that a writer and any number of
readers really do overlap in time; the version guard is what keeps readers
honest, not the interpreter lock.
"""

from libc.stdint cimport uint64_t, uint8_t
from libc.string cimport memcpy
from cpython.bytes cimport PyBytes_FromStringAndSize, PyBytes_AS_STRING

cdef uint64_t FNV_OFFSET = 0xcbf29ce484222325ULL
cdef uint64_t FNV_PRIME = 0x100000001b3ULL

BACKEND = "cython"


cdef inline uint64_t _fnv(const uint8_t* p, Py_ssize_t n, uint64_t h) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n):
        h = (h ^ p[i]) * FNV_PRIME
    return h


def fnv1a64(data, uint64_t seed=FNV_OFFSET):
    """64-bit FNV-1a of any contiguous buffer, continuing from ``seed``."""
    cdef const uint8_t[::1] view
    cdef Py_ssize_t n
    cdef uint64_t h = seed
    if isinstance(data, str):
        data = (<str>data).encode("utf-8")
    view = data
    n = view.shape[0]
    if n == 0:
        return h
    if n < 4096:
        h = _fnv(&view[0], n, h)
    else:
        with nogil:
            h = _fnv(&view[0], n, h)
    return h


cdef class SeqSlot:
    """One key's storage cell guarded by the (v_a, v_b) version pair.

    Counter updates happen with the GIL held, which gives the release/acquire
    ordering the protocol needs; only the byte copies run without it.
    """

    cdef public uint64_t v_a
    cdef public uint64_t v_b
    cdef object _buf
    cdef Py_ssize_t _len
    cdef object _meta

    def __cinit__(self):
        self.v_a = 0
        self.v_b = 0
        self._buf = bytearray(0)
        self._len = 0
        self._meta = None

    def begin_write(self):
        self.v_a += 1

    def fill(self, payload, meta):
        cdef const uint8_t[::1] src = payload
        cdef Py_ssize_t n = src.shape[0]
        cdef unsigned char[::1] dst
        if n > len(self._buf):
            # never resize in place: a reader may still hold the old buffer
            self._buf = bytearray(max(n, 2 * len(self._buf)))
        self._len = n
        self._meta = meta
        if n == 0:
            return
        dst = self._buf
        with nogil:
            memcpy(&dst[0], &src[0], n)

    def end_write(self):
        self.v_b = self.v_a

    def read_begin(self):
        return self.v_b

    def copy_out(self):
        """Snapshot (meta, payload bytes); may be torn, caller validates."""
        cdef object buf = self._buf
        cdef object meta = self._meta
        cdef Py_ssize_t n = self._len
        cdef unsigned char[::1] src = buf
        if n > src.shape[0]:
            n = src.shape[0]
        out = PyBytes_FromStringAndSize(NULL, n)
        cdef char* dst = PyBytes_AS_STRING(out)
        if n > 0:
            with nogil:
                memcpy(dst, &src[0], n)
        return meta, out

    def read_validate(self, uint64_t seen_b):
        return self.v_a == seen_b

    def guard(self):
        return (self.v_a, self.v_b)

    @property
    def capacity(self):
        return len(self._buf)
