"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/compare_kernels.py [--repeat N]

Prints one line per (kernel, input size) with ns/op for each backend and the
speedup. Exits 1 if the extension is not built.
"""

from __future__ import annotations

import argparse
import os
import sys
import timeit

from edgekv.kernels import backends

SIZES = (16, 256, 4096, 65536)


def hash_case(mod, size):
    data = os.urandom(size)
    return lambda: mod.fnv1a64(data)


def slot_write_case(mod, size):
    slot = mod.SeqSlot()
    data = os.urandom(size)

    def write():
        slot.begin_write()
        slot.fill(data, None)
        slot.end_write()

    return write


def slot_read_case(mod, size):
    slot = mod.SeqSlot()
    slot.begin_write()
    slot.fill(os.urandom(size), None)
    slot.end_write()

    def read():
        seen = slot.read_begin()
        slot.copy_out()
        return slot.read_validate(seen)

    return read


CASES = {"fnv1a64": hash_case, "slot_write": slot_write_case, "slot_read": slot_read_case}


def ns_per_op(fn, repeat: int) -> float:
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number * 1e9


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    found = backends()
    if "cython" not in found:
        print("compiled extension not built; run: pip install --no-build-isolation -e .", file=sys.stderr)
        return 1
    print(f"{'kernel':>10} {'size':>7} {'python_ns':>12} {'cython_ns':>12} {'speedup':>8}")
    for name, make in CASES.items():
        for size in SIZES:
            py = ns_per_op(make(found["python"], size), args.repeat)
            cy = ns_per_op(make(found["cython"], size), args.repeat)
            print(f"{name:>10} {size:>7} {py:>12.1f} {cy:>12.1f} {py / cy:>7.1f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
