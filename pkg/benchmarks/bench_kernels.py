"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from simflash import kernels


def cases(mod, rng):
    page = rng.bytes(4096)
    keys = rng.integers(0, 1 << 63, size=512, dtype=np.uint64)
    header = rng.bytes(80)
    bitmap = int.from_bytes(rng.bytes(64), "little")
    return {
        "match_slots (scalar key)": lambda: mod.match_slots(page, 12345, (1 << 64) - 1),
        "match_slots (per-slot keys)": lambda: mod.match_slots(page, keys, (1 << 64) - 1),
        "keystream (page)": lambda: mod.keystream(987654),
        "keystream_words (page)": lambda: mod.keystream_words(987654),
        "xor_bytes (4 KiB)": lambda: mod.xor_bytes(page, page),
        "crc64 (80 B)": lambda: mod.crc64(header),
        "fold_chunks": lambda: mod.fold_chunks(bitmap),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=2000)
    args = ap.parse_args()
    backends = kernels.backends()
    names = list(backends)
    print(f"{'kernel':30s}" + "".join(f"{n:>12s}" for n in names) +
          ("  py/cython" if len(names) == 2 else ""))
    rng = np.random.default_rng(0)
    per = {n: cases(backends[n], rng) for n in names}
    for case in per[names[0]]:
        times = []
        for n in names:
            t = min(timeit.repeat(per[n][case], number=args.repeat, repeat=3)) / args.repeat
            times.append(t)
        line = f"{case:30s}" + "".join(f"{t * 1e6:10.2f}us" for t in times)
        if len(times) == 2:
            line += f"{times[0] / times[1]:11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
