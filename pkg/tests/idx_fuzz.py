"""Corrupted IDX byte strings for parser robustness tests."""
import gzip
import struct

import numpy as np


def valid_images(n=4, rows=3, cols=2, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(n, rows, cols), dtype=np.uint8)


def idx_bytes(array, magic=None, dims=None):
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x800 | array.ndim if magic is None else magic
    dims = array.shape if dims is None else dims
    return struct.pack(">I", magic) + struct.pack(">" + "I" * len(dims), *dims) + array.tobytes()


def corpus(seed=0, random_count=200):
    """(name, bytes) pairs that a reader expecting 3-D images must reject."""
    arr = valid_images()
    good = idx_bytes(arr)
    cases = [("empty", b""), ("two-bytes", b"\x00\x00")]
    for cut in range(1, len(good)):
        cases.append((f"truncated-{cut}", good[:cut]))
    for magic in (0x0801, 0x0802, 0x0804, 0x0903, 0x08030000, 0xFFFFFFFF, 0):
        cases.append((f"magic-{magic:#x}", idx_bytes(arr, magic=magic, dims=arr.shape)))
    cases.append(("trailing", good + b"\x00"))
    cases.append(("dims-too-large", idx_bytes(arr, dims=(5, 3, 2))))
    cases.append(("dims-overflow", idx_bytes(arr, dims=(2**32 - 1,) * 3)))
    cases.append(("dims-zero-with-body", idx_bytes(arr, dims=(0, 3, 2))))
    gz = gzip.compress(good, mtime=0)
    cases.append(("gzip-truncated", gz[: len(gz) // 2]))
    cases.append(("gzip-header-only", gz[:10]))
    cases.append(("gzip-of-truncated", gzip.compress(good[:-3], mtime=0)))
    rng = np.random.default_rng(seed)
    for i in range(random_count):
        blob = bytearray(good)
        for pos in rng.choice(16, size=rng.integers(1, 4), replace=False):
            blob[pos] = (blob[pos] + int(rng.integers(1, 256))) % 256
        # flips that keep the magic and the element count leave a well-formed file
        magic, *dims = struct.unpack(">4I", bytes(blob[:16]))
        if magic == 0x803 and dims[0] * dims[1] * dims[2] == arr.size:
            continue
        cases.append((f"flip-{i}", bytes(blob)))
    for i in range(20):
        cases.append((f"noise-{i}", rng.integers(0, 256, size=int(rng.integers(0, 64)), dtype=np.uint8).tobytes()))
    return cases
