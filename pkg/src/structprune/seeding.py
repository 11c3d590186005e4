"""Per-component seeds derived from one master seed.

``derive_seed(master, name)`` mixes the master seed with a CRC-32 of the
component name and runs one splitmix64 round, so each component's stream is
stable no matter which other components run.
"""

import zlib

_MASK = (1 << 64) - 1


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def derive_seed(master, name):
    return splitmix64((int(master) & _MASK) ^ (zlib.crc32(name.encode()) << 32))
