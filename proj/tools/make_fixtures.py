#!/usr/bin/env python3
"""Regenerates the small SFLD fixtures in tests/fixtures.

Headers use sorted keys and compact separators, matching the library writer
byte for byte.
"""

import json
import random
import struct
import sys
from pathlib import Path


def write_sfld(path, family, nlat, nlon, channels, values):
    header = {
        "magic": "SFLD",
        "version": 1,
        "shape": [1, channels, nlat, nlon],
        "dtype": "f64",
        "grid": {"family": family, "nlat": nlat, "nlon": nlon},
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        f.write(struct.pack("<%dd" % len(values), *values))


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "tests" / "fixtures")
    out.mkdir(parents=True, exist_ok=True)
    rng = random.Random(20240401)
    nlat, nlon = 4, 8
    n = nlat * nlon
    for name, channels in (("q", 2), ("k", 2), ("v", 3)):
        write_sfld(out / f"gauss4x8_{name}.sfld", "gaussian", nlat, nlon, channels,
                   [rng.gauss(0.0, 1.0) for _ in range(channels * n)])
    write_sfld(out / "equi4x8_k.sfld", "equiangular", nlat, nlon, 2, [rng.gauss(0.0, 1.0) for _ in range(2 * n)])
    write_sfld(out / "gauss4x8_vconst.sfld", "gaussian", nlat, nlon, 3, [1.25] * n + [-0.5] * n + [3.0] * n)
    (out / "truncated.sfld").write_bytes((out / "gauss4x8_q.sfld").read_bytes()[:-8])


if __name__ == "__main__":
    main()
