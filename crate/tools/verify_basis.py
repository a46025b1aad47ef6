#!/usr/bin/env python3
"""Independent reader for .bdbf basis files.

Parses the header and payload with the standard library only and prints the
shape, dtype, SHA-256 of the file and a few summary statistics. Exits non-zero
if the file is malformed.

    python3 tools/verify_basis.py FILE [--expect-value ROW COL CH VALUE]...
"""
import argparse
import array
import hashlib
import struct
import sys
import zlib

HEADER = struct.Struct("<4sIIIIBB")


def read(path):
    data = open(path, "rb").read()
    if len(data) < HEADER.size + 4:
        raise ValueError("truncated header")
    magic, version, h, w, m, bias, dtype = HEADER.unpack_from(data, 0)
    (crc,) = struct.unpack_from("<I", data, HEADER.size)
    if magic != b"BDBF":
        raise ValueError("bad magic")
    if zlib.crc32(data[: HEADER.size]) != crc:
        raise ValueError("header checksum mismatch")
    if version != 1:
        raise ValueError(f"unknown version {version}")
    if dtype not in (0, 1):
        raise ValueError(f"unknown dtype tag {dtype}")
    code = "f" if dtype == 0 else "d"
    values = array.array(code)
    payload = memoryview(data)[HEADER.size + 4 :]
    if len(payload) != h * w * m * values.itemsize:
        raise ValueError(f"payload is {len(payload)} bytes, expected {h * w * m * values.itemsize}")
    values.frombytes(payload)
    if sys.byteorder == "big":
        values.byteswap()
    return dict(h=h, w=w, m=m, bias=bool(bias), dtype=code, values=values, sha256=hashlib.sha256(data).hexdigest())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("path")
    ap.add_argument("--expect-value", nargs=4, action="append", default=[], metavar=("ROW", "COL", "CH", "VALUE"))
    args = ap.parse_args()
    try:
        f = read(args.path)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    vals = f["values"]
    print(f"shape {f['h']}x{f['w']}x{f['m']} dtype {f['dtype']} bias {f['bias']}")
    print(f"sha256 {f['sha256']}")
    if vals:
        print(f"min {min(vals)!r} max {max(vals)!r} sum {sum(vals)!r}")
    if f["bias"] and any(v != 1.0 for v in vals[:: f["m"]]):
        print("error: bias channel is not identically 1", file=sys.stderr)
        return 1
    for r, c, k, v in args.expect_value:
        got = vals[(int(r) * f["w"] + int(c)) * f["m"] + int(k)]
        if got != float(v):
            print(f"error: value({r},{c},{k}) = {got!r}, expected {v}", file=sys.stderr)
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
