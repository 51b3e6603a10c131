"""Checkpoint container: magic line, textual header, raw float32 payload.

Layout::

    CDNZ1\n
    meta <key> <value>\n          (value is the rest of the line, escaped)
    tensor <name> <d0>x<d1>x... <byte-offset>\n
    ...
    end\n
    <little-endian float32 payload>

Offsets are relative to the start of the payload. Arrays are stored as
float32, so a save/load/save cycle of a float32 network is bit-exact.
"""

import numpy as np

MAGIC = b"CDNZ1\n"


class CheckpointError(ValueError):
    pass


def _escape(s):
    return str(s).replace("\\", "\\\\").replace("\n", "\\n")


def _unescape(s):
    out = []
    i = 0
    while i < len(s):
        if s[i] == "\\" and i + 1 < len(s):
            out.append("\n" if s[i + 1] == "n" else s[i + 1])
            i += 2
        else:
            out.append(s[i])
            i += 1
    return "".join(out)


def save_checkpoint(path, arrays, meta=None):
    """Write name -> array mapping (insertion order preserved) plus metadata."""
    header = []
    payload = []
    offset = 0
    for name, arr in arrays.items():
        if any(ch.isspace() for ch in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        a = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
        shape = "x".join(str(d) for d in a.shape) if a.ndim else "scalar"
        header.append(f"tensor {name} {shape} {offset}\n")
        payload.append(a.tobytes())
        offset += a.nbytes
    lines = [MAGIC.decode()]
    for key, value in (meta or {}).items():
        if any(ch.isspace() for ch in key):
            raise CheckpointError(f"meta key {key!r} contains whitespace")
        lines.append(f"meta {key} {_escape(value)}\n")
    lines.extend(header)
    lines.append("end\n")
    with open(path, "wb") as f:
        f.write("".join(lines).encode())
        for chunk in payload:
            f.write(chunk)


def load_checkpoint(path):
    """Read back (arrays, meta). Arrays are float32; meta values are strings."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic bytes {blob[:6]!r}")
    head_end = blob.find(b"end\n", len(MAGIC))
    if head_end < 0:
        raise CheckpointError(f"{path}: header terminator not found")
    header = blob[len(MAGIC):head_end].decode()
    payload = blob[head_end + 4:]

    meta = {}
    arrays = {}
    for line in header.splitlines():
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, value = rest.split(" ", 1)
            meta[key] = _unescape(value)
        elif kind == "tensor":
            name, shape_s, off_s = rest.rsplit(" ", 2)
            shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            off = int(off_s)
            if off + 4 * count > len(payload):
                raise CheckpointError(f"{path}: tensor {name} exceeds payload size")
            arrays[name] = np.frombuffer(
                payload, dtype="<f4", count=count, offset=off).reshape(shape).copy()
        else:
            raise CheckpointError(f"{path}: unknown header record {kind!r}")
    return arrays, meta
