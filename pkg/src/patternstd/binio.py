"""Binary artifact containers.

Every non-feature artifact (pattern bundles, similarity matrices, archive
indexes) is stored in one container layout::

    bytes 0..3    magic b"PSTD"
    bytes 4..7    uint32 LE, length H of the JSON header
    bytes 8..8+H  UTF-8 JSON header (sorted keys, no whitespace)
    ...           raw little-endian array payloads, in header order

The header carries free-form metadata plus an ``arrays`` list of
``{"name", "dtype", "shape"}`` records describing the payload.  Output is
a pure function of the inputs, so identical inputs give identical bytes.
"""

import hashlib
import json
import struct

import numpy as np

MAGIC = b"PSTD"


class ArtifactError(Exception):
    """Raised for malformed or mismatched on-disk artifacts."""


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(*parts):
    """Stable short hash of JSON-serializable parts."""
    h = hashlib.sha256()
    for p in parts:
        h.update(canonical_json(p).encode())
        h.update(b"\x00")
    return h.hexdigest()[:16]


def write_container(path, meta, arrays):
    specs = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        specs.append({"name": name, "dtype": dt.str, "shape": list(arr.shape)})
        blobs.append(arr.astype(dt, copy=False).tobytes())
    header = dict(meta)
    header["arrays"] = specs
    hb = canonical_json(header).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        for b in blobs:
            f.write(b)


def read_container(path):
    """Return ``(meta, arrays)`` from a container file."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8 or data[:4] != MAGIC:
        raise ArtifactError(f"{path}: not a container file")
    (hlen,) = struct.unpack("<I", data[4:8])
    try:
        header = json.loads(data[8:8 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"{path}: corrupt header ({exc})") from None
    offset = 8 + hlen
    arrays = {}
    for spec in header.pop("arrays"):
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if offset + nbytes > len(data):
            raise ArtifactError(f"{path}: truncated payload for {spec['name']}")
        arr = np.frombuffer(data, dtype=dt, count=count, offset=offset)
        arrays[spec["name"]] = arr.reshape(spec["shape"]).astype(dt.newbyteorder("="))
        offset += nbytes
    return header, arrays
