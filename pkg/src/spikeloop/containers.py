"""Versioned binary containers.

One container file = magic, format version, and a list of tagged sections.
Each section payload is a flat typed key-value mapping (ints, floats,
strings, int tuples, ndarrays).  Checkpoints store the software training
state under section tag SOFT and, once converted, the hardware network
configuration under HWCF; the calibration store uses tag CALS.  Everything
is little-endian and free of timestamps so identical state serializes to
identical bytes.
"""

import struct

import numpy as np

from .errors import DataError

MAGIC = b"SPKL"
VERSION = 1

TAG_SOFTWARE = b"SOFT"
TAG_HARDWARE = b"HWCF"
TAG_CALIBRATION = b"CALS"

_HEADER = struct.Struct("<4sHH")
_SECTION_HEADER = struct.Struct("<4sQ")


# --- typed key-value mapping codec -------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def pack_mapping(mapping: dict) -> bytes:
    out = [struct.pack("<I", len(mapping))]
    for key in sorted(mapping):
        value = mapping[key]
        out.append(_pack_str(key))
        if isinstance(value, (bool, int, np.integer)):
            out.append(b"i" + struct.pack("<q", int(value)))
        elif isinstance(value, (float, np.floating)):
            out.append(b"f" + struct.pack("<d", float(value)))
        elif isinstance(value, str):
            out.append(b"s" + _pack_str(value))
        elif isinstance(value, tuple):
            out.append(b"t" + struct.pack("<I", len(value)))
            out.append(struct.pack(f"<{len(value)}q", *(int(v) for v in value)))
        elif isinstance(value, np.ndarray):
            arr = np.ascontiguousarray(value)
            dt = arr.dtype.newbyteorder("<")
            arr = arr.astype(dt, copy=False)
            out.append(b"a" + _pack_str(dt.str))
            out.append(struct.pack("<B", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            out.append(arr.tobytes())
        else:
            raise TypeError(f"cannot serialize {key!r} of type {type(value).__name__}")
    return b"".join(out)


class _Reader:
    def __init__(self, buf, context):
        self.buf = buf
        self.off = 0
        self.context = context

    def take(self, n):
        if self.off + n > len(self.buf):
            raise DataError(f"{self.context}: truncated payload")
        chunk = self.buf[self.off : self.off + n]
        self.off += n
        return chunk

    def unpack(self, st: struct.Struct):
        return st.unpack(self.take(st.size))


def unpack_mapping(buf: bytes, context="container") -> dict:
    r = _Reader(buf, context)
    (count,) = r.unpack(struct.Struct("<I"))
    out = {}
    for _ in range(count):
        (klen,) = r.unpack(struct.Struct("<I"))
        key = r.take(klen).decode("utf-8")
        code = r.take(1)
        if code == b"i":
            (out[key],) = r.unpack(struct.Struct("<q"))
        elif code == b"f":
            (out[key],) = r.unpack(struct.Struct("<d"))
        elif code == b"s":
            (slen,) = r.unpack(struct.Struct("<I"))
            out[key] = r.take(slen).decode("utf-8")
        elif code == b"t":
            (n,) = r.unpack(struct.Struct("<I"))
            out[key] = tuple(r.unpack(struct.Struct(f"<{n}q")))
        elif code == b"a":
            (dlen,) = r.unpack(struct.Struct("<I"))
            dtype = np.dtype(r.take(dlen).decode("ascii"))
            (ndim,) = r.unpack(struct.Struct("<B"))
            shape = r.unpack(struct.Struct(f"<{ndim}Q"))
            n_bytes = int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize
            out[key] = np.frombuffer(r.take(n_bytes), dtype).reshape(shape).copy()
        else:
            raise DataError(f"{context}: unknown field code {code!r} for key {key!r}")
    return out


# --- container files ----------------------------------------------------------


def write_container(path, sections):
    """sections: iterable of (4-byte tag, mapping dict)."""
    with open(path, "wb") as f:
        sections = list(sections)
        f.write(_HEADER.pack(MAGIC, VERSION, len(sections)))
        for tag, mapping in sections:
            payload = pack_mapping(mapping)
            f.write(_SECTION_HEADER.pack(tag, len(payload)))
            f.write(payload)


def read_container(path) -> dict:
    """Returns {tag: mapping}."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, n_sections = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DataError(f"{path}: not a spikeloop container (bad magic {magic!r})")
    if version != VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    off = _HEADER.size
    out = {}
    for _ in range(n_sections):
        if off + _SECTION_HEADER.size > len(data):
            raise DataError(f"{path}: truncated section header")
        tag, length = _SECTION_HEADER.unpack_from(data, off)
        off += _SECTION_HEADER.size
        if off + length > len(data):
            raise DataError(f"{path}: truncated section {tag!r}")
        out[tag] = unpack_mapping(data[off : off + length], context=f"{path}:{tag!r}")
        off += length
    return out


# --- checkpoint format ---------------------------------------------------------


def software_to_mapping(result) -> dict:
    m = {
        "topology": tuple(result.topology),
        "classes": tuple(result.classes),
        "steps": int(result.steps),
        "master_seed": int(result.master_seed),
        "batch_accuracy": np.asarray(result.batch_accuracy, dtype="<f8"),
    }
    for n, (w, v) in enumerate(zip(result.weights, result.velocity)):
        m[f"w{n}"] = np.asarray(w, dtype="<f8")
        m[f"v{n}"] = np.asarray(v, dtype="<f8")
    return m


def software_from_mapping(m: dict):
    from .relu_net import SoftwareTrainResult

    topology = tuple(m["topology"])
    n_layers = len(topology) - 1
    return SoftwareTrainResult(
        weights=[m[f"w{n}"] for n in range(n_layers)],
        velocity=[m[f"v{n}"] for n in range(n_layers)],
        steps=int(m["steps"]),
        master_seed=int(m["master_seed"]),
        topology=topology,
        batch_accuracy=m["batch_accuracy"],
        classes=tuple(m["classes"]),
    )


def hardware_to_mapping(cfg) -> dict:
    m = {
        "topology": tuple(cfg.topology),
        "g_unit": float(cfg.g_unit),
        "fab_seed": int(cfg.fab_seed),
        "master_seed": int(cfg.master_seed),
        "dacs": np.asarray(cfg.dacs, dtype="<u2"),
    }
    for n, (h, s) in enumerate(zip(cfg.hw, cfg.sign)):
        m[f"hw{n}"] = np.asarray(h, dtype=np.uint8)
        m[f"sign{n}"] = np.asarray(s, dtype=np.int8)
    return m


def hardware_from_mapping(m: dict):
    from .substrate import HardwareNetworkConfig

    topology = tuple(m["topology"])
    n_proj = len(topology) - 1
    cfg = HardwareNetworkConfig(
        topology=topology,
        dacs=m["dacs"],
        hw=[m[f"hw{n}"] for n in range(n_proj)],
        sign=[m[f"sign{n}"] for n in range(n_proj)],
        g_unit=float(m["g_unit"]),
        fab_seed=int(m["fab_seed"]),
        master_seed=int(m["master_seed"]),
    )
    cfg.validate()
    return cfg


def save_checkpoint(path, software, hardware_mapping=None):
    sections = [(TAG_SOFTWARE, software_to_mapping(software))]
    if hardware_mapping is not None:
        sections.append((TAG_HARDWARE, hardware_mapping))
    write_container(path, sections)


def load_checkpoint(path):
    """-> (SoftwareTrainResult, hardware mapping or None)."""
    sections = read_container(path)
    if TAG_SOFTWARE not in sections:
        raise DataError(f"{path}: checkpoint has no software section")
    sw = software_from_mapping(sections[TAG_SOFTWARE])
    return sw, sections.get(TAG_HARDWARE)
