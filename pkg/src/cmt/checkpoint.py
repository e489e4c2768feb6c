"""Binary model checkpoint: magic "CMTW", version, JSON header, raw f32 blocks.

The header carries the model/training config, free-form metadata, and an
ordered manifest of (group, [(name, shape), ...]) entries; parameter bytes
follow in exactly manifest order, little-endian float32.  Save -> load ->
save reproduces the file byte for byte.
"""

import json
import struct

import numpy as np

MAGIC = b"CMTW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _as_array(t):
    data = getattr(t, "data", None)  # ndarray.data is a memoryview, not the array
    return data if isinstance(data, np.ndarray) else np.asarray(t)


def save_checkpoint(path, model_cfg_dict, train_cfg_dict, groups, meta=None):
    """groups: ordered {group_name: {param_name: Tensor-or-array}}."""
    manifest = [
        [gname, [[pname, list(_as_array(p).shape)] for pname, p in gparams.items()]]
        for gname, gparams in groups.items()
    ]
    header = {
        "model": model_cfg_dict,
        "train": train_cfg_dict,
        "manifest": manifest,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(hbytes)))
        fh.write(hbytes)
        for gname, gparams in groups.items():
            for pname, p in gparams.items():
                arr = _as_array(p)
                if arr.dtype != np.float32:
                    raise CheckpointError(f"{gname}/{pname}: checkpoint stores float32 only")
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (model_cfg_dict, train_cfg_dict, groups of numpy arrays, meta)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 + struct.calcsize("<HI"):
        raise CheckpointError("truncated checkpoint file: header incomplete")
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, hlen = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 4 + struct.calcsize("<HI")
    if len(blob) < off + hlen:
        raise CheckpointError("truncated checkpoint file: header cut short")
    try:
        header = json.loads(blob[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    off += hlen
    groups = {}
    for gname, entries in header["manifest"]:
        gparams = {}
        for pname, shape in entries:
            count = int(np.prod(shape)) if shape else 1
            nbytes = 4 * count
            if len(blob) < off + nbytes:
                raise CheckpointError(f"truncated checkpoint file: block {gname}/{pname} cut short")
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
            gparams[pname] = arr.copy()
            off += nbytes
        groups[gname] = gparams
    if off != len(blob):
        raise CheckpointError(f"checkpoint has {len(blob) - off} trailing bytes")
    return header["model"], header["train"], groups, header.get("meta", {})
