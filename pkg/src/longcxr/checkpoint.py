"""Single-file parameter container: JSON manifest + raw little-endian float32.

Layout: 8-byte magic, uint32 manifest length, manifest JSON, then the
concatenated tensor blobs at the offsets the manifest records.
"""

import json
import struct

import numpy as np
import torch

MAGIC = b"LCXRCKPT"


def save_checkpoint(path, state_dict, meta=None):
    arrays = {}
    entries = []
    offset = 0
    for name, tensor in state_dict.items():
        # astype returns a C-contiguous copy and keeps 0-dim shapes intact
        arr = tensor.detach().cpu().numpy().astype("<f4")
        arrays[name] = arr
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "float32",
            "endianness": "little",
            "offset": offset,
            "nbytes": arr.nbytes,
        })
        offset += arr.nbytes
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for entry in entries:
            fh.write(arrays[entry["name"]].tobytes())


def load_checkpoint(path):
    """Returns (meta dict, name -> torch tensor)."""
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint container")
        (mlen,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(mlen))
        base = fh.tell()
        tensors = {}
        for entry in manifest["tensors"]:
            fh.seek(base + entry["offset"])
            buf = fh.read(entry["nbytes"])
            arr = np.frombuffer(buf, dtype="<f4").reshape(entry["shape"]).copy()
            tensors[entry["name"]] = torch.from_numpy(arr)
    return manifest["meta"], tensors
