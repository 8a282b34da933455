###
# Licensed under the Apache License, Version 2.0 (the "License");
# You may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
###
"""Checkpoint container.

Layout: ``LARA`` magic, uint32 format version, uint64 header length, a UTF-8
JSON header ``{"tensors": [{"name", "shape", "offset"}], "meta": {...}}``
and the little-endian float32 payload. Offsets are in bytes from the start
of the payload.
"""

import dataclasses
import json
import logging
import os
import struct
import typing as t

import numpy as np

from latentcrab import flow, model
from latentcrab.tokenizer import Vocab

logger = logging.getLogger(__name__)

MAGIC = b"LARA"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str, tensors: t.Mapping[str, np.ndarray], meta: t.Optional[t.Dict] = None) -> str:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        f.write(header)
        for chunk in chunks:
            f.write(chunk)
    os.replace(tmp, path)
    logger.info("wrote checkpoint %s (%d tensors, %d bytes)", path, len(entries), offset)
    return path


def read_header(path: str) -> t.Tuple[t.Dict, int]:
    with open(path, "rb") as f:
        prefix = f.read(_PREFIX.size)
        if len(prefix) != _PREFIX.size:
            raise CheckpointError(f"{path} is too short to be a checkpoint")
        magic, version, header_len = _PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (magic {magic!r})")
        if version != VERSION:
            raise CheckpointError(f"{path} has unsupported checkpoint version {version}")
        header = json.loads(f.read(header_len).decode("utf-8"))
    return header, _PREFIX.size + header_len


def read_meta(path: str) -> t.Dict:
    return read_header(path)[0]["meta"]


def load_checkpoint(path: str) -> t.Tuple[t.Dict[str, np.ndarray], t.Dict]:
    header, payload_start = read_header(path)
    with open(path, "rb") as f:
        f.seek(payload_start)
        payload = f.read()
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + 4 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past the end of the payload")
        array = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        tensors[entry["name"]] = array.reshape(entry["shape"]).astype(np.float32)
    return tensors, header["meta"]


def save_policy(path: str, policy, meta: t.Dict, extra: t.Optional[t.Mapping[str, np.ndarray]] = None) -> str:
    """Policy parameters plus ``extra`` tensors (optimizer moments) and run metadata."""
    tensors = {name: p.data for name, p in policy.named_parameters().items()}
    for name, array in (extra or {}).items():
        if name in tensors:
            raise CheckpointError(f"extra tensor {name} collides with a policy parameter")
        tensors[name] = array
    meta = dict(meta)
    meta.setdefault("model", dataclasses.asdict(policy.cfg))
    meta.setdefault("expert", dataclasses.asdict(policy.expert_cfg))
    meta.setdefault("vocab", policy.vocab.to_dict())
    return save_checkpoint(path, tensors, meta)


def load_policy(path: str):
    """Rebuild a policy from a checkpoint; returns (policy, meta, extra tensors)."""
    tensors, meta = load_checkpoint(path)
    for key in ("model", "expert", "vocab"):
        if key not in meta:
            raise CheckpointError(f"{path}: metadata has no {key!r} entry")
    policy = model.VLAPolicy(
        model.ModelConfig.from_dict(meta["model"]),
        flow.ExpertConfig.from_dict(meta["expert"]),
        Vocab.from_dict(meta["vocab"]),
    )
    try:
        policy.load_arrays(tensors)
    except KeyError as e:
        raise CheckpointError(f"{path}: {e.args[0]}") from e
    names = set(policy.named_parameters())
    extra = {k: v for k, v in tensors.items() if k not in names}
    return policy, meta, extra
