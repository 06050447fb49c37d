"""Single-file ``.scae`` checkpoints: model parameters, fitted classifiers and provenance.

Layout::

    b"SCAECKPT" | u32 format version | u64 header length | JSON header | raw array bytes | sha256

The JSON header is human readable (``head -c`` shows it) and lists every
array with its dtype, shape and byte offset into the payload. The trailing
digest covers everything before it, so truncation or corruption is detected
before any parameter is handed out. Nothing time-dependent is written, so
saving the same state twice yields identical bytes.
"""
import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .classifiers import KMeansClassifier, LinearClassifier
from .config import ScaeConfig
from .model import ScaeModel, init_model

MAGIC = b"SCAECKPT"
FORMAT_VERSION = 1
SUFFIX = ".scae"
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


class CheckpointError(IOError):
    """The checkpoint file is missing, truncated or corrupt."""


class IncompatibleCheckpointError(CheckpointError):
    """The checkpoint was written by an unsupported format version."""


def config_hash(config: ScaeConfig):
    blob = json.dumps(dataclasses.asdict(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class _Payload:
    def __init__(self):
        self.chunks = []
        self.size = 0

    def add(self, array):
        array = np.ascontiguousarray(array)
        raw = array.tobytes()
        entry = {"dtype": array.dtype.str, "shape": list(array.shape), "offset": self.size, "nbytes": len(raw)}
        self.chunks.append(raw)
        self.size += len(raw)
        return entry


def _classifier_entry(clf, payload):
    if isinstance(clf, KMeansClassifier):
        return {"type": "kmeans", "source": clf.source,
                "centers": payload.add(clf.centers), "permutation": payload.add(clf.permutation)}
    if isinstance(clf, LinearClassifier):
        return {"type": "linear", "source": clf.source,
                "weights": payload.add(clf.weights), "bias": payload.add(clf.bias)}
    raise TypeError(f"cannot checkpoint classifier of type {type(clf).__name__}")


def save_checkpoint(model: ScaeModel, classifiers, path, metadata=None):
    """Write ``model`` and the ``classifiers`` mapping (name -> classifier) to ``path``."""
    payload = _Payload()
    tensors = {name: payload.add(t.detach().cpu().numpy()) for name, t in model.state_dict().items()}
    header = {
        "format_version": FORMAT_VERSION,
        "config": dataclasses.asdict(model.config),
        "metadata": {"config_hash": config_hash(model.config), **(metadata or {})},
        "tensors": tensors,
        "classifiers": {name: _classifier_entry(clf, payload) for name, clf in sorted((classifiers or {}).items())},
    }
    head = json.dumps(header, sort_keys=True, indent=1).encode()
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)) + head + b"".join(payload.chunks)
    path = Path(path)
    try:
        path.write_bytes(body + hashlib.sha256(body).digest())
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def read_header(path):
    """Parse and verify a checkpoint, returning ``(header, payload_bytes)``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _PREFIX.size + _DIGEST:
        raise CheckpointError(f"checkpoint {path} is truncated")
    magic, version, head_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"checkpoint {path} has format version {version}, this build reads version {FORMAT_VERSION}")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"checkpoint {path} is truncated or corrupt (digest mismatch)")
    start = _PREFIX.size
    header = json.loads(body[start:start + head_len])
    return header, body[start + head_len:]


def _array(entry, payload):
    raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
    return np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()


def load_checkpoint(path):
    """Return ``(model, classifiers, metadata)`` stored at ``path``."""
    header, payload = read_header(path)
    config = ScaeConfig(**header["config"])
    model = init_model(config, seed=0)
    state = {name: torch.from_numpy(_array(entry, payload)) for name, entry in header["tensors"].items()}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {path} does not match its model config: {exc}") from exc
    classifiers = {}
    for name, entry in header["classifiers"].items():
        if entry["type"] == "kmeans":
            classifiers[name] = KMeansClassifier(
                _array(entry["centers"], payload), _array(entry["permutation"], payload), entry["source"])
        else:
            classifiers[name] = LinearClassifier(
                _array(entry["weights"], payload), _array(entry["bias"], payload), entry["source"])
    return model, classifiers, header["metadata"]
