"""
DPW1 Weight Container
Reads and writes model weights with a JSON header and little-endian float32 payloads

Layout:
    bytes 0-3      magic b"DPW1"
    bytes 4-7      little-endian u32 header length H
    bytes 8..8+H   UTF-8 JSON {"config": {...}, "tensors": [{name, dtype, shape, offset, length_bytes}]}
    remainder      concatenated row-major '<f4' payloads; offsets are relative to the remainder
"""

import json
import logging
import struct
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from core.errors import CheckpointFormatError, ModelError
from core.model import Model, ModelConfig, tensor_shapes

logger = logging.getLogger(__name__)

MAGIC = b'DPW1'
PREAMBLE_BYTES = 8
DTYPE = 'f32'
FLOAT_BYTES = 4


def encode_model(model: Model) -> bytes:
    """Serialize a model to DPW1 bytes (deterministic for identical weights)"""
    if model.dtype != np.float32:
        logger.warning(f"Model weights are {model.dtype.name}; the container stores float32")

    index = []
    payloads = []
    offset = 0
    for name, shape in tensor_shapes(model.config).items():
        data = np.ascontiguousarray(model.params[name], dtype='<f4').tobytes()
        index.append({
            'name': name,
            'dtype': DTYPE,
            'shape': list(shape),
            'offset': offset,
            'length_bytes': len(data),
        })
        payloads.append(data)
        offset += len(data)

    header = json.dumps({'config': model.config.to_dict(), 'tensors': index},
                        sort_keys=True, separators=(',', ':')).encode('utf-8')
    return MAGIC + struct.pack('<I', len(header)) + header + b''.join(payloads)


def decode_model(blob: bytes) -> Model:
    """
    Parse DPW1 bytes

    Raises:
        CheckpointFormatError with code bad_magic, bad_header, truncated,
        shape_mismatch or non_finite (the last three name the tensor; so do
        duplicate and overlapping index entries, reported as bad_header)
    """
    if len(blob) < PREAMBLE_BYTES:
        raise CheckpointFormatError(f"File too short ({len(blob)} bytes)", code='truncated')
    if blob[:4] != MAGIC:
        raise CheckpointFormatError(f"Bad magic {blob[:4]!r}, expected {MAGIC!r}", code='bad_magic')

    (header_length,) = struct.unpack('<I', blob[4:8])
    header_end = PREAMBLE_BYTES + header_length
    if header_end > len(blob):
        raise CheckpointFormatError(f"Header declares {header_length} bytes but file ends early", code='truncated')

    try:
        header = json.loads(blob[PREAMBLE_BYTES:header_end].decode('utf-8'))
        config = ModelConfig.from_dict(header['config'])
        entries = header['tensors']
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise CheckpointFormatError(f"Unreadable header: {e}", code='bad_header') from e
    except ModelError as e:
        raise CheckpointFormatError(f"Invalid config in header: {e}", code='bad_header') from e

    payload = memoryview(blob)[header_end:]
    expected = tensor_shapes(config)
    params: Dict[str, np.ndarray] = {}
    spans: List[Tuple[int, int, str]] = []

    for entry in entries:
        name = entry.get('name')
        if name not in expected:
            raise CheckpointFormatError("Unknown tensor in index", tensor=name, code='bad_header')
        if name in params:
            raise CheckpointFormatError("Tensor listed twice in index", tensor=name, code='bad_header')
        if entry.get('dtype') != DTYPE:
            raise CheckpointFormatError(f"Unsupported dtype {entry.get('dtype')}", tensor=name, code='bad_header')

        shape = tuple(int(s) for s in entry.get('shape', ()))
        if shape != expected[name]:
            raise CheckpointFormatError(f"Header shape {shape} does not match config shape {expected[name]}",
                                        tensor=name, code='shape_mismatch')
        n_bytes = int(np.prod(shape, dtype=np.int64)) * FLOAT_BYTES
        if int(entry.get('length_bytes', -1)) != n_bytes:
            raise CheckpointFormatError(f"length_bytes {entry.get('length_bytes')} does not match shape {shape}",
                                        tensor=name, code='shape_mismatch')

        offset = int(entry.get('offset', -1))
        if offset < 0 or offset + n_bytes > len(payload):
            available = max(0, len(payload) - max(offset, 0)) // FLOAT_BYTES
            raise CheckpointFormatError(f"Payload truncated: need {n_bytes // FLOAT_BYTES} floats, "
                                        f"{available} available", tensor=name, code='truncated')

        array = np.frombuffer(payload[offset:offset + n_bytes], dtype='<f4').reshape(shape)
        if not np.all(np.isfinite(array)):
            raise CheckpointFormatError("Non-finite weight", tensor=name, code='non_finite')
        params[name] = array.astype(np.float32)
        spans.append((offset, offset + n_bytes, name))

    spans.sort(key=lambda span: span[0])
    for (_, previous_end, previous), (start, _, name) in zip(spans, spans[1:]):
        if start < previous_end:
            raise CheckpointFormatError(f"Payload overlaps tensor '{previous}'", tensor=name, code='bad_header')

    missing = [name for name in expected if name not in params]
    if missing:
        raise CheckpointFormatError("Tensor missing from index", tensor=missing[0], code='bad_header')

    return Model(config, params, dtype=np.float32)


def save_model(model: Model, path: Union[str, Path]) -> Path:
    """Write a model as a .dpw container"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_model(model)
    path.write_bytes(blob)
    logger.info(f"Saved model ({model.num_parameters()} parameters) to {path}")
    return path


def load_model(path: Union[str, Path]) -> Model:
    """Read a .dpw container"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Model file not found: {path}")
    model = decode_model(path.read_bytes())
    logger.info(f"Loaded {model!r} from {path}")
    return model
