"""
Checkpoint persistence: MTLC binary parameter tables with a JSON config echo.
Writes are atomic (temporary file renamed into place on success).
"""
import json
import logging
import os
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, BinaryIO, Dict, Iterator, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from config import ModelConfig, config_hash

logger = logging.getLogger(__name__)

MAGIC = b'MTLC'
VERSION = 1
OPTIM_PREFIX = 'optim.'
_HEADER = '<4sI32sQ'


class CheckpointError(Exception):
    """Raised when a checkpoint cannot be written, read or matched to a config."""
    pass


@dataclass
class Checkpoint:
    """Named float32 parameters, optimizer state, the model config and the step counter."""
    parameters: Dict[str, np.ndarray]
    config: ModelConfig
    step: int
    momentum: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def config_hash(self) -> bytes:
        return config_hash(self.config)

    def records(self) -> Dict[str, np.ndarray]:
        table = dict(self.parameters)
        for name, values in self.momentum.items():
            table[OPTIM_PREFIX + name] = values
        return table


def sidecar_path(path: str) -> str:
    return f"{path}.json"


@contextmanager
def atomic_write(path: str) -> Iterator[BinaryIO]:
    """Yield a temporary file next to ``path``; rename on success, remove on error."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix='.tmp-', dir=directory)
    try:
        with os.fdopen(fd, 'wb') as f:
            yield f
        os.replace(tmp_path, path)
    except Exception as e:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        logger.error(f"Checkpoint write to {path} failed, discarded temporary file: {e}")
        raise


def _encode_record(name: str, values: np.ndarray) -> bytes:
    if values.dtype != np.float32:
        raise CheckpointError(f"Record {name} has dtype {values.dtype}; checkpoints hold float32 only")
    encoded = name.encode('utf-8')
    if len(encoded) > 0xFFFF:
        raise CheckpointError(f"Record name too long: {name[:40]}...")
    if values.ndim > 0xFF:
        raise CheckpointError(f"Record {name} has rank {values.ndim}")
    parts = [struct.pack('<H', len(encoded)), encoded, struct.pack('<B', values.ndim)]
    parts.append(struct.pack(f'<{values.ndim}I', *values.shape))
    parts.append(np.ascontiguousarray(values).astype('<f4').tobytes())
    return b''.join(parts)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = struct.pack(_HEADER, MAGIC, VERSION, ckpt.config_hash, ckpt.step)
    return header + b''.join(_encode_record(name, values) for name, values in ckpt.records().items())


def decode_records(payload: bytes, source: str = '<bytes>') -> Tuple[bytes, int, Dict[str, np.ndarray]]:
    """Parse an MTLC payload into (config hash, step, record table)."""
    size = struct.calcsize(_HEADER)
    if len(payload) < size:
        raise CheckpointError(f"{source}: truncated header")
    magic, version, digest, step = struct.unpack_from(_HEADER, payload, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported version {version}")

    offset = size
    table: Dict[str, np.ndarray] = {}
    try:
        while offset < len(payload):
            (name_length,) = struct.unpack_from('<H', payload, offset)
            offset += 2
            name = payload[offset:offset + name_length].decode('utf-8')
            offset += name_length
            (rank,) = struct.unpack_from('<B', payload, offset)
            offset += 1
            shape = struct.unpack_from(f'<{rank}I', payload, offset)
            offset += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if offset + 4 * count > len(payload):
                raise CheckpointError(f"{source}: truncated payload for record {name}")
            table[name] = np.frombuffer(payload, dtype='<f4', count=count, offset=offset).astype(np.float32).reshape(shape)
            offset += 4 * count
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointError(f"{source}: truncated or corrupt record table ({e})") from e
    return digest, step, table


def save_checkpoint(ckpt: Checkpoint, path: str) -> str:
    payload = encode_checkpoint(ckpt)
    echo = {
        'config': ckpt.config.model_dump(mode='json'),
        'config_hash': ckpt.config_hash.hex(),
        'step': ckpt.step,
        'metadata': ckpt.metadata,
    }
    try:
        with atomic_write(path) as f:
            f.write(payload)
        with atomic_write(sidecar_path(path)) as f:
            f.write(json.dumps(echo, indent=2, sort_keys=True).encode())
    except OSError as e:
        raise CheckpointError(f"Could not write checkpoint {path}: {e}") from e
    logger.info(f"Saved checkpoint {path} at step {ckpt.step} ({len(ckpt.parameters)} parameters)")
    return path


def load_checkpoint(path: str, expected: Optional[ModelConfig] = None) -> Checkpoint:
    """Read a checkpoint; the header hash must match the sidecar echo and ``expected`` when given."""
    try:
        with open(path, 'rb') as f:
            payload = f.read()
    except OSError as e:
        raise CheckpointError(f"Could not read checkpoint {path}: {e}") from e
    digest, step, table = decode_records(payload, path)

    metadata: Dict[str, Any] = {}
    config = expected
    if os.path.exists(sidecar_path(path)):
        try:
            with open(sidecar_path(path)) as f:
                echo = json.load(f)
            echoed = ModelConfig.model_validate(echo['config'])
        except (OSError, ValueError, KeyError, ValidationError) as e:
            raise CheckpointError(f"Unreadable config echo for {path}: {e}") from e
        if config_hash(echoed) != digest:
            raise CheckpointError(f"{path}: config echo does not match the header hash")
        metadata = echo.get('metadata', {})
        config = config or echoed
    elif config is None:
        raise CheckpointError(f"{path}: no config echo found and no config supplied")

    if config_hash(config) != digest:
        raise CheckpointError(
            f"{path}: config hash mismatch (checkpoint {digest.hex()[:12]}, runtime {config_hash(config).hex()[:12]})")

    parameters = {name: values for name, values in table.items() if not name.startswith(OPTIM_PREFIX)}
    momentum = {name[len(OPTIM_PREFIX):]: values for name, values in table.items() if name.startswith(OPTIM_PREFIX)}
    logger.debug(f"Loaded checkpoint {path}: step {step}, {len(parameters)} parameters")
    return Checkpoint(parameters=parameters, config=config, step=step, momentum=momentum, metadata=metadata)
