"""
Checkpoint persistence

A checkpoint is a binary tensor container plus a JSON sidecar:

    <name>.ckpt   magic b'HSVRCKPT', u32 version, u32 tensor count, then per
                  tensor (sorted by name): u16 name length, utf-8 name,
                  u8 dtype code, u8 ndim, u64 dims, little-endian data
    <name>.json   config, per-layer mode tags, optimizer hyperparameters,
                  rng state and extras (sorted keys)

Saving a loaded checkpoint reproduces both files byte for byte.
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

import config
from exceptions import CheckpointError

logger = logging.getLogger(__name__)

DTYPE_CODES = {
    np.dtype('<f8'): 1,
    np.dtype('<c16'): 2,
    np.dtype('<i8'): 3,
    np.dtype('u1'): 4,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}
OPTIMIZER_PREFIX = 'optimizer.state.'


@dataclass(eq=False)
class Checkpoint:
    """Model tensors with mode tags and the metadata needed to rebuild a run"""
    config: Dict
    layer_modes: List[str]
    tensors: Dict[str, np.ndarray]
    optimizer: Optional[Dict] = None
    rng_state: Optional[Dict] = None
    extras: Dict = field(default_factory=dict)
    format_version: int = config.CHECKPOINT_VERSION


def sidecar_path(path: Path) -> Path:
    return Path(path).with_suffix('.json')


def _normalize(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array)
    if array.dtype == np.bool_:
        array = array.astype(np.uint8)
    elif array.dtype.kind == 'f':
        array = array.astype('<f8')
    elif array.dtype.kind == 'c':
        array = array.astype('<c16')
    elif array.dtype.kind in 'iu' and array.dtype != np.uint8:
        array = array.astype('<i8')
    if array.dtype not in DTYPE_CODES:
        raise CheckpointError(f"Unsupported tensor dtype {array.dtype}")
    return np.ascontiguousarray(array)


def encode_tensors(tensors: Dict[str, np.ndarray], version: int = config.CHECKPOINT_VERSION) -> bytes:
    out = bytearray(config.CHECKPOINT_MAGIC)
    out += struct.pack('<II', version, len(tensors))
    for name in sorted(tensors):
        array = _normalize(tensors[name])
        encoded = name.encode('utf-8')
        out += struct.pack('<H', len(encoded)) + encoded
        out += struct.pack('<BB', DTYPE_CODES[array.dtype], array.ndim)
        out += struct.pack(f'<{array.ndim}Q', *array.shape)
        out += array.tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_tensors(data: bytes, path: Path = Path('<bytes>')) -> Tuple[int, Dict[str, np.ndarray]]:
    reader = _Reader(data, path)
    if reader.take(len(config.CHECKPOINT_MAGIC)) != config.CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = reader.unpack('<II')
    if version != config.CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version}, this build reads version {config.CHECKPOINT_VERSION}"
        )
    tensors = {}
    for _ in range(count):
        (name_len,) = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8')
        code, ndim = reader.unpack('<BB')
        if code not in CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for tensor {name}")
        shape = reader.unpack(f'<{ndim}Q')
        dtype = CODE_DTYPES[code]
        size = int(np.prod(shape)) * dtype.itemsize
        tensors[name] = np.frombuffer(reader.take(size), dtype=dtype).reshape(shape).copy()
    if reader.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - reader.pos} trailing bytes")
    return version, tensors


def save_checkpoint(ckpt: Checkpoint, path: Path) -> Path:
    """Write the tensor container and its JSON sidecar; returns the container path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensors(ckpt.tensors, ckpt.format_version))
    meta = {
        'format_version': ckpt.format_version,
        'config': ckpt.config,
        'layer_modes': ckpt.layer_modes,
        'optimizer': ckpt.optimizer,
        'rng_state': ckpt.rng_state,
        'extras': ckpt.extras,
    }
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True, indent=2) + '\n')
    logger.info(f"✓ Checkpoint saved: {path}")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    meta_path = sidecar_path(path)
    if not meta_path.exists():
        raise CheckpointError(f"Checkpoint sidecar not found: {meta_path}")
    version, tensors = decode_tensors(path.read_bytes(), path)
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{meta_path}: invalid JSON ({e})") from e
    if meta.get('format_version') != version:
        raise CheckpointError(f"{meta_path}: version {meta.get('format_version')} does not match container {version}")
    return Checkpoint(
        config=meta['config'],
        layer_modes=meta['layer_modes'],
        tensors=tensors,
        optimizer=meta.get('optimizer'),
        rng_state=meta.get('rng_state'),
        extras=meta.get('extras') or {},
        format_version=version,
    )


def model_to_checkpoint(model, optimizer=None, rng_state: Optional[Dict] = None,
                        extras: Optional[Dict] = None) -> Checkpoint:
    """Snapshot a SequenceModel (and optionally its AdamW state)."""
    tensors = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    optimizer_meta = None
    if optimizer is not None:
        state = optimizer.state_dict()
        for index, slots in state['state'].items():
            for key, value in slots.items():
                tensors[f'{OPTIMIZER_PREFIX}{index}.{key}'] = torch.as_tensor(value).detach().cpu().numpy()
        optimizer_meta = {'param_groups': json.loads(json.dumps(state['param_groups']))}
    return Checkpoint(
        config=model.cfg.to_dict(),
        layer_modes=model.layer_modes(),
        tensors=tensors,
        optimizer=optimizer_meta,
        rng_state=rng_state,
        extras=extras or {},
    )


def checkpoint_to_model(ckpt: Checkpoint):
    """Rebuild the SequenceModel, including reduced layers, from a checkpoint."""
    from compress import ReducedSSM
    from net import ReducedSSMLayer, SequenceModel, TrainConfig

    cfg = TrainConfig.from_dict(ckpt.config)
    model = SequenceModel(cfg)
    if len(ckpt.layer_modes) != cfg.depth:
        raise CheckpointError(f"{len(ckpt.layer_modes)} layer modes for depth {cfg.depth}")
    for i, mode in enumerate(ckpt.layer_modes):
        if mode == 'rotation':
            continue
        prefix = f'blocks.{i}.ssm.'
        try:
            reduced = ReducedSSM(
                mode,
                ckpt.tensors[prefix + 'B'], ckpt.tensors[prefix + 'C'], ckpt.tensors[prefix + 'D'],
                A=ckpt.tensors.get(prefix + 'A'), lam=ckpt.tensors.get(prefix + 'lam'),
                truncated_tail=float(ckpt.tensors[prefix + 'tail']),
                sigmas=ckpt.tensors.get(prefix + 'sigmas'),
            )
        except KeyError as e:
            raise CheckpointError(f"layer {i} ({mode}) is missing tensor {e}") from e
        model.blocks[i].ssm = ReducedSSMLayer(reduced, workers=cfg.workers)

    state = {}
    for name, array in ckpt.tensors.items():
        if name.startswith(OPTIMIZER_PREFIX):
            continue
        tensor = torch.from_numpy(array.copy())
        state[name] = tensor.bool() if name.endswith('.padded') else tensor
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint does not match the model layout: {e}") from e
    return model


def restore_optimizer(ckpt: Checkpoint, model):
    """AdamW for the model with the saved state and hyperparameters loaded."""
    from net import build_optimizer

    optimizer = build_optimizer(model, model.cfg)
    if not ckpt.optimizer:
        return optimizer
    slots: Dict[int, Dict[str, torch.Tensor]] = {}
    for name, array in ckpt.tensors.items():
        if name.startswith(OPTIMIZER_PREFIX):
            index, key = name[len(OPTIMIZER_PREFIX):].split('.', 1)
            slots.setdefault(int(index), {})[key] = torch.from_numpy(array.copy())
    optimizer.load_state_dict({'state': slots, 'param_groups': ckpt.optimizer['param_groups']})
    return optimizer
