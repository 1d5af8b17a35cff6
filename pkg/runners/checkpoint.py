"""
Checkpoint file format.

    offset  size  content
    0       8     magic b"DPDMCKPT"
    8       2     format version, uint16 little-endian (currently 1)
    10      4     header length H, uint32 little-endian
    14      H     UTF-8 JSON header (sorted keys): architecture, dm_config,
                  ema_decay, mixture (null when unknown), num_parameters, step
    14+H    8P    theta, float64 little-endian
    14+H+8P 8P    theta_ema, float64 little-endian
"""
import json
import logging
import os
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from diffusion import denoiser as dn
from diffusion.dm_configs import config_from_dict
from oracle.gmm_oracle import GmmSpec

MAGIC = b"DPDMCKPT"
FORMAT_VERSION = 1

logger = logging.getLogger("Checkpoint")


class CheckpointFormatError(ValueError):
    """Bad magic, unsupported version, unreadable header or truncated payload."""


@dataclass
class Checkpoint:
    params: dn.DenoiserParams
    ema: dn.EmaParams
    cfg: object
    step: int = 0
    mixture: Optional[GmmSpec] = None


def save_checkpoint(path, params, ema, cfg, step=0, mixture: Optional[GmmSpec] = None):
    """Write params, EMA shadow, DM config and the training mixture atomically; returns path."""
    header = json.dumps({
        'architecture': params.architecture.to_dict(),
        'dm_config': cfg.to_dict(),
        'ema_decay': ema.decay,
        'mixture': None if mixture is None else mixture.to_dict(),
        'num_parameters': params.num_parameters,
        'step': int(step),
    }, sort_keys=True).encode('utf-8')
    payload = b''.join([
        MAGIC,
        struct.pack('<HI', FORMAT_VERSION, len(header)),
        header,
        params.theta.detach().numpy().astype('<f8').tobytes(),
        ema.theta_ema.detach().numpy().astype('<f8').tobytes(),
    ])
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, 'wb') as f:
        f.write(payload)
    os.replace(tmp, path)
    logger.info(f"Checkpoint with {params.num_parameters} parameters saved to {path}")
    return path


def _mixture(header, arch, path):
    raw = header.get('mixture')
    if raw is None:
        return None
    try:
        mixture = GmmSpec.from_dict(raw)
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointFormatError(f"{path}: invalid mixture in header ({e})")
    if mixture.num_components != arch.num_classes:
        raise CheckpointFormatError(f"{path}: {mixture.num_components} mixture components "
                                    f"for a network with {arch.num_classes} classes")
    return mixture


def load_checkpoint(path) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.
    Raises:
        FileNotFoundError, CheckpointFormatError
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with open(path, 'rb') as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint (bad magic)")
    if len(data) < 14:
        raise CheckpointFormatError(f"{path}: truncated header")
    version, header_len = struct.unpack('<HI', data[8:14])
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"Unsupported checkpoint version {version} in {path}")
    try:
        header = json.loads(data[14:14 + header_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: unreadable header ({e})")
    P = int(header['num_parameters'])
    body = data[14 + header_len:]
    if len(body) != 16 * P:
        raise CheckpointFormatError(f"{path}: expected {16 * P} payload bytes, found {len(body)}")
    arrays = np.frombuffer(body, dtype='<f8').reshape(2, P)
    arch = dn.ArchitectureSpec(**header['architecture'])
    params = dn.DenoiserParams(arch, torch.from_numpy(arrays[0].copy()))
    ema = dn.EmaParams(torch.from_numpy(arrays[1].copy()), header['ema_decay'])
    return Checkpoint(params, ema, config_from_dict(header['dm_config']), int(header['step']),
                      _mixture(header, arch, path))
