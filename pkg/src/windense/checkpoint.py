"""Binary checkpoint files.

Layout: 6-byte magic ``WDNSE1``, uint32 little-endian header length, a JSON
header (architecture config, its sha256 digest, completed-epoch count, the
ordered parameter and running-stat manifests, a velocity flag), then raw
little-endian float64 arrays: parameters in manifest order, batch-norm
running stats, and optionally one velocity buffer per parameter.

The header JSON is serialized with sorted keys and fixed separators, so
save -> load -> save reproduces the file byte for byte.
"""

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .arch import ArchConfig, Network, build_network

MAGIC = b"WDNSE1"


def arch_digest(config: ArchConfig) -> str:
    text = "\n".join(f"{k}={v}" for k, v in sorted(asdict(config).items()))
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class CheckpointData:
    config: ArchConfig
    epoch: int
    params: Dict[str, np.ndarray]
    running: Dict[str, np.ndarray]
    velocities: Optional[List[np.ndarray]]


def _running_entries(network: Network) -> List[Tuple[str, np.ndarray]]:
    entries = []
    for name, bn in network.batchnorms():
        entries.append((f"{name}.running_mean", bn.running_mean))
        entries.append((f"{name}.running_var", bn.running_var))
    return entries


def save_checkpoint(path: str, network: Network, epoch: int = 0,
                    velocities: Optional[List[np.ndarray]] = None) -> None:
    params = network.parameters()
    running = _running_entries(network)
    header = {
        "arch": asdict(network.config),
        "digest": arch_digest(network.config),
        "epoch": int(epoch),
        "params": [[name, list(t.shape)] for name, t in params],
        "running": [[name, list(a.shape)] for name, a in running],
        "has_velocity": velocities is not None,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()

    blobs = [t.data for _, t in params] + [a for _, a in running]
    if velocities is not None:
        if len(velocities) != len(params):
            raise ValueError("save_checkpoint: one velocity buffer per parameter required")
        blobs += list(velocities)

    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for arr in blobs:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> CheckpointData:
    """Read and validate a checkpoint; raises ValueError on any corruption."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 4 or raw[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    (head_len,) = struct.unpack_from("<I", raw, len(MAGIC))
    head_start = len(MAGIC) + 4
    if head_start + head_len > len(raw):
        raise ValueError(f"{path}: truncated header")
    try:
        header = json.loads(raw[head_start:head_start + head_len])
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: unreadable header: {exc}") from exc

    config = ArchConfig(**header["arch"])
    if header["digest"] != arch_digest(config):
        raise ValueError(f"{path}: config digest mismatch")

    offset = head_start + head_len

    def take(shape) -> np.ndarray:
        nonlocal offset
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(raw):
            raise ValueError(f"{path}: truncated payload")
        arr = np.frombuffer(raw[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
        return arr

    params = {name: take(shape) for name, shape in header["params"]}
    running = {name: take(shape) for name, shape in header["running"]}
    velocities = None
    if header["has_velocity"]:
        velocities = [take(shape) for _, shape in header["params"]]
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return CheckpointData(config=config, epoch=int(header["epoch"]), params=params,
                          running=running, velocities=velocities)


def apply_to_network(data: CheckpointData, network: Network) -> None:
    """Copy checkpoint parameters and running stats into a compatible network."""
    if arch_digest(network.config) != arch_digest(data.config):
        raise ValueError("checkpoint does not match the network architecture")
    params = dict(network.parameters())
    if set(params) != set(data.params):
        raise ValueError("checkpoint parameter manifest mismatch")
    for name, arr in data.params.items():
        if params[name].shape != arr.shape:
            raise ValueError(f"checkpoint shape mismatch for {name}")
        params[name].data[...] = arr
    for name, bn in network.batchnorms():
        bn.running_mean[...] = data.running[f"{name}.running_mean"]
        bn.running_var[...] = data.running[f"{name}.running_var"]


def restore_network(data: CheckpointData) -> Network:
    net = build_network(data.config, init_seed=0)
    apply_to_network(data, net)
    return net
