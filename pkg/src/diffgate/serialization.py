"""Little-endian binary envelopes for sparse masks (DGM1) and dense checkpoints (DGC1).

Header, both formats::

    4 bytes   magic, b"DGM1" or b"DGC1"
    u32       format version
    32 bytes  config hash (raw SHA-256 digest)
    u32       group count

Then per group, sorted by name::

    u32       name length, followed by the UTF-8 name
    u64       entry count
    DGM1:     entry count x (u64 flat index, f64 value)
    DGC1:     entry count x f64, the flattened array in C order

Mask entries are the kept positions of the frozen mask with their diff
values; a position absent from the file is masked out.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .diffnet import DiffSubnetwork, GroupDiff
from .errors import IncompatibleMaskError, MaskFormatError

MASK_MAGIC = b"DGM1"
CHECKPOINT_MAGIC = b"DGC1"
FORMAT_VERSION = 1
_ENTRY = np.dtype([("index", "<u8"), ("value", "<f8")])


def _hash_bytes(config_hash: str) -> bytes:
    raw = bytes.fromhex(config_hash)
    if len(raw) != 32:
        raise ValueError("config hash must be a 64-character SHA-256 hex digest")
    return raw


def _header(magic: bytes, config_hash: str, n_groups: int) -> bytes:
    return magic + struct.pack("<I", FORMAT_VERSION) + _hash_bytes(config_hash) + struct.pack("<I", n_groups)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise MaskFormatError(f"{self.path}: truncated file (wanted {n} bytes at offset {self.pos})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _read_envelope(path, magic: bytes, expected_hash: str | None):
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    found_magic = r.take(4)
    if found_magic != magic:
        raise MaskFormatError(f"{path}: bad magic {found_magic!r}, expected {magic!r}")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise MaskFormatError(f"{path}: unsupported format version {version}")
    found_hash = r.take(32).hex()
    if expected_hash is not None and found_hash != expected_hash:
        raise IncompatibleMaskError(expected_hash, found_hash)
    return r, found_hash, r.u32()


def _name(r: _Reader) -> str:
    n = r.u32()
    try:
        return r.take(n).decode("utf-8")
    except UnicodeDecodeError as e:
        raise MaskFormatError(f"{r.path}: group name is not UTF-8") from e


def save_mask(net: DiffSubnetwork, path, config_hash: str) -> None:
    if not net.frozen:
        raise MaskFormatError("only a pruned (frozen-mask) network can be saved as a mask")
    parts = [_header(MASK_MAGIC, config_hash, len(net.groups))]
    for gid in sorted(net.groups):
        mask = net.frozen_mask[gid].reshape(-1)
        idx = np.flatnonzero(mask)
        entries = np.empty(idx.size, dtype=_ENTRY)
        entries["index"] = idx
        entries["value"] = net.groups[gid].w.data.reshape(-1)[idx]
        name = gid.encode("utf-8")
        parts += [struct.pack("<I", len(name)), name, struct.pack("<Q", idx.size), entries.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def read_mask_header(path) -> str:
    return _read_envelope(path, MASK_MAGIC, None)[1]


def load_mask(path, shapes: Mapping[str, tuple[int, ...]], expected_hash: str | None = None) -> DiffSubnetwork:
    """Rebuild a frozen network; ``shapes`` gives the group shapes of the model."""
    r, _, n_groups = _read_envelope(path, MASK_MAGIC, expected_hash)
    groups, masks = {}, {}
    for _ in range(n_groups):
        gid = _name(r)
        if gid not in shapes:
            raise MaskFormatError(f"{path}: unknown group {gid!r}")
        count = r.u64()
        entries = np.frombuffer(r.take(count * _ENTRY.itemsize), dtype=_ENTRY)
        shape = tuple(shapes[gid])
        size = int(np.prod(shape))
        if count and int(entries["index"].max()) >= size:
            raise MaskFormatError(f"{path}: index out of range in group {gid!r}")
        mask = np.zeros(size)
        w = np.zeros(size)
        idx = entries["index"].astype(np.int64)
        mask[idx] = 1.0
        w[idx] = entries["value"]
        masks[gid] = mask.reshape(shape)
        groups[gid] = GroupDiff(T.Tensor(w.reshape(shape), requires_grad=True))
    if r.pos != len(r.buf):
        raise MaskFormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    excluded = tuple(g for g in shapes if g not in groups)
    return DiffSubnetwork(groups, frozen_mask=masks, excluded=excluded)


def save_checkpoint(params: Mapping[str, np.ndarray], path, config_hash: str) -> None:
    parts = [_header(CHECKPOINT_MAGIC, config_hash, len(params))]
    for gid in sorted(params):
        flat = np.ascontiguousarray(params[gid], dtype="<f8").reshape(-1)
        name = gid.encode("utf-8")
        parts += [struct.pack("<I", len(name)), name, struct.pack("<Q", flat.size), flat.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint_header(path) -> str:
    return _read_envelope(path, CHECKPOINT_MAGIC, None)[1]


def load_checkpoint(path, shapes: Mapping[str, tuple[int, ...]] | None = None,
                    expected_hash: str | None = None) -> dict[str, np.ndarray]:
    """Dense groups, reshaped with ``shapes`` when given (flat otherwise)."""
    r, _, n_groups = _read_envelope(path, CHECKPOINT_MAGIC, expected_hash)
    out = {}
    for _ in range(n_groups):
        gid = _name(r)
        count = r.u64()
        arr = np.frombuffer(r.take(count * 8), dtype="<f8").astype(np.float64)
        if shapes is not None:
            if gid not in shapes:
                raise MaskFormatError(f"{path}: unknown group {gid!r}")
            if int(np.prod(shapes[gid])) != count:
                raise MaskFormatError(f"{path}: group {gid!r} has {count} values, expected shape {shapes[gid]}")
            arr = arr.reshape(shapes[gid])
        arr.setflags(write=False)
        out[gid] = arr
    if r.pos != len(r.buf):
        raise MaskFormatError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    if shapes is not None and set(out) != set(shapes):
        missing = sorted(set(shapes) - set(out))
        raise MaskFormatError(f"{path}: missing groups {missing}")
    return out


def save_gate_state(net: DiffSubnetwork, path, config_hash: str) -> None:
    """Dense w and gate logits of an unpruned network (input to standalone pruning)."""
    if net.frozen:
        raise MaskFormatError("gate state is only defined before pruning")
    arrays = {}
    for gid, gd in net.groups.items():
        arrays[f"{gid}/w"] = gd.w.data
        arrays[f"{gid}/log_alpha"] = gd.gate.log_alpha.data
        if gd.group_gate is not None:
            arrays[f"{gid}/group_log_alpha"] = gd.group_gate.log_alpha.data.reshape(1)
    save_checkpoint(arrays, path, config_hash)


def load_gate_state(path, shapes: Mapping[str, tuple[int, ...]], expected_hash: str | None = None, *,
                    beta: float = 1.0, gamma: float = -0.1, zeta: float = 1.1,
                    penalty_combination: str = "additive") -> DiffSubnetwork:
    from .hardconcrete import HardConcreteGate

    flat = load_checkpoint(path, None, expected_hash)
    groups = {}
    structured = False
    for key in flat:
        gid = key.rsplit("/", 1)[0]
        if gid not in shapes:
            raise MaskFormatError(f"{path}: unknown group {gid!r}")
    for gid, shape in shapes.items():
        if f"{gid}/w" not in flat:
            continue
        try:
            w = flat[f"{gid}/w"].reshape(shape)
            la = flat[f"{gid}/log_alpha"].reshape(shape)
        except (KeyError, ValueError) as e:
            raise MaskFormatError(f"{path}: bad gate state for {gid!r}: {e}") from None
        gate = HardConcreteGate(T.Tensor(la.copy(), requires_grad=True), beta=beta, gamma=gamma, zeta=zeta)
        group_gate = None
        if f"{gid}/group_log_alpha" in flat:
            structured = True
            group_gate = HardConcreteGate(T.Tensor(flat[f"{gid}/group_log_alpha"].reshape(()).copy(), requires_grad=True),
                                          beta=beta, gamma=gamma, zeta=zeta)
        groups[gid] = GroupDiff(T.Tensor(w.copy(), requires_grad=True), gate, group_gate)
    excluded = tuple(g for g in shapes if g not in groups)
    return DiffSubnetwork(groups, structured=structured, penalty_combination=penalty_combination, excluded=excluded)
