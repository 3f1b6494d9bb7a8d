"""Binary checkpoints of a full training state.

Layout (all integers little-endian)::

    b"SSGF"  u32 version
    u64 metadata length, metadata as sorted-key UTF-8 JSON
    u32 tensor count, then per tensor:
        u16 name length, name, u8 dtype code, u8 ndim, ndim * u64 extents, raw values
    u32 CRC32 of everything above

Loading parses and validates the whole file before any state object is
built, so a bad file never yields a half-restored state.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .nn import Discriminator, Generator, NetConfig, SpectralNormState, init_params
from .tensor import BatchNormState, Tensor
from .trainer import PRESETS, Adam, AdamSlot, HyperParams, TrainState

MAGIC = b"SSGF"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {dt: code for code, dt in _DTYPES.items()}


class CheckpointError(ValueError):
    """Raised for corrupt, truncated or incompatible checkpoint files."""


# ---------------------------------------------------------------------------
# raw format
# ---------------------------------------------------------------------------

def encode(meta: dict, tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    parts += [struct.pack("<Q", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", _CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    if len(buf) < 12:
        raise CheckpointError("checkpoint is truncated")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint is corrupt or truncated (checksum mismatch)")
    r = _Reader(body)
    r.take(8)
    (n_meta,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(n_meta).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint metadata: {exc}") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n_name,) = r.unpack("<H")
        name = r.take(n_name).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = r.unpack(f"<{ndim}Q")
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).copy()
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    return meta, tensors


# ---------------------------------------------------------------------------
# train state <-> (meta, tensors)
# ---------------------------------------------------------------------------

def _flatten(state: TrainState) -> tuple[dict, dict[str, np.ndarray]]:
    tensors: dict[str, np.ndarray] = {}
    adam_steps: dict[str, dict[str, int]] = {}

    def put_disc(prefix: str, dnet: Discriminator) -> None:
        for name, p in dnet.params.items():
            tensors[f"{prefix}/param/{name}"] = p.data
        for name, s in dnet.sn.items():
            tensors[f"{prefix}/sn_u/{name}"] = s.u
            tensors[f"{prefix}/sn_sigma/{name}"] = np.array(s.sigma, dtype=np.float64)

    def put_adam(prefix: str, opt: Adam) -> None:
        adam_steps[prefix] = {}
        for name, slot in opt.slots.items():
            tensors[f"{prefix}/m/{name}"] = slot.m
            tensors[f"{prefix}/v/{name}"] = slot.v
            adam_steps[prefix][name] = slot.step

    put_disc("D", state.discriminator)
    put_adam("optD", state.opt_d)
    if state.generator is not None:
        for name, p in state.generator.params.items():
            tensors[f"G/param/{name}"] = p.data
        for name, bn in state.generator.bn.items():
            tensors[f"G/bn_mean/{name}"] = bn.running_mean
            tensors[f"G/bn_var/{name}"] = bn.running_var
        put_adam("optG", state.opt_g)
    if state.frozen is not None:
        put_disc("D1", state.frozen)

    meta = {
        "config": state.config.to_dict(),
        "hp": state.hp.to_dict(),
        "preset": state.preset,
        "stage": state.stage,
        "counters": {"t1": state.t1, "t2": state.t2, "g_updates": state.g_updates,
                     "d_updates": state.d_updates},
        "has_generator": state.generator is not None,
        "has_frozen": state.frozen is not None,
        "adam_steps": adam_steps,
        "rng": state.rng.bit_generator.state,
    }
    return meta, tensors


def _check_shape(name: str, arr: np.ndarray, like: np.ndarray) -> np.ndarray:
    if arr.shape != like.shape:
        raise CheckpointError(f"shape mismatch for {name}: file {arr.shape}, config {like.shape}")
    if arr.dtype != like.dtype:
        raise CheckpointError(f"dtype mismatch for {name}: file {arr.dtype}, config {like.dtype}")
    return arr


def _rebuild(meta: dict, tensors: dict[str, np.ndarray]) -> TrainState:
    try:
        config = NetConfig(**meta["config"])
        hp = HyperParams.from_dict(meta["hp"])
        preset = meta["preset"]
        counters = meta["counters"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"incomplete checkpoint metadata: {exc}") from None
    if preset not in PRESETS:
        raise CheckpointError(f"unknown preset {preset!r} in checkpoint")
    try:
        config.validate()
    except ValueError as exc:
        raise CheckpointError(f"invalid config in checkpoint: {exc}") from None
    template_g, template_d = init_params(config, 0)
    used: set[str] = set()

    def get(name: str, like: np.ndarray) -> np.ndarray:
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name}")
        used.add(name)
        return _check_shape(name, tensors[name], like)

    def get_disc(prefix: str, trainable: bool) -> Discriminator:
        params = {k: Tensor(get(f"{prefix}/param/{k}", p.data), requires_grad=trainable)
                  for k, p in template_d.params.items()}
        sn = {}
        for k, s in template_d.sn.items():
            sigma = get(f"{prefix}/sn_sigma/{k}", np.array(0.0))
            sn[k] = SpectralNormState(get(f"{prefix}/sn_u/{k}", s.u), float(sigma))
        return Discriminator(config, params, sn)

    def get_adam(prefix: str, params: dict[str, Tensor]) -> Adam:
        opt = Adam(hp.lr, hp.adam_beta1, hp.adam_beta2, hp.adam_eps)
        for name, step in meta["adam_steps"].get(prefix, {}).items():
            if name not in params:
                raise CheckpointError(f"optimizer state for unknown parameter {name}")
            like = params[name].data
            opt.slots[name] = AdamSlot(get(f"{prefix}/m/{name}", like),
                                       get(f"{prefix}/v/{name}", like), int(step))
        return opt

    disc = get_disc("D", True)
    opt_d = get_adam("optD", disc.params)
    gen = opt_g = None
    if meta.get("has_generator"):
        gparams = {k: Tensor(get(f"G/param/{k}", p.data), requires_grad=True)
                   for k, p in template_g.params.items()}
        bn = {}
        for k, b in template_g.bn.items():
            st = BatchNormState(len(b.running_mean), b.running_mean.dtype)
            st.running_mean = get(f"G/bn_mean/{k}", b.running_mean)
            st.running_var = get(f"G/bn_var/{k}", b.running_var)
            bn[k] = st
        gen = Generator(config, gparams, bn)
        opt_g = get_adam("optG", gparams)
    frozen = get_disc("D1", False) if meta.get("has_frozen") else None
    extra = set(tensors) - used
    if extra:
        raise CheckpointError(f"unexpected tensors in checkpoint: {sorted(extra)[:5]}")

    rng = np.random.default_rng()
    try:
        rng.bit_generator.state = meta["rng"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad rng state: {exc}") from None
    return TrainState(
        config=config, hp=hp, preset=preset, generator=gen, discriminator=disc,
        opt_g=opt_g, opt_d=opt_d, rng=rng, stage=meta["stage"],
        t1=counters["t1"], t2=counters["t2"], g_updates=counters["g_updates"],
        d_updates=counters["d_updates"], frozen=frozen,
    )


def save_checkpoint(path: str | Path, state: TrainState) -> Path:
    """Write atomically: the target is replaced only once the full file exists."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(*_flatten(state))
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path, expect: NetConfig | None = None) -> TrainState:
    """Read a checkpoint; ``expect`` additionally pins the network config."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    state = _rebuild(*decode(buf))
    if expect is not None and expect.to_dict() != state.config.to_dict():
        diff = {k: (v, state.config.to_dict()[k]) for k, v in expect.to_dict().items()
                if state.config.to_dict()[k] != v}
        raise CheckpointError(f"checkpoint config differs from expected: {diff}")
    return state
