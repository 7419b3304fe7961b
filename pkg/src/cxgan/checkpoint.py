"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"CXGANCKP" | u32 version | u32 n_arrays
    n_arrays x ( u16 name_len | name utf-8 | u8 ndim | ndim x u32 dim | float32 data )
    u64 text_len | JSON text (specs, scheme, epoch, optimizer groups, rng, config)
    32-byte SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

from .core import CheckpointError, LossWeights
from .nets import (
    Discriminator,
    DiscriminatorSpec,
    Generator,
    GeneratorRole,
    GeneratorSpec,
    ModelBundle,
    Scheme,
)

MAGIC = b"CXGANCKP"
VERSION = 1


def _write_arrays(buf: io.BytesIO, arrays: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def _read_arrays(view: memoryview, pos: int) -> tuple[dict[str, np.ndarray], int]:
    (n,) = struct.unpack_from("<I", view, pos)
    pos += 4
    out = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + ln]).decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<B", view, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(view, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
        pos += 4 * count
    return out, pos


def encode(arrays: dict[str, np.ndarray], meta: dict[str, Any]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _write_arrays(buf, arrays)
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(text)))
    buf.write(text)
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(blob) < len(MAGIC) + 4 + 32 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"not a checkpoint: bad magic header {blob[:len(MAGIC)]!r}")
    (version,) = struct.unpack_from("<I", blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (reader is version {VERSION})")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"checkpoint (version {version}) is corrupt: checksum mismatch")
    view = memoryview(body)
    try:
        arrays, pos = _read_arrays(view, len(MAGIC) + 4)
        (ln,) = struct.unpack_from("<Q", view, pos)
        meta = json.loads(bytes(view[pos + 8: pos + 8 + ln]).decode("utf-8"))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"checkpoint (version {version}) is malformed: {exc}") from exc
    return arrays, meta


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _tensor_state(bundle: ModelBundle) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    arrays: dict[str, np.ndarray] = {}
    opt_meta: dict[str, Any] = {}
    for name, net in bundle.networks().items():
        for k, v in net.state_dict().items():
            arrays[f"net/{name}/{k}"] = v.detach().cpu().numpy()
    for name, sd in bundle.state.get("optimizers", {}).items():
        groups = sd["param_groups"]
        scalars = {}
        for idx, st in sd["state"].items():
            for k, v in st.items():
                if torch.is_tensor(v):
                    arrays[f"opt/{name}/{idx}/{k}"] = v.detach().cpu().numpy()
                else:
                    scalars[f"{idx}/{k}"] = v
        opt_meta[name] = {"param_groups": groups, "scalars": scalars}
    for name, t in bundle.state.get("buffers", {}).items():
        arrays[f"buf/{name}"] = t.detach().cpu().numpy()
    return arrays, opt_meta


def save_checkpoint(bundle: ModelBundle, path, config: Optional[dict] = None) -> Path:
    path = Path(path)
    arrays, opt_meta = _tensor_state(bundle)
    extra = {k: v for k, v in bundle.state.items() if k not in ("optimizers", "buffers")}
    meta = {
        "scheme": bundle.scheme.value,
        "epoch": bundle.epoch,
        "trained": bundle.trained,
        "weights": asdict(bundle.weights),
        "generator_spec": asdict(bundle.forward_generator.spec),
        "discriminator_spec": asdict(bundle.disc_neg.spec),
        "optimizers": opt_meta,
        "state": extra,
        "config": config if config is not None else bundle.state.get("config"),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(arrays, meta))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> ModelBundle:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    arrays, meta = decode(blob)
    try:
        scheme = Scheme(meta["scheme"])
        gspec = GeneratorSpec(**meta["generator_spec"])
        dspec = DiscriminatorSpec(**meta["discriminator_spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint {path} (version {VERSION}) lacks valid specs: {exc}") from exc
    fwd_role = GeneratorRole.POS_TO_NEG if scheme is Scheme.CASCADED_CI else GeneratorRole.POS_TO_MAP
    nets: dict[str, Any] = {
        "forward_generator": Generator(gspec, fwd_role),
        "disc_neg": Discriminator(dspec),
    }
    if scheme is not Scheme.CASCADED_RGAN:
        nets["backward_generator"] = Generator(gspec, GeneratorRole.NEG_TO_POS)
        nets["disc_pos"] = Discriminator(dspec)
    for name, net in nets.items():
        prefix = f"net/{name}/"
        sd = {k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)}
        try:
            net.load_state_dict(sd, strict=True)
        except RuntimeError as exc:
            raise CheckpointError(f"checkpoint {path}: parameters for {name} do not match: {exc}") from exc
    state: dict[str, Any] = dict(meta.get("state") or {})
    optimizers = {}
    for name, om in (meta.get("optimizers") or {}).items():
        prefix = f"opt/{name}/"
        st: dict[int, dict[str, Any]] = {}
        for k, v in arrays.items():
            if k.startswith(prefix):
                idx, key = k[len(prefix):].split("/", 1)
                st.setdefault(int(idx), {})[key] = torch.from_numpy(v)
        for k, v in om.get("scalars", {}).items():
            idx, key = k.split("/", 1)
            st.setdefault(int(idx), {})[key] = v
        optimizers[name] = {"state": st, "param_groups": om["param_groups"]}
    if optimizers:
        state["optimizers"] = optimizers
    buffers = {k[len("buf/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("buf/")}
    if buffers:
        state["buffers"] = buffers
    if meta.get("config") is not None:
        state["config"] = meta["config"]
    return ModelBundle(
        scheme=scheme,
        forward_generator=nets["forward_generator"],
        disc_neg=nets["disc_neg"],
        backward_generator=nets.get("backward_generator"),
        disc_pos=nets.get("disc_pos"),
        weights=LossWeights(**meta["weights"]),
        epoch=int(meta["epoch"]),
        trained=bool(meta["trained"]),
        state=state,
    )
