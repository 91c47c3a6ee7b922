"""Binary model container.

Layout (all integers little-endian)::

    b"AERD"                      magic
    u32   version                (1)
    u16   len, utf-8             model kind tag
    u32   len, utf-8 JSON        metadata (architecture, scalars)
    u32   tensor count
    per tensor:
        u16 len, utf-8           name
        u8                       dtype code (1 = f32, 2 = f64, 3 = i64)
        u8                       ndim
        u64 * ndim               dims
        raw little-endian data, row-major
    u32   CRC-32 of every byte between the version field and here
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import classifiers, elm, scnn
from .errors import FormatError

MAGIC = b"AERD"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}

REQUIRED_TENSORS = {
    "helm": ("ae1.beta", "ae1.scale", "ae2.beta", "ae2.scale", "clf.W", "clf.b", "clf.beta"),
    "scnn_svm": ("svm.w", "svm.b"),
    "external_svm": ("svm.w", "svm.b"),
    "scnn_softmax": (),
}


@dataclass
class Container:
    kind: str
    meta: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)


def _code_for(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt.kind == "f":
        return 1 if dt.itemsize == 4 else 2
    if dt.kind in "iu":
        return 3
    raise FormatError(f"unsupported tensor dtype {arr.dtype}")


def encode(c: Container) -> bytes:
    body = bytearray()
    kind = c.kind.encode()
    body += struct.pack("<H", len(kind)) + kind
    meta = json.dumps(c.meta, sort_keys=True).encode()
    body += struct.pack("<I", len(meta)) + meta
    body += struct.pack("<I", len(c.tensors))
    for name, arr in c.tensors.items():
        arr = np.asarray(arr)
        code = _code_for(arr)
        data = np.ascontiguousarray(arr, dtype=DTYPES[code])
        key = name.encode()
        body += struct.pack("<H", len(key)) + key
        body += struct.pack("<BB", code, data.ndim)
        body += struct.pack(f"<{data.ndim}Q", *data.shape)
        body += data.tobytes()
    head = MAGIC + struct.pack("<I", VERSION)
    return head + bytes(body) + struct.pack("<I", zlib.crc32(body))


def decode(raw: bytes) -> Container:
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise FormatError("not a model container (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    body = raw[8:-4]
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(body) != crc:
        raise FormatError("container checksum mismatch")
    try:
        pos = 0
        (n,) = struct.unpack_from("<H", body, pos)
        pos += 2
        kind = body[pos:pos + n].decode()
        pos += n
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        meta = json.loads(body[pos:pos + n].decode())
        pos += n
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + n].decode()
            pos += n
            code, ndim = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            dt = DTYPES[code]
            size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + size > len(body):
                raise FormatError(f"tensor {name} runs past the end of the container")
            tensors[name] = np.frombuffer(body[pos:pos + size], dtype=dt).reshape(dims).copy()
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt container: {exc}") from exc
    if pos != len(body):
        raise FormatError("trailing bytes in container")
    missing = [t for t in REQUIRED_TENSORS.get(kind, ()) if t not in tensors]
    if kind not in REQUIRED_TENSORS:
        raise FormatError(f"unknown model kind {kind!r}")
    if missing:
        raise FormatError(f"{kind} container lacks tensors {missing}")
    return Container(kind, meta, tensors)


def write_container(c: Container, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(c))
    os.replace(tmp, path)


def read_container(path) -> Container:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read model container {path}: {exc}") from exc
    return decode(raw)


# -- model <-> container -----------------------------------------------------

def _net_tensors(net: scnn.CnnNetwork) -> dict:
    return {name: net.params[name] for name in net.arch.param_names()}


def _net_from(c: Container) -> scnn.CnnNetwork:
    arch = scnn.CnnArchitecture.parse(c.meta["arch"])
    params = {}
    for name, shape in arch.param_shapes().items():
        if name not in c.tensors:
            raise FormatError(f"container lacks network tensor {name}")
        if c.tensors[name].shape != shape:
            raise FormatError(f"tensor {name} has shape {c.tensors[name].shape}, architecture needs {shape}")
        params[name] = c.tensors[name].astype(np.float64)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    return scnn.CnnNetwork(arch, params, velocity, list(c.meta.get("loss_history", [])))


def _svm_tensors(svm: classifiers.SvmModel) -> dict:
    return {"svm.w": svm.w, "svm.b": np.array([svm.b])}


def _svm_from(c: Container) -> classifiers.SvmModel:
    return classifiers.SvmModel(c.tensors["svm.w"].astype(np.float64), float(c.tensors["svm.b"][0]),
                                float(c.meta["svm_c"]))


def to_container(head) -> Container:
    kind = head.kind
    if kind == "scnn_softmax":
        net = head.net
        return Container(kind, {"arch": net.arch.describe(), "loss_history": net.loss_history},
                         _net_tensors(net))
    if kind == "scnn_svm":
        net = head.net
        tensors = _net_tensors(net)
        tensors.update(_svm_tensors(head.svm))
        return Container(kind, {"arch": net.arch.describe(), "loss_history": net.loss_history,
                                "svm_c": head.svm.c}, tensors)
    if kind == "external_svm":
        return Container(kind, {"svm_c": head.svm.c, "patch_size": head.patch_size},
                         _svm_tensors(head.svm))
    if kind == "helm":
        m = head.model
        clf = m.classifier
        meta = {"lambda_reg": clf.lambda_reg, "seed": m.seed, "clf_seed": clf.layer.seed,
                "ae1_l1_weight": m.ae1.l1_weight, "ae1_fista_iters": m.ae1.fista_iters,
                "ae2_l1_weight": m.ae2.l1_weight, "ae2_fista_iters": m.ae2.fista_iters}
        meta.update({f"info.{k}": v for k, v in m.meta.items()})
        tensors = {"ae1.beta": m.ae1.beta, "ae1.scale": m.scale1,
                   "ae2.beta": m.ae2.beta, "ae2.scale": m.scale2,
                   "clf.W": clf.layer.W, "clf.b": clf.layer.b, "clf.beta": clf.beta}
        return Container(kind, meta, tensors)
    raise FormatError(f"cannot serialise classifier kind {kind!r}")


def from_container(c: Container):
    if c.kind == "scnn_softmax":
        return classifiers.SoftmaxHead(_net_from(c))
    if c.kind == "scnn_svm":
        return classifiers.ScnnSvmHead(_net_from(c), _svm_from(c))
    if c.kind == "external_svm":
        return classifiers.ExternalSvmHead(_svm_from(c), patch_size=c.meta.get("patch_size"))
    t, meta = c.tensors, c.meta
    ae1 = elm.SparseAutoencoder(t["ae1.beta"], meta["ae1_l1_weight"], meta["ae1_fista_iters"])
    ae2 = elm.SparseAutoencoder(t["ae2.beta"], meta["ae2_l1_weight"], meta["ae2_fista_iters"])
    if t["ae2.beta"].shape[1] != t["ae1.beta"].shape[0] or t["clf.W"].shape[1] != t["ae2.beta"].shape[0]:
        raise FormatError("helm container layer sizes do not chain")
    layer = elm.RandomLayer(t["clf.W"], t["clf.b"], meta["clf_seed"])
    clf = elm.ElmModel(layer, t["clf.beta"], meta["lambda_reg"])
    info = {k[5:]: v for k, v in meta.items() if k.startswith("info.")}
    return classifiers.HelmHead(elm.HelmModel(ae1, t["ae1.scale"], ae2, t["ae2.scale"], clf,
                                              meta["seed"], info))


def save_model(head, path) -> None:
    write_container(to_container(head), path)


def load_model(path):
    return from_container(read_container(path))
