"""Checkpoint container: ``manifest.json`` plus one little-endian float32 blob.

The same container stores full-precision models, quantized models and
calibration sets; ``kind`` in the manifest tells them apart.  Quantized
weights are stored as integer codes (exact in float32 up to 16 bits) with
their scales and zero-points kept in the manifest metadata as JSON numbers,
so dequantized weights reload bit-exactly.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import (PROJECTIONS, BlockWeights, CalibrationSet, Model, ModelConfig, OutlierSpec,
                    QuantBlock, QuantizedModel, QWeight, _frozen)
from .quant import QuantConfig, QuantParams, dequantize
from .reassembly import ReassemblyPlan

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
_LN = ("ln1_g", "ln1_b", "ln2_g", "ln2_b")


class CheckpointError(ValueError):
    """The container on disk is inconsistent, corrupt or of the wrong kind."""


def _atomic_dir_write(path: Path, files: Mapping[str, bytes]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    old = None
    try:
        for name, data in files.items():
            with open(tmp / name, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        if old is not None and old.exists() and not path.exists():
            os.replace(old, path)
        raise
    if old is not None:
        shutil.rmtree(old, ignore_errors=True)


def write_container(path, kind: str, tensors: Mapping[str, np.ndarray], config: dict | None = None,
                    metadata: dict | None = None) -> None:
    table, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.asarray(arr)
        if not np.all(np.isfinite(a)):
            raise CheckpointError(f"tensor {name!r} has non-finite values")
        raw = np.ascontiguousarray(a, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(a.shape), "dtype": "float32",
                      "byte_offset": offset, "byte_length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {"format_version": FORMAT_VERSION, "kind": kind, "config": config or {},
                "tensors": table, "blob": BLOB, "blob_sha256": hashlib.sha256(blob).hexdigest(),
                "metadata": metadata or {}}
    text = json.dumps(manifest, indent=1, sort_keys=True).encode()
    _atomic_dir_write(Path(path), {MANIFEST: text, BLOB: blob})


def read_container(path, kind: str | None = None, required: tuple[str, ...] = ()):
    """Return ``(manifest, {name: float64 array})`` after integrity checks."""
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable manifest {mpath}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"format_version {version!r} is not supported (expected {FORMAT_VERSION})")
    if kind is not None and manifest.get("kind") != kind:
        raise CheckpointError(f"expected a {kind!r} container, found {manifest.get('kind')!r}")
    bpath = path / manifest.get("blob", BLOB)
    if not bpath.is_file():
        raise FileNotFoundError(f"missing tensor blob {bpath}")
    blob = bpath.read_bytes()
    table = manifest.get("tensors", [])
    expected = sum(t["byte_length"] for t in table)
    if len(blob) != expected:
        raise CheckpointError(f"blob holds {len(blob)} bytes, manifest expects {expected} (truncated or padded)")
    if hashlib.sha256(blob).hexdigest() != manifest.get("blob_sha256"):
        raise CheckpointError("blob checksum does not match the manifest")
    tensors = {}
    for t in table:
        name, shape = t["name"], tuple(t["shape"])
        if t.get("dtype") != "float32":
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {t.get('dtype')!r}")
        n = int(np.prod(shape, dtype=np.int64))
        if t["byte_length"] != 4 * n or t["byte_offset"] + t["byte_length"] > len(blob):
            raise CheckpointError(f"tensor {name!r}: byte range inconsistent with shape {list(shape)}")
        a = np.frombuffer(blob, dtype="<f4", count=n, offset=t["byte_offset"]).reshape(shape)
        a = a.astype(np.float64)
        if not np.all(np.isfinite(a)):
            raise CheckpointError(f"tensor {name!r} has non-finite values")
        a.setflags(write=False)
        tensors[name] = a
    missing = [r for r in required if r not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensor {missing[0]!r}" +
                              (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
    return manifest, tensors


def _config_from(d: dict) -> ModelConfig:
    try:
        return ModelConfig(**d)
    except TypeError as exc:
        raise CheckpointError(f"bad model config in manifest: {exc}") from exc


def _check_shape(name: str, got: tuple, want: tuple) -> None:
    if got != want:
        raise CheckpointError(f"tensor {name!r} has shape {list(got)}, config implies {list(want)}")


def _block_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    m, f = cfg.d_model, cfg.d_ff
    shapes = {k: (m,) for k in _LN}
    shapes.update({f"w_{k}": (m, m) for k in ("q", "k", "v", "o")})
    shapes.update({"w_gate": (m, f), "w_up": (m, f), "w_down": (f, m)})
    return shapes


# --- full-precision models ---------------------------------------------------


def save_checkpoint(model: Model, path) -> None:
    tensors = {f"layers.{i}.{k}": v for i, b in enumerate(model.blocks) for k, v in b.tensors().items()}
    write_container(path, "model", tensors, model.config.to_dict())


def load_checkpoint(path) -> Model:
    manifest = _peek(path)
    cfg = _config_from(manifest.get("config", {}))
    shapes = _block_shapes(cfg)
    names = tuple(f"layers.{i}.{k}" for i in range(cfg.n_layers) for k in shapes)
    _, t = read_container(path, "model", names)
    blocks = []
    for i in range(cfg.n_layers):
        get = {}
        for k, shp in shapes.items():
            a = t[f"layers.{i}.{k}"]
            _check_shape(f"layers.{i}.{k}", a.shape, shp)
            get[k] = a
        blocks.append(BlockWeights(cfg.n_heads, get["ln1_g"], get["ln1_b"], get["ln2_g"], get["ln2_b"],
                                   {p: get[f"w_{p}"] for p in PROJECTIONS}))
    return Model(cfg, blocks)


def _peek(path) -> dict:
    mpath = Path(path) / MANIFEST
    if not mpath.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    try:
        return json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable manifest {mpath}: {exc}") from exc


# --- quantized models --------------------------------------------------------


def save_quantized(qmodel: QuantizedModel, path, extra_metadata: dict | None = None) -> None:
    tensors, layers = {}, []
    for i, b in enumerate(qmodel.blocks):
        for k in _LN:
            tensors[f"layers.{i}.{k}"] = getattr(b, k)
        qparams = {}
        for name in PROJECTIONS:
            qw = b.weights[name]
            if qw.codes is None:
                tensors[f"layers.{i}.w_{name}"] = qw.deq
            else:
                tensors[f"layers.{i}.codes_{name}"] = qw.codes
                qparams[name] = qw.params.to_dict()
        layers.append({"plans": {s: p.to_dict() for s, p in b.plans.items()}, "quant_params": qparams})
    q = qmodel.quant
    meta = {"quant": {"w_bits": q.w_bits, "a_bits": q.a_bits,
                      "weight_granularity": q.weight_granularity, "act_granularity": q.act_granularity},
            "layers": layers, **(extra_metadata or {})}
    write_container(path, "quantized_model", tensors, qmodel.config.to_dict(), meta)


def _params_from(d: dict, shape: tuple) -> QuantParams:
    alpha, beta = np.asarray(d["alpha"], dtype=np.float64), np.asarray(d["beta"], dtype=np.float64)
    if d["granularity"] == "per_channel":
        alpha, beta = alpha.reshape(1, shape[1]), beta.reshape(1, shape[1])
    elif d["granularity"] == "per_token":
        alpha, beta = alpha.reshape(shape[0], 1), beta.reshape(shape[0], 1)
    else:
        alpha, beta = alpha.reshape(()), beta.reshape(())
    return QuantParams(alpha, beta, int(d["bits"]), d["granularity"])


def load_quantized(path) -> QuantizedModel:
    manifest, t = read_container(path, "quantized_model")
    cfg = _config_from(manifest.get("config", {}))
    meta = manifest.get("metadata", {})
    qc = QuantConfig(**meta["quant"])
    layers = meta.get("layers", [])
    if len(layers) != cfg.n_layers:
        raise CheckpointError(f"metadata lists {len(layers)} layers, config has {cfg.n_layers}")
    shapes = _block_shapes(cfg)
    blocks = []
    for i, layer in enumerate(layers):
        ln = {}
        for k in _LN:
            key = f"layers.{i}.{k}"
            if key not in t:
                raise CheckpointError(f"checkpoint lacks tensor {key!r}")
            _check_shape(key, t[key].shape, shapes[k])
            ln[k] = t[key]
        weights = {}
        for name in PROJECTIONS:
            ckey, wkey = f"layers.{i}.codes_{name}", f"layers.{i}.w_{name}"
            if ckey in t:
                _check_shape(ckey, t[ckey].shape, shapes[f"w_{name}"])
                codes = t[ckey].astype(np.int64)
                p = _params_from(layer["quant_params"][name], codes.shape)
                try:
                    deq = dequantize(codes, p)
                except ValueError as exc:
                    raise CheckpointError(f"tensor {ckey!r}: {exc}") from exc
                weights[name] = QWeight(_frozen(deq), codes, p)
            elif wkey in t:
                _check_shape(wkey, t[wkey].shape, shapes[f"w_{name}"])
                weights[name] = QWeight(t[wkey])
            else:
                raise CheckpointError(f"checkpoint lacks tensor {ckey!r}")
        plans = {s: ReassemblyPlan.from_dict(d) for s, d in layer["plans"].items()}
        blocks.append(QuantBlock(cfg.n_heads, ln["ln1_g"], ln["ln1_b"], ln["ln2_g"], ln["ln2_b"],
                                 plans, weights, qc))
    return QuantizedModel(cfg, qc, blocks)


# --- calibration sets ----------------------------------------------------------


def save_calibration(calib: CalibrationSet, path, config: ModelConfig | None = None) -> None:
    tensors = {f"sample.{i:04d}": s for i, s in enumerate(calib.samples)}
    meta = {"seed": calib.seed, "n_samples": len(calib.samples),
            "outliers": calib.outliers.to_dict() if calib.outliers else None, **calib.meta}
    write_container(path, "calibration", tensors, config.to_dict() if config else {}, meta)


def load_calibration(path) -> CalibrationSet:
    manifest = _peek(path)
    n = manifest.get("metadata", {}).get("n_samples", 0)
    manifest, t = read_container(path, "calibration", tuple(f"sample.{i:04d}" for i in range(n)))
    meta = dict(manifest.get("metadata", {}))
    seed = meta.pop("seed", 0)
    meta.pop("n_samples", None)
    o = meta.pop("outliers", None)
    outliers = OutlierSpec(tuple(o["channels"]), o["factor"]) if o else None
    samples = [t[f"sample.{i:04d}"] for i in range(n)]
    try:
        return CalibrationSet(samples, seed, outliers, meta)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
