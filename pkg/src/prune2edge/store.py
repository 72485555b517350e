"""On-disk formats: model files, dataset files and their sidecars, manifests.

Model files are canonical JSON (sorted keys, compact separators) with every
tensor payload base64-encoded little-endian.  Each weight tensor is written
with whichever encoding is smaller for its dtype: dense, or sparse COO
(u32 flat indices followed by values).  For a pruned tensor the COO indices
list the unmasked positions, so the mask round-trips for free.

Datasets are a small binary container (magic ``P2ED``) plus a JSON sidecar
recording the train / pruning / test split boundaries.
"""
from __future__ import annotations

import base64
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptFileError, VersionError
from .nncore import LayerSpec, Model
from .quantizer import ROUNDING_MODE, QuantizedTensor, QuantParams, dequantize

FORMAT_VERSION = 1
DATASET_MAGIC = b"P2ED"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIII")
_DTYPES = {"f32": np.dtype("<f4"), "i8": np.dtype("i1"), "u32": np.dtype("<u4")}


# -- helpers -----------------------------------------------------------------

def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write(path, json.dumps(obj, sort_keys=True, indent=2).encode() + b"\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{path}: invalid JSON ({exc})") from exc


def _b64(arr: np.ndarray) -> str:
    return base64.b64encode(arr.tobytes()).decode("ascii")


def _unb64(text: str, dtype: np.dtype) -> np.ndarray:
    try:
        raw = base64.b64decode(text, validate=True)
    except (ValueError, TypeError) as exc:
        raise CorruptFileError(f"bad base64 payload: {exc}") from exc
    if len(raw) % dtype.itemsize:
        raise CorruptFileError("payload length is not a multiple of the element size")
    return np.frombuffer(raw, dtype=dtype)


# -- model files -------------------------------------------------------------

def _encode_tensor(name, values: np.ndarray, dtype: str, *, keep=None, quant=None,
                   allow_sparse=True) -> dict:
    """``keep`` (flat bool array) selects the entries a sparse encoding stores."""
    values = np.ascontiguousarray(values.astype(_DTYPES[dtype]))
    flat = values.ravel()
    entry = {"name": name, "shape": list(values.shape), "dtype": dtype}
    if quant is not None:
        entry["quant"] = {"scale": quant.scale, "zero_point": quant.zero_point}
    if keep is None:
        keep = flat != 0
    nnz = int(np.count_nonzero(keep))
    sparse_bytes = nnz * (4 + _DTYPES[dtype].itemsize)
    dense_bytes = flat.size * _DTYPES[dtype].itemsize
    if allow_sparse and sparse_bytes < dense_bytes:
        idx = np.flatnonzero(keep).astype("<u4")
        entry["encoding"] = "sparse-coo-b64"
        entry["nnz"] = nnz
        entry["data"] = base64.b64encode(idx.tobytes() + flat[keep].tobytes()).decode("ascii")
    else:
        entry["encoding"] = "dense-b64"
        entry["data"] = _b64(flat)
    return entry


def _decode_tensor(entry: dict):
    try:
        shape = tuple(int(d) for d in entry["shape"])
        dtype = _DTYPES[entry["dtype"]]
        encoding = entry["encoding"]
        data = entry["data"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"malformed tensor entry: {exc}") from exc
    size = int(np.prod(shape)) if shape else 1
    if encoding == "dense-b64":
        flat = _unb64(data, dtype)
        if flat.size != size:
            raise CorruptFileError(f"{entry['name']}: {flat.size} values for shape {shape}")
        return flat.reshape(shape).copy(), None
    if encoding == "sparse-coo-b64":
        try:
            raw = base64.b64decode(data, validate=True)
            nnz = int(entry["nnz"])
        except (KeyError, ValueError, TypeError) as exc:
            raise CorruptFileError(f"{entry.get('name')}: bad sparse payload") from exc
        if nnz < 0 or len(raw) != nnz * (4 + dtype.itemsize):
            raise CorruptFileError(f"{entry['name']}: sparse payload length mismatch")
        idx = np.frombuffer(raw[:4 * nnz], dtype="<u4").astype(np.int64)
        vals = np.frombuffer(raw[4 * nnz:], dtype=dtype)
        if nnz and (np.any(np.diff(idx) <= 0) or idx[-1] >= size):
            raise CorruptFileError(f"{entry['name']}: sparse indices not strictly increasing / in range")
        flat = np.zeros(size, dtype=dtype)
        flat[idx] = vals
        keep = np.zeros(size, dtype=np.uint8)
        keep[idx] = 1
        return flat.reshape(shape), keep.reshape(shape)
    raise CorruptFileError(f"unknown encoding {encoding!r}")


def model_to_dict(model: Model, *, dense_f32: bool = False) -> dict:
    """JSON envelope for ``model``.

    ``dense_f32=True`` writes the uncompressed reference form (all tensors
    dense float32, no quant params, no masks) used to measure compression.
    """
    model.validate()
    tensors = []
    for k, w in enumerate(model.weights):
        name = f"layer{k}.weight"
        mask = None if model.masks is None else model.masks[k]
        if dense_f32:
            tensors.append(_encode_tensor(name, w, "f32", allow_sparse=False))
            continue
        if model.is_quantized:
            q: QuantizedTensor = model.qweights[k]
            values, dtype, quant = q.data, "i8", q.params
        else:
            values, dtype, quant = w, "f32", None
        keep = None if mask is None else mask.ravel() == 1
        entry = _encode_tensor(name, values, dtype, keep=keep, quant=quant)
        if mask is not None:
            entry["masked"] = True
            if entry["encoding"] == "dense-b64" and not np.array_equal(mask.ravel() == 1, values.ravel() != 0):
                # mask not recoverable from the values; store it explicitly
                tensors.append(_encode_tensor(f"layer{k}.mask", mask, "i8", allow_sparse=False))
        tensors.append(entry)
    for k, b in enumerate(model.biases):
        tensors.append(_encode_tensor(f"layer{k}.bias", b, "f32", allow_sparse=False))

    doc = {
        "format_version": FORMAT_VERSION,
        "arch": [{"in_dim": s.in_dim, "out_dim": s.out_dim, "activation": s.activation}
                 for s in model.layers],
        "tensors": tensors,
        "metadata": model.metadata,
        "rounding_mode": ROUNDING_MODE,
    }
    if model.act_params is not None and not dense_f32:
        doc["activation_quant"] = [{"scale": p.scale, "zero_point": p.zero_point}
                                   for p in model.act_params]
    return doc


def model_bytes(model: Model, *, dense_f32: bool = False) -> bytes:
    return canonical_json(model_to_dict(model, dense_f32=dense_f32))


def save_model(model: Model, path) -> int:
    """Write ``model`` atomically; returns the file size in bytes."""
    data = model_bytes(model)
    try:
        atomic_write(path, data)
    except OSError as exc:
        raise ConfigError(f"cannot write {path}: {exc}") from exc
    return len(data)


def model_from_dict(doc: dict) -> Model:
    if not isinstance(doc, dict):
        raise CorruptFileError("model document is not an object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported model format_version {version!r}")
    if doc.get("rounding_mode", ROUNDING_MODE) != ROUNDING_MODE:
        raise CorruptFileError(f"unsupported rounding mode {doc.get('rounding_mode')!r}")
    try:
        layers = [LayerSpec(int(a["in_dim"]), int(a["out_dim"]), a["activation"]) for a in doc["arch"]]
        entries = {e["name"]: e for e in doc["tensors"]}
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptFileError(f"malformed model document: {exc}") from exc

    weights, biases, masks, qweights = [], [], [], []
    any_mask = False
    quantized = None
    for k in range(len(layers)):
        try:
            wentry, bentry = entries[f"layer{k}.weight"], entries[f"layer{k}.bias"]
        except KeyError as exc:
            raise CorruptFileError(f"missing tensor {exc}") from exc
        values, keep = _decode_tensor(wentry)
        bias, _ = _decode_tensor(bentry)
        is_q = "quant" in wentry
        if quantized is None:
            quantized = is_q
        elif quantized != is_q:
            raise CorruptFileError("mixed quantized and float weight tensors")
        if is_q:
            if wentry["dtype"] != "i8":
                raise CorruptFileError("quantized tensor must be i8")
            try:
                params = QuantParams(float(wentry["quant"]["scale"]), int(wentry["quant"]["zero_point"]), "weight")
            except (KeyError, TypeError, ValueError) as exc:
                raise CorruptFileError(f"bad quant params: {exc}") from exc
            if np.any(values == -128):
                raise CorruptFileError("weight code -128 outside symmetric range")
            q = QuantizedTensor(values, params)
            qweights.append(q)
            weights.append(dequantize(q, dtype=np.float32))
        else:
            if wentry["dtype"] != "f32":
                raise CorruptFileError("float weight tensor must be f32")
            weights.append(values.astype(np.float32))
        biases.append(bias.astype(np.float32))
        if wentry.get("masked"):
            any_mask = True
            if f"layer{k}.mask" in entries:
                m, _ = _decode_tensor(entries[f"layer{k}.mask"])
                masks.append(m.astype(np.uint8))
            elif keep is not None:
                masks.append(keep)
            else:
                masks.append((values != 0).astype(np.uint8))
        else:
            masks.append(None)
    if any_mask and any(m is None for m in masks):
        raise CorruptFileError("masks must be present for all or no weight tensors")

    act_params = None
    if "activation_quant" in doc:
        try:
            act_params = [QuantParams(float(p["scale"]), int(p["zero_point"]), "activation")
                          for p in doc["activation_quant"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise CorruptFileError(f"bad activation params: {exc}") from exc
        if len(act_params) != len(layers):
            raise CorruptFileError("one activation param set per layer required")

    model = Model(layers, weights, biases, masks if any_mask else None,
                  dict(doc.get("metadata") or {}), qweights if quantized else None, act_params)
    try:
        model.validate()
    except (ValueError, IndexError) as exc:
        raise CorruptFileError(f"model fails validation: {exc}") from exc
    return model


def load_model(path) -> Model:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptFileError(f"{path}: not a model file ({exc})") from exc
    return model_from_dict(doc)


def models_equal(a: Model, b: Model) -> bool:
    """Bit-exact structural equality."""
    def same(xs, ys):
        if (xs is None) != (ys is None):
            return False
        return xs is None or (len(xs) == len(ys) and all(
            x.dtype == y.dtype and x.shape == y.shape and x.tobytes() == y.tobytes() for x, y in zip(xs, ys)))

    if a.layers != b.layers or a.metadata != b.metadata:
        return False
    if not (same(a.weights, b.weights) and same(a.biases, b.biases) and same(a.masks, b.masks)):
        return False
    if (a.qweights is None) != (b.qweights is None) or a.act_params != b.act_params:
        return False
    if a.qweights is not None:
        return all(p.params == q.params for p, q in zip(a.qweights, b.qweights)) and same(
            [q.data for q in a.qweights], [q.data for q in b.qweights])
    return True


# -- datasets ----------------------------------------------------------------

@dataclass
class Dataset:
    features: np.ndarray  # float32 (n_samples, n_features)
    labels: np.ndarray  # int64 (n_samples,)
    n_classes: int
    splits: dict | None = None

    @property
    def n_samples(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if not self.splits or name not in self.splits:
            raise ConfigError(f"dataset has no split {name!r}")
        lo, hi = self.splits[name]
        return self.features[lo:hi], self.labels[lo:hi]

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, self.n_samples, self.n_features, self.n_classes)
        return (header + np.ascontiguousarray(self.features, dtype="<f4").tobytes()
                + np.ascontiguousarray(self.labels, dtype="<u2").tobytes())

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def dataset_from_bytes(raw: bytes) -> Dataset:
    if len(raw) < _HEADER.size:
        raise CorruptFileError("dataset shorter than header")
    magic, version, n, d, c = _HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise CorruptFileError("bad dataset magic")
    if version != DATASET_VERSION:
        raise VersionError(f"unsupported dataset version {version}")
    expected = _HEADER.size + 4 * n * d + 2 * n
    if len(raw) != expected:
        raise CorruptFileError(f"dataset is {len(raw)} bytes, header implies {expected}")
    off = _HEADER.size
    features = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off).reshape(n, d).astype(np.float32)
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=off + 4 * n * d).astype(np.int64)
    if n and labels.max() >= c:
        raise CorruptFileError("label >= n_classes")
    return Dataset(features, labels, c)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_dataset(ds: Dataset, path) -> str:
    """Write dataset + sidecar; returns the SHA-256 fingerprint."""
    raw = ds.to_bytes()
    atomic_write(path, raw)
    digest = hashlib.sha256(raw).hexdigest()
    write_json(sidecar_path(path), {"sha256": digest, "splits": ds.splits or {},
                                    "n_samples": ds.n_samples, "n_classes": ds.n_classes})
    return digest


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    ds = dataset_from_bytes(raw)
    side = sidecar_path(path)
    if side.exists():
        meta = read_json(side)
        if meta.get("sha256") not in (None, hashlib.sha256(raw).hexdigest()):
            raise CorruptFileError(f"{path}: content hash does not match sidecar")
        ds.splits = {k: tuple(v) for k, v in meta.get("splits", {}).items()}
    return ds


def split_bounds(n: int, test_frac=0.2, pruning_frac=0.2) -> dict:
    """Contiguous splits: train | pruning (a fraction of the training part) | test."""
    n_test = int(round(n * test_frac))
    n_trainval = n - n_test
    n_pruning = int(round(n_trainval * pruning_frac))
    n_train = n_trainval - n_pruning
    return {"train": (0, n_train), "pruning": (n_train, n_trainval), "test": (n_trainval, n)}


def _spiral(n_samples, n_classes, noise, rng):
    per = np.full(n_classes, n_samples // n_classes)
    per[: n_samples % n_classes] += 1
    xs, ys = [], []
    for c, count in enumerate(per):
        r = np.linspace(0.05, 1.0, count)
        theta = c * 2 * np.pi / n_classes + 4 * r + rng.normal(0, noise, count)
        xs.append(np.stack([r * np.sin(theta), r * np.cos(theta)], axis=1))
        ys.append(np.full(count, c))
    return np.concatenate(xs), np.concatenate(ys)


def gen_dataset(kind: str, n_samples: int, n_classes: int, noise: float, seed: int,
                path=None, n_features: int = 2) -> Dataset:
    """Synthetic classification data, shuffled and split deterministically by ``seed``."""
    from sklearn.datasets import make_blobs, make_moons

    if n_samples < n_classes or n_classes < 2 or noise < 0:
        raise ConfigError("need n_samples >= n_classes >= 2 and noise >= 0")
    rng = np.random.default_rng(seed)
    if kind == "blobs":
        x, y = make_blobs(n_samples=n_samples, n_features=n_features, centers=n_classes,
                          cluster_std=noise, random_state=int(rng.integers(2**31 - 1)))
    elif kind == "moons":
        if n_classes != 2 or n_features != 2:
            raise ConfigError("moons is 2-class, 2-feature only")
        x, y = make_moons(n_samples=n_samples, noise=noise, random_state=int(rng.integers(2**31 - 1)))
    elif kind == "spiral":
        if n_features != 2:
            raise ConfigError("spiral is 2-feature only")
        x, y = _spiral(n_samples, n_classes, noise, rng)
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    order = rng.permutation(n_samples)
    ds = Dataset(np.asarray(x, dtype=np.float32)[order], np.asarray(y, dtype=np.int64)[order],
                 n_classes, split_bounds(n_samples))
    if path is not None:
        save_dataset(ds, path)
    return ds
