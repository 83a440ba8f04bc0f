"""Dataset serialization and the synthetic alignment benchmark.

On-disk form: a JSON manifest next to a binary blob. Each sample occupies
one contiguous block in the blob holding its four tensors in order v_g,
t_g, V, T. Tensors are stored little-endian: u32 rank, u32 dims, then the
float32 payload row-major; they widen to float64 in memory.

The synthetic generator hides the label in cross-modal correspondence:
patches and tokens are noisy copies of shared concept vectors, and the
label counts how many concepts the two modalities have in common. Global
vectors are noisy means of each modality's own concepts, so their
class-conditional means coincide and a linear map on globals has no edge.
"""

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import DataError

MANIFEST_VERSION = 1
_SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class Sample:
    id: str
    label: int
    v_g: Tensor
    t_g: Tensor
    V: Tensor
    T: Tensor


def tensor_bytes(arr):
    arr = np.asarray(arr, dtype=np.float64)
    head = struct.pack("<I", arr.ndim)
    head += np.asarray(arr.shape, dtype="<u4").tobytes()
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def read_tensor(buf, pos):
    """Parse one tensor from bytes at pos; returns (float64 array, new pos)."""
    if pos + 4 > len(buf):
        raise DataError("truncated tensor header")
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if rank > 8:
        raise DataError(f"implausible tensor rank {rank}")
    if pos + 4 * rank > len(buf):
        raise DataError("truncated tensor dims")
    dims = np.frombuffer(buf, dtype="<u4", count=rank, offset=pos)
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if pos + 4 * count > len(buf):
        raise DataError("truncated tensor payload")
    payload = np.frombuffer(buf, dtype="<f4", count=count, offset=pos)
    pos += 4 * count
    return payload.astype(np.float64).reshape(tuple(int(d) for d in dims)), pos


def write_dataset(manifest_path, samples, split, d_h, n_p2, n_s, classes):
    """Write manifest JSON plus a sibling <stem>.bin blob."""
    manifest_path = Path(manifest_path)
    blob_path = manifest_path.with_suffix(".bin")
    records = []
    blob = bytearray()
    for s in samples:
        offset = len(blob)
        block = (tensor_bytes(s.v_g.data) + tensor_bytes(s.t_g.data)
                 + tensor_bytes(s.V.data) + tensor_bytes(s.T.data))
        blob.extend(block)
        records.append({
            "id": s.id,
            "label": int(s.label),
            "offset": offset,
            "crc32": zlib.crc32(block) & 0xFFFFFFFF,
        })
    manifest = {
        "version": MANIFEST_VERSION,
        "split": split,
        "d_h": d_h,
        "n_p2": n_p2,
        "n_s": n_s,
        "classes": list(classes),
        "samples": records,
    }
    blob_path.write_bytes(bytes(blob))
    manifest_path.write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest_path


def _require(cond, msg):
    if not cond:
        raise DataError(msg)


def load_dataset(manifest_path):
    """Validated (manifest dict, list of Samples) from disk.

    Structural problems name the offending sample id.
    """
    manifest_path = Path(manifest_path)
    _require(manifest_path.exists(), f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"manifest is not valid JSON: {e}") from None
    for key in ("version", "split", "d_h", "n_p2", "n_s", "classes", "samples"):
        _require(key in manifest, f"manifest missing field {key!r}")
    _require(manifest["version"] == MANIFEST_VERSION,
             f"unsupported manifest version {manifest['version']}")
    _require(manifest["split"] in _SPLITS,
             f"unknown split {manifest['split']!r}")
    _require(len(manifest["samples"]) > 0, "no samples")
    d_h, n_p2, n_s = manifest["d_h"], manifest["n_p2"], manifest["n_s"]
    n_classes = len(manifest["classes"])
    _require(n_classes >= 2, "need at least 2 classes")

    blob = manifest_path.with_suffix(".bin")
    _require(blob.exists(), f"tensor blob not found: {blob}")
    buf = blob.read_bytes()

    samples = []
    for rec in manifest["samples"]:
        sid = rec.get("id", "<missing id>")
        _require(0 <= rec["label"] < n_classes,
                 f"sample {sid}: label {rec['label']} outside {n_classes} classes")
        pos = rec["offset"]
        _require(0 <= pos <= len(buf), f"sample {sid}: offset {pos} out of range")
        try:
            v_g, p1 = read_tensor(buf, pos)
            t_g, p2 = read_tensor(buf, p1)
            V, p3 = read_tensor(buf, p2)
            T, end = read_tensor(buf, p3)
        except DataError as e:
            raise DataError(f"sample {sid}: {e}") from None
        if "crc32" in rec:
            crc = zlib.crc32(buf[pos:end]) & 0xFFFFFFFF
            _require(crc == rec["crc32"],
                     f"sample {sid}: checksum mismatch "
                     f"(stored {rec['crc32']}, computed {crc})")
        _require(v_g.shape == (d_h,),
                 f"sample {sid}: v_g shape {v_g.shape}, expected ({d_h},)")
        _require(t_g.shape == (d_h,),
                 f"sample {sid}: t_g shape {t_g.shape}, expected ({d_h},)")
        _require(V.shape == (n_p2, d_h),
                 f"sample {sid}: V shape {V.shape}, expected ({n_p2}, {d_h})")
        _require(T.shape == (n_s, d_h),
                 f"sample {sid}: T shape {T.shape}, expected ({n_s}, {d_h})")
        samples.append(Sample(
            id=sid, label=int(rec["label"]),
            v_g=Tensor(v_g), t_g=Tensor(t_g), V=Tensor(V), T=Tensor(T)))
    return manifest, samples


def resolve_split(data_path, split):
    """Manifest path for a split, from either a split index or a manifest.

    A JSON file with a "splits" table maps split names to sibling manifest
    paths; a plain manifest stands for itself (its declared split wins).
    """
    data_path = Path(data_path)
    _require(data_path.exists(), f"dataset file not found: {data_path}")
    try:
        doc = json.loads(data_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"dataset file is not valid JSON: {e}") from None
    if "splits" in doc:
        table = doc["splits"]
        _require(split in table, f"split {split!r} not in dataset index "
                 f"(has {sorted(table)})")
        return data_path.parent / table[split]
    return data_path


_CONCEPTS = 8
_PER_SIDE = 3


def _noisy_unit(rng, base, noise):
    x = base + noise * rng.standard_normal(base.shape[0])
    return x / np.linalg.norm(x)


def _synth_sample(rng, concepts, label, n_classes, noise, d_h, n_p2, n_s, sid):
    all_ids = np.arange(_CONCEPTS)
    img = rng.choice(all_ids, _PER_SIDE, replace=False)
    rest = np.setdiff1d(all_ids, img)
    if n_classes == 2:
        overlap = 2 * label  # contrast classes: no shared concepts vs two
    else:
        overlap = label  # 3-class labels grade the overlap 0/1/2 directly
    shared = rng.choice(img, overlap, replace=False) if overlap else np.empty(0, int)
    disjoint = rng.choice(rest, _PER_SIDE - overlap, replace=False)
    txt = np.concatenate([shared, disjoint]).astype(int)

    V = np.stack([
        _noisy_unit(rng, concepts[img[r % _PER_SIDE]], noise) for r in range(n_p2)])
    T = np.stack([
        _noisy_unit(rng, concepts[txt[r % _PER_SIDE]], noise) for r in range(n_s)])
    v_g = _noisy_unit(rng, concepts[img].mean(axis=0), noise)
    t_g = _noisy_unit(rng, concepts[txt].mean(axis=0), noise)
    return Sample(id=sid, label=label, v_g=Tensor(v_g), t_g=Tensor(t_g),
                  V=Tensor(V), T=Tensor(T))


def synth_dataset(out_dir, sizes=(400, 100, 100), noise=0.1, seed=7,
                  n_classes=2, d_h=32, n_p2=16, n_s=12):
    """Generate train/valid/test manifests plus a split index (synth.json).

    Labels cycle so every class appears equally often (exactly, when the
    split size divides by the class count). Identical arguments give
    identical bytes.
    """
    if n_classes not in (2, 3):
        raise DataError(f"synthetic generator supports 2 or 3 classes, got {n_classes}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    concepts = rng.standard_normal((_CONCEPTS, d_h))
    concepts /= np.linalg.norm(concepts, axis=1, keepdims=True)
    if n_classes == 2:
        classes = ["disjoint", "overlapping"]
    else:
        classes = ["overlap0", "overlap1", "overlap2"]

    index = {}
    for split, size in zip(_SPLITS, sizes):
        samples = [
            _synth_sample(rng, concepts, i % n_classes, n_classes, noise,
                          d_h, n_p2, n_s, f"{split}-{i:04d}")
            for i in range(size)
        ]
        path = out_dir / f"{split}.json"
        write_dataset(path, samples, split, d_h, n_p2, n_s, classes)
        index[split] = f"{split}.json"

    index_path = out_dir / "synth.json"
    index_path.write_text(json.dumps(
        {"version": MANIFEST_VERSION, "splits": index}, indent=1) + "\n")
    return index_path
