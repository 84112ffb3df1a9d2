"""Datasets, the synthetic generator, and the EMB1 / MCK1 binary formats.

EMB1 (embeddings, little-endian)::

    b"EMB1" | u32 n | u32 d | u32 label_flag | n*d f32 row-major | [n u32 labels]

MCK1 (checkpoint, little-endian)::

    b"MCK1" | u32 version | u64 payload_len | payload | u32 crc32(all prior bytes)

    payload = u32 json_len | json (UTF-8, sorted keys)
              then for every tensor, in declaration order:
              u16 name_len | name | u32 rows | u32 cols | rows*cols f64 row-major
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

EMB_MAGIC = b"EMB1"
CKPT_MAGIC = b"MCK1"
CKPT_VERSION = 1


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int | None = None
    provenance: str = ""

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (len(self.features),):
            raise DataError(f"{len(self.labels)} labels for {len(self.features)} rows")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features contain NaN or Inf")
        if len(self.labels) == 0:
            raise DataError("dataset is empty")
        if self.labels.min() < 0:
            raise DataError("labels must be non-negative")
        if self.class_count is None:
            self.class_count = int(self.labels.max()) + 1
        if self.labels.max() >= self.class_count:
            raise DataError(f"label {self.labels.max()} outside [0, {self.class_count})")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def check_classes(self):
        """Every class nonempty (and hence n >= class_count)."""
        counts = np.bincount(self.labels, minlength=self.class_count)
        if np.any(counts == 0):
            raise DataError(f"classes {np.flatnonzero(counts == 0).tolist()} have no samples")

    def subset(self, idx, provenance: str | None = None) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(self.features[idx], self.labels[idx], self.class_count,
                              self.provenance if provenance is None else provenance)


def stratified_split(labels, fraction: float = 0.9, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffle, first ``round(fraction * count)`` rows to the gallery.

    Each class keeps at least one gallery row; returned indices are sorted.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    gallery, query = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        k = min(len(idx), max(1, int(round(fraction * len(idx)))))
        gallery.append(idx[:k])
        query.append(idx[k:])
    return np.sort(np.concatenate(gallery)), np.sort(np.concatenate(query))


def split_gallery_query(ds: LabeledDataset, fraction: float = 0.9, seed: int = 0):
    g, q = stratified_split(ds.labels, fraction, seed)
    return ds.subset(g, f"{ds.provenance}#gallery"), ds.subset(q, f"{ds.provenance}#query")


@dataclass
class SynthSpec:
    n_classes: int = 20
    samples_per_class: int = 200
    intrinsic_dim: int = 10
    ambient_dim: int = 128
    class_separation: float = 3.0
    class_noise: float = 1.0
    nuisance_noise: float = 1.0
    entangle: bool = True
    seed: int = 0

    def validate(self):
        if self.n_classes < 1 or self.samples_per_class < 1:
            raise ConfigError("n_classes and samples_per_class must be positive")
        if not 1 <= self.intrinsic_dim <= self.ambient_dim:
            raise ConfigError(
                f"need 1 <= intrinsic_dim <= ambient_dim, got {self.intrinsic_dim} > {self.ambient_dim}"
                if self.intrinsic_dim > self.ambient_dim else "intrinsic_dim must be positive")
        if self.class_separation <= 0:
            raise ConfigError("class_separation must be positive")
        if self.class_noise < 0 or self.nuisance_noise < 0:
            raise ConfigError("noise levels must be non-negative")

    def tag(self) -> str:
        fields = ",".join(f"{k}={v}" for k, v in self.__dict__.items())
        return f"synthetic({fields})"


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR with sign fix)."""
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def generate_synthetic(spec: SynthSpec, *, _skip_entangle: bool = False) -> LabeledDataset:
    """Gaussian class blobs on a low-dimensional sphere, padded with nuisance noise.

    Class centers are uniform on the ``intrinsic_dim`` unit sphere scaled by
    ``class_separation``; samples add isotropic ``class_noise`` there. The
    remaining ambient coordinates hold ``nuisance_noise``. With ``entangle``
    all coordinates are mixed by one seeded random rotation.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    k, m = spec.intrinsic_dim, spec.samples_per_class
    centers = rng.normal(size=(spec.n_classes, k))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= spec.class_separation

    labels = np.repeat(np.arange(spec.n_classes), m)
    x = np.zeros((len(labels), spec.ambient_dim))
    x[:, :k] = centers[labels] + spec.class_noise * rng.normal(size=(len(labels), k))
    x[:, k:] = spec.nuisance_noise * rng.normal(size=(len(labels), spec.ambient_dim - k))
    rot = random_orthogonal(spec.ambient_dim, rng)  # drawn even when unused, keeps streams aligned
    if spec.entangle and not _skip_entangle:
        x = x @ rot
    return LabeledDataset(x, labels, spec.n_classes, spec.tag())


# ---------------------------------------------------------------- EMB1


def write_embeddings(ds: LabeledDataset, path, with_labels: bool = True) -> None:
    n, d = ds.features.shape
    feats = ds.features.astype("<f4")
    if not np.all(np.isfinite(feats)):
        raise DataError("features overflow 32-bit storage")
    parts = [EMB_MAGIC, struct.pack("<III", n, d, int(with_labels)), feats.tobytes(order="C")]
    if with_labels:
        parts.append(ds.labels.astype("<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def parse_embeddings(buf: bytes, provenance: str = "") -> LabeledDataset:
    if len(buf) < 4 or buf[:4] != EMB_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected 'EMB1'", 0)
    if len(buf) < 16:
        raise FormatError("truncated header", len(buf))
    n, d, flag = struct.unpack_from("<III", buf, 4)
    if flag not in (0, 1):
        raise FormatError(f"label_flag must be 0 or 1, got {flag}", 12)
    need = 16 + 4 * n * d + (4 * n if flag else 0)
    if len(buf) < need:
        raise FormatError(f"truncated payload: header says n={n}, d={d} "
                          f"({need} bytes) but file has {len(buf)}", len(buf))
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes after payload", need)
    feats = np.frombuffer(buf, dtype="<f4", count=n * d, offset=16).reshape(n, d)
    finite = np.isfinite(feats)
    if not finite.all():
        flat = int(np.argmax(~finite.ravel()))
        raise FormatError(f"non-finite value at row {flat // d}, col {flat % d}", 16 + 4 * flat)
    if flag:
        labels = np.frombuffer(buf, dtype="<u4", count=n, offset=16 + 4 * n * d).astype(np.int64)
    else:
        labels = np.zeros(n, dtype=np.int64)
    return LabeledDataset(feats.astype(np.float64), labels, provenance=provenance)


def read_embeddings(path) -> LabeledDataset:
    return parse_embeddings(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------- MCK1


@dataclass
class Checkpoint:
    params: "object"  # ModelParams
    config: "object"  # TrainConfig
    log: "object"  # TrainLog
    extra: dict = field(default_factory=dict)


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def checkpoint_bytes(params, config, log, extra: dict | None = None) -> bytes:
    from .optim import train_config_to_dict

    named = params.named_arrays()
    meta = {
        "format": "MCK1",
        "head_kind": params.head_kind,
        "alpha": params.alpha,
        "layers": {
            "encoder": [{"monotone": l.monotone, "activation": l.activation} for l in params.encoder_layers],
            "head": [{"monotone": l.monotone, "activation": l.activation} for l in params.head_layers],
        },
        "model_config": _model_config_dict(params.config),
        "tensors": [[name, list(a.shape)] for name, a in named],  # list keeps declaration order
        "train_config": train_config_to_dict(config) if config is not None else None,
        "log": log.to_dict() if log is not None else None,
        "extra": extra or {},
    }
    js = _canonical_json(meta)
    body = [struct.pack("<I", len(js)), js]
    for name, a in named:
        nb = name.encode()
        body.append(struct.pack("<H", len(nb)) + nb + struct.pack("<II", *a.shape))
        body.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    payload = b"".join(body)
    head = CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(payload))
    blob = head + payload
    return blob + struct.pack("<I", zlib.crc32(blob))


def save_checkpoint(params, config, log, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, config, log, extra))


def _model_config_dict(cfg):
    if cfg is None:
        return None
    d = dict(cfg.__dict__)
    if d.get("encoder_widths") is not None:
        d["encoder_widths"] = list(d["encoder_widths"])
    return d


def parse_checkpoint(buf: bytes) -> Checkpoint:
    from .models import LayerParams, ModelConfig, ModelParams
    from .optim import TrainLog, train_config_from_dict

    if len(buf) < 4 or buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}, expected 'MCK1'", 0)
    if len(buf) < 16:
        raise FormatError("truncated header", len(buf))
    version, plen = struct.unpack_from("<IQ", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {CKPT_VERSION})", 4)
    end = 16 + plen
    if len(buf) != end + 4:
        raise FormatError(f"payload length {plen} inconsistent with file size {len(buf)}", len(buf))
    (crc,) = struct.unpack_from("<I", buf, end)
    if zlib.crc32(buf[:end]) != crc:
        raise FormatError("checksum mismatch: checkpoint is corrupted or tampered", end)

    off = 16
    (jlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    try:
        meta = json.loads(buf[off:off + jlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata block: {exc}", off) from None
    off += jlen

    arrays = []
    for expected, shape in meta["tensors"]:
        if off + 2 > end:
            raise FormatError("truncated tensor table", off)
        (nlen,) = struct.unpack_from("<H", buf, off)
        name = buf[off + 2:off + 2 + nlen].decode()
        off += 2 + nlen
        rows, cols = struct.unpack_from("<II", buf, off)
        off += 8
        if name != expected or [rows, cols] != shape:
            raise FormatError(f"tensor {name!r} {rows}x{cols} does not match metadata "
                              f"{expected!r} {shape}", off - 8)
        nbytes = 8 * rows * cols
        if off + nbytes > end:
            raise FormatError(f"tensor {name!r} truncated", off)
        arrays.append(np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=off)
                      .reshape(rows, cols).astype(np.float64))
        off += nbytes
    if off != end:
        raise FormatError(f"{end - off} unexpected bytes after tensors", off)

    it = iter(arrays)
    layers = meta["layers"]
    enc = [LayerParams(next(it), next(it), l["monotone"], l["activation"]) for l in layers["encoder"]]
    head = [LayerParams(next(it), next(it), l["monotone"], l["activation"]) for l in layers["head"]]
    mc = meta.get("model_config")
    if mc is not None:
        if mc.get("encoder_widths") is not None:
            mc["encoder_widths"] = tuple(mc["encoder_widths"])
        mc = ModelConfig(**mc)
    params = ModelParams(enc, head, meta["head_kind"], meta["alpha"], mc)
    cfg = train_config_from_dict(meta["train_config"]) if meta["train_config"] else None
    log = TrainLog.from_dict(meta["log"]) if meta["log"] else None
    return Checkpoint(params, cfg, log, meta.get("extra", {}))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
