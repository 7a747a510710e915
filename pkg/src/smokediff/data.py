"""Dataset generation, persistence formats, splitting, and normalization.

On-disk formats (all little-endian, part of the format contract):

* Tensor file ".fdt": magic "FDTN" | version u32 | dtype u8 (0=float32,
  1=float64) | ndim u8 | each dim u32 | raw row-major data.
* Scene file ".fds": sequence of named tensors, each as name-length u16,
  UTF-8 name, then a full tensor record. Names are "rho0" plus
  "tau{k}", "ux{k}", "uy{k}" per snapshot k.
* "manifest.json": dataset metadata, split assignment, normalization stats,
  and a sha256 per scene file.

Scene files are a pure function of (base_seed, params): reruns are
byte-identical, and a failed solve aborts the whole run rather than leaving
a silent gap that would corrupt the split.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from smokediff import fluid
from smokediff.ddpm import ConditionTensor, build_condition
from smokediff.rng import Rng, derive_seed
from smokediff.tensor import Tensor

FORMAT_VERSION = 1
MAGIC = b"FDTN"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

_SPLIT_STREAM = 1 << 40  # seed-derivation namespace, clear of scene indices


class TensorFormatError(ValueError):
    """Base class for tensor-file format violations."""


class MagicMismatchError(TensorFormatError):
    pass


class VersionMismatchError(TensorFormatError):
    pass


class TruncatedFileError(TensorFormatError):
    pass


class DimensionError(TensorFormatError):
    pass


class DatasetError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Tensor container format

def _encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_CODES:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    if arr.ndim > 255:
        raise DimensionError(f"too many dimensions: {arr.ndim}")
    if any(d > 0xFFFFFFFF for d in arr.shape):
        raise DimensionError(f"dimension exceeds u32: {arr.shape}")
    head = MAGIC + struct.pack("<IBB", FORMAT_VERSION, _DTYPE_CODES[arr.dtype], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return head + dims + le.tobytes()


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"file truncated while reading {what} ({len(buf)}/{n} bytes)")
    return buf


def _decode_tensor(f) -> np.ndarray:
    magic = _read_exact(f, 4, "magic")
    if magic != MAGIC:
        raise MagicMismatchError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, dcode, ndim = struct.unpack("<IBB", _read_exact(f, 6, "header"))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"unsupported format version {version}, expected {FORMAT_VERSION}")
    if dcode not in _DTYPES:
        raise TensorFormatError(f"unknown dtype code {dcode}")
    shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "dims")) if ndim else ()
    dtype = _DTYPES[dcode]
    count = int(np.prod(shape)) if ndim else 1
    raw = _read_exact(f, count * dtype.itemsize, "data")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def write_tensor(path, tensor) -> None:
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    Path(path).write_bytes(_encode_tensor(arr))


def read_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        arr = _decode_tensor(f)
        if f.read(1):
            raise TensorFormatError(f"trailing bytes after tensor in {path}")
    return Tensor(arr)


def write_tensor_bundle(path, tensors: dict) -> None:
    """Sequence of named tensors in insertion order."""
    buf = io.BytesIO()
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise TensorFormatError(f"name too long: {name[:32]}...")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(_encode_tensor(arr))
    Path(path).write_bytes(buf.getvalue())


def read_tensor_bundle(path) -> dict:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        while True:
            head = f.read(2)
            if not head:
                break
            if len(head) != 2:
                raise TruncatedFileError("file truncated while reading name length")
            (nlen,) = struct.unpack("<H", head)
            name = _read_exact(f, nlen, "name").decode("utf-8")
            out[name] = _decode_tensor(f)
    return out


# ---------------------------------------------------------------------------
# Normalization

@dataclass
class NormStats:
    scale_ux: float
    scale_uy: float
    warnings: tuple = ()

    def scales(self) -> np.ndarray:
        return np.array([self.scale_ux, self.scale_uy], dtype=np.float64)


def _pow2_at_least(x: float) -> float:
    """Smallest power of two >= x. Scaling by powers of two only shifts the
    exponent, which is what makes normalize/denormalize bit-exact."""
    return float(2.0 ** math.ceil(math.log2(x)))


def compute_norm_stats(max_abs_ux: float, max_abs_uy: float) -> NormStats:
    warnings = []
    if max_abs_ux == 0.0:
        scale_ux, msg = 1.0, "scale_ux was 0; forced to 1"
        warnings.append(msg)
    else:
        scale_ux = _pow2_at_least(max_abs_ux)
    if max_abs_uy == 0.0:
        scale_uy, msg = 1.0, "scale_uy was 0; forced to 1"
        warnings.append(msg)
    else:
        scale_uy = _pow2_at_least(max_abs_uy)
    return NormStats(scale_ux, scale_uy, tuple(warnings))


def normalize(pair: np.ndarray, stats: NormStats) -> np.ndarray:
    """Scale a (2, H, W) velocity pair into [-1, 1] per channel."""
    s = stats.scales()
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        raise ValueError(f"invalid normalization scales {s}")
    return pair / s[:, None, None]


def denormalize(pair: np.ndarray, stats: NormStats) -> np.ndarray:
    return pair * stats.scales()[:, None, None]


# ---------------------------------------------------------------------------
# Split

def split_scenes(n_scenes: int, ratio: tuple[int, int], seed: int):
    """Random whole-scene split; first floor(n*train/(train+test)) of a seeded
    permutation go to train."""
    if n_scenes < 2:
        raise ValueError(f"need at least 2 scenes to split, got {n_scenes}")
    tr, te = ratio
    if tr <= 0 or te <= 0:
        raise ValueError(f"ratio parts must be positive, got {ratio}")
    perm = Rng(seed).shuffled(n_scenes)
    n_train = (n_scenes * tr) // (tr + te)
    train = sorted(int(i) for i in perm[:n_train])
    test = sorted(int(i) for i in perm[n_train:])
    return train, test


# ---------------------------------------------------------------------------
# Dataset generation and access

def _scene_filename(index: int) -> str:
    return f"scene_{index:04d}.fds"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def scene_to_entries(traj: fluid.Trajectory) -> dict:
    entries = {"rho0": traj.rho0.astype(np.float32)}
    for k, snap in enumerate(traj.snapshots):
        entries[f"tau{k}"] = np.asarray(snap.tau, dtype=np.float64)
        entries[f"ux{k}"] = snap.ux.astype(np.float32)
        entries[f"uy{k}"] = snap.uy.astype(np.float32)
    return entries


def generate_dataset(
    params: fluid.SimParams,
    n_scenes: int,
    base_seed: int,
    out_dir,
    split_ratio: tuple[int, int] = (4, 1),
) -> dict:
    """Simulate n_scenes scenes, write scene files and manifest, return the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    max_ux = np.zeros(n_scenes)
    max_uy = np.zeros(n_scenes)
    for i in range(n_scenes):
        try:
            traj = fluid.simulate(derive_seed(base_seed, i), params)
        except fluid.SolverError as e:
            raise DatasetError(f"solver failed on scene {i}: {e}") from e
        write_tensor_bundle(out / _scene_filename(i), scene_to_entries(traj))
        max_ux[i] = max(np.max(np.abs(s.ux)) for s in traj.snapshots)
        max_uy[i] = max(np.max(np.abs(s.uy)) for s in traj.snapshots)

    if n_scenes == 1:
        # degenerate bookkeeping case: nothing to split, the scene trains
        train, test = [0], []
    else:
        train, test = split_scenes(n_scenes, split_ratio, derive_seed(base_seed, _SPLIT_STREAM))
    stats = compute_norm_stats(float(max_ux[train].max()), float(max_uy[train].max()))

    h, w = params.size
    manifest = {
        "format_version": FORMAT_VERSION,
        "grid": [h, w],
        "n_scenes": n_scenes,
        "snapshots_per_scene": params.n_snapshots,
        "record_every": params.record_every,
        "total_time": params.total_time,
        "nu": params.nu,
        "eta": params.eta,
        "dt": params.dt,
        "base_seed": base_seed,
        "split": {
            "ratio": list(split_ratio),
            "seed": derive_seed(base_seed, _SPLIT_STREAM),
            "train": train,
            "test": test,
        },
        "normalization": {
            "scale_ux": stats.scale_ux,
            "scale_uy": stats.scale_uy,
            "max_abs_ux": float(max_ux[train].max()),
            "max_abs_uy": float(max_uy[train].max()),
            "warnings": list(stats.warnings),
        },
        "scenes": [
            {"index": i, "file": _scene_filename(i), "sha256": _sha256(out / _scene_filename(i))}
            for i in range(n_scenes)
        ],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


@dataclass
class SceneRecord:
    index: int
    rho0: np.ndarray
    taus: list[float]
    ux: list[np.ndarray]
    uy: list[np.ndarray]


@dataclass
class TrainSample:
    x0: np.ndarray  # normalized (2, H, W) float32
    cond: ConditionTensor
    scene_index: int
    tau: float


class SmokeDataset:
    """Read access to a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise DatasetError(f"no manifest.json in {self.root}")
        self.manifest = json.loads(manifest_path.read_text())
        if self.manifest.get("format_version") != FORMAT_VERSION:
            raise DatasetError(
                f"manifest format_version {self.manifest.get('format_version')} != {FORMAT_VERSION}"
            )
        norm = self.manifest["normalization"]
        self.stats = NormStats(norm["scale_ux"], norm["scale_uy"], tuple(norm["warnings"]))

    @property
    def total_time(self) -> float:
        return self.manifest["total_time"]

    @property
    def grid(self) -> tuple[int, int]:
        return tuple(self.manifest["grid"])

    def split_indices(self, split: str) -> list[int]:
        if split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {split!r}")
        return list(self.manifest["split"][split])

    def verify(self) -> None:
        """Recompute every scene hash against the manifest; raise on any mismatch."""
        for entry in self.manifest["scenes"]:
            path = self.root / entry["file"]
            if not path.exists():
                raise DatasetError(f"missing scene file {entry['file']}")
            digest = _sha256(path)
            if digest != entry["sha256"]:
                raise DatasetError(f"hash mismatch for {entry['file']}")

    def scene(self, index: int) -> SceneRecord:
        entry = self.manifest["scenes"][index]
        raw = read_tensor_bundle(self.root / entry["file"])
        n = self.manifest["snapshots_per_scene"]
        return SceneRecord(
            index=index,
            rho0=raw["rho0"],
            taus=[float(raw[f"tau{k}"]) for k in range(n)],
            ux=[raw[f"ux{k}"] for k in range(n)],
            uy=[raw[f"uy{k}"] for k in range(n)],
        )

    def samples(self, split: str) -> list[TrainSample]:
        """Normalized (x0, condition) training pairs for every snapshot of the split."""
        out = []
        for idx in self.split_indices(split):
            rec = self.scene(idx)
            for k, tau in enumerate(rec.taus):
                raw = np.stack([rec.ux[k], rec.uy[k]]).astype(np.float64)
                x0 = normalize(raw, self.stats).astype(np.float32)
                cond = build_condition(rec.rho0.astype(np.float32), tau, self.total_time)
                out.append(TrainSample(x0=x0, cond=cond, scene_index=idx, tau=tau))
        return out
