"""Library of robot-trajectory embeddings with exact top-k cosine retrieval."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import encoder, nn
from .errors import CorruptFile, DegenerateMean, EmptyDataset, KTooLarge, VersionMismatch, WrongDomain
from .world import Domain, Trajectory, render_features

LIB_MAGIC = b"VIPL"
LIB_VERSION = 1
_HEADER = struct.Struct("<4sHII32s")


@dataclass(frozen=True)
class EmbeddingLibrary:
    embeddings: np.ndarray  # (n, E)
    traj_ids: np.ndarray  # (n,) uint64, ascending
    encoder_fingerprint: bytes

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2:
            raise ValueError("embeddings must be a 2-D array")
        ids = np.asarray(self.traj_ids, dtype=np.uint64)
        if ids.shape != (emb.shape[0],):
            raise ValueError("one trajectory id per embedding")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("trajectory ids must be unique")
        if len(self.encoder_fingerprint) != 32:
            raise ValueError("encoder fingerprint is 32 bytes")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "traj_ids", ids)

    def __len__(self) -> int:
        return len(self.traj_ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def lookup(self) -> dict[int, np.ndarray]:
        return {int(i): e for i, e in zip(self.traj_ids, self.embeddings)}

    def subset(self, keep: np.ndarray) -> "EmbeddingLibrary":
        return EmbeddingLibrary(self.embeddings[keep], self.traj_ids[keep], self.encoder_fingerprint)


@dataclass(frozen=True)
class InferenceConfig:
    k: Optional[int] = None
    k_fraction: Optional[float] = 0.01
    renormalize_average: bool = True

    def resolve_k(self, library_size: int) -> int:
        if self.k is not None:
            k = int(self.k)
        else:
            if self.k_fraction is None or not 0.0 < self.k_fraction <= 1.0:
                raise ValueError("k_fraction must lie in (0, 1]")
            # round half up, so 0.5% of 500 resolves to 3
            k = max(1, math.floor(self.k_fraction * library_size + 0.5 + 1e-9))
        if k < 1:
            raise ValueError("k must be positive")
        if k > library_size:
            raise KTooLarge(f"k = {k} exceeds library size {library_size}")
        return k


def embed_trajectories(trajectories: Sequence[Trajectory], encoder_params: nn.ParamVector) -> np.ndarray:
    frames = np.stack([render_features(t, Domain.Robot).frames for t in trajectories])
    return encoder.encode_frames(frames, encoder_params)


def build_library(robot_dataset: Sequence[Trajectory], encoder_params: nn.ParamVector) -> EmbeddingLibrary:
    if not robot_dataset:
        raise EmptyDataset("cannot build a library from zero trajectories")
    for traj in robot_dataset:
        if traj.domain != Domain.Robot:
            raise WrongDomain(f"trajectory {traj.id} is not robot-domain")
    ordered = sorted(robot_dataset, key=lambda t: t.id)
    # stored at f32 precision so a freshly built library equals its reloaded file
    emb = embed_trajectories(ordered, encoder_params).astype(np.float32).astype(np.float64)
    return EmbeddingLibrary(emb, np.array([t.id for t in ordered], dtype=np.uint64), encoder_params.fingerprint())


def rank(scores: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties broken by ascending id."""
    return np.lexsort((ids, -scores))


def topk_average(query: np.ndarray, library: EmbeddingLibrary,
                 config: InferenceConfig = InferenceConfig(),
                 scores: Optional[np.ndarray] = None) -> tuple[np.ndarray, list[int]]:
    """Average of the k library embeddings most cosine-similar to ``query``.

    ``scores`` overrides the similarities used for ranking (the averaged
    vectors are still the library embeddings).
    """
    k = config.resolve_k(len(library))
    if scores is None:
        scores = library.embeddings @ np.asarray(query, dtype=np.float64)
    top = rank(np.asarray(scores), library.traj_ids)[:k]
    mean = library.embeddings[top].mean(axis=0)
    # a single neighbor is returned as stored, bit for bit
    if config.renormalize_average and k > 1:
        norm = np.linalg.norm(mean)
        if norm < 1e-9:
            raise DegenerateMean("averaged embedding has vanishing norm")
        mean = mean / norm
    return mean, [int(i) for i in library.traj_ids[top]]


def library_to_bytes(library: EmbeddingLibrary) -> bytes:
    n, dim = library.embeddings.shape if len(library) else (0, library.dim)
    head = _HEADER.pack(LIB_MAGIC, LIB_VERSION, dim, n, library.encoder_fingerprint)
    rows = np.zeros(n, dtype=np.dtype([("id", "<u8"), ("e", "<f4", (dim,))]))
    rows["id"] = library.traj_ids
    rows["e"] = library.embeddings
    return head + rows.tobytes()


def library_from_bytes(blob: bytes) -> EmbeddingLibrary:
    if len(blob) < _HEADER.size:
        raise CorruptFile("library file shorter than its header")
    magic, version, dim, n, fp = _HEADER.unpack_from(blob)
    if magic != LIB_MAGIC:
        raise CorruptFile("bad library magic")
    if version != LIB_VERSION:
        raise VersionMismatch(f"library version {version}")
    dtype = np.dtype([("id", "<u8"), ("e", "<f4", (dim,))])
    if len(blob) - _HEADER.size != n * dtype.itemsize:
        raise CorruptFile(f"library header promises {n} entries")
    rows = np.frombuffer(blob, dtype=dtype, offset=_HEADER.size, count=n)
    emb = rows["e"].astype(np.float64).reshape(n, dim)
    return EmbeddingLibrary(emb, rows["id"].copy(), fp)


def save_library(library: EmbeddingLibrary, path) -> None:
    Path(path).write_bytes(library_to_bytes(library))


def load_library(path) -> EmbeddingLibrary:
    return library_from_bytes(Path(path).read_bytes())
