"""Frames, keypoints, the frozen feature backbone and descriptor matching.

A :class:`Frame` is the atomic sensory unit: a set of keypoints (image-plane
position plus a unit-norm descriptor) stamped with a time.  Frames are stored
as float32 arrays so that the binary encoding round-trips bit-exactly.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator, Sequence

import numpy as np

DESCRIPTOR_DIM = 64
FEATURE_DIM = 32

# Keypoint id reserved for the "featureless wall" placeholder; never matched.
NULL_KEYPOINT_ID = 0xFFFFFFFF

FRAME_MAGIC = b"RNFR"


class EmptyFrameError(ValueError):
    def __init__(self, msg: str = "empty frame"):
        super().__init__(msg)


def null_descriptor(dim: int = DESCRIPTOR_DIM) -> np.ndarray:
    d = np.zeros(dim, dtype=np.float32)
    d[0] = 1.0
    return d


@dataclass(frozen=True)
class Keypoint:
    id: int
    position: tuple[float, float]
    descriptor: np.ndarray


@dataclass(frozen=True, eq=False)
class Frame:
    """Keypoints of one camera frame, held column-wise.

    ``ids`` is uint32 (n,), ``positions`` float32 (n, 2) in [0, 1]^2 and
    ``descriptors`` float32 (n, D) with unit rows.
    """

    ids: np.ndarray
    positions: np.ndarray
    descriptors: np.ndarray
    timestamp: float = 0.0
    frame_id: int = 0

    def __post_init__(self):
        ids = np.ascontiguousarray(self.ids, dtype=np.uint32).reshape(-1)
        pos = np.ascontiguousarray(self.positions, dtype=np.float32).reshape(len(ids), 2)
        desc = np.ascontiguousarray(self.descriptors, dtype=np.float32)
        if desc.ndim != 2 or desc.shape[0] != len(ids):
            raise ValueError("descriptor rows must match keypoint count")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("keypoint ids must be unique within a frame")
        for arr in (ids, pos, desc):
            arr.flags.writeable = False
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "descriptors", desc)
        object.__setattr__(self, "timestamp", float(self.timestamp))
        object.__setattr__(self, "frame_id", int(self.frame_id))

    @classmethod
    def from_keypoints(cls, keypoints: Sequence[Keypoint], timestamp: float = 0.0,
                       frame_id: int = 0, descriptor_dim: int = DESCRIPTOR_DIM) -> "Frame":
        if not keypoints:
            return cls(np.zeros(0), np.zeros((0, 2)), np.zeros((0, descriptor_dim)),
                       timestamp, frame_id)
        return cls(
            np.array([k.id for k in keypoints]),
            np.array([k.position for k in keypoints]),
            np.stack([np.asarray(k.descriptor) for k in keypoints]),
            timestamp,
            frame_id,
        )

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def descriptor_dim(self) -> int:
        return self.descriptors.shape[1]

    @property
    def keypoints(self) -> list[Keypoint]:
        return [
            Keypoint(int(i), (float(p[0]), float(p[1])), d)
            for i, p, d in zip(self.ids, self.positions, self.descriptors)
        ]

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            self.frame_id == other.frame_id
            and self.timestamp == other.timestamp
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.descriptors, other.descriptors)
        )

    __hash__ = None


@dataclass(frozen=True)
class FrameFeature:
    vector: np.ndarray


@dataclass(frozen=True)
class BackboneParams:
    """Frozen random projection standing in for a pretrained CNN."""

    projection: np.ndarray
    seed: int

    @classmethod
    def from_seed(cls, seed: int, descriptor_dim: int = DESCRIPTOR_DIM,
                  feature_dim: int = FEATURE_DIM) -> "BackboneParams":
        rng = np.random.default_rng(seed)
        proj = rng.standard_normal((descriptor_dim, feature_dim)) / np.sqrt(descriptor_dim)
        # float32-representable so a saved model reproduces features exactly
        proj = proj.astype(np.float32).astype(np.float64)
        proj.flags.writeable = False
        return cls(proj, int(seed))

    @property
    def descriptor_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.projection.shape[1]


def extract_feature(frame: Frame, backbone: BackboneParams) -> FrameFeature:
    """Mean-pool descriptors, project, squash with tanh and renormalize."""
    if len(frame) == 0:
        raise EmptyFrameError()
    pooled = frame.descriptors.astype(np.float64).mean(axis=0)
    out = np.tanh(pooled @ backbone.projection)
    norm = np.linalg.norm(out)
    if norm == 0.0:
        # tanh(0) everywhere; pick a fixed unit direction so the invariant holds
        out = np.zeros_like(out)
        out[0] = 1.0
    else:
        out = out / norm
    out.flags.writeable = False
    return FrameFeature(out)


@dataclass(frozen=True)
class MatchConfig:
    ratio: float = 0.8
    max_distance: float = 0.6


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int], ...]
    score: float
    # positions (in the target frame) of matched keypoints, row-aligned with pairs
    target_positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)), repr=False)


def _sorted_valid(frame: Frame) -> tuple[np.ndarray, np.ndarray]:
    keep = frame.ids != NULL_KEYPOINT_ID
    idx = np.flatnonzero(keep)
    idx = idx[np.argsort(frame.ids[idx], kind="stable")]
    return idx, frame.descriptors[idx].astype(np.float64)


def match_frames(query: Frame, target: Frame, cfg: MatchConfig = MatchConfig()) -> MatchResult:
    """Mutual nearest neighbours with a ratio test and a distance cap.

    The score is the number of matches over the number of keypoints present
    in the query frame (the null keypoint counts but never matches).
    Distance ties go to the lowest keypoint id.
    """
    if len(query) == 0 or len(target) == 0:
        raise EmptyFrameError()
    qi, qd = _sorted_valid(query)
    ti, td = _sorted_valid(target)
    if len(qi) == 0 or len(ti) == 0:
        return MatchResult((), 0.0)

    sq = (qd * qd).sum(1)[:, None] + (td * td).sum(1)[None, :] - 2.0 * qd @ td.T
    dist = np.sqrt(np.maximum(sq, 0.0))

    nn12 = np.argmin(dist, axis=1)  # argmin keeps the first (lowest id) on ties
    nn21 = np.argmin(dist, axis=0)
    rows = np.arange(len(qi))
    d1 = dist[rows, nn12]
    if dist.shape[1] > 1:
        d2 = np.partition(dist, 1, axis=1)[:, 1]
        ratio_ok = d1 <= cfg.ratio * d2
    else:
        ratio_ok = np.ones(len(qi), dtype=bool)
    ok = (nn21[nn12] == rows) & ratio_ok & (d1 <= cfg.max_distance)

    sel = np.flatnonzero(ok)
    q_rows = qi[sel]
    t_rows = ti[nn12[sel]]
    pairs = tuple(
        (int(a), int(b)) for a, b in zip(query.ids[q_rows], target.ids[t_rows])
    )
    return MatchResult(pairs, len(pairs) / len(query), target.positions[t_rows].astype(np.float64))


# -- binary encoding ---------------------------------------------------------

_HEAD = struct.Struct("<4sIdI")


def write_frame(fh: BinaryIO, frame: Frame) -> None:
    fh.write(_HEAD.pack(FRAME_MAGIC, frame.frame_id, frame.timestamp, len(frame)))
    n = len(frame)
    if n == 0:
        return
    rec = np.empty(n, dtype=[("id", "<u4"), ("pos", "<f4", (2,)),
                             ("desc", "<f4", (frame.descriptor_dim,))])
    rec["id"] = frame.ids
    rec["pos"] = frame.positions
    rec["desc"] = frame.descriptors
    fh.write(rec.tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated frame record")
    return buf


def read_frame(fh: BinaryIO, descriptor_dim: int = DESCRIPTOR_DIM) -> Frame:
    magic, frame_id, ts, n = _HEAD.unpack(_read_exact(fh, _HEAD.size))
    if magic != FRAME_MAGIC:
        raise ValueError(f"bad frame magic {magic!r}")
    dt = np.dtype([("id", "<u4"), ("pos", "<f4", (2,)), ("desc", "<f4", (descriptor_dim,))])
    rec = np.frombuffer(_read_exact(fh, dt.itemsize * n), dtype=dt)
    return Frame(rec["id"].copy(), rec["pos"].copy(), rec["desc"].reshape(n, descriptor_dim).copy(),
                 ts, frame_id)


def frame_to_bytes(frame: Frame) -> bytes:
    buf = io.BytesIO()
    write_frame(buf, frame)
    return buf.getvalue()


def frame_from_bytes(data: bytes, descriptor_dim: int = DESCRIPTOR_DIM) -> Frame:
    return read_frame(io.BytesIO(data), descriptor_dim)


def iter_frames(fh: BinaryIO, count: int, descriptor_dim: int = DESCRIPTOR_DIM) -> Iterator[Frame]:
    for _ in range(count):
        yield read_frame(fh, descriptor_dim)
