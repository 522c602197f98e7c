"""RoomNet: LSTM over short-term features, attention over long-term memory.

The classifier maps three views of the recent past to a probability vector
over ``m + 1`` classes: rooms ``0..m-1`` and a final "transit" class for
frames taken while crossing a doorway.

* short-term queue -> LSTM -> final hidden state (H)
* long-term queue + current feature -> scaled dot-product attention (A)
* concat(H, A) -> linear -> softmax

Gradients are written out by hand; :func:`loss_and_grad` is checked against
central finite differences in the test-suite.
"""

from __future__ import annotations

import bisect
import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, BinaryIO, Sequence

import numpy as np

from .frames import BackboneParams, Frame, FrameFeature, extract_feature

if TYPE_CHECKING:
    from .topo_graph import RoomGraph

log = logging.getLogger(__name__)

PARAM_NAMES = ("Wx", "Wh", "b", "Wq", "Wk", "Wv", "Wout", "bout")
MODEL_MAGIC = b"RNMD"
MODEL_VERSION = 1


class EmptyQueueError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class QueueConfig:
    n1: int = 8
    t1: float = 0.5
    n2: int = 6
    t2: float = 5.0

    def __post_init__(self):
        if self.n1 < 1 or self.n2 < 1:
            raise ValueError("queue lengths must be >= 1")
        if not (0 < self.t1 < self.t2):
            raise ValueError("need 0 < t1 < t2")


@dataclass(frozen=True)
class MemoryQueues:
    q_short: tuple[FrameFeature, ...]
    q_long: tuple[FrameFeature, ...]
    current: FrameFeature
    timestamp: float | None = None

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self.q_short:
            raise EmptyQueueError("empty short-term queue")
        if not self.q_long:
            raise EmptyQueueError("empty long-term queue")
        return (
            np.stack([f.vector for f in self.q_short]),
            np.stack([f.vector for f in self.q_long]),
            self.current.vector,
        )


def sample_indices(timestamps: np.ndarray, now: int, cfg: QueueConfig) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the short- and long-term samples for frame ``now``.

    Short samples end at ``now`` and step back by ``t1``; long samples start one
    ``t2`` before ``now``.  Each picks the latest frame at or before its sample
    time; times before the first frame fall back to the oldest frame.  Both
    index arrays are ordered oldest to newest.
    """
    t = timestamps[now]
    short_t = t - cfg.t1 * np.arange(cfg.n1 - 1, -1, -1)
    long_t = t - cfg.t2 * np.arange(cfg.n2, 0, -1)
    hist = timestamps[: now + 1]
    si = np.searchsorted(hist, short_t + 1e-9, side="right") - 1
    li = np.searchsorted(hist, long_t + 1e-9, side="right") - 1
    return np.maximum(si, 0), np.maximum(li, 0)


class FeatureHistory:
    """Streaming buffer that produces :class:`MemoryQueues` on demand."""

    def __init__(self, cfg: QueueConfig):
        self.cfg = cfg
        self._ts: list[float] = []
        self._feats: list[FrameFeature] = []

    def __len__(self):
        return len(self._ts)

    def push(self, timestamp: float, feature: FrameFeature) -> None:
        if self._ts and timestamp <= self._ts[-1]:
            raise ValueError("timestamps must be strictly increasing")
        self._ts.append(float(timestamp))
        self._feats.append(feature)
        horizon = timestamp - self.cfg.n2 * self.cfg.t2
        # keep one frame at or before the horizon so lookups never pad early
        drop = bisect.bisect_right(self._ts, horizon) - 1
        if drop > 0:
            del self._ts[:drop]
            del self._feats[:drop]

    def queues(self) -> MemoryQueues:
        if not self._ts:
            raise EmptyQueueError("empty short-term queue")
        ts = np.asarray(self._ts)
        si, li = sample_indices(ts, len(ts) - 1, self.cfg)
        return MemoryQueues(
            tuple(self._feats[i] for i in si),
            tuple(self._feats[i] for i in li),
            self._feats[-1],
            self._ts[-1],
        )


@dataclass(frozen=True)
class Inference:
    probs: np.ndarray
    room_id: int
    p_m: float
    timestamp: float | None = None

    @classmethod
    def from_probs(cls, probs: np.ndarray, timestamp: float | None = None) -> "Inference":
        probs = np.asarray(probs, dtype=np.float64)
        k = int(np.argmax(probs))
        return cls(probs, k, float(probs[k]), timestamp)


@dataclass
class RoomNetModel:
    backbone: BackboneParams
    params: dict[str, np.ndarray]
    seed: int = 0

    @property
    def class_count(self) -> int:
        return self.params["bout"].shape[0]

    @property
    def room_count(self) -> int:
        return self.class_count - 1

    @property
    def transit_class(self) -> int:
        return self.class_count - 1

    @property
    def hidden_size(self) -> int:
        return self.params["Wh"].shape[0]

    @property
    def attention_size(self) -> int:
        return self.params["Wq"].shape[1]

    def copy(self) -> "RoomNetModel":
        return RoomNetModel(self.backbone, {k: v.copy() for k, v in self.params.items()}, self.seed)


def init_model(room_count: int, backbone: BackboneParams, hidden: int = 32,
               attention: int = 32, seed: int = 0) -> RoomNetModel:
    """Uniform(-0.1, 0.1) weights with forget-gate bias +1."""
    F, H, A, C = backbone.feature_dim, hidden, attention, room_count + 1
    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-0.1, 0.1, size=shape)

    params = {
        "Wx": u(F, 4 * H),
        "Wh": u(H, 4 * H),
        "b": u(4 * H),
        "Wq": u(F, A),
        "Wk": u(F, A),
        "Wv": u(F, A),
        "Wout": u(H + A, C),
        "bout": u(C),
    }
    params["b"][H:2 * H] += 1.0
    return RoomNetModel(backbone, params, seed)


# -- forward / backward ------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def lstm_forward(seq: np.ndarray, params: dict[str, np.ndarray]) -> tuple[np.ndarray, dict]:
    """Run the LSTM over ``seq`` (T x F); gate order is input, forget, output, candidate."""
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or len(seq) == 0:
        raise EmptyQueueError("empty short-term queue")
    Wh = params["Wh"]
    H = Wh.shape[0]
    T = len(seq)
    zx = seq @ params["Wx"] + params["b"]
    hs = np.zeros((T + 1, H))
    cs = np.zeros((T + 1, H))
    gates = np.empty((T, 4 * H))
    tanh_c = np.empty((T, H))
    for t in range(T):
        z = zx[t] + hs[t] @ Wh
        g = gates[t]
        g[: 3 * H] = _sigmoid(z[: 3 * H])
        g[3 * H:] = np.tanh(z[3 * H:])
        cs[t + 1] = g[H:2 * H] * cs[t] + g[:H] * g[3 * H:]
        tanh_c[t] = np.tanh(cs[t + 1])
        hs[t + 1] = g[2 * H:3 * H] * tanh_c[t]
    cache = {"x": seq, "h": hs, "c": cs, "gates": gates, "tanh_c": tanh_c}
    return hs[T].copy(), cache


def lstm_backward(dh_last: np.ndarray, cache: dict, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    x, hs, cs, gates, tanh_c = cache["x"], cache["h"], cache["c"], cache["gates"], cache["tanh_c"]
    Wh = params["Wh"]
    T, H = tanh_c.shape
    dz = np.empty((T, 4 * H))
    dh = dh_last.copy()
    dc = np.zeros(H)
    for t in range(T - 1, -1, -1):
        i, f, o, g = gates[t, :H], gates[t, H:2 * H], gates[t, 2 * H:3 * H], gates[t, 3 * H:]
        dc = dc + dh * o * (1.0 - tanh_c[t] ** 2)
        d = dz[t]
        d[:H] = dc * g * i * (1.0 - i)
        d[H:2 * H] = dc * cs[t] * f * (1.0 - f)
        d[2 * H:3 * H] = dh * tanh_c[t] * o * (1.0 - o)
        d[3 * H:] = dc * i * (1.0 - g * g)
        dh = Wh @ d
        dc = dc * f
    return {"Wx": x.T @ dz, "Wh": hs[:T].T @ dz, "b": dz.sum(0)}


def attention_forward(context: np.ndarray, current: np.ndarray, params: dict[str, np.ndarray]) -> tuple[np.ndarray, dict]:
    """softmax(q k^T / sqrt(A)) v with q from ``current`` and k, v from ``context``."""
    context = np.asarray(context, dtype=np.float64)
    if context.ndim != 2 or len(context) == 0:
        raise EmptyQueueError("empty long-term queue")
    A = params["Wq"].shape[1]
    q = current @ params["Wq"]
    K = context @ params["Wk"]
    V = context @ params["Wv"]
    w = _softmax(K @ q / np.sqrt(A))
    out = w @ V
    return out, {"ctx": context, "cur": current, "q": q, "K": K, "V": V, "w": w}


def attention_backward(dout: np.ndarray, cache: dict, params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    ctx, cur, q, K, V, w = (cache[k] for k in ("ctx", "cur", "q", "K", "V", "w"))
    scale = 1.0 / np.sqrt(q.shape[0])
    dV = np.outer(w, dout)
    dw = V @ dout
    ds = w * (dw - w @ dw)
    dq = scale * (K.T @ ds)
    dK = scale * np.outer(ds, q)
    return {"Wq": np.outer(cur, dq), "Wk": ctx.T @ dK, "Wv": ctx.T @ dV}


def forward(params: dict[str, np.ndarray], short: np.ndarray, long: np.ndarray,
            current: np.ndarray) -> tuple[np.ndarray, dict]:
    h, lc = lstm_forward(short, params)
    a, ac = attention_forward(long, current, params)
    z = np.concatenate([h, a])
    probs = _softmax(z @ params["Wout"] + params["bout"])
    return probs, {"lstm": lc, "attn": ac, "z": z, "probs": probs}


def loss_and_grad(params: dict[str, np.ndarray], short: np.ndarray, long: np.ndarray,
                  current: np.ndarray, label: int) -> tuple[float, dict[str, np.ndarray]]:
    """Cross-entropy loss of one sample and its gradient w.r.t. every trainable tensor."""
    probs, cache = forward(params, short, long, current)
    loss = -np.log(max(probs[label], 1e-300))
    dlogits = probs.copy()
    dlogits[label] -= 1.0
    z = cache["z"]
    H = params["Wh"].shape[0]
    grads = {"Wout": np.outer(z, dlogits), "bout": dlogits}
    dz = params["Wout"] @ dlogits
    grads.update(lstm_backward(dz[:H], cache["lstm"], params))
    grads.update(attention_backward(dz[H:], cache["attn"], params))
    return float(loss), grads


def infer(model: RoomNetModel, queues: MemoryQueues) -> Inference:
    short, long, cur = queues.arrays()
    probs, _ = forward(model.params, short, long, cur)
    return Inference.from_probs(probs, queues.timestamp)


def classify_frame(model: RoomNetModel, frame: Frame, qcfg: QueueConfig = QueueConfig()) -> Inference:
    """Inference for a lone frame: both queues hold copies of it."""
    hist = FeatureHistory(qcfg)
    hist.push(frame.timestamp, extract_feature(frame, model.backbone))
    return infer(model, hist.queues())


def mask_with_graph(inf: Inference, graph: "RoomGraph", prev_room: int) -> Inference:
    """Zero rooms not reachable in one hop from ``prev_room``; transit always allowed."""
    m = graph.room_count
    if not 0 <= prev_room < m:
        raise ValueError(f"unknown room {prev_room}")
    if len(inf.probs) != m + 1:
        raise ValueError("inference and graph disagree on room count")
    allowed = np.zeros(m + 1, dtype=bool)
    allowed[:m] = graph.adjacency[prev_room]
    allowed[prev_room] = True
    allowed[m] = True
    masked = np.where(allowed, inf.probs, 0.0)
    total = masked.sum()
    if total <= 0.0:
        return inf
    return Inference.from_probs(masked / total, inf.timestamp)


# -- training ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.05
    seed: int = 0
    stride: int = 1  # use every stride-th frame of each episode as a sample


@dataclass
class LabeledSequence:
    """Frame features of one episode with their class labels (transit = m)."""

    timestamps: np.ndarray
    features: np.ndarray
    labels: np.ndarray


@dataclass
class TrainResult:
    model: RoomNetModel
    loss_curve: list[float] = field(default_factory=list)


def build_samples(seqs: Sequence[LabeledSequence], qcfg: QueueConfig, stride: int = 1):
    """Materialise (short, long, current, label) arrays for every training sample."""
    shorts, longs, curs, labels = [], [], [], []
    for s in seqs:
        for i in range(0, len(s.timestamps), stride):
            si, li = sample_indices(s.timestamps, i, qcfg)
            shorts.append(s.features[si])
            longs.append(s.features[li])
            curs.append(s.features[i])
            labels.append(int(s.labels[i]))
    return np.stack(shorts), np.stack(longs), np.stack(curs), np.asarray(labels)


def dataset_loss(params, shorts, longs, curs, labels) -> float:
    total = 0.0
    for s, l, c, y in zip(shorts, longs, curs, labels):
        probs, _ = forward(params, s, l, c)
        total -= np.log(max(probs[y], 1e-300))
    return total / len(labels)


def train(model: RoomNetModel, sequences: Sequence[LabeledSequence], qcfg: QueueConfig,
          hp: TrainConfig = TrainConfig()) -> TrainResult:
    """Plain per-sample SGD on cross-entropy.  The backbone is never touched.

    ``loss_curve[0]`` is the loss of the untrained model over the training
    set; entry ``e`` is the mean per-sample loss seen during epoch ``e``.
    """
    if hp.epochs < 1:
        raise ValueError("epochs must be >= 1")
    if not sequences:
        raise TrainingError("no training episodes")
    shorts, longs, curs, labels = build_samples(sequences, qcfg, hp.stride)
    missing = sorted(set(range(model.class_count)) - set(labels.tolist()))
    if missing:
        raise TrainingError(f"class with no examples: {missing}")

    model = model.copy()
    params = model.params
    rng = np.random.default_rng(hp.seed)
    curve = [dataset_loss(params, shorts, longs, curs, labels)]
    for epoch in range(hp.epochs):
        total = 0.0
        for k in rng.permutation(len(labels)):
            loss, grads = loss_and_grad(params, shorts[k], longs[k], curs[k], labels[k])
            if not np.isfinite(loss):
                raise TrainingError("training diverged (loss is NaN)")
            total += loss
            for name, g in grads.items():
                params[name] -= hp.lr * g
        curve.append(total / len(labels))
        log.info("epoch %d loss %.4f", epoch + 1, curve[-1])
    quantize(model)
    return TrainResult(model, curve)


def quantize(model: RoomNetModel) -> None:
    """Round parameters to float32 so the in-memory model equals its saved form."""
    for k, v in model.params.items():
        model.params[k] = v.astype(np.float32).astype(np.float64)


# -- persistence -------------------------------------------------------------

def _split_gates(w: np.ndarray, H: int) -> list[np.ndarray]:
    return [w[..., g * H:(g + 1) * H] for g in range(4)]


def _model_tensors(model: RoomNetModel) -> list[np.ndarray]:
    p, H = model.params, model.hidden_size
    return (
        [model.backbone.projection]
        + _split_gates(p["Wx"], H)
        + _split_gates(p["Wh"], H)
        + _split_gates(p["b"], H)
        + [p["Wq"], p["Wk"], p["Wv"], p["Wout"], p["bout"]]
    )


def write_model(fh: BinaryIO, model: RoomNetModel) -> None:
    D, F = model.backbone.projection.shape
    dims = (D, F, model.hidden_size, model.attention_size, model.class_count)
    fh.write(MODEL_MAGIC + struct.pack("<I5I", MODEL_VERSION, *dims))
    for t in _model_tensors(model):
        fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    fh.write(struct.pack("<Q", model.backbone.seed))


def read_model(fh: BinaryIO) -> RoomNetModel:
    head = fh.read(4 + 24)
    if head[:4] != MODEL_MAGIC:
        raise ValueError("not a RoomNet model file")
    version, D, F, H, A, C = struct.unpack("<I5I", head[4:])
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")

    def take(*shape):
        n = int(np.prod(shape))
        buf = fh.read(4 * n)
        if len(buf) != 4 * n:
            raise ValueError("truncated model file")
        return np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape)

    proj = take(D, F)
    Wx = np.concatenate([take(F, H) for _ in range(4)], axis=1)
    Wh = np.concatenate([take(H, H) for _ in range(4)], axis=1)
    b = np.concatenate([take(H) for _ in range(4)])
    params = {"Wx": Wx, "Wh": Wh, "b": b, "Wq": take(F, A), "Wk": take(F, A),
              "Wv": take(F, A), "Wout": take(H + A, C), "bout": take(C)}
    (seed,) = struct.unpack("<Q", fh.read(8))
    proj.flags.writeable = False
    return RoomNetModel(BackboneParams(proj, seed), params, seed)


def model_to_bytes(model: RoomNetModel) -> bytes:
    buf = io.BytesIO()
    write_model(buf, model)
    return buf.getvalue()


def save_model(path: str | Path, model: RoomNetModel) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path: str | Path) -> RoomNetModel:
    with open(path, "rb") as fh:
        return read_model(fh)
