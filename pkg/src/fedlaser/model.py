"""Attention-GRU time-to-failure regressor.

Dataflow for one batch::

    p_seq (B, 9) -> GRU(64) -> GRU(32) -> additive attention -> c (32)
    [beta, delta, T, I] (B, 4) -> dense(64) + ReLU -> s (64)
    concat(c, s) (96) -> dense(64) + ReLU -> dense(32) + ReLU -> dropout -> linear(1)

Parameters live in a :class:`ParamSet`, an ordered name -> array mapping
with a canonical flatten order shared by aggregation and the wire format.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from fedlaser import tensor as tn
from fedlaser.adam import Adam
from fedlaser.features import Sample
from fedlaser.tensor import Tape, Tensor


@dataclass
class ModelConfig:
    gru1: int = 64
    gru2: int = 32
    attention: int = 32
    stat_dense: int = 64
    head1: int = 64
    head2: int = 32
    dropout_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for name in ("gru1", "gru2", "attention", "stat_dense", "head1", "head2"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"model.{name}: must be a positive integer, got {v!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"model.dropout_rate: must be in [0, 1), got {self.dropout_rate}")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ValueError(f"model.{key}: unknown key")
        return cls(**d)


N_STATS = 4
WINDOW = 9


def layout(cfg: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Canonical (name, shape) order of every parameter tensor."""
    h1, h2, a = cfg.gru1, cfg.gru2, cfg.attention
    fused = h2 + cfg.stat_dense
    return [
        ("gru1.W", (1, 3 * h1)), ("gru1.U", (h1, 3 * h1)), ("gru1.b", (3 * h1,)),
        ("gru2.W", (h1, 3 * h2)), ("gru2.U", (h2, 3 * h2)), ("gru2.b", (3 * h2,)),
        ("attn.W", (h2, a)), ("attn.w", (a,)),
        ("stat.W", (N_STATS, cfg.stat_dense)), ("stat.b", (cfg.stat_dense,)),
        ("head1.W", (fused, cfg.head1)), ("head1.b", (cfg.head1,)),
        ("head2.W", (cfg.head1, cfg.head2)), ("head2.b", (cfg.head2,)),
        ("out.W", (cfg.head2, 1)), ("out.b", (1,)),
    ]


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in layout(cfg))


# Parameter count of the full-width architecture. A change here means the
# architecture drifted.
PAPER_PARAM_COUNT = 31681


class ParamSet:
    """Ordered named weight tensors with a canonical flatten order."""

    def __init__(self, tensors: Dict[str, np.ndarray]):
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}

    @property
    def layout(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self.tensors.items()]

    @property
    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def flatten(self) -> np.ndarray:
        if not self.tensors:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    @classmethod
    def unflatten(cls, vector: np.ndarray, shapes: Sequence[Tuple[str, Tuple[int, ...]]]) -> "ParamSet":
        vector = np.asarray(vector, dtype=np.float64)
        total = sum(int(np.prod(s)) for _, s in shapes)
        if vector.shape != (total,):
            raise ValueError(f"vector of length {vector.size} does not match layout of {total}")
        out, pos = {}, 0
        for name, shape in shapes:
            n = int(np.prod(shape))
            out[name] = vector[pos: pos + n].reshape(shape).copy()
            pos += n
        return cls(out)

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.tensors.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def infer_config(self, dropout_rate: float = 0.0) -> ModelConfig:
        """Recover layer widths from tensor shapes."""
        t = self.tensors
        return ModelConfig(
            gru1=t["gru1.U"].shape[0], gru2=t["gru2.U"].shape[0],
            attention=t["attn.W"].shape[1], stat_dense=t["stat.W"].shape[1],
            head1=t["head1.W"].shape[1], head2=t["head2.W"].shape[1],
            dropout_rate=dropout_rate,
        )


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ParamSet:
    """Xavier-uniform weights (per gate block for GRUs), zero biases."""
    tensors = {}
    for name, shape in layout(cfg):
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
            continue
        if len(shape) == 1:
            fan_in, fan_out = shape[0], 1
        else:
            fan_in, fan_out = shape
            if name.startswith("gru"):
                fan_out //= 3
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = rng.uniform(-limit, limit, size=shape)
    return ParamSet(tensors)


def zero_params(cfg: ModelConfig) -> ParamSet:
    return ParamSet({name: np.zeros(shape) for name, shape in layout(cfg)})


# ---------------------------------------------------------------------------
# building blocks


def gru_cell(x_t, h_prev, W, U, b) -> Tensor:
    """One GRU step from primitive ops; ``x_t`` (B, in), ``h_prev`` (B, h)."""
    x_t, h_prev = tn.as_tensor(x_t), tn.as_tensor(h_prev)
    W, U, b = tn.as_tensor(W), tn.as_tensor(U), tn.as_tensor(b)
    H = U.shape[0]
    if h_prev.shape[-1] != H or x_t.shape[-1] != W.shape[0]:
        raise tn.ShapeError("gru_cell", x_t.shape, h_prev.shape)

    def block(m, k):
        return tn.slice_axis(m, slice(k * H, (k + 1) * H), axis=-1)

    xw = tn.add(tn.matmul(x_t, W), b)
    hu_zr = tn.matmul(h_prev, tn.slice_axis(U, slice(0, 2 * H), axis=-1))
    z = tn.sigmoid(tn.add(block(xw, 0), tn.slice_axis(hu_zr, slice(0, H), axis=-1)))
    r = tn.sigmoid(tn.add(block(xw, 1), tn.slice_axis(hu_zr, slice(H, 2 * H), axis=-1)))
    n = tn.tanh(tn.add(block(xw, 2), tn.matmul(tn.mul(r, h_prev), block(U, 2))))
    return tn.add(h_prev, tn.mul(z, tn.sub(n, h_prev)))


def gru_layer_unfused(x, W, U, b) -> Tensor:
    """Reference GRU over a sequence composed from :func:`gru_cell`."""
    x = tn.as_tensor(x)
    B, T, _ = x.shape
    H = tn.as_tensor(U).shape[0]
    h = Tensor(np.zeros((B, H)))
    steps = []
    for t in range(T):
        h = gru_cell(tn.slice_axis(x, t, axis=1), h, W, U, b)
        steps.append(tn.reshape(h, (B, 1, H)))
    return tn.concat(steps, axis=1)


def attention(h_seq, W_h, w) -> Tuple[Tensor, Tensor]:
    """Additive attention pooling: ``alpha = softmax(w . tanh(h W_h))``.

    ``h_seq`` is (B, T, H) or a single (T, H) sequence. Returns the weights
    (B, T) and the context ``sum_t alpha_t h_t`` (B, H), without the batch
    axis for a single sequence.
    """
    h_seq = tn.as_tensor(h_seq)
    single = h_seq.data.ndim == 2
    if single:
        h_seq = tn.reshape(h_seq, (1,) + h_seq.shape)
    if h_seq.data.ndim != 3 or h_seq.shape[1] == 0:
        raise tn.ShapeError("attention", h_seq.shape, None, "need a non-empty sequence")
    B, T, H = h_seq.shape
    W_h, w = tn.as_tensor(W_h), tn.as_tensor(w)
    if W_h.shape[0] != H or w.shape != (W_h.shape[1],):
        raise tn.ShapeError("attention", W_h.shape, w.shape)
    proj = tn.tanh(tn.matmul(h_seq, W_h))
    scores = tn.reshape(tn.matmul(proj, tn.reshape(w, (w.shape[0], 1))), (B, T))
    alphas = tn.softmax(scores, axis=-1)
    context = tn.sum_axis(tn.mul(h_seq, tn.reshape(alphas, (B, T, 1))), axis=1)
    if single:
        return tn.reshape(alphas, (T,)), tn.reshape(context, (H,))
    return alphas, context


def _dense(x, W, b, activation=True) -> Tensor:
    y = tn.add(tn.matmul(x, W), b)
    return tn.relu(y) if activation else y


# ---------------------------------------------------------------------------
# forward / training


@dataclass
class Batch:
    p_seq: np.ndarray   # (n, 9)
    stats: np.ndarray   # (n, 4): beta, delta, T, I
    target: np.ndarray  # (n,)

    def __len__(self) -> int:
        return self.target.shape[0]

    def take(self, idx) -> "Batch":
        return Batch(self.p_seq[idx], self.stats[idx], self.target[idx])


def to_batch(samples: Sequence[Sample]) -> Batch:
    return Batch(
        p_seq=np.array([s.p_seq for s in samples], dtype=np.float64).reshape(-1, WINDOW),
        stats=np.array([[s.beta, s.delta, s.temperature_C, s.current_mA] for s in samples],
                       dtype=np.float64).reshape(-1, N_STATS),
        target=np.array([s.ttf_years for s in samples], dtype=np.float64),
    )


PLAUSIBLE_ABS = 10.0  # normalized inputs sit near [0, 1]


def forward(batch: Batch, params: Dict[str, Tensor], mode: str = "eval",
            rng: Optional[np.random.Generator] = None, dropout_rate: float = 0.0,
            fused: bool = True) -> Tensor:
    """Predicted normalized TTF, shape (B,).

    ``mode="train"`` applies inverted dropout drawn from ``rng``; ``"eval"``
    is deterministic. ``fused=False`` runs the GRUs through the primitive-op
    reference cell instead of the kernel.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if np.abs(batch.p_seq).max(initial=0) > PLAUSIBLE_ABS or np.abs(batch.stats).max(initial=0) > PLAUSIBLE_ABS:
        warnings.warn("inputs look un-normalized", RuntimeWarning, stacklevel=2)
    p = {k: tn.as_tensor(v) for k, v in params.items()}
    B = len(batch)
    gru = tn.gru_sequence if fused else gru_layer_unfused

    x = Tensor(batch.p_seq.reshape(B, WINDOW, 1))
    h1 = gru(x, p["gru1.W"], p["gru1.U"], p["gru1.b"])
    h2 = gru(h1, p["gru2.W"], p["gru2.U"], p["gru2.b"])
    _, c = attention(h2, p["attn.W"], p["attn.w"])
    s = _dense(Tensor(batch.stats), p["stat.W"], p["stat.b"])
    f = tn.concat([c, s], axis=-1)
    d = _dense(f, p["head1.W"], p["head1.b"])
    d = _dense(d, p["head2.W"], p["head2.b"])
    if mode == "train" and dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train mode with dropout needs an rng")
        keep = rng.random(d.shape) >= dropout_rate
        d = tn.mul(d, keep / (1.0 - dropout_rate))
    out = _dense(d, p["out.W"], p["out.b"], activation=False)
    return tn.reshape(out, (B,))


def predict(params: ParamSet, batch: Batch, chunk: int = 1024) -> np.ndarray:
    """Eval-mode predictions in normalized units."""
    outs = []
    for start in range(0, len(batch), chunk):
        part = batch.take(slice(start, start + chunk))
        outs.append(forward(part, params.tensors, mode="eval").data)
    return np.concatenate(outs) if outs else np.zeros(0)


def batch_loss(params: ParamSet, batch: Batch) -> float:
    return float(np.mean((predict(params, batch) - batch.target) ** 2))


def train_step(params: ParamSet, batch: Batch, optimizer: Adam,
               rng: np.random.Generator, dropout_rate: float) -> Tuple[ParamSet, float]:
    tape = Tape()
    with tape:
        watched = {k: tape.watch(k, v) for k, v in params.tensors.items()}
        pred = forward(batch, watched, mode="train", rng=rng, dropout_rate=dropout_rate)
        loss = tn.mse_loss(pred, batch.target)
    grads = tn.backward(loss, tape)
    updated = optimizer.step(params.tensors, grads)
    return ParamSet(updated), float(loss.data)


def train_epoch(data: Batch, params: ParamSet, optimizer: Adam, batch_size: int,
                rng: np.random.Generator, dropout_rate: float = 0.0) -> Tuple[ParamSet, float]:
    """One shuffled pass of mini-batch Adam on MSE; returns the mean batch loss."""
    n = len(data)
    if n == 0:
        raise ValueError("train_epoch: empty dataset")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = rng.permutation(n)
    losses = []
    for start in range(0, n, batch_size):
        params, loss = train_step(params, data.take(order[start: start + batch_size]),
                                  optimizer, rng, dropout_rate)
        if not np.isfinite(loss):
            raise tn.NumericError(f"non-finite loss at batch starting {start}")
        losses.append(loss)
    return params, float(np.mean(losses))
