"""Fusing road-graph embeddings with text-prior embeddings.

A text embedding is projected into the map-embedding space by a 2-layer
tanh MLP and added to the graph embedding of the road polyline, either
plainly (e = G + MLP(t)), scaled by a learnable weight
(e = G + lambda * MLP(t)), or with the text side itself being the sum of
the metadata and lane-width embeddings (t = o + l). A small full-batch
trainer with analytic gradients exercises the learnable parts end to end;
the polyline encoder here is a deliberately simple sinusoidal stand-in
for the full map encoder, which is out of scope.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegeneratePolyline, DimensionMismatch

DEFAULT_D_MAP = 64

_PARAMS_MAGIC = b"LTPF"
_PARAMS_VERSION = 1
_HEADER = struct.Struct("<4sHIIIqf")  # magic, version, d_text, hidden, d_map, seed, lambda


@dataclass
class MlpParams:
    """2-layer MLP weights: out = W2 @ tanh(W1 @ t + b1) + b2."""

    W1: np.ndarray  # (hidden, d_text)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (d_map, hidden)
    b2: np.ndarray  # (d_map,)

    @property
    def d_text(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def d_map(self) -> int:
        return self.W2.shape[0]

    def check(self) -> None:
        if self.b1.shape != (self.hidden,) or self.W2.shape[1] != self.hidden:
            raise DimensionMismatch("hidden-layer shapes inconsistent")
        if self.b2.shape != (self.d_map,):
            raise DimensionMismatch("output-layer shapes inconsistent")
        for arr in (self.W1, self.b1, self.W2, self.b2):
            if not np.isfinite(arr).all():
                raise ValueError("MLP parameters contain non-finite entries")


@dataclass
class FusionParams:
    """MLP plus the learnable scalar weight on its output."""

    mlp: MlpParams
    lam: float = 1.0


def init_mlp_params(
    d_text: int, hidden: int, d_map: int, rng: np.random.Generator
) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init from a seeded RNG."""
    bound1 = 1.0 / np.sqrt(d_text)
    bound2 = 1.0 / np.sqrt(hidden)
    return MlpParams(
        W1=rng.uniform(-bound1, bound1, size=(hidden, d_text)),
        b1=rng.uniform(-bound1, bound1, size=hidden),
        W2=rng.uniform(-bound2, bound2, size=(d_map, hidden)),
        b2=rng.uniform(-bound2, bound2, size=d_map),
    )


def init_fusion_params(
    d_text: int, hidden: int, d_map: int, seed: int
) -> FusionParams:
    # lambda starts at 1 so the weighted scheme begins identical to the plain sum
    rng = np.random.default_rng(seed)
    return FusionParams(mlp=init_mlp_params(d_text, hidden, d_map, rng), lam=1.0)


def graph_embed_polyline(polyline, d_map: int = DEFAULT_D_MAP) -> np.ndarray:
    """Sinusoidal positional encoding of a polyline, mean-pooled.

    Frequency slot j (covering output dims 2j and 2j+1) applies
    1/10000^(2j/d_map) to x for even j and to y for odd j, emitting
    sin/cos pairs per vertex that are then averaged. Order-invariant by
    construction but translation-sensitive. A stand-in encoder so fusion
    can run from real road geometry; not a learned map encoder.
    """
    if d_map <= 0 or d_map % 2 != 0:
        raise ValueError("d_map must be a positive even integer")
    pts = np.asarray(polyline, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("polyline must be a sequence of (x, y) points")
    if pts.shape[0] < 2 or (pts == pts[0]).all():
        raise DegeneratePolyline("polyline needs >= 2 distinct points")
    half = d_map // 2
    j = np.arange(half)
    freqs = 1.0 / np.power(10000.0, 2.0 * j / d_map)  # (half,)
    coords = np.where(j % 2 == 0, pts[:, 0:1], pts[:, 1:2])  # (n, half)
    phase = coords * freqs
    enc = np.empty((pts.shape[0], d_map))
    enc[:, 0::2] = np.sin(phase)
    enc[:, 1::2] = np.cos(phase)
    return enc.mean(axis=0)


def mlp_forward(params: MlpParams, t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.shape != (params.d_text,):
        raise DimensionMismatch(
            f"text vector has shape {t.shape}, MLP expects ({params.d_text},)"
        )
    hidden = np.tanh(params.W1 @ t + params.b1)
    return params.W2 @ hidden + params.b2


def combine_text(o: np.ndarray, l: np.ndarray) -> np.ndarray:
    """Sum the metadata and lane-width embeddings (same dimension)."""
    o = np.asarray(o, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    if o.shape != l.shape:
        raise DimensionMismatch(f"shapes differ: {o.shape} vs {l.shape}")
    return o + l


def fuse_additive(g: np.ndarray, t: np.ndarray, params: MlpParams) -> np.ndarray:
    """e = G + MLP(t)."""
    g = np.asarray(g, dtype=np.float64)
    out = mlp_forward(params, t)
    if g.shape != out.shape:
        raise DimensionMismatch(f"graph dim {g.shape} vs MLP output {out.shape}")
    return g + out


def fuse_weighted(g: np.ndarray, t: np.ndarray, fparams: FusionParams) -> np.ndarray:
    """e = G + lambda * MLP(t); reduces to the plain sum at lambda = 1."""
    g = np.asarray(g, dtype=np.float64)
    out = mlp_forward(fparams.mlp, t)
    if g.shape != out.shape:
        raise DimensionMismatch(f"graph dim {g.shape} vs MLP output {out.shape}")
    return g + fparams.lam * out


@dataclass
class FusionGradients:
    dW1: np.ndarray
    db1: np.ndarray
    dW2: np.ndarray
    db2: np.ndarray
    dlam: float


def fusion_loss(fparams: FusionParams, g, t, target) -> float:
    """Squared L2 error of the fused embedding against a target vector."""
    e = fuse_weighted(g, t, fparams)
    diff = e - np.asarray(target, dtype=np.float64)
    return float(diff @ diff)


def fusion_gradients(
    fparams: FusionParams, g, t, target
) -> tuple[FusionGradients, float]:
    """Analytic gradients of the squared error w.r.t. all learnables.

    Returns (gradients, loss). Backpropagates through
    e = G + lambda * (W2 tanh(W1 t + b1) + b2) with loss |e - target|^2.
    """
    mlp = fparams.mlp
    t = np.asarray(t, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if t.shape != (mlp.d_text,):
        raise DimensionMismatch(f"text vector shape {t.shape} != ({mlp.d_text},)")
    if g.shape != (mlp.d_map,) or target.shape != (mlp.d_map,):
        raise DimensionMismatch("graph/target vectors must have the map dimension")

    z = mlp.W1 @ t + mlp.b1
    h = np.tanh(z)
    m = mlp.W2 @ h + mlp.b2
    e = g + fparams.lam * m
    diff = e - target
    loss = float(diff @ diff)

    r = 2.0 * diff  # dL/de
    dlam = float(r @ m)
    dm = fparams.lam * r
    dW2 = np.outer(dm, h)
    db2 = dm
    dh = mlp.W2.T @ dm
    dz = (1.0 - h * h) * dh
    dW1 = np.outer(dz, t)
    db1 = dz
    return FusionGradients(dW1=dW1, db1=db1, dW2=dW2, db2=db2, dlam=dlam), loss


def train_fusion_toy(
    dataset: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
    epochs: int,
    lr: float,
    params: FusionParams | None = None,
    seed: int = 0,
    train_mlp: bool = True,
    train_lambda: bool = True,
    hidden: int | None = None,
) -> tuple[FusionParams, list[float]]:
    """Full-batch gradient descent on the mean squared fusion error.

    ``dataset`` holds (graph_vec, text_vec, target_vec) triples. Returns
    the final parameters and the pre-update loss of each epoch; the curve
    is reported as-is, not asserted monotone. ``train_mlp`` /
    ``train_lambda`` freeze the respective parts when False.
    """
    if not dataset:
        raise ValueError("dataset must be nonempty")
    if lr <= 0:
        raise ValueError("lr must be positive")
    if params is None:
        g0, t0, _ = dataset[0]
        d_map = np.asarray(g0).shape[0]
        d_text = np.asarray(t0).shape[0]
        params = init_fusion_params(d_text, hidden or d_map, d_map, seed)
    else:
        params = FusionParams(
            mlp=MlpParams(
                W1=params.mlp.W1.copy(),
                b1=params.mlp.b1.copy(),
                W2=params.mlp.W2.copy(),
                b2=params.mlp.b2.copy(),
            ),
            lam=params.lam,
        )

    n = len(dataset)
    losses: list[float] = []
    for _ in range(epochs):
        acc = FusionGradients(
            dW1=np.zeros_like(params.mlp.W1),
            db1=np.zeros_like(params.mlp.b1),
            dW2=np.zeros_like(params.mlp.W2),
            db2=np.zeros_like(params.mlp.b2),
            dlam=0.0,
        )
        total = 0.0
        for g, t, target in dataset:
            grads, loss = fusion_gradients(params, g, t, target)
            acc.dW1 += grads.dW1
            acc.db1 += grads.db1
            acc.dW2 += grads.dW2
            acc.db2 += grads.db2
            acc.dlam += grads.dlam
            total += loss
        losses.append(total / n)
        if train_mlp:
            params.mlp.W1 -= lr * acc.dW1 / n
            params.mlp.b1 -= lr * acc.db1 / n
            params.mlp.W2 -= lr * acc.dW2 / n
            params.mlp.b2 -= lr * acc.db2 / n
        if train_lambda:
            params.lam -= lr * acc.dlam / n
    return params, losses


def save_params(path: str | Path, fparams: FusionParams, seed: int = 0) -> None:
    """Persist parameters: fixed header then flat little-endian float32."""
    mlp = fparams.mlp
    mlp.check()
    header = _HEADER.pack(
        _PARAMS_MAGIC,
        _PARAMS_VERSION,
        mlp.d_text,
        mlp.hidden,
        mlp.d_map,
        seed,
        fparams.lam,
    )
    body = b"".join(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()
        for arr in (mlp.W1, mlp.b1, mlp.W2, mlp.b2)
    )
    Path(path).write_bytes(header + body)


def load_params(path: str | Path) -> tuple[FusionParams, int]:
    """Inverse of :func:`save_params`; returns (params, seed)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated parameter file")
    magic, version, d_text, hidden, d_map, seed, lam = _HEADER.unpack_from(raw)
    if magic != _PARAMS_MAGIC or version != _PARAMS_VERSION:
        raise ValueError(f"{path}: not a parameter file (magic {magic!r})")
    counts = [hidden * d_text, hidden, d_map * hidden, d_map]
    flat = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    if flat.size != sum(counts):
        raise ValueError(f"{path}: expected {sum(counts)} floats, found {flat.size}")
    pieces = np.split(flat, np.cumsum(counts)[:-1])
    mlp = MlpParams(
        W1=pieces[0].reshape(hidden, d_text),
        b1=pieces[1],
        W2=pieces[2].reshape(d_map, hidden),
        b2=pieces[3],
    )
    return FusionParams(mlp=mlp, lam=lam), seed


def save_loss_curve(path: str | Path, losses: list[float]) -> None:
    lines = ["epoch,loss"]
    lines += [f"{i},{loss}" for i, loss in enumerate(losses)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
