"""The learnable pair predictor: a small MLP scoring patch pairs for stability.

Each unordered pair (i, j) is scored from the concatenation
f_i + f_j + ||f_i - f_j||_2 (a 2D+1 input). Because concatenation is
order-dependent, the logits of both orders are averaged before the single
sigmoid, making the score exactly symmetric and rank-invariant under a
constant logit shift. Training aligns scores with the top-K stable pairs of
each image via weighted binary cross-entropy; all arithmetic is float64 and
seeded, so runs are bit-reproducible.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import PatchFeatureMap
from .relational import PairIndexSet, canonical_pairs, make_ground_truth
from .watermark import pair_index

CHECKPOINT_MAGIC = b"RZMLP1"
PROB_EPS = 1e-7


@dataclass
class PredictorModel:
    """MLP weights: layers of (out, in) matrices; hidden layers use ReLU."""

    D: int
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    version: str = "RZMLP1"
    loss_history: list[float] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("weights and biases must be non-empty, same length")
        in_width = 2 * self.D + 1
        for idx, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {idx}: bad shapes {w.shape} / {b.shape}")
            if w.shape[1] != in_width:
                raise ValueError(
                    f"layer {idx}: expected input width {in_width}, got {w.shape[1]}"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {idx}: non-finite parameter")
            in_width = w.shape[0]
        if self.weights[-1].shape[0] != 1:
            raise ValueError("final layer must emit a single logit")

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w in self.weights[:-1])

    def copy_params(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        return [w.copy() for w in self.weights], [b.copy() for b in self.biases]


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for fitting the pair predictor."""

    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 1024
    seed: int = 0
    K: int = 50
    pos_weight: float | None = None  # None -> (n_pairs - K) / K per the class ratio
    hidden_sizes: tuple[int, ...] = (128, 128)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning rate, epochs, and batch size must be positive")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.pos_weight is not None and self.pos_weight <= 0:
            raise ValueError("pos_weight must be positive")


def init_model(D: int, hidden_sizes: tuple[int, ...] = (128, 128), seed=0) -> PredictorModel:
    """He-initialized MLP with the given hidden widths and a single-logit head."""
    rng = np.random.default_rng(seed)
    sizes = [2 * D + 1, *hidden_sizes, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = np.sqrt(2.0 / fan_in)
        weights.append(rng.normal(0.0, scale, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return PredictorModel(D, weights, biases)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward(model: PredictorModel, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Returns (logits, activations); activations[l] is the input to layer l."""
    acts = [x]
    h = x
    last = len(model.weights) - 1
    for idx, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w.T + b
        if idx < last:
            h = np.maximum(h, 0.0)
            acts.append(h)
    return h[:, 0], acts


def pair_feature_rows(
    features: np.ndarray, i_idx: np.ndarray, j_idx: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Both concatenation orders of the pair inputs, plus the scalar distance."""
    fi, fj = features[i_idx], features[j_idx]
    diff = fi - fj
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))[:, None]
    a = np.hstack([fi, fj, dist])
    b = np.hstack([fj, fi, dist])
    return a, b


def forward_logits(model: PredictorModel, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Symmetrized logit: mean of the MLP over both concatenation orders."""
    za, _ = _forward(model, a)
    zb, _ = _forward(model, b)
    return 0.5 * (za + zb)


def predict_pair(model: PredictorModel, f_i: np.ndarray, f_j: np.ndarray) -> float:
    """Stability probability for one pair; exactly symmetric in its arguments."""
    f_i = np.asarray(f_i, dtype=np.float64)
    f_j = np.asarray(f_j, dtype=np.float64)
    if f_i.shape != (model.D,) or f_j.shape != (model.D,):
        raise ValueError(f"feature vectors must have length D={model.D}")
    feats = np.vstack([f_i, f_j])
    a, b = pair_feature_rows(feats, np.array([0]), np.array([1]))
    return float(_sigmoid(forward_logits(model, a, b))[0])


def predict_all(model: PredictorModel, fm: PatchFeatureMap, chunk: int = 8192) -> np.ndarray:
    """Probabilities for every canonical pair (i < j), in canonical order."""
    if fm.D != model.D:
        raise ValueError(f"feature dimension {fm.D} != model D={model.D}")
    iu, ju = canonical_pairs(fm.P)
    out = np.empty(iu.shape[0], dtype=np.float64)
    for start in range(0, iu.shape[0], chunk):
        stop = min(start + chunk, iu.shape[0])
        a, b = pair_feature_rows(fm.features, iu[start:stop], ju[start:stop])
        out[start:stop] = _sigmoid(forward_logits(model, a, b))
    return out


def bce_loss(probs: np.ndarray, positives: PairIndexSet, pos_weight: float = 1.0) -> float:
    """Weighted binary cross-entropy over all canonical pairs.

    Probabilities are clamped to [eps, 1-eps] (eps = 1e-7); the positive-class
    term is scaled by pos_weight; the mean is over the C(P,2) canonical pairs.
    """
    P = positives.P
    m = P * (P - 1) // 2
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (m,):
        raise ValueError(f"expected {m} probabilities for P={P}, got {probs.shape}")
    y = np.zeros(m)
    for i, j in positives.pairs:
        y[pair_index(i, j, P)] = 1.0
    p = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    terms = pos_weight * y * np.log(p) + (1.0 - y) * np.log(1.0 - p)
    return float(-terms.mean())


def _row_losses(z: np.ndarray, y: np.ndarray, pos_weight: float) -> np.ndarray:
    p = np.clip(_sigmoid(z), PROB_EPS, 1.0 - PROB_EPS)
    return -(pos_weight * y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def loss_and_grads(
    model: PredictorModel,
    a: np.ndarray,
    b: np.ndarray,
    y: np.ndarray,
    pos_weight: float,
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Mean weighted BCE over the rows and its analytic parameter gradients."""
    za, acts_a = _forward(model, a)
    zb, acts_b = _forward(model, b)
    z = 0.5 * (za + zb)
    p = _sigmoid(z)
    n = z.shape[0]
    loss = float(_row_losses(z, y, pos_weight).mean())
    # d(mean loss)/dz with the unclamped sigmoid-BCE formula
    dz = ((1.0 - y) * p - pos_weight * y * (1.0 - p)) / n
    grads_w = [np.zeros_like(w) for w in model.weights]
    grads_b = [np.zeros_like(bb) for bb in model.biases]
    for acts in (acts_a, acts_b):
        delta = (0.5 * dz)[:, None]
        for idx in range(len(model.weights) - 1, -1, -1):
            grads_w[idx] += delta.T @ acts[idx]
            grads_b[idx] += delta.sum(axis=0)
            if idx > 0:
                delta = (delta @ model.weights[idx]) * (acts[idx] > 0)
    return loss, grads_w, grads_b


def _dataset_from_images(
    images: list[tuple[PatchFeatureMap, PatchFeatureMap]], K: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Pool pair rows and stability labels across the training images."""
    if not images:
        raise ValueError("empty training set")
    D = images[0][0].D
    rows_a, rows_b, labels = [], [], []
    for original, edited in images:
        if original.D != D or edited.D != D:
            raise ValueError("inconsistent feature dimension across training images")
        gt = make_ground_truth(original, edited, K)
        iu, ju = canonical_pairs(original.P)
        a, b = pair_feature_rows(original.features, iu, ju)
        y = np.zeros(iu.shape[0])
        for i, j in gt.pairs:
            y[pair_index(i, j, original.P)] = 1.0
        rows_a.append(a)
        rows_b.append(b)
        labels.append(y)
    return np.vstack(rows_a), np.vstack(rows_b), np.concatenate(labels), D


def _full_loss(
    model: PredictorModel,
    a: np.ndarray,
    b: np.ndarray,
    y: np.ndarray,
    pos_weight: float,
    chunk: int = 8192,
) -> float:
    total = 0.0
    for start in range(0, a.shape[0], chunk):
        stop = min(start + chunk, a.shape[0])
        z = forward_logits(model, a[start:stop], b[start:stop])
        total += float(_row_losses(z, y[start:stop], pos_weight).sum())
    return total / a.shape[0]


def train(
    images: list[tuple[PatchFeatureMap, PatchFeatureMap]], cfg: TrainConfig
) -> PredictorModel:
    """Fit the pair predictor on (original, edited) feature-map pairs.

    Ground truth per image is the top-K stable pair set; optimization is Adam
    on minibatches of pair rows. Returns the parameters with the lowest
    recorded full-dataset loss; `loss_history[0]` is the pre-training loss.
    """
    a, b, y, D = _dataset_from_images(images, cfg.K)
    n = a.shape[0]
    pos_weight = cfg.pos_weight
    if pos_weight is None:
        n_pos = int(y.sum())
        pos_weight = (n - n_pos) / n_pos if n_pos else 1.0

    init_ss, shuffle_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    rng = np.random.default_rng(shuffle_ss)
    model = init_model(D, cfg.hidden_sizes, seed=init_ss)

    adam_m = [np.zeros_like(w) for w in model.weights] + [np.zeros_like(bb) for bb in model.biases]
    adam_v = [np.zeros_like(w) for w in model.weights] + [np.zeros_like(bb) for bb in model.biases]
    step = 0

    history = [_full_loss(model, a, b, y, pos_weight)]
    best_loss = history[0]
    best_params = model.copy_params()

    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            loss, gw, gb = loss_and_grads(model, a[batch], b[batch], y[batch], pos_weight)
            if not np.isfinite(loss):
                raise RuntimeError(f"training diverged (non-finite loss) at epoch {epoch}")
            step += 1
            params = model.weights + model.biases
            grads = gw + gb
            bc1 = 1.0 - cfg.beta1**step
            bc2 = 1.0 - cfg.beta2**step
            for p, g, m_t, v_t in zip(params, grads, adam_m, adam_v):
                m_t *= cfg.beta1
                m_t += (1.0 - cfg.beta1) * g
                v_t *= cfg.beta2
                v_t += (1.0 - cfg.beta2) * g * g
                p -= cfg.learning_rate * (m_t / bc1) / (np.sqrt(v_t / bc2) + cfg.adam_eps)
        epoch_loss = _full_loss(model, a, b, y, pos_weight)
        if not np.isfinite(epoch_loss):
            raise RuntimeError(f"training diverged (non-finite loss) at epoch {epoch}")
        history.append(epoch_loss)
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best_params = model.copy_params()

    weights, biases = best_params
    out = PredictorModel(D, weights, biases)
    out.loss_history = history
    return out


def extract_watermark(model: PredictorModel, fm: PatchFeatureMap, K: int) -> PairIndexSet:
    """Top-K most confident pairs; ties break by ascending canonical index."""
    probs = predict_all(model, fm)
    m = probs.shape[0]
    if not 1 <= K <= m:
        raise ValueError(f"K={K} out of range [1, {m}]")
    order = np.argsort(-probs, kind="stable")[:K]
    iu, ju = canonical_pairs(fm.P)
    return PairIndexSet(fm.P, frozenset(zip(iu[order].tolist(), ju[order].tolist())))


def save_checkpoint(model: PredictorModel, path: str | Path) -> None:
    """Versioned binary: magic, D, layer count, per-layer shapes + float64 LE
    weights and biases, trailing CRC32 of everything before it."""
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<II", model.D, len(model.weights))
    for w, b in zip(model.weights, model.biases):
        blob += struct.pack("<II", w.shape[0], w.shape[1])
        blob += np.ascontiguousarray(w, dtype="<f8").tobytes()
        blob += np.ascontiguousarray(b, dtype="<f8").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path) -> PredictorModel:
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) + 12:
        raise ValueError("checkpoint truncated")
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError("bad checkpoint magic")
    payload, crc_bytes = data[:-4], data[-4:]
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise ValueError("checkpoint CRC mismatch")
    off = len(CHECKPOINT_MAGIC)
    D, n_layers = struct.unpack_from("<II", payload, off)
    off += 8
    weights, biases = [], []
    for _ in range(n_layers):
        rows, cols = struct.unpack_from("<II", payload, off)
        off += 8
        w = np.frombuffer(payload, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols)
        off += rows * cols * 8
        b = np.frombuffer(payload, dtype="<f8", count=rows, offset=off)
        off += rows * 8
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if off != len(payload):
        raise ValueError("checkpoint has trailing bytes")
    return PredictorModel(D, weights, biases)
