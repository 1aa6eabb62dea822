"""Speaker embedding network, GE2E objective with exact gradients, SGD training.

The network is a frame-wise MLP (40 -> 128 -> 128, tanh) mean-pooled over
frames, projected to a 64-d vector and L2-normalized. The training objective
is the softmax GE2E loss over scaled cosine similarities to speaker centroids,
with the leave-one-out centroid for an utterance's own speaker. All gradients
are reverse-mode by hand, including the cosine, centroid and normalization
paths, so they can be checked against finite differences to tight tolerance.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import TRAIN, Corpus
from .frontend import FeatureMatrix, log_mel_features

IN_DIM = 40
HIDDEN_DIM = 128
EMBED_DIM = 64

SCALE_INIT = 10.0
OFFSET_INIT = -5.0
SCALE_FLOOR = 1e-6
GRAD_CLIP_NORM = 3.0

_CKPT_MAGIC = b"SVEC"
_CKPT_VERSION = 1
_ARRAY_FIELDS = ("w1", "b1", "w2", "b2", "w3", "b3")


@dataclass
class ModelParams:
    """All trainable state: MLP weights plus the similarity scale/offset."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    ge2e_scale: float
    ge2e_offset: float

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.w1.shape[0], self.w1.shape[1], self.w3.shape[1])

    def copy(self) -> "ModelParams":
        return ModelParams(
            *(getattr(self, f).copy() for f in _ARRAY_FIELDS),
            self.ge2e_scale, self.ge2e_offset,
        )


def init_params(seed: int, in_dim: int = IN_DIM, hidden_dim: int = HIDDEN_DIM,
                embed_dim: int = EMBED_DIM) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), +) weights and biases; fixed scale/offset init."""
    rng = np.random.default_rng([seed, 101])

    def layer(fan_in, fan_out):
        r = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-r, r, (fan_in, fan_out)), rng.uniform(-r, r, fan_out)

    w1, b1 = layer(in_dim, hidden_dim)
    w2, b2 = layer(hidden_dim, hidden_dim)
    w3, b3 = layer(hidden_dim, embed_dim)
    return ModelParams(w1, b1, w2, b2, w3, b3, SCALE_INIT, OFFSET_INIT)


def _as_frames(features) -> np.ndarray:
    x = features.frames if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("empty feature matrix")
    return x


def embed(params: ModelParams, features) -> np.ndarray:
    """Unit-norm embedding of one feature matrix (frame order irrelevant)."""
    x = _as_frames(features)
    h1 = np.tanh(x @ params.w1 + params.b1)
    h2 = np.tanh(h1 @ params.w2 + params.b2)
    z = h2.mean(axis=0) @ params.w3 + params.b3
    norm = np.linalg.norm(z)
    if norm == 0.0:
        raise ValueError("degenerate zero pre-embedding")
    return z / norm


def cosine_score(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine undefined for zero vector")
    return float(a @ b / (na * nb))


# ---------------------------------------------------------------------------
# GE2E objective
# ---------------------------------------------------------------------------

def ge2e_loss_from_embeddings(emb: np.ndarray, scale: float, offset: float):
    """Softmax GE2E on an (N, M, D) stack of embeddings.

    Returns (loss, d_emb, d_scale, d_offset). The logit of utterance (j, i)
    against speaker k is scale * cos(e_ji, c_k) + offset, where c_k is the
    mean embedding of speaker k, except k = j where the centroid excludes
    e_ji itself. Gradients are exact, including through the centroids.
    """
    emb = np.asarray(emb, dtype=np.float64)
    n_spk, n_utt, _ = emb.shape
    if n_spk < 2 or n_utt < 2:
        raise ValueError("GE2E needs at least 2 speakers and 2 utterances each")
    sums = emb.sum(axis=1)
    cents = sums / n_utt

    loss = 0.0
    d_emb = np.zeros_like(emb)
    d_scale = 0.0
    d_offset = 0.0
    for j in range(n_spk):
        for i in range(n_utt):
            u = emb[j, i]
            cands = cents.copy()
            cands[j] = (sums[j] - u) / (n_utt - 1)
            nu = np.linalg.norm(u)
            nv = np.linalg.norm(cands, axis=1)
            cos = cands @ u / (nu * nv)
            logits = scale * cos + offset

            top = logits.max()
            lse = top + math.log(np.exp(logits - top).sum())
            loss += lse - logits[j]

            d_logit = np.exp(logits - lse)
            d_logit[j] -= 1.0
            d_scale += float(d_logit @ cos)
            d_offset += float(d_logit.sum())
            d_cos = scale * d_logit

            # cos(u, v) = u.v / (|u||v|)
            du = cands / (nu * nv)[:, None] - np.outer(cos, u) / nu**2
            d_emb[j, i] += d_cos @ du
            dv = u[None, :] / (nu * nv)[:, None] - (cos / nv**2)[:, None] * cands
            dv_weighted = d_cos[:, None] * dv
            loo = dv_weighted[j].copy()
            dv_weighted[j] = 0.0
            d_emb += dv_weighted[:, None, :] / n_utt
            d_emb[j] += loo / (n_utt - 1)
            d_emb[j, i] -= loo / (n_utt - 1)
    return float(loss), d_emb, float(d_scale), float(d_offset)


def _stack_batch(batch):
    mats = [_as_frames(f) for row in batch for f in row]
    lengths = np.array([m.shape[0] for m in mats])
    return np.concatenate(mats, axis=0), lengths


def ge2e_loss_and_grads(params: ModelParams, batch) -> tuple[float, ModelParams]:
    """Loss and exact parameter gradients for N x M feature matrices.

    `batch` is a list of N speakers, each a list of M feature matrices.
    Gradients come back in a ModelParams of the same shapes.
    """
    n_spk = len(batch)
    if n_spk < 2 or any(len(row) < 2 for row in batch):
        raise ValueError("GE2E needs at least 2 speakers and 2 utterances each")
    n_utt = len(batch[0])
    if any(len(row) != n_utt for row in batch):
        raise ValueError("ragged batch: all speakers need the same utterance count")

    x, lengths = _stack_batch(batch)
    h1 = np.tanh(x @ params.w1 + params.b1)
    h2 = np.tanh(h1 @ params.w2 + params.b2)
    ends = np.cumsum(lengths)
    starts = ends - lengths
    pooled = np.add.reduceat(h2, starts, axis=0) / lengths[:, None]
    z = pooled @ params.w3 + params.b3
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("degenerate zero pre-embedding")
    unit = z / norms

    loss, d_emb, d_scale, d_offset = ge2e_loss_from_embeddings(
        unit.reshape(n_spk, n_utt, -1), params.ge2e_scale, params.ge2e_offset
    )

    de = d_emb.reshape(n_spk * n_utt, -1)
    dz = (de - (de * unit).sum(axis=1, keepdims=True) * unit) / norms
    d_w3 = pooled.T @ dz
    d_b3 = dz.sum(axis=0)
    d_pooled = dz @ params.w3.T
    dh2 = np.repeat(d_pooled / lengths[:, None], lengths, axis=0)
    dp2 = dh2 * (1.0 - h2 * h2)
    d_w2 = h1.T @ dp2
    d_b2 = dp2.sum(axis=0)
    dh1 = dp2 @ params.w2.T
    dp1 = dh1 * (1.0 - h1 * h1)
    d_w1 = x.T @ dp1
    d_b1 = dp1.sum(axis=0)
    grads = ModelParams(d_w1, d_b1, d_w2, d_b2, d_w3, d_b3, d_scale, d_offset)
    return loss, grads


# ---------------------------------------------------------------------------
# Batch sampling and training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    speakers_per_batch: int = 8
    utterances_per_speaker: int = 2
    steps: int = 1500
    learning_rate: float = 0.1
    crop_frames: int = 100
    seed: int = 0


def sample_batch(train_corpus: Corpus, n_speakers: int, n_utterances: int, seed,
                 feature_cache: dict | None = None, crop_frames: int | None = None):
    """N distinct speakers x M distinct train utterances, as feature matrices.

    With crop_frames set, each selected utterance contributes a seeded random
    window of that many frames (whole utterance when shorter), the usual
    partial-utterance regime for this loss.
    """
    eligible = [s for s in train_corpus.speakers()
                if len(train_corpus.utterances(s, TRAIN)) >= n_utterances]
    if len(eligible) < n_speakers:
        raise ValueError(
            f"need {n_speakers} speakers with >= {n_utterances} train utterances, "
            f"corpus has {len(eligible)}"
        )
    rng = np.random.default_rng(seed)
    batch = []
    for k in rng.choice(len(eligible), n_speakers, replace=False):
        utts = train_corpus.utterances(eligible[k], TRAIN)
        row = []
        for pick in rng.choice(len(utts), n_utterances, replace=False):
            utt = utts[pick]
            feats = None if feature_cache is None else feature_cache.get(utt.utterance_id)
            if feats is None:
                feats = log_mel_features(utt.waveform)
                if feature_cache is not None:
                    feature_cache[utt.utterance_id] = feats
            if crop_frames is not None and len(feats.frames) > crop_frames:
                start = int(rng.integers(len(feats.frames) - crop_frames + 1))
                feats = FeatureMatrix(feats.frames[start : start + crop_frames])
            row.append(feats)
        batch.append(row)
    return batch


def _global_norm(grads: ModelParams) -> float:
    total = grads.ge2e_scale**2 + grads.ge2e_offset**2
    for name in _ARRAY_FIELDS:
        total += float((getattr(grads, name) ** 2).sum())
    return math.sqrt(total)


def train(train_corpus: Corpus, config: TrainConfig,
          feature_cache: dict | None = None) -> ModelParams:
    """Plain SGD on the GE2E objective with global gradient-norm clipping."""
    if config.speakers_per_batch < 2 or config.utterances_per_speaker < 2:
        raise ValueError("batch must cover >= 2 speakers and >= 2 utterances each")
    params = init_params(config.seed)
    cache = {} if feature_cache is None else feature_cache
    lr = config.learning_rate
    for step in range(config.steps):
        batch = sample_batch(train_corpus, config.speakers_per_batch,
                             config.utterances_per_speaker,
                             [config.seed, 1, step], cache, config.crop_frames)
        loss, grads = ge2e_loss_and_grads(params, batch)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite GE2E loss at step {step}: {loss!r}")
        norm = _global_norm(grads)
        factor = lr if norm <= GRAD_CLIP_NORM else lr * GRAD_CLIP_NORM / norm
        params = ModelParams(
            *(getattr(params, f) - factor * getattr(grads, f) for f in _ARRAY_FIELDS),
            max(params.ge2e_scale - factor * grads.ge2e_scale, SCALE_FLOOR),
            params.ge2e_offset - factor * grads.ge2e_offset,
        )
    return params


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path) -> None:
    """Versioned binary checkpoint; little-endian float64 arrays in fixed order."""
    in_dim, hidden_dim, embed_dim = params.dims
    parts = [struct.pack("<4sIIII", _CKPT_MAGIC, _CKPT_VERSION, in_dim, hidden_dim, embed_dim)]
    for name in _ARRAY_FIELDS:
        parts.append(np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes())
    parts.append(struct.pack("<dd", params.ge2e_scale, params.ge2e_offset))
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, in_dim, hidden_dim, embed_dim = struct.unpack("<IIII", data[4:20])
    if version != _CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    shapes = [(in_dim, hidden_dim), (hidden_dim,), (hidden_dim, hidden_dim),
              (hidden_dim,), (hidden_dim, embed_dim), (embed_dim,)]
    expected = 20 + 8 * sum(int(np.prod(s)) for s in shapes) + 16
    if len(data) != expected:
        raise ValueError(f"{path}: checkpoint size mismatch")
    pos = 20
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(data[pos : pos + 8 * count], dtype="<f8").reshape(shape).copy())
        pos += 8 * count
    scale, offset = struct.unpack("<dd", data[pos : pos + 16])
    return ModelParams(*arrays, scale, offset)
