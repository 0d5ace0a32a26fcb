"""Contrastive training of image/text projection heads.

The loss is the symmetric InfoNCE objective over a batch of N matched pairs,

    L = -1/(2N) * sum_i [ log softmax_j(v_i . t_j / tau)_i
                        + log softmax_j(t_i . v_j / tau)_i ],

evaluated with log-sum-exp stabilisation. Its gradient is analytic: with
logits S = V T^T / tau, row-softmax P and column-softmax Q of S,

    dL/dS = (P + Q - 2I) / (2N),  dL/dV = dL/dS @ T / tau,  dL/dT = dL/dS^T @ V / tau.

Training fits two linear heads (D -> head_dim, outputs re-normalised) over
frozen backend embeddings with plain mini-batch gradient descent, keeps the
heads from the epoch with the lowest validation loss and stops once the
validation loss has not improved for ``patience`` epochs.
"""

from __future__ import annotations

import csv
import io
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptSnapshot, DivergedLoss, EmptyDataset, NonFiniteInput, VersionMismatch

HEADS_MAGIC = b"VLHEAD01"


@dataclass(frozen=True)
class BatchPair:
    V: np.ndarray
    T: np.ndarray

    def __post_init__(self) -> None:
        if self.V.ndim != 2 or self.V.shape != self.T.shape or self.V.shape[0] < 1:
            raise ValueError(f"V and T must be matching N x D matrices, got {self.V.shape} / {self.T.shape}")
        for name, mat in (("V", self.V), ("T", self.T)):
            norms = np.linalg.norm(mat, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-4):
                raise ValueError(f"rows of {name} must be unit-norm")

    @property
    def N(self) -> int:
        return self.V.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.07
    epochs: int = 30
    learning_rate: float = 0.5
    batch_size: int = 100
    patience: int = 3
    head_dim: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")


@dataclass
class TrainHistory:
    val_loss: list[float] = field(default_factory=list)
    recall_at_10: list[float] = field(default_factory=list)
    baseline_loss: float = float("nan")
    baseline_recall: float = float("nan")
    best_epoch: int = -1
    stopped_early: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "val_loss", "recall_at_10"])
        for epoch, (loss, rec) in enumerate(zip(self.val_loss, self.recall_at_10)):
            writer.writerow([epoch, f"{loss:.6f}", f"{rec:.6f}"])
        return buf.getvalue()


def _as_matrix(x: np.ndarray) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput("embedding batch contains non-finite values")
    return arr


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def clip_loss(V: np.ndarray, T: np.ndarray, tau: float = 0.07) -> float:
    V, T = _as_matrix(V), _as_matrix(T)
    n = V.shape[0]
    logits = V @ T.T / tau
    diag = np.diagonal(logits)
    image_to_text = diag - _logsumexp(logits, axis=1)
    text_to_image = diag - _logsumexp(logits, axis=0)
    return float(-(image_to_text.sum() + text_to_image.sum()) / (2 * n))


def clip_loss_grad(V: np.ndarray, T: np.ndarray, tau: float = 0.07) -> tuple[np.ndarray, np.ndarray]:
    V, T = _as_matrix(V), _as_matrix(T)
    n = V.shape[0]
    logits = V @ T.T / tau
    rows = np.exp(logits - logits.max(axis=1, keepdims=True))
    rows /= rows.sum(axis=1, keepdims=True)
    cols = np.exp(logits - logits.max(axis=0, keepdims=True))
    cols /= cols.sum(axis=0, keepdims=True)
    d_logits = (rows + cols - 2.0 * np.eye(n)) / (2 * n)
    return d_logits @ T / tau, d_logits.T @ V / tau


def normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def recall_at_k(image_emb: np.ndarray, text_emb: np.ndarray, k: int = 10) -> float:
    """Fraction of texts whose paired image ranks within the top ``k`` images.

    Ties rank the lower image index first.
    """
    image_emb, text_emb = np.asarray(image_emb, np.float64), np.asarray(text_emb, np.float64)
    if image_emb.shape != text_emb.shape:
        raise ValueError("image and text embeddings must be aligned pairs")
    n = image_emb.shape[0]
    if n == 0:
        raise EmptyDataset("no pairs to score")
    sims = text_emb @ image_emb.T
    own = np.diagonal(sims)[:, None]
    idx = np.arange(n)
    ahead = (sims > own) | ((sims == own) & (idx[None, :] < idx[:, None]))
    ranks = ahead.sum(axis=1) + 1
    return float(np.mean(ranks <= k))


class LinearHead:
    """x -> normalize(x @ W)."""

    def __init__(self, weight: np.ndarray) -> None:
        self.weight = np.asarray(weight, dtype=np.float64)

    @classmethod
    def initial(cls, dim: int, head_dim: int, rng: np.random.Generator) -> LinearHead:
        if head_dim == dim:
            return cls(np.eye(dim))
        return cls(rng.standard_normal((dim, head_dim)) / np.sqrt(dim))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y = np.asarray(x, np.float64) @ self.weight
        norms = np.linalg.norm(y, axis=1, keepdims=True)
        if not np.all(np.isfinite(norms) & (norms > 0)):
            raise NonFiniteInput("projection produced a zero or non-finite row")
        return y / norms

    def backward(self, x: np.ndarray, d_out: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the weight given dL/d(normalized output)."""
        y = x @ self.weight
        norm = np.linalg.norm(y, axis=1, keepdims=True)
        z = y / norm
        d_y = (d_out - z * np.sum(z * d_out, axis=1, keepdims=True)) / norm
        return x.T @ d_y


def _row_keys(a: np.ndarray, b: np.ndarray) -> set[bytes]:
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return {a[i].tobytes() + b[i].tobytes() for i in range(a.shape[0])}


def fit(
    train_images: np.ndarray,
    train_texts: np.ndarray,
    val_images: np.ndarray,
    val_texts: np.ndarray,
    config: TrainConfig | None = None,
) -> tuple[LinearHead, LinearHead, TrainHistory]:
    config = config or TrainConfig()
    x_img, x_txt = _as_matrix(train_images), _as_matrix(train_texts)
    v_img, v_txt = _as_matrix(val_images), _as_matrix(val_texts)
    if x_img.shape[0] == 0 or v_img.shape[0] == 0:
        raise EmptyDataset("training and validation sets must be non-empty")
    if x_img.shape != x_txt.shape or v_img.shape != v_txt.shape:
        raise ValueError("image/text matrices must be aligned")
    if _row_keys(x_img, x_txt) & _row_keys(v_img, v_txt):
        raise ValueError("training and validation sets share an item")

    rng = np.random.Generator(np.random.PCG64(config.seed))
    dim = x_img.shape[1]
    head_dim = config.head_dim or dim
    img_head = LinearHead.initial(dim, head_dim, rng)
    txt_head = LinearHead.initial(dim, head_dim, rng)

    def validate() -> tuple[float, float]:
        zi, zt = img_head(v_img), txt_head(v_txt)
        return clip_loss(zi, zt, config.tau), recall_at_k(zi, zt, 10)

    def step(bi: np.ndarray, bt: np.ndarray) -> None:
        zi, zt = img_head(bi), txt_head(bt)
        d_zi, d_zt = clip_loss_grad(zi, zt, config.tau)
        g_img = img_head.backward(bi, d_zi)
        g_txt = txt_head.backward(bt, d_zt)
        img_head.weight -= config.learning_rate * g_img
        txt_head.weight -= config.learning_rate * g_txt

    history = TrainHistory()
    history.baseline_loss, history.baseline_recall = validate()
    best = (np.inf, img_head.weight.copy(), txt_head.weight.copy())
    stale = 0
    n = x_img.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    step(x_img[batch], x_txt[batch])
            except NonFiniteInput as exc:
                raise DivergedLoss(f"training diverged at epoch {epoch}: {exc}") from exc
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                loss, rec = validate()
        except NonFiniteInput as exc:
            raise DivergedLoss(f"training diverged at epoch {epoch}: {exc}") from exc
        if not np.isfinite(loss):
            raise DivergedLoss(f"validation loss became {loss} at epoch {epoch}")
        history.val_loss.append(loss)
        history.recall_at_10.append(rec)
        if loss < best[0]:
            best = (loss, img_head.weight.copy(), txt_head.weight.copy())
            history.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                history.stopped_early = True
                break
    return LinearHead(best[1]), LinearHead(best[2]), history


@dataclass
class SyntheticPairs:
    train_images: np.ndarray
    train_texts: np.ndarray
    val_images: np.ndarray
    val_texts: np.ndarray
    train_labels: np.ndarray
    val_labels: np.ndarray


def random_rotation(dim: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diagonal(r))


def two_view_clusters(
    n_clusters: int = 10,
    dim: int = 64,
    train_per_cluster: int = 100,
    val_per_cluster: int = 10,
    noise: float = 0.05,
    seed: int = 0,
) -> SyntheticPairs:
    """Cluster directions seen through two different fixed rotations.

    Images are ``R_img (c + e)``, texts ``R_txt (c + e')`` with independent
    noise ``e, e'``; a pair shares only its cluster direction ``c``. Heads
    must learn to undo the rotations before pairs line up.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    centers = random_rotation(dim, rng)[:n_clusters]
    rot_img = random_rotation(dim, rng)
    rot_txt = random_rotation(dim, rng)

    def draw(per_cluster: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        labels = np.repeat(np.arange(n_clusters), per_cluster)
        base = centers[labels]
        img = normalize_rows((base + noise * rng.standard_normal(base.shape)) @ rot_img.T)
        txt = normalize_rows((base + noise * rng.standard_normal(base.shape)) @ rot_txt.T)
        return img, txt, labels

    ti, tt, tl = draw(train_per_cluster)
    vi, vt, vl = draw(val_per_cluster)
    return SyntheticPairs(ti, tt, vi, vt, tl, vl)


def save_heads(path: str | Path, img_head: LinearHead, txt_head: LinearHead) -> None:
    w_img, w_txt = img_head.weight, txt_head.weight
    if w_img.shape != w_txt.shape:
        raise ValueError("heads must share a shape")
    body = HEADS_MAGIC + struct.pack("<II", *w_img.shape)
    body += w_img.astype("<f4").tobytes() + w_txt.astype("<f4").tobytes()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_heads(path: str | Path) -> tuple[LinearHead, LinearHead]:
    data = Path(path).read_bytes()
    if len(data) < 20 or not data.startswith(HEADS_MAGIC[:6]):
        raise CorruptSnapshot("not a heads file")
    if data[:8] != HEADS_MAGIC:
        raise VersionMismatch(f"unsupported heads version {data[6:8]!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptSnapshot("heads checksum mismatch")
    rows, cols = struct.unpack_from("<II", body, 8)
    size = rows * cols * 4
    if len(body) != 16 + 2 * size:
        raise CorruptSnapshot("heads file has the wrong length")
    w_img = np.frombuffer(body, "<f4", rows * cols, 16).reshape(rows, cols)
    w_txt = np.frombuffer(body, "<f4", rows * cols, 16 + size).reshape(rows, cols)
    return LinearHead(w_img.astype(np.float64)), LinearHead(w_txt.astype(np.float64))
