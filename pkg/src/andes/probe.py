"""Frozen-backbone downstream evaluation.

Class-token embeddings feed exact cosine retrieval (mAP@k) and a small linear
classifier under stratified K-fold splits; patch tokens feed a one-layer
linear segmentation head scored by Dice. Classification and segmentation also
support full fine-tuning of the backbone at a reduced learning rate.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .augment import normalize, resize_tile
from .backbone import MultiSpectralViT
from .data import BandImage, BandStats, DatasetManifest, TileCache
from .errors import DataError
from .metrics import ClsMetrics, classification_metrics, dice

EMB_MAGIC = b"EMB1"
_UNLABELED = 0xFFFFFFFF


@dataclass
class EmbeddingDB:
    """Frozen class-token vectors with labels and stable tile identifiers."""

    vectors: np.ndarray  # (N, D) float32
    labels: np.ndarray  # (N,) int64, -1 for unlabeled
    ids: list[str]

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.vectors.ndim != 2:
            raise ValueError(f"vectors must be (N, D), got {self.vectors.shape}")
        if not (self.vectors.shape[0] == self.labels.shape[0] == len(self.ids)):
            raise ValueError("vectors, labels, and ids must have matching lengths")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("vectors contain non-finite values")

    def __len__(self) -> int:
        return self.vectors.shape[0]


def save_embeddings(db: EmbeddingDB, path: Path | str) -> None:
    n, d = db.vectors.shape
    blob = bytearray()
    blob += EMB_MAGIC
    blob += np.asarray([n, d], dtype="<u4").tobytes()
    blob += db.vectors.astype("<f4", copy=False).tobytes()
    labels_u32 = np.where(db.labels < 0, _UNLABELED, db.labels).astype("<u4")
    blob += labels_u32.tobytes()
    for s in db.ids:
        b = s.encode("utf-8")
        blob += np.asarray([len(b)], dtype="<u2").tobytes()
        blob += b
    Path(path).write_bytes(bytes(blob))


def load_embeddings(path: Path | str) -> EmbeddingDB:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read embedding file {path}: {exc}") from exc
    if len(blob) < 12 or blob[:4] != EMB_MAGIC:
        raise DataError(f"bad magic in embedding file {path}")
    n, d = (int(x) for x in np.frombuffer(blob[4:12], dtype="<u4"))
    pos = 12
    vectors = np.frombuffer(blob[pos : pos + 4 * n * d], dtype="<f4").reshape(n, d).copy()
    pos += 4 * n * d
    labels_u32 = np.frombuffer(blob[pos : pos + 4 * n], dtype="<u4")
    labels = np.where(labels_u32 == _UNLABELED, -1, labels_u32.astype(np.int64))
    pos += 4 * n
    ids = []
    for _ in range(n):
        ln = int(np.frombuffer(blob[pos : pos + 2], dtype="<u2")[0])
        pos += 2
        ids.append(blob[pos : pos + ln].decode("utf-8"))
        pos += ln
    return EmbeddingDB(vectors=vectors, labels=labels, ids=ids)


# ---------------------------------------------------------------------------
# Embedding extraction
# ---------------------------------------------------------------------------


def eval_input(tile: BandImage, size: int, stats: BandStats) -> np.ndarray:
    """Deterministic eval-time pipeline: resize to the model's view size and
    normalize; no augmentation."""
    return normalize(resize_tile(tile, size), stats).tensor


@torch.no_grad()
def embed_dataset(
    model: MultiSpectralViT,
    manifest: DatasetManifest,
    stats: BandStats,
    input_size: int,
    batch_size: int = 64,
) -> EmbeddingDB:
    """One class-token vector per tile, in manifest order."""
    if manifest.bands != model.cfg.in_channels:
        raise DataError(
            f"manifest has {manifest.bands} bands but backbone expects {model.cfg.in_channels}"
        )
    model.eval()
    tiles = TileCache(manifest)
    vectors = []
    for start in range(0, len(manifest), batch_size):
        chunk = [eval_input(tiles[i], input_size, stats) for i in range(start, min(start + batch_size, len(manifest)))]
        out = model(torch.from_numpy(np.stack(chunk)))
        vectors.append(out.class_token.numpy().astype(np.float32))
    labels = np.asarray([e.label if e.label is not None else -1 for e in manifest.entries], dtype=np.int64)
    return EmbeddingDB(vectors=np.concatenate(vectors), labels=labels, ids=manifest.ids())


@torch.no_grad()
def patch_tokens_for(
    model: MultiSpectralViT,
    tiles: list[BandImage],
    stats: BandStats,
    input_size: int,
    batch_size: int = 32,
) -> torch.Tensor:
    """Patch tokens (B, N, D) for a list of tiles, eval pipeline."""
    model.eval()
    outs = []
    for start in range(0, len(tiles), batch_size):
        chunk = [eval_input(t, input_size, stats) for t in tiles[start : start + batch_size]]
        outs.append(model(torch.from_numpy(np.stack(chunk))).patch_tokens)
    return torch.cat(outs)


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------


def cosine_topk(db: EmbeddingDB, query_index: int, k: int) -> list[tuple[str, float]]:
    """Exact cosine ranking of all other entries against one query.

    Descending similarity, ties broken by ascending database index; zero-norm
    database vectors rank last with similarity -inf."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    vectors = db.vectors.astype(np.float64)
    q = vectors[query_index]
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise ValueError(f"query {query_index} has zero norm")
    norms = np.linalg.norm(vectors, axis=1)
    zero = norms == 0.0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero-norm vectors ranked last", stacklevel=2)
    sims = np.where(zero, -np.inf, (vectors @ q) / np.where(zero, 1.0, norms) / qn)
    sims[query_index] = np.nan  # excluded below
    candidates = np.delete(np.arange(len(db)), query_index)
    cand_sims = sims[candidates]
    order = np.lexsort((candidates, -cand_sims))
    top = order[:k]
    return [(db.ids[candidates[j]], float(cand_sims[j])) for j in top]


def average_precision_at_k(rels: np.ndarray, n_relevant: int, k: int) -> float:
    """AP@k for one ranked relevance vector: sum of Precision@i at relevant
    ranks i <= k, normalized by min(R, k)."""
    rels = np.asarray(rels[:k], dtype=np.float64)
    if n_relevant == 0:
        raise ValueError("AP undefined with no relevant items")
    hits = np.cumsum(rels)
    precision_at = hits / np.arange(1, rels.size + 1)
    return float(np.sum(precision_at * rels) / min(n_relevant, k))


def map_at_k(db: EmbeddingDB, k: int) -> float:
    """Mean AP@k over positive-class queries (labels >= 1).

    Relevance means sharing the query's label; the query itself is excluded
    from its candidate list. Queries with no relevant counterpart are skipped."""
    queries = np.flatnonzero(db.labels >= 1)
    if queries.size == 0:
        raise ValueError("database has no positive-class entries")
    index_of = {tile_id: i for i, tile_id in enumerate(db.ids)}
    aps = []
    for qi in queries:
        n_relevant = int(np.sum(db.labels == db.labels[qi])) - 1
        if n_relevant == 0:
            continue
        ranked = cosine_topk(db, int(qi), k)
        rels = np.asarray([db.labels[index_of[tile_id]] == db.labels[qi] for tile_id, _ in ranked])
        aps.append(average_precision_at_k(rels, n_relevant, k))
    if not aps:
        raise ValueError("no query has a relevant counterpart")
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# Stratified K-fold
# ---------------------------------------------------------------------------


@dataclass
class FoldSplit:
    k: int
    folds: list[np.ndarray]

    def test_indices(self, fold: int) -> np.ndarray:
        return self.folds[fold]

    def train_indices(self, fold: int) -> np.ndarray:
        return np.sort(np.concatenate([f for j, f in enumerate(self.folds) if j != fold]))


def stratified_kfold(labels: np.ndarray, k: int, seed: int) -> FoldSplit:
    """Deterministic per-class shuffle + round-robin assignment to K folds."""
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise ValueError(f"K must be >= 2, got {k}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5F01D])))
    folds: list[list[int]] = [[] for _ in range(k)]
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        if idx.size < k:
            raise ValueError(f"class {cls} has {idx.size} members, fewer than K={k}")
        rng.shuffle(idx)
        for pos, t in enumerate(idx):
            folds[pos % k].append(int(t))
    return FoldSplit(k=k, folds=[np.sort(np.asarray(f, dtype=np.int64)) for f in folds])


def stratified_subsample(labels: np.ndarray, indices: np.ndarray, scale: float | int, seed: int) -> np.ndarray:
    """Subsample `indices` per class: fractions round to the nearest count,
    integers request that many per class. A class shrinking to zero is an error."""
    labels = np.asarray(labels)
    indices = np.asarray(indices)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5B5A])))
    chosen = []
    for cls in np.unique(labels[indices]):
        cls_idx = indices[labels[indices] == cls]
        if isinstance(scale, float):
            count = int(round(scale * cls_idx.size))
        else:
            count = min(int(scale), cls_idx.size)
        if count < 1:
            raise ValueError(f"subset leaves no samples for class {cls}")
        perm = rng.permutation(cls_idx.size)[:count]
        chosen.append(cls_idx[perm])
    return np.sort(np.concatenate(chosen))


# ---------------------------------------------------------------------------
# Linear classification probe
# ---------------------------------------------------------------------------


class ClassifierHead(torch.nn.Module):
    """Two fully connected layers on the class token."""

    def __init__(self, in_dim: int, hidden: int = 256):
        super().__init__()
        self.fc1 = torch.nn.Linear(in_dim, hidden)
        self.fc2 = torch.nn.Linear(hidden, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


@dataclass(frozen=True)
class ProbeConfig:
    mode: str = "frozen"  # "frozen" or "finetune"
    epochs: int = 50
    lr: float = 1e-3
    backbone_lr_factor: float = 0.1
    batch_size: int = 64
    holdout_frac: float = 0.1
    head_hidden: int = 256

    def __post_init__(self):
        if self.mode not in ("frozen", "finetune"):
            raise ValueError(f"unknown probe mode {self.mode!r}")


def _safe_f1(predictions: np.ndarray, labels: np.ndarray) -> float:
    tp = int(np.sum((predictions == 1) & (labels == 1)))
    fp = int(np.sum((predictions == 1) & (labels != 1)))
    fn = int(np.sum((predictions != 1) & (labels == 1)))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom > 0 else 0.0


def _holdout_split(labels: np.ndarray, frac: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Stratified (fit, holdout) index split over positions 0..N-1."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x401D])))
    fit, held = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        # tiny classes round to zero holdout; selection then keeps the final epoch
        n_hold = int(round(frac * idx.size))
        held.append(idx[:n_hold])
        fit.append(idx[n_hold:])
    return np.sort(np.concatenate(fit)), np.sort(np.concatenate(held))


@dataclass
class TrainedClassifier:
    head: ClassifierHead
    backbone: MultiSpectralViT | None  # set in finetune mode

    @torch.no_grad()
    def logits_from_embeddings(self, x: np.ndarray) -> np.ndarray:
        self.head.eval()
        return self.head(torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))).numpy()

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits_from_embeddings(x).argmax(axis=1)

    def scores(self, x: np.ndarray) -> np.ndarray:
        logits = torch.from_numpy(self.logits_from_embeddings(x))
        return torch.softmax(logits, dim=1)[:, 1].numpy()


def train_linear_classifier(
    embeddings: np.ndarray,
    labels: np.ndarray,
    cfg: ProbeConfig,
    seed: int,
) -> TrainedClassifier:
    """Train the two-layer head on frozen embeddings with cross-entropy.

    A stratified 10% holdout of the training split picks the best epoch by F1."""
    labels = np.asarray(labels, dtype=np.int64)
    if np.unique(labels).size < 2:
        raise ValueError("training split has a single class")
    fit_idx, hold_idx = _holdout_split(labels, cfg.holdout_frac, seed)
    x = torch.from_numpy(np.ascontiguousarray(embeddings, dtype=np.float32))
    y = torch.from_numpy(labels)
    torch.manual_seed(np.random.SeedSequence([seed, 0xC1A55]).generate_state(1)[0])
    head = ClassifierHead(embeddings.shape[1], cfg.head_hidden)
    opt = torch.optim.Adam(head.parameters(), lr=cfg.lr)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xBA7C4])))
    best_f1 = -1.0
    best_state = copy.deepcopy(head.state_dict())
    for _ in range(cfg.epochs):
        head.train()
        order = rng.permutation(fit_idx)
        for start in range(0, order.size, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            loss = F.cross_entropy(head(x[sel]), y[sel])
            opt.zero_grad()
            loss.backward()
            opt.step()
        head.eval()
        with torch.no_grad():
            preds = head(x[hold_idx]).argmax(dim=1).numpy() if hold_idx.size else np.empty(0, np.int64)
        f1 = _safe_f1(preds, labels[hold_idx]) if hold_idx.size else 0.0
        if f1 >= best_f1:  # ties keep the later epoch
            best_f1 = f1
            best_state = copy.deepcopy(head.state_dict())
    head.load_state_dict(best_state)
    head.eval()
    return TrainedClassifier(head=head, backbone=None)


def finetune_classifier(
    backbone: MultiSpectralViT,
    tiles: list[BandImage],
    labels: np.ndarray,
    stats: BandStats,
    input_size: int,
    cfg: ProbeConfig,
    seed: int,
) -> TrainedClassifier:
    """End-to-end fine-tuning: head at cfg.lr, backbone at a 0.1x factor.

    The passed backbone is not mutated; a copy is trained and returned."""
    labels = np.asarray(labels, dtype=np.int64)
    if np.unique(labels).size < 2:
        raise ValueError("training split has a single class")
    model = copy.deepcopy(backbone)
    model.train()
    fit_idx, hold_idx = _holdout_split(labels, cfg.holdout_frac, seed)
    inputs = torch.from_numpy(np.stack([eval_input(t, input_size, stats) for t in tiles]))
    y = torch.from_numpy(labels)
    torch.manual_seed(np.random.SeedSequence([seed, 0xF17E]).generate_state(1)[0])
    head = ClassifierHead(model.cfg.embed_dim, cfg.head_hidden)
    opt = torch.optim.Adam(
        [
            {"params": head.parameters(), "lr": cfg.lr},
            {"params": model.parameters(), "lr": cfg.lr * cfg.backbone_lr_factor},
        ]
    )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xBA7C4])))
    best_f1 = -1.0
    best_state = (copy.deepcopy(head.state_dict()), copy.deepcopy(model.state_dict()))
    for _ in range(cfg.epochs):
        model.train()
        head.train()
        order = rng.permutation(fit_idx)
        for start in range(0, order.size, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            loss = F.cross_entropy(head(model(inputs[sel]).class_token), y[sel])
            opt.zero_grad()
            loss.backward()
            opt.step()
        model.eval()
        head.eval()
        with torch.no_grad():
            preds = (
                head(model(inputs[hold_idx]).class_token).argmax(dim=1).numpy()
                if hold_idx.size
                else np.empty(0, np.int64)
            )
        f1 = _safe_f1(preds, labels[hold_idx]) if hold_idx.size else 0.0
        if f1 >= best_f1:  # ties keep the later epoch
            best_f1 = f1
            best_state = (copy.deepcopy(head.state_dict()), copy.deepcopy(model.state_dict()))
    head.load_state_dict(best_state[0])
    model.load_state_dict(best_state[1])
    model.eval()
    head.eval()
    return TrainedClassifier(head=head, backbone=model)


# ---------------------------------------------------------------------------
# Linear segmentation head
# ---------------------------------------------------------------------------


@dataclass
class TrainedSegHead:
    linear: torch.nn.Linear
    backbone: MultiSpectralViT | None  # set in finetune mode

    def logits_grid(self, patch_tokens: torch.Tensor) -> torch.Tensor:
        """(B, N, D) patch tokens -> (B, 2, g, g) logit grid."""
        b, n, _ = patch_tokens.shape
        g = int(round(n**0.5))
        out = self.linear(patch_tokens)
        return out.reshape(b, g, g, 2).permute(0, 3, 1, 2)


def upsample_logits(grid: torch.Tensor, out_size: int) -> torch.Tensor:
    return F.interpolate(grid, size=(out_size, out_size), mode="bilinear", align_corners=False)


def train_linear_seg_head(
    backbone: MultiSpectralViT,
    tiles: list[BandImage],
    masks: list[np.ndarray],
    stats: BandStats,
    input_size: int,
    cfg: ProbeConfig,
    seed: int,
) -> TrainedSegHead:
    """One linear map patch-token -> 2 classes, pixel cross-entropy after
    bilinear upsampling to mask resolution. Frozen mode trains on cached
    tokens; finetune also updates a copy of the backbone at a 0.1x lr."""
    if len(tiles) != len(masks):
        raise ValueError("tiles and masks must align")
    for tile, mask in zip(tiles, masks):
        if mask.shape != (tile.height, tile.width):
            raise ValueError(f"mask shape {mask.shape} != tile {tile.height}x{tile.width}")
    out_size = masks[0].shape[0]
    targets = torch.from_numpy(np.stack(masks).astype(np.int64))
    labels_for_split = np.asarray([int(m.any()) for m in masks])
    fit_idx, hold_idx = _holdout_split(labels_for_split, cfg.holdout_frac, seed)

    torch.manual_seed(np.random.SeedSequence([seed, 0x5E6]).generate_state(1)[0])
    linear = torch.nn.Linear(backbone.cfg.embed_dim, 2)
    finetune = cfg.mode == "finetune"
    model = copy.deepcopy(backbone) if finetune else backbone
    inputs = torch.from_numpy(np.stack([eval_input(t, input_size, stats) for t in tiles]))
    if finetune:
        opt = torch.optim.Adam(
            [
                {"params": linear.parameters(), "lr": cfg.lr},
                {"params": model.parameters(), "lr": cfg.lr * cfg.backbone_lr_factor},
            ]
        )
    else:
        tokens = patch_tokens_for(model, tiles, stats, input_size)
        opt = torch.optim.Adam(linear.parameters(), lr=cfg.lr)

    def epoch_tokens(idx: torch.Tensor) -> torch.Tensor:
        if finetune:
            return model(inputs[idx]).patch_tokens
        return tokens[idx]

    head = TrainedSegHead(linear=linear, backbone=model if finetune else None)
    best_score = -1.0
    best_state = (copy.deepcopy(linear.state_dict()), copy.deepcopy(model.state_dict()) if finetune else None)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5E61])))
    for _ in range(cfg.epochs):
        if finetune:
            model.train()
        order = rng.permutation(fit_idx)
        for start in range(0, order.size, max(1, cfg.batch_size // 4)):
            sel = torch.from_numpy(order[start : start + max(1, cfg.batch_size // 4)])
            logits = upsample_logits(head.logits_grid(epoch_tokens(sel)), out_size)
            loss = F.cross_entropy(logits, targets[sel])
            opt.zero_grad()
            loss.backward()
            opt.step()
        if hold_idx.size:
            if finetune:
                model.eval()
            with torch.no_grad():
                logits = upsample_logits(head.logits_grid(epoch_tokens(torch.from_numpy(hold_idx))), out_size)
                preds = logits.argmax(dim=1).numpy().astype(bool)
            score = float(np.mean([dice(p, masks[i]).dsc for p, i in zip(preds, hold_idx)]))
        else:
            score = 0.0
        if score >= best_score:  # ties keep the later epoch
            best_score = score
            best_state = (
                copy.deepcopy(linear.state_dict()),
                copy.deepcopy(model.state_dict()) if finetune else None,
            )
    linear.load_state_dict(best_state[0])
    if finetune and best_state[1] is not None:
        model.load_state_dict(best_state[1])
        model.eval()
    return head


@torch.no_grad()
def predict_masks(
    head: TrainedSegHead,
    backbone: MultiSpectralViT,
    tiles: list[BandImage],
    stats: BandStats,
    input_size: int,
) -> list[np.ndarray]:
    model = head.backbone if head.backbone is not None else backbone
    tokens = patch_tokens_for(model, tiles, stats, input_size)
    out_size = tiles[0].height
    logits = upsample_logits(head.logits_grid(tokens), out_size)
    return [m for m in logits.argmax(dim=1).numpy().astype(bool)]


# ---------------------------------------------------------------------------
# Few-shot sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    scale: float | int
    fold_values: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_values))

    @property
    def std(self) -> float:
        return float(np.std(self.fold_values))


def classification_sweep(
    db: EmbeddingDB,
    scales: list[float | int],
    k_folds: int,
    cfg: ProbeConfig,
    seed: int,
) -> dict[float | int, list[ClsMetrics]]:
    """K-fold linear probing at several training-set scales.

    Fractions subsample each class proportionally; integer scales request that
    many training samples per class."""
    split = stratified_kfold(db.labels, k_folds, seed)
    results: dict[float | int, list[ClsMetrics]] = {}
    for scale in scales:
        fold_metrics = []
        for fold in range(k_folds):
            train_idx = split.train_indices(fold)
            if scale != 1.0:
                train_idx = stratified_subsample(db.labels, train_idx, scale, seed + fold)
            clf = train_linear_classifier(db.vectors[train_idx], db.labels[train_idx], cfg, seed + fold)
            test_idx = split.test_indices(fold)
            preds = clf.predict(db.vectors[test_idx])
            scores = clf.scores(db.vectors[test_idx])
            fold_metrics.append(classification_metrics(preds, db.labels[test_idx], scores))
        results[scale] = fold_metrics
    return results


def classification_sweep_finetune(
    backbone: MultiSpectralViT,
    tiles: TileCache,
    labels: np.ndarray,
    scales: list[float | int],
    k_folds: int,
    cfg: ProbeConfig,
    stats: BandStats,
    input_size: int,
    seed: int,
) -> dict[float | int, list[ClsMetrics]]:
    """K-fold classification with backbone fine-tuning per fold."""
    labels = np.asarray(labels, dtype=np.int64)
    split = stratified_kfold(labels, k_folds, seed)
    results: dict[float | int, list[ClsMetrics]] = {}
    for scale in scales:
        fold_metrics = []
        for fold in range(k_folds):
            train_idx = split.train_indices(fold)
            if scale != 1.0:
                train_idx = stratified_subsample(labels, train_idx, scale, seed + fold)
            clf = finetune_classifier(
                backbone,
                [tiles[int(i)] for i in train_idx],
                labels[train_idx],
                stats,
                input_size,
                cfg,
                seed + fold,
            )
            test_idx = split.test_indices(fold)
            test_inputs = torch.from_numpy(
                np.stack([eval_input(tiles[int(i)], input_size, stats) for i in test_idx])
            )
            with torch.no_grad():
                logits = clf.head(clf.backbone(test_inputs).class_token)
            preds = logits.argmax(dim=1).numpy()
            scores = torch.softmax(logits, dim=1)[:, 1].numpy()
            fold_metrics.append(classification_metrics(preds, labels[test_idx], scores))
        results[scale] = fold_metrics
    return results


def segmentation_sweep(
    backbone: MultiSpectralViT,
    tiles: TileCache,
    indices: np.ndarray,
    scales: list[int],
    k_folds: int,
    cfg: ProbeConfig,
    stats: BandStats,
    input_size: int,
    seed: int,
) -> dict[int, list[float]]:
    """K-fold linear-head segmentation at several training-set sizes (counts)."""
    indices = np.asarray(indices)
    # Round-robin over a shuffle keeps folds size-balanced without labels.
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xF01D])))
    perm = rng.permutation(indices.size)
    folds = [np.sort(perm[j::k_folds]) for j in range(k_folds)]
    results: dict[int, list[float]] = {}
    for scale in scales:
        fold_scores = []
        for fold in range(k_folds):
            train_pos = np.concatenate([folds[j] for j in range(k_folds) if j != fold])
            test_pos = folds[fold]
            sub_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed + fold, 0xF01E])))
            take = min(int(scale), train_pos.size) if isinstance(scale, int) else int(round(scale * train_pos.size))
            if take < 1:
                raise ValueError("segmentation subset is empty")
            train_pos = np.sort(sub_rng.permutation(train_pos)[:take])
            train_tiles = [tiles[int(indices[j])] for j in train_pos]
            train_masks = [tiles.mask(int(indices[j])) for j in train_pos]
            head = train_linear_seg_head(backbone, train_tiles, train_masks, stats, input_size, cfg, seed + fold)
            test_tiles = [tiles[int(indices[j])] for j in test_pos]
            test_masks = [tiles.mask(int(indices[j])) for j in test_pos]
            preds = predict_masks(head, backbone, test_tiles, stats, input_size)
            fold_scores.append(float(np.mean([dice(p, g).dsc for p, g in zip(preds, test_masks)])))
        results[scale] = fold_scores
    return results
