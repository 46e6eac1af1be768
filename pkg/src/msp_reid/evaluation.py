"""Embedding extraction, cosine retrieval with CMC/mAP, and linear probes."""

import enum
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from . import kernels
from .errors import EvaluationError, ProbeError
from .model import MSPNet, normalize_images, to_tensor
from .structures import Sample


class ProtocolMode(enum.Enum):
    STANDARD = "standard"
    CLOTH_CHANGING = "cloth_changing"


@dataclass(frozen=True)
class Protocol:
    mode: ProtocolMode = ProtocolMode.STANDARD
    cross_camera_only: bool = True

    @property
    def name(self) -> str:
        return self.mode.value


STANDARD = Protocol(ProtocolMode.STANDARD)
CLOTH_CHANGING = Protocol(ProtocolMode.CLOTH_CHANGING)


@dataclass
class RetrievalReport:
    rank1: float
    mAP: float
    cmc: np.ndarray
    average_precisions: np.ndarray
    protocol: Protocol
    num_queries: int
    probe_accuracy: Optional[float] = None
    probe_target: Optional[str] = None
    first_hits: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def to_json(self, max_rank: int = 20) -> dict:
        out = {
            "protocol": self.protocol.name,
            "rank1": float(self.rank1),
            "mAP": float(self.mAP),
            "cmc": [float(v) for v in self.cmc[:max_rank]],
            "num_queries": int(self.num_queries),
        }
        if self.probe_accuracy is not None:
            out["probe"] = {"target": self.probe_target, "accuracy": float(self.probe_accuracy)}
        return out


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

@torch.no_grad()
def extract_embeddings(model: MSPNet, samples: Sequence[Sample] | np.ndarray, batch_size: int = 256,
                       feature: str = "post_bn") -> np.ndarray:
    """Unit-norm embeddings from the ungated ID branch (eval mode)."""
    images = samples if isinstance(samples, np.ndarray) else (
        np.stack([s.image for s in samples]) if len(samples) else np.zeros((0,)))
    dim = 2 * model.config.embed_dim
    if len(images) == 0:
        return np.zeros((0, dim), dtype=np.float64)
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    chunks = []
    try:
        for start in range(0, len(images), batch_size):
            x = to_tensor(normalize_images(images[start:start + batch_size]), dtype)
            out = model(x, mode="eval")
            emb = out.embedding_pre_bn if feature == "pre_bn" else out.embedding_post_bn
            chunks.append(emb.double().numpy())
    finally:
        model.train(was_training)
    emb = np.concatenate(chunks)
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    return emb / np.maximum(norms, 1e-12)


@torch.no_grad()
def attention_maps(model: MSPNet, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Predicted attention (N, H', W'); computed for inspection even though eval ignores it."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    maps = []
    try:
        for start in range(0, len(images), batch_size):
            out = model(to_tensor(normalize_images(images[start:start + batch_size]), dtype), mode="eval")
            maps.append(out.A_hat[:, 0].double().numpy())
    finally:
        model.train(was_training)
    return np.concatenate(maps) if maps else np.zeros((0,) + model.config.feature_size)


# ---------------------------------------------------------------------------
# Protocol filtering and metrics
# ---------------------------------------------------------------------------

def _labels(items) -> dict[str, np.ndarray]:
    if isinstance(items, dict):
        return {k: np.asarray(v) for k, v in items.items()}
    return {
        "identity": np.array([s.identity for s in items], dtype=np.int64),
        "camera": np.array([s.camera for s in items], dtype=np.int64),
        "clothes": np.array([s.clothes for s in items], dtype=np.int64),
    }


def valid_gallery_matrix(query_labels, gallery_labels, protocol: Protocol) -> np.ndarray:
    q, g = _labels(query_labels), _labels(gallery_labels)
    same_id = q["identity"][:, None] == g["identity"][None, :]
    excluded = np.zeros_like(same_id)
    if protocol.cross_camera_only:
        excluded |= same_id & (q["camera"][:, None] == g["camera"][None, :])
    if protocol.mode is ProtocolMode.CLOTH_CHANGING:
        excluded |= same_id & (q["clothes"][:, None] == g["clothes"][None, :])
    return ~excluded


def valid_gallery_mask(query: Sample, gallery: Sequence[Sample], protocol: Protocol) -> np.ndarray:
    """1 where a gallery item may appear in the query's rank list."""
    return valid_gallery_matrix([query], gallery, protocol)[0].astype(np.uint8)


def compute_cmc_map(query_emb: np.ndarray, query_labels, gallery_emb: np.ndarray, gallery_labels,
                    protocol: Protocol, max_rank: int = 20) -> RetrievalReport:
    """Rank galleries by cosine similarity and score CMC / mAP.

    Queries without any valid positive are dropped from the averages.
    """
    q, g = _labels(query_labels), _labels(gallery_labels)
    qn = query_emb / np.maximum(np.linalg.norm(query_emb, axis=1, keepdims=True), 1e-12)
    gn = gallery_emb / np.maximum(np.linalg.norm(gallery_emb, axis=1, keepdims=True), 1e-12)
    sim = qn @ gn.T
    order = np.argsort(-sim, axis=1, kind="stable")
    valid = valid_gallery_matrix(q, g, protocol)
    matches = q["identity"][:, None] == g["identity"][None, :]
    ap, first_hit, num_pos = kernels.rank_metrics(order, matches, valid)
    keep = num_pos > 0
    if not keep.any():
        raise EvaluationError("no query has a valid positive in the gallery")
    hits = first_hit[keep]
    cmc = np.array([(hits <= k).mean() for k in range(max_rank)])
    return RetrievalReport(
        rank1=float(cmc[0]), mAP=float(ap[keep].mean()), cmc=cmc,
        average_precisions=ap[keep], protocol=protocol, num_queries=int(keep.sum()),
        first_hits=hits,
    )


def single_shot_report(query_emb, query_labels, gallery_emb, gallery_labels, protocol: Protocol,
                       trials: int = 10, seed: int = 0, max_rank: int = 20) -> RetrievalReport:
    """Average over trials of one randomly drawn gallery image per identity."""
    g = _labels(gallery_labels)
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(trials):
        idx = np.array(sorted(rng.choice(np.nonzero(g["identity"] == pid)[0])
                              for pid in np.unique(g["identity"])))
        sub = {k: v[idx] for k, v in g.items()}
        try:
            reports.append(compute_cmc_map(query_emb, query_labels, gallery_emb[idx], sub, protocol, max_rank))
        except EvaluationError:
            continue
    if not reports:
        raise EvaluationError("no single-shot trial produced a valid query")
    return RetrievalReport(
        rank1=float(np.mean([r.rank1 for r in reports])),
        mAP=float(np.mean([r.mAP for r in reports])),
        cmc=np.mean([r.cmc for r in reports], axis=0),
        average_precisions=np.concatenate([r.average_precisions for r in reports]),
        protocol=protocol,
        num_queries=int(np.mean([r.num_queries for r in reports])),
    )


# ---------------------------------------------------------------------------
# Linear probe
# ---------------------------------------------------------------------------

def hairstyle_probe(embeddings: np.ndarray, labels: Sequence, split_seed: int = 0,
                    train_fraction: float = 0.7) -> float:
    """Held-out accuracy of a linear classifier decoding ``labels`` from frozen embeddings.

    Works for any nuisance label (hairstyle, clothes).
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    labels = np.asarray([getattr(v, "value", v) for v in labels])
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ProbeError("probe needs at least two label classes")
    stratify = labels if counts.min() >= 2 else None
    x_tr, x_te, y_tr, y_te = train_test_split(
        np.asarray(embeddings, dtype=np.float64), labels, train_size=train_fraction,
        random_state=split_seed, stratify=stratify)
    if len(np.unique(y_tr)) < 2:
        raise ProbeError("probe training split holds a single class")
    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=5000))
    clf.fit(x_tr, y_tr)
    return float((clf.predict(x_te) == y_te).mean())
