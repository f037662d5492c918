"""Gallery/probe retrieval evaluation with fused similarity scores."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import DatasetRecord, split_words, tokenize, tokenize_batch
from .encoders import prepare_images
from .engine import TrainState
from .model import STREAMS, FeatureBundle, SSAN

log = logging.getLogger(__name__)

CACHE_ENV = "SSANKIT_CACHE"


def fuse_scores(s_global, s_local=0.0, s_relation=0.0):
    """Unweighted sum of the available stream similarities."""
    return s_global + s_local + s_relation


def rank_gallery(scores: np.ndarray) -> np.ndarray:
    """Gallery indices per query, best first; ties keep gallery order."""
    return np.argsort(-scores, axis=1, kind="stable")


def rank_k(ranked: np.ndarray, query_ids: np.ndarray, gallery_ids: np.ndarray, k: int) -> float:
    """Fraction of queries with a correct identity among their top-k gallery entries."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if ranked.shape[1] == 0:
        raise ValueError("empty gallery")
    top = np.asarray(gallery_ids)[ranked[:, :k]]
    return float((top == np.asarray(query_ids)[:, None]).any(axis=1).mean())


@dataclass
class RetrievalResult:
    ranked: np.ndarray
    ranks: dict[int, float]
    metrics: dict

    def to_json(self) -> str:
        return json.dumps(self.metrics, sort_keys=True)


@torch.no_grad()
def extract_images(model: SSAN, records: Sequence[DatasetRecord], batch_size: int = 64) -> FeatureBundle:
    model.eval()
    chunks = []
    for i in range(0, len(records), batch_size):
        imgs = prepare_images([r.image() for r in records[i:i + batch_size]])
        chunks.append(model.encode_images(imgs))
    return _cat(chunks)


@torch.no_grad()
def extract_texts(model: SSAN, texts: Sequence[str], vocab, n_max: int,
                  batch_size: int = 128) -> FeatureBundle:
    model.eval()
    chunks = []
    for i in range(0, len(texts), batch_size):
        ids, lengths = tokenize_batch(texts[i:i + batch_size], vocab, n_max)
        bundle = model.encode_texts(torch.from_numpy(ids), torch.from_numpy(lengths))
        bundle.word_scores = None
        chunks.append(bundle)
    return _cat(chunks)


def _cat(chunks: list[FeatureBundle]) -> FeatureBundle:
    cat = lambda xs: None if xs[0] is None else torch.cat(xs)
    return FeatureBundle(cat([c.global_ for c in chunks]), cat([c.local for c in chunks]),
                         cat([c.relation for c in chunks]))


def stream_scores(queries: FeatureBundle, gallery: FeatureBundle) -> dict[str, np.ndarray]:
    """Per-stream cosine matrices with text queries along rows."""
    sims = SSAN.similarities(gallery, queries)
    return {k: v.T.double().numpy() for k, v in sims.items()}


def queries_of(records: Sequence[DatasetRecord]) -> tuple[list[str], np.ndarray]:
    texts, ids = [], []
    for rec in records:
        for cap in rec.captions:
            texts.append(cap)
            ids.append(rec.identity_id)
    return texts, np.array(ids)


def _split_hash(records: Sequence[DatasetRecord]) -> str:
    h = hashlib.sha256()
    for r in records:
        h.update(json.dumps([r.identity_id, r.image_ref, r.captions]).encode())
        if r.pixels is not None:
            h.update(r.pixels.tobytes())
    return h.hexdigest()[:16]


def _state_hash(state: TrainState) -> str:
    h = hashlib.sha256()
    for k, v in state.model.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()[:16]


def gallery_features(state: TrainState, records: Sequence[DatasetRecord],
                     cache_dir: str | Path | None = None) -> FeatureBundle:
    """Image features for a gallery, cached on disk by (checkpoint, split) hash when enabled."""
    cache_dir = cache_dir or os.environ.get(CACHE_ENV)
    if not cache_dir:
        return extract_images(state.model, records)
    path = Path(cache_dir) / f"gallery_{_state_hash(state)}_{_split_hash(records)}.npz"
    if path.is_file():
        with np.load(path) as z:
            t = {k: torch.from_numpy(z[k]) for k in z.files}
        return FeatureBundle(t["global"], t.get("pfl"), t.get("prl"))
    feats = extract_images(state.model, records)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **{s: feats.stream(s).numpy() for s in feats.streams()})
    return feats


def evaluate(state: TrainState | str | Path, records: Sequence[DatasetRecord],
             ks: tuple[int, ...] = (1, 5, 10), cache_dir: str | Path | None = None) -> RetrievalResult:
    """Every caption queries the gallery of every image in `records`."""
    if not isinstance(state, TrainState):
        state = TrainState.load(state)
    if not records:
        raise ValueError("empty gallery")
    gallery = gallery_features(state, records, cache_dir)
    gallery_ids = np.array([r.identity_id for r in records])
    texts, query_ids = queries_of(records)
    missing = sorted(set(query_ids.tolist()) - set(gallery_ids.tolist()))
    if missing:
        warnings.warn(f"query identities absent from gallery, counted as misses: {missing}")
    queries = extract_texts(state.model, texts, state.vocab, state.cfg.model.max_len)
    per_stream = stream_scores(queries, gallery)

    report, fused = {}, None
    for name in STREAMS:
        if name not in per_stream:
            break
        fused = per_stream[name] if fused is None else fuse_scores(fused, per_stream[name])
        ranked = rank_gallery(fused)
        label = "+".join(STREAMS[: STREAMS.index(name) + 1])
        report[label] = {f"rank{k}": rank_k(ranked, query_ids, gallery_ids, k) for k in ks}
    ranks = {k: rank_k(ranked, query_ids, gallery_ids, k) for k in ks}
    metrics = {**{f"rank{k}": ranks[k] for k in ks}, "num_queries": int(len(texts)),
               "num_gallery": int(len(records)), "streams": report}
    return RetrievalResult(ranked, ranks, metrics)


def cross_domain_evaluate(state: TrainState | str | Path, target_records: Sequence[DatasetRecord],
                          **kwargs) -> RetrievalResult:
    """Source-only transfer: the source model is applied unchanged to a target-domain split.

    Words unseen in the source vocabulary fall back to the unknown id.
    """
    if not isinstance(state, TrainState):
        state = TrainState.load(state)
    texts, _ = queries_of(target_records)
    oov = sorted({w for t in texts for w in split_words(t) if w not in state.vocab})
    result = evaluate(state, target_records, **kwargs)
    result.metrics["oov_words"] = len(oov)
    return result


def retrieve(state: TrainState, query: str, records: Sequence[DatasetRecord], k: int = 10,
             cache_dir: str | Path | None = None) -> list[tuple[str, float]]:
    """Top-k gallery images for a free-text query, with fused scores."""
    gallery = gallery_features(state, records, cache_dir)
    text = extract_texts(state.model, [query], state.vocab, state.cfg.model.max_len)
    scores = sum(per for per in stream_scores(text, gallery).values())[0]
    order = rank_gallery(scores[None])[0][:k]
    return [(records[i].image_ref, float(scores[i])) for i in order]


@torch.no_grad()
def wam_inspect(state: TrainState | str | Path, caption: str,
                heatmap: str | Path | None = None) -> dict:
    """Word-part scores of one caption: ``{"tokens": [...], "scores": K x n}``."""
    if not isinstance(state, TrainState):
        state = TrainState.load(state)
    model = state.model.eval()
    if model.pfl is None:
        raise ValueError("model has no part branch")
    tok = tokenize(caption, state.vocab, state.cfg.model.max_len)
    ids = torch.from_numpy(tok.valid_ids[None])
    words, _ = model.text_encoder(ids, torch.tensor([tok.length]))
    scores = model.pfl.attention(words)[0].T.double().numpy()
    tokens = split_words(caption)[: tok.length]
    out = {"tokens": tokens, "scores": scores.tolist()}
    if heatmap:
        _plot_scores(tokens, scores, heatmap)
    return out


def _plot_scores(tokens: list[str], scores: np.ndarray, path: str | Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4, 0.45 * len(tokens)), 0.5 * scores.shape[0] + 1))
    ax.imshow(scores, vmin=0, vmax=1, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(tokens)), tokens, rotation=60, ha="right")
    ax.set_yticks(range(scores.shape[0]), [f"part {k + 1}" for k in range(scores.shape[0])])
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
