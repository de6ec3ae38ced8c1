"""Text-to-image retrieval scoring and geodesic localization metrics.

Queries are text embeddings, the gallery is image embeddings; both come
unit-normalized from the encoder, so similarity is a plain dot product.
Ranking ties break toward the lower gallery index to keep every metric
deterministic at desk scale.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataio as dio
from . import model as md
from .errors import DataError, DimensionError, ValidationError

EARTH_RADIUS_M = 6_371_000.0
_ENCODE_CHUNK = 128


@dataclass(frozen=True)
class SimilarityMatrix:
    """Query-by-gallery cosine scores with the ground-truth column per row."""

    scores: np.ndarray
    query_ids: tuple[str, ...]
    gallery_ids: tuple[str, ...]
    truth: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        t = np.asarray(self.truth, dtype=np.int64)
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "truth", t)
        if s.ndim != 2:
            raise DimensionError(f"score matrix must be 2-D, got shape {s.shape}")
        q, g = s.shape
        if len(self.query_ids) != q or len(self.gallery_ids) != g:
            raise DimensionError("id lists do not match the score matrix shape")
        if t.shape != (q,):
            raise DimensionError(f"need one truth index per query, got {t.shape}")
        if q and ((t < 0) | (t >= g)).any():
            raise ValidationError("truth index outside the gallery")
        if s.size and (np.abs(s) > 1.0 + 1e-9).any():
            raise ValidationError("cosine scores must lie in [-1, 1]")

    @property
    def n_queries(self) -> int:
        return self.scores.shape[0]

    @property
    def n_gallery(self) -> int:
        return self.scores.shape[1]


def similarity_matrix(
    text_emb: np.ndarray,
    image_emb: np.ndarray,
    query_ids,
    gallery_ids,
    truth,
) -> SimilarityMatrix:
    """Dot products of unit rows; rejects inputs that are not normalized."""
    t = np.asarray(text_emb, dtype=np.float64)
    v = np.asarray(image_emb, dtype=np.float64)
    if t.ndim != 2 or v.ndim != 2:
        raise DimensionError("embeddings must be 2-D row matrices")
    if t.shape[1] != v.shape[1]:
        raise DimensionError(
            f"embedding widths differ: {t.shape[1]} vs {v.shape[1]}"
        )
    for name, rows in (("query", t), ("gallery", v)):
        if rows.shape[0]:
            norms = np.sqrt((rows * rows).sum(axis=1))
            if not np.allclose(norms, 1.0, atol=1e-6):
                raise ValidationError(f"{name} rows are not unit-normalized")
    return SimilarityMatrix(
        scores=t @ v.T,
        query_ids=tuple(query_ids),
        gallery_ids=tuple(gallery_ids),
        truth=np.asarray(truth, dtype=np.int64),
    )


def rank_of_truth(sim: SimilarityMatrix) -> np.ndarray:
    """1-based rank of each query's ground-truth entry under the tie rule."""
    ranks = np.empty(sim.n_queries, dtype=np.int64)
    for i in range(sim.n_queries):
        row = sim.scores[i]
        g = sim.truth[i]
        sg = row[g]
        ahead = int((row > sg).sum())
        tied_before = int(((row == sg) & (np.arange(row.size) < g)).sum())
        ranks[i] = 1 + ahead + tied_before
    return ranks


def recall_at_k(sim: SimilarityMatrix, k: int) -> float:
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if sim.n_queries == 0:
        raise ValidationError("no queries to score")
    k = min(k, sim.n_gallery)
    return float((rank_of_truth(sim) <= k).mean())


def top1_indices(sim: SimilarityMatrix) -> np.ndarray:
    """Argmax per row; numpy argmax already prefers the lower index on ties."""
    return sim.scores.argmax(axis=1)


def haversine(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in meters on the reference sphere."""
    for lat in (lat1, lat2):
        if not -90.0 <= lat <= 90.0:
            raise ValidationError(f"latitude {lat} outside [-90, 90]")
    for lon in (lon1, lon2):
        if not -180.0 <= lon <= 180.0:
            raise ValidationError(f"longitude {lon} outside [-180, 180]")
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dphi = p2 - p1
    dlam = math.radians(lon2) - math.radians(lon1)
    a = math.sin(dphi / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlam / 2) ** 2
    return 2.0 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


def localization_at(
    sim: SimilarityMatrix,
    coords: dict[str, tuple[float, float]],
    d_meters: float = 150.0,
) -> float:
    """Fraction of queries whose top retrieval lands strictly within
    d_meters of the ground-truth gallery location."""
    if sim.n_queries == 0:
        raise ValidationError("no queries to score")
    for gid in sim.gallery_ids:
        if gid not in coords:
            raise DataError(f"no coordinates for gallery id {gid!r}")
    hits = 0
    top1 = top1_indices(sim)
    for i in range(sim.n_queries):
        got = coords[sim.gallery_ids[top1[i]]]
        want = coords[sim.gallery_ids[sim.truth[i]]]
        if haversine(got[0], got[1], want[0], want[1]) < d_meters:
            hits += 1
    return hits / sim.n_queries


@dataclass(frozen=True)
class EvalReport:
    """Retrieval and localization metrics for one evaluation pass."""

    recalls: dict[int, float]
    l_at: float
    d_meters: float
    query_count: int
    per_region: dict[str, dict]
    region: str | None = None
    exclude_region: str | None = None

    def __post_init__(self):
        ks = sorted(self.recalls)
        vals = [self.recalls[k] for k in ks]
        if any(a > b + 1e-12 for a, b in zip(vals, vals[1:])):
            raise ValidationError("recall must be non-decreasing in k")

    def to_dict(self) -> dict:
        d = {f"r_at_{k}": v for k, v in sorted(self.recalls.items())}
        d[f"l_at_{self.d_meters:g}"] = self.l_at
        d["query_count"] = self.query_count
        d["region"] = self.region
        d["exclude_region"] = self.exclude_region
        d["per_region"] = self.per_region
        return d


def format_report(report: EvalReport) -> str:
    """Aligned plain-text table, one metric per line."""
    rows = [(f"R@{k}", f"{v:.4f}") for k, v in sorted(report.recalls.items())]
    rows.append((f"L@{report.d_meters:g}m", f"{report.l_at:.4f}"))
    rows.append(("queries", str(report.query_count)))
    for region in sorted(report.per_region):
        stats = report.per_region[region]
        rows.append(
            (f"  {region}",
             f"R@1={stats['r_at_1']:.4f} L={stats[f'l_at_{report.d_meters:g}']:.4f} "
             f"n={stats['query_count']}")
        )
    width = max(len(a) for a, _ in rows)
    return "\n".join(f"{a:<{width}}  {b}" for a, b in rows)


def encode_corpus(
    params: md.ModelParams,
    vocab: dio.Vocabulary,
    samples: list[dio.Sample],
    manifest_path,
) -> tuple[np.ndarray, np.ndarray]:
    """Unit-row text and image embeddings for aligned samples, chunked."""
    cfg = params.config
    t_parts, v_parts = [], []
    for start in range(0, len(samples), _ENCODE_CHUNK):
        chunk = samples[start:start + _ENCODE_CHUNK]
        toks = [dio.tokenize(s.text, vocab, cfg.max_len) for s in chunk]
        imgs = [dio.load_image(dio.resolve_image_path(manifest_path, s)) for s in chunk]
        out = md.forward_batch(
            md.constant_params(params),
            np.stack([md.patch_means(im, cfg.patch_grid) for im in imgs]),
            np.stack([t.ids for t in toks]),
            np.array([t.length for t in toks]),
        )
        t_parts.append(out.t_rows.data)
        v_parts.append(out.v_rows.data)
    return np.concatenate(t_parts), np.concatenate(v_parts)


def select_eval_samples(
    samples: list[dio.Sample],
    region: str | None = None,
    exclude_region: str | None = None,
) -> list[dio.Sample]:
    """Test-split rows, optionally restricted to or purged of one region."""
    picked = [s for s in samples if s.split == "test"]
    if region is not None:
        picked = [s for s in picked if s.region == region]
    if exclude_region is not None:
        picked = [s for s in picked if s.region != exclude_region]
    return picked


def evaluate(
    checkpoint_path,
    manifest_path,
    region: str | None = None,
    exclude_region: str | None = None,
    d_meters: float = 150.0,
    ks: tuple[int, ...] = (1, 5, 10),
) -> EvalReport:
    """Score a checkpoint: text queries against the image gallery built
    from the selected test samples.

    ``region`` restricts evaluation to one region (the held-out protocol);
    ``exclude_region`` drops one instead. The per-region breakdown keeps
    the full gallery and slices only the query side.
    """
    manifest_path = Path(manifest_path)
    params, vocab_dict, extra = md.load_checkpoint(checkpoint_path)
    if vocab_dict is None:
        raise DataError("checkpoint carries no vocabulary")
    vocab = dio.Vocabulary.from_dict(vocab_dict)

    samples = dio.load_manifest(manifest_path)
    if any(s.split is None for s in samples):
        tc = extra.get("train_config", {})
        samples = dio.split_dataset(
            samples,
            ratio=tc.get("split_ratio", 0.9),
            seed=tc.get("split_seed", 0),
        )
    picked = select_eval_samples(samples, region, exclude_region)
    if not picked:
        raise ValidationError("no samples match the evaluation selection")

    t_rows, v_rows = encode_corpus(params, vocab, picked, manifest_path)
    ids = [s.id for s in picked]
    sim = similarity_matrix(
        t_rows, v_rows, ids, ids, np.arange(len(ids))
    )
    coords = {s.id: (s.lat, s.lon) for s in picked}

    recalls = {k: recall_at_k(sim, k) for k in ks}
    l_frac = localization_at(sim, coords, d_meters)

    per_region: dict[str, dict] = {}
    regions = sorted({s.region for s in picked})
    for reg in regions:
        rows = [i for i, s in enumerate(picked) if s.region == reg]
        sub = SimilarityMatrix(
            scores=sim.scores[rows],
            query_ids=tuple(ids[i] for i in rows),
            gallery_ids=sim.gallery_ids,
            truth=sim.truth[rows],
        )
        per_region[reg] = {
            "r_at_1": recall_at_k(sub, 1),
            f"l_at_{d_meters:g}": localization_at(sub, coords, d_meters),
            "query_count": len(rows),
        }

    return EvalReport(
        recalls=recalls,
        l_at=l_frac,
        d_meters=d_meters,
        query_count=len(picked),
        per_region=per_region,
        region=region,
        exclude_region=exclude_region,
    )
