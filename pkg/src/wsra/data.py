"""Feature manifests, ground-truth files, synthetic datasets and splits.

Manifest format (UTF-8 text, one record per line)::

    wsra-manifest 1
    d_visual=<int>
    d_text=<int>
    video id=<id> snippets=<T> snippet_duration=<float> blob=<path> offset=<bytes>
    query id=<id> video=<video id> blob=<path> offset=<bytes> [start=<f> end=<f> unit=<snippet|time>]

Blob paths are relative to the manifest's directory. Blobs hold raw
little-endian float64 values; a video occupies ``T * d_visual`` values in
row-major order and a query ``d_text`` values. Ground truth can also live in a
separate file::

    wsra-truth 1
    query=<id> start=<f> end=<f> unit=<snippet|time>
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .spans import SNIPPET, TemporalSpan

MANIFEST_HEADER = "wsra-manifest 1"
TRUTH_HEADER = "wsra-truth 1"


class ManifestError(ValueError):
    pass


@dataclass
class VideoEntry:
    video_id: str
    num_snippets: int
    snippet_duration: float
    blob: str
    offset: int

    @property
    def duration(self) -> float:
        return self.num_snippets * self.snippet_duration


@dataclass
class QueryEntry:
    query_id: str
    video_id: str
    blob: str
    offset: int


@dataclass
class TrainItem:
    video_id: str
    query_id: str
    query: np.ndarray


@dataclass
class TrainingSet:
    """What the training loop sees: features and queries, never spans."""

    items: list[TrainItem]
    _features: Callable[[str], np.ndarray]
    d_visual: int
    d_text: int

    def features(self, video_id: str) -> np.ndarray:
        return self._features(video_id)


@dataclass
class DatasetManifest:
    root: Path
    d_visual: int
    d_text: int
    videos: list[VideoEntry]
    queries: list[QueryEntry]
    truth: dict[str, TemporalSpan] = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self._video_index = {v.video_id: v for v in self.videos}
        self._query_index = {q.query_id: q for q in self.queries}

    def video(self, video_id: str) -> VideoEntry:
        try:
            return self._video_index[video_id]
        except KeyError:
            raise KeyError(f"unknown video {video_id!r}") from None

    def query(self, query_id: str) -> QueryEntry:
        try:
            return self._query_index[query_id]
        except KeyError:
            raise KeyError(f"unknown query {query_id!r}") from None

    def _map(self, blob: str, offset: int, shape: tuple[int, ...]) -> np.ndarray:
        path = self.root / blob
        key = (str(path), offset, shape)
        if key not in self._cache:
            self._cache[key] = np.memmap(path, dtype="<f8", mode="r", offset=offset, shape=shape)
        return self._cache[key]

    def features(self, video_id: str) -> np.ndarray:
        v = self.video(video_id)
        return self._map(v.blob, v.offset, (v.num_snippets, self.d_visual))

    def embedding(self, query_id: str) -> np.ndarray:
        q = self.query(query_id)
        return self._map(q.blob, q.offset, (self.d_text,))

    def training_set(self, transform: Callable[[np.ndarray], np.ndarray] | None = None) -> TrainingSet:
        items = [TrainItem(q.video_id, q.query_id, np.array(self.embedding(q.query_id))) for q in self.queries]
        cache: dict[str, np.ndarray] = {}

        def feats(video_id: str) -> np.ndarray:
            if video_id not in cache:
                V = np.array(self.features(video_id))
                cache[video_id] = transform(V) if transform is not None else V
            return cache[video_id]

        d_v = self.d_visual
        if transform is not None and self.videos:
            d_v = feats(self.videos[0].video_id).shape[1]
        return TrainingSet(items, feats, d_v, self.d_text)

    def with_truth(self, truth: dict[str, TemporalSpan]) -> "DatasetManifest":
        merged = dict(self.truth)
        merged.update({k: v for k, v in truth.items() if k in self._query_index})
        out = replace(self, truth=merged, _cache={})
        _validate_truth(out)
        return out


def _parse_fields(tokens: Sequence[str], where: str) -> dict[str, str]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ManifestError(f"{where}: expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        out[k] = v
    return out


def _span_from(fields_: dict[str, str], where: str) -> TemporalSpan | None:
    if "start" not in fields_:
        return None
    try:
        return TemporalSpan(float(fields_["start"]), float(fields_["end"]), fields_.get("unit", SNIPPET))
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"{where}: bad span ({exc})") from None


def _validate_truth(m: DatasetManifest) -> None:
    for qid, span in m.truth.items():
        v = m.video(m.query(qid).video_id)
        limit = v.num_snippets if span.mode == SNIPPET else v.duration
        if span.end > limit + 1e-9:
            raise ManifestError(f"query {qid!r}: span [{span.start}, {span.end}) exceeds video {v.video_id!r}")


def load_manifest(path: str | os.PathLike, truth_path: str | os.PathLike | None = None) -> DatasetManifest:
    """Parse and validate a manifest; feature blobs are memory-mapped lazily."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ManifestError(f"{path}: missing header {MANIFEST_HEADER!r}")
    header: dict[str, str] = {}
    videos: list[VideoEntry] = []
    queries: list[QueryEntry] = []
    truth: dict[str, TemporalSpan] = {}
    for lineno, line in enumerate(lines[1:], 2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        where = f"{path}:{lineno}"
        kind, *rest = line.split()
        if kind == "video":
            f = _parse_fields(rest, where)
            try:
                videos.append(VideoEntry(f["id"], int(f["snippets"]), float(f["snippet_duration"]), f["blob"], int(f["offset"])))
            except KeyError as exc:
                raise ManifestError(f"{where}: video record missing {exc}") from None
        elif kind == "query":
            f = _parse_fields(rest, where)
            try:
                queries.append(QueryEntry(f["id"], f["video"], f["blob"], int(f["offset"])))
            except KeyError as exc:
                raise ManifestError(f"{where}: query record missing {exc}") from None
            span = _span_from(f, where)
            if span is not None:
                truth[f["id"]] = span
        elif "=" in kind and not rest:
            k, v = kind.split("=", 1)
            header[k] = v
        else:
            raise ManifestError(f"{where}: unrecognised line")
    if "d_visual" not in header or "d_text" not in header:
        raise ManifestError(f"{path}: d_visual and d_text are required")
    if not videos:
        raise ManifestError("manifest has no videos")
    m = DatasetManifest(path.parent, int(header["d_visual"]), int(header["d_text"]), videos, queries, truth)
    _validate(m)
    if truth_path is not None:
        m = m.with_truth(load_truth(truth_path))
    return m


def _validate(m: DatasetManifest) -> None:
    seen = set()
    for v in m.videos:
        if v.video_id in seen:
            raise ManifestError(f"duplicate video id {v.video_id!r}")
        seen.add(v.video_id)
        if v.num_snippets < 2:
            raise ManifestError(f"video {v.video_id!r}: needs at least 2 snippets, has {v.num_snippets}")
        _check_blob(m.root / v.blob, v.offset, v.num_snippets * m.d_visual, f"video {v.video_id!r}")
    qseen = set()
    for q in m.queries:
        if q.query_id in qseen:
            raise ManifestError(f"duplicate query id {q.query_id!r}")
        qseen.add(q.query_id)
        if q.video_id not in seen:
            raise ManifestError(f"query {q.query_id!r}: unknown video {q.video_id!r}")
        _check_blob(m.root / q.blob, q.offset, m.d_text, f"query {q.query_id!r}")
    _validate_truth(m)


def _check_blob(path: Path, offset: int, count: int, what: str) -> None:
    if not path.exists():
        raise ManifestError(f"{what}: blob file {path} not found")
    need = offset + 8 * count
    have = path.stat().st_size
    if have < need:
        raise ManifestError(f"{what}: size mismatch, blob {path.name} has {have} bytes, needs {need}")


def _fmt(x: float) -> str:
    return repr(float(x))


def _span_fields(span: TemporalSpan) -> str:
    return f"start={_fmt(span.start)} end={_fmt(span.end)} unit={span.mode}"


def manifest_text(m: DatasetManifest, include_truth: bool = True) -> str:
    lines = [MANIFEST_HEADER, f"d_visual={m.d_visual}", f"d_text={m.d_text}"]
    for v in m.videos:
        lines.append(
            f"video id={v.video_id} snippets={v.num_snippets} snippet_duration={_fmt(v.snippet_duration)} "
            f"blob={v.blob} offset={v.offset}"
        )
    for q in m.queries:
        line = f"query id={q.query_id} video={q.video_id} blob={q.blob} offset={q.offset}"
        if include_truth and q.query_id in m.truth:
            line += " " + _span_fields(m.truth[q.query_id])
        lines.append(line)
    return "\n".join(lines) + "\n"


def write_manifest(m: DatasetManifest, path: str | os.PathLike, include_truth: bool = True) -> None:
    """Write the manifest text; blob paths are rewritten relative to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rel = _relocate(m, path.parent)
    path.write_text(manifest_text(rel, include_truth))


def _relocate(m: DatasetManifest, new_root: Path) -> DatasetManifest:
    if new_root.resolve() == m.root.resolve():
        return m

    def rel(blob: str) -> str:
        return os.path.relpath((m.root / blob).resolve(), new_root.resolve())

    return replace(
        m,
        root=new_root,
        videos=[replace(v, blob=rel(v.blob)) for v in m.videos],
        queries=[replace(q, blob=rel(q.blob)) for q in m.queries],
        _cache={},
    )


def load_truth(path: str | os.PathLike) -> dict[str, TemporalSpan]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != TRUTH_HEADER:
        raise ManifestError(f"{path}: missing header {TRUTH_HEADER!r}")
    out = {}
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        f = _parse_fields(line.split(), f"{path}:{lineno}")
        out[f["query"]] = _span_from(f, f"{path}:{lineno}")
    return out


def write_truth(path: str | os.PathLike, truth: dict[str, TemporalSpan]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [TRUTH_HEADER] + [f"query={qid} {_span_fields(s)}" for qid, s in truth.items()]
    path.write_text("\n".join(lines) + "\n")


def write_dataset(
    out_dir: str | os.PathLike,
    videos: dict[str, np.ndarray],
    queries: Sequence[tuple[str, str, np.ndarray]],
    snippet_duration: float = 1.0,
    truth: dict[str, TemporalSpan] | None = None,
    name: str = "manifest.txt",
) -> DatasetManifest:
    """Write ``videos.bin``, ``queries.bin`` and a manifest into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    d_v = next(iter(videos.values())).shape[1] if videos else 0
    d_t = len(queries[0][2]) if queries else 0
    ventries, qentries = [], []
    with open(out_dir / "videos.bin", "wb") as fh:
        offset = 0
        for vid, V in videos.items():
            arr = np.ascontiguousarray(V, dtype="<f8")
            fh.write(arr.tobytes())
            ventries.append(VideoEntry(vid, arr.shape[0], snippet_duration, "videos.bin", offset))
            offset += arr.nbytes
    with open(out_dir / "queries.bin", "wb") as fh:
        offset = 0
        for qid, vid, emb in queries:
            arr = np.ascontiguousarray(emb, dtype="<f8")
            fh.write(arr.tobytes())
            qentries.append(QueryEntry(qid, vid, "queries.bin", offset))
            offset += arr.nbytes
    m = DatasetManifest(out_dir, d_v, d_t, ventries, qentries, dict(truth or {}))
    write_manifest(m, out_dir / name)
    return m


# synthetic data


@dataclass
class SyntheticSpec:
    num_videos: int = 300
    num_snippets: int = 8
    d_visual: int = 32
    d_text: int = 16
    num_concepts: int = 8
    noise_sigma: float = 0.05
    seed: int = 0
    snippet_duration: float = 1.0
    min_span_frac: float = 0.2
    max_span_frac: float = 0.6
    queries_per_video: int = 1

    def __post_init__(self):
        if self.num_concepts < 2:
            raise ValueError("num_concepts must be >= 2")
        if self.num_snippets < 2:
            raise ValueError("num_snippets must be >= 2")
        lo, hi = self.span_lengths()
        if lo > hi:
            raise ValueError(
                f"no span length in [{self.min_span_frac}, {self.max_span_frac}] of {self.num_snippets} snippets"
            )

    def span_lengths(self) -> tuple[int, int]:
        T = self.num_snippets
        lo = max(1, math.ceil(self.min_span_frac * T - 1e-9))
        hi = min(T - 1, math.floor(self.max_span_frac * T + 1e-9))
        return lo, hi

    @classmethod
    def from_text(cls, text: str) -> "SyntheticSpec":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            k, v = (s.strip() for s in line.split("=", 1))
            k = k.replace("-", "_")
            if k not in kinds:
                raise ValueError(f"unknown synthetic spec key {k!r}")
            kw[k] = float(v) if kinds[k] in ("float", float) else int(v)
        return cls(**kw)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


@dataclass
class SyntheticData:
    videos: dict[str, np.ndarray]
    queries: list[tuple[str, str, np.ndarray]]
    truth: dict[str, TemporalSpan]
    concept_of_video: dict[str, int]
    text_prototypes: np.ndarray  # (C, d_t)
    visual_prototypes: np.ndarray  # (C, d_v)


def _orthonormal_rows(rng, n: int, d: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((d, n)))
    return q.T[:n]


def synthesize(spec: SyntheticSpec) -> SyntheticData:
    """Planted-alignment videos: foreground snippets show the query's concept.

    Concept ``c`` has a unit text prototype ``p_c`` and a visual prototype
    ``u_c = M p_c`` for one fixed linear map ``M``; prototypes are mutually
    orthogonal. A query is ``p_c + noise``, the planted span holds ``u_c +
    noise`` and every other snippet shows some other concept plus noise.
    """
    C = spec.num_concepts
    budget = min(spec.d_text, spec.d_visual)
    if C > budget:
        raise ValueError(f"num_concepts={C} exceeds prototype budget {budget} (min of d_text, d_visual)")
    rng = np.random.default_rng(spec.seed)
    P = _orthonormal_rows(rng, C, spec.d_text)
    U = _orthonormal_rows(rng, C, spec.d_visual)
    M = U.T @ P  # maps p_c to u_c
    lo, hi = spec.span_lengths()
    T, s = spec.num_snippets, spec.noise_sigma
    videos, queries, truth, concept = {}, [], {}, {}
    width = max(4, len(str(spec.num_videos)))
    for i in range(spec.num_videos):
        vid = f"v{i:0{width}d}"
        c = int(rng.integers(C))
        length = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, T - length + 1))
        others = rng.integers(0, C - 1, size=T)
        others = others + (others >= c)  # uniform over concepts != c
        labels = np.where((np.arange(T) >= start) & (np.arange(T) < start + length), c, others)
        V = (M @ P[labels].T).T + s * rng.standard_normal((T, spec.d_visual))
        videos[vid] = V
        concept[vid] = c
        for j in range(spec.queries_per_video):
            qid = f"q{i:0{width}d}_{j}"
            queries.append((qid, vid, P[c] + s * rng.standard_normal(spec.d_text)))
            truth[qid] = TemporalSpan(start, start + length, SNIPPET)
    return SyntheticData(videos, queries, truth, concept, P, U)


def split(m: DatasetManifest, fractions: Sequence[float], seed: int) -> tuple[DatasetManifest, ...]:
    """Partition by video id into len(fractions) manifests, deterministically."""
    fractions = [float(f) for f in fractions]
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    n = len(m.videos)
    order = np.random.default_rng(seed).permutation(n)
    counts = [int(round(f * n)) for f in fractions[:-1]]
    if sum(counts) > n:
        counts[-1] -= sum(counts) - n
    counts.append(n - sum(counts))
    out = []
    pos = 0
    for c in counts:
        ids = {m.videos[i].video_id for i in order[pos : pos + c]}
        pos += c
        vids = [v for v in m.videos if v.video_id in ids]
        qs = [q for q in m.queries if q.video_id in ids]
        tr = {q.query_id: m.truth[q.query_id] for q in qs if q.query_id in m.truth}
        out.append(replace(m, videos=vids, queries=qs, truth=tr, _cache={}))
    return tuple(out)


def write_synthetic(spec: SyntheticSpec, out_dir: str | os.PathLike, fractions=(2 / 3, 1 / 6, 1 / 6)) -> dict[str, Path]:
    """Synthesize, split into train/val/test and write everything to disk.

    Layout: ``data/`` holds the blobs and a full manifest without spans,
    ``train|val|test/manifest.txt`` carry no spans, and ``truth/<split>.truth``
    holds the hidden ground truth.
    """
    out_dir = Path(out_dir)
    syn = synthesize(spec)
    full = write_dataset(out_dir / "data", syn.videos, syn.queries, spec.snippet_duration)
    (out_dir / "data" / "synthetic.spec").write_text(spec.to_text())
    parts = split(full, fractions, spec.seed)
    paths = {}
    for name, part in zip(("train", "val", "test"), parts):
        write_manifest(part, out_dir / name / "manifest.txt", include_truth=False)
        write_truth(out_dir / "truth" / f"{name}.truth", {q.query_id: syn.truth[q.query_id] for q in part.queries})
        paths[name] = out_dir / name / "manifest.txt"
        paths[f"{name}_truth"] = out_dir / "truth" / f"{name}.truth"
    return paths
