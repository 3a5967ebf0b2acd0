"""Item stream files, the synthetic stream generator, and the codebook container.

Stream files hold one record per line::

    item_id,tag,popularity,v_1,...,v_d

Blank lines and lines starting with ``#`` are ignored. Floats are written with
``repr`` so parsing is bit-exact. Synthetic ground truth lives in a sidecar
``item_id,cluster_id`` file.

The codebook container is line-oriented JSON: a magic/version line, a header
object, one object per record, and a trailing SHA-256 line over every byte
before it.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .baseline import VqCodebook
from .core import AssignmentIndex, CoarseCodebook, CoarsePrototype, FineCodebook, ItemRecord

FORMAT_VERSION = 1
MAGIC = "#merge-index-codebook"
CHECKSUM_PREFIX = "#sha256 "


class StreamFormatError(ValueError):
    pass


class CodebookFormatError(ValueError):
    pass


class IntegrityError(CodebookFormatError):
    pass


# ---------------------------------------------------------------- stream files


def format_record(item: ItemRecord) -> str:
    vals = ",".join(repr(float(v)) for v in item.embedding)
    return f"{int(item.item_id)},{int(item.tag)},{int(item.popularity)},{vals}"


def parse_record(line: str, d: Optional[int] = None) -> ItemRecord:
    parts = line.strip().split(",")
    if len(parts) < 4:
        raise ValueError(f"expected item_id,tag,popularity and embedding values, got {len(parts)} fields")
    item_id, tag, pop = int(parts[0]), int(parts[1]), int(parts[2])
    emb = np.array([float(v) for v in parts[3:]], dtype=np.float64)
    if d is not None and emb.size != d:
        raise ValueError(f"dimension mismatch: {emb.size} embedding values, expected {d}")
    item = ItemRecord(item_id=item_id, embedding=emb, tag=tag, popularity=pop)
    item.validate(emb.size)
    if tag < 0:
        raise ValueError("negative tag")
    return item


def load_stream(path, d: Optional[int] = None) -> Iterator[ItemRecord]:
    """Yield records in file order. ``d`` defaults to the first record's dimension."""
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            try:
                item = parse_record(s, d)
            except ValueError as exc:
                raise StreamFormatError(f"{path}:{lineno}: {exc}") from None
            if d is None:
                d = item.embedding.size
            yield item


def write_stream(path, records: Iterable[ItemRecord]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for item in records:
            fh.write(format_record(item))
            fh.write("\n")
            n += 1
    return n


def write_truth(path, pairs: Iterable[tuple[int, int]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("item_id,cluster_id\n")
        for item_id, cluster in pairs:
            fh.write(f"{int(item_id)},{int(cluster)}\n")


def load_truth(path) -> dict[int, int]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("item_id"):
                continue
            try:
                a, b = s.split(",")
                out[int(a)] = int(b)
            except ValueError:
                raise StreamFormatError(f"{path}:{lineno}: malformed truth line") from None
    return out


# ------------------------------------------------------------------ generator


@dataclass(frozen=True)
class SyntheticStreamSpec:
    n_items: int
    n_true_clusters: int
    d: int = 64
    tag_count: int = 100
    concentration: float = 1000.0
    zipf_exponent: float = 1.0
    drift_rate: float = 0.0
    seed: int = 0
    drift_interval: int = 1024
    max_popularity: int = 1_000_000

    def validate(self) -> None:
        if self.n_items < 0:
            raise ValueError("n_items must be >= 0")
        if self.n_true_clusters < 1:
            raise ValueError("n_true_clusters must be >= 1")
        if self.n_true_clusters > self.n_items:
            raise ValueError(f"n_true_clusters ({self.n_true_clusters}) exceeds n_items ({self.n_items})")
        if self.d < 2:
            raise ValueError("d must be >= 2")
        if self.tag_count < 1:
            raise ValueError("tag_count must be >= 1")
        if not self.concentration > 0:
            raise ValueError("concentration must be positive")
        if self.zipf_exponent < 0:
            raise ValueError("zipf_exponent must be >= 0")
        if self.drift_rate < 0:
            raise ValueError("drift_rate must be >= 0")
        if self.drift_interval < 1:
            raise ValueError("drift_interval must be >= 1")


def zipf_sizes(n: int, k: int, s: float) -> np.ndarray:
    """Split ``n`` into ``k`` parts proportional to ``rank**-s`` (largest remainder)."""
    w = np.arange(1, k + 1, dtype=np.float64) ** (-s)
    quota = n * w / w.sum()
    sizes = np.floor(quota).astype(np.int64)
    short = n - int(sizes.sum())
    if short:
        order = np.argsort(-(quota - sizes), kind="stable")
        sizes[order[:short]] += 1
    return sizes


def _orthogonal_unit(rng: np.random.Generator, mu: np.ndarray) -> np.ndarray:
    w = rng.standard_normal(mu.shape)
    w -= (w * mu).sum(axis=1, keepdims=True) * mu
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def iter_synthetic(spec: SyntheticStreamSpec) -> Iterator[tuple[ItemRecord, int]]:
    """Yield ``(record, true_cluster)`` for a skewed, drifting synthetic stream.

    Cluster sizes and item popularity follow ``rank**-zipf_exponent``. Every
    ``drift_interval`` items, each cluster center rotates by ``drift_rate``
    radians along its own great circle.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, k, d = spec.n_items, spec.n_true_clusters, spec.d

    mu = rng.standard_normal((k, d))
    mu /= np.linalg.norm(mu, axis=1, keepdims=True)
    heading = _orthogonal_unit(rng, mu)
    tag_of = rng.permutation(k) % spec.tag_count

    labels = np.repeat(np.arange(k), zipf_sizes(n, k, spec.zipf_exponent))
    labels = labels[rng.permutation(n)]

    s = spec.zipf_exponent
    top = max(1, n // 10)
    p0 = max(float(spec.max_popularity), 1000.0 * top**s)
    pop_rank = rng.permutation(n) + 1
    popularity = np.maximum(1, np.rint(p0 * pop_rank.astype(np.float64) ** (-s))).astype(np.int64)

    noise_scale = 0.0 if math.isinf(spec.concentration) else 1.0 / math.sqrt(spec.concentration)
    c, sn = math.cos(spec.drift_rate), math.sin(spec.drift_rate)
    for start in range(0, n, spec.drift_interval):
        stop = min(start + spec.drift_interval, n)
        lab = labels[start:stop]
        emb = mu[lab] + noise_scale * rng.standard_normal((stop - start, d))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        for j in range(stop - start):
            i = start + j
            c_id = int(lab[j])
            yield (
                ItemRecord(item_id=i, embedding=emb[j], tag=int(tag_of[c_id]), popularity=int(popularity[i])),
                c_id,
            )
        if spec.drift_rate > 0:
            mu, heading = c * mu + sn * heading, -sn * mu + c * heading


def generate_stream(spec: SyntheticStreamSpec) -> Iterator[ItemRecord]:
    for item, _ in iter_synthetic(spec):
        yield item


# ---------------------------------------------------------- codebook container


@dataclass
class CodebookArtifact:
    """Everything persisted by a training run."""

    kind: str  # "merge", "vq" or "rq"
    d: int
    config: dict = field(default_factory=dict)
    fine: Optional[FineCodebook] = None
    coarse: Optional[CoarseCodebook] = None
    layers: list[VqCodebook] = field(default_factory=list)
    index: Optional[AssignmentIndex] = None
    manifest: Optional[dict] = None


def _floats(a) -> list[float]:
    return [float(v) for v in np.asarray(a, dtype=np.float64).ravel()]


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _records(art: CodebookArtifact) -> Iterator[dict]:
    if art.fine is not None:
        f = art.fine
        for k in range(len(f)):
            gs = int(f.growing_since[k])
            yield {
                "t": "slot",
                "k": k,
                "active": bool(f.active[k]),
                "codeword": _floats(f.codewords[k]),
                "ema_sum": _floats(f.ema_sum[k]),
                "ema_count": float(f.ema_count[k]),
                "created_step": int(f.created_step[k]),
                "growing_since": None if gs < 0 else gs,
            }
    if art.coarse is not None:
        for c, p in enumerate(art.coarse.prototypes):
            yield {
                "t": "coarse",
                "c": c,
                "embedding": _floats(p.embedding),
                "ema_count": float(p.ema_count),
                "members": [int(m) for m in p.members],
            }
    for l, cb in enumerate(art.layers):
        yield {
            "t": "layer",
            "l": l,
            "K": cb.K,
            "metric": cb.metric,
            "gamma": cb.gamma,
            "filled": cb.filled,
            "step": cb.step,
        }
        for k in range(cb.K):
            yield {
                "t": "code",
                "l": l,
                "k": k,
                "codeword": _floats(cb.codewords[k]),
                "ema_sum": _floats(cb.ema_sum[k]),
                "ema_count": float(cb.ema_count[k]),
            }
    if art.index is not None:
        items = sorted(art.index.forward.items())
        for start in range(0, len(items), 4096):
            yield {"t": "assign", "pairs": [[i, k] for i, k in items[start : start + 4096]]}


def dumps_artifact(art: CodebookArtifact) -> bytes:
    header = {
        "version": FORMAT_VERSION,
        "kind": art.kind,
        "d": art.d,
        "config": art.config,
        "step": art.fine.step if art.fine is not None else None,
        "slots": len(art.fine) if art.fine is not None else 0,
        "coarse": len(art.coarse) if art.coarse is not None else None,
        "layers": len(art.layers),
        "assignments": len(art.index) if art.index is not None else None,
        "manifest": art.manifest,
    }
    buf = io.StringIO()
    buf.write(f"{MAGIC} v{FORMAT_VERSION}\n")
    buf.write(_dump(header) + "\n")
    for rec in _records(art):
        buf.write(_dump(rec) + "\n")
    body = buf.getvalue().encode("utf-8")
    return body + f"{CHECKSUM_PREFIX}{hashlib.sha256(body).hexdigest()}\n".encode("ascii")


def save_artifact(art: CodebookArtifact, path) -> None:
    Path(path).write_bytes(dumps_artifact(art))


def loads_artifact(data: bytes) -> CodebookArtifact:
    lines = data.split(b"\n")
    if not lines or not lines[0].startswith(MAGIC.encode()):
        raise CodebookFormatError("not a codebook container")
    try:
        found = int(lines[0].decode().split(" v", 1)[1])
    except (IndexError, ValueError):
        raise CodebookFormatError("unreadable container version") from None
    if found != FORMAT_VERSION:
        raise CodebookFormatError(f"container format version {found}, this reader supports version {FORMAT_VERSION}")
    if not data.endswith(b"\n"):
        raise CodebookFormatError("truncated container: missing final newline")
    body_end = data.rfind(b"\n", 0, len(data) - 1) + 1
    last = data[body_end:-1].decode("ascii", errors="replace")
    if not last.startswith(CHECKSUM_PREFIX):
        raise CodebookFormatError("truncated container: checksum line missing")
    body = data[:body_end]
    if hashlib.sha256(body).hexdigest() != last[len(CHECKSUM_PREFIX) :].strip():
        raise IntegrityError("container checksum mismatch")

    body_lines = body.decode("utf-8").split("\n")[1:-1]
    header = json.loads(body_lines[0])
    if header.get("version") != FORMAT_VERSION:
        raise CodebookFormatError(
            f"header format version {header.get('version')}, this reader supports version {FORMAT_VERSION}"
        )
    d = int(header["d"])
    art = CodebookArtifact(kind=header["kind"], d=d, config=header.get("config") or {}, manifest=header.get("manifest"))
    fine = FineCodebook(d, capacity=max(int(header.get("slots") or 0), 1))
    fine.step = int(header["step"]) if header.get("step") is not None else 0
    has_fine = header.get("step") is not None
    protos: list[CoarsePrototype] = []
    index = AssignmentIndex() if header.get("assignments") is not None else None
    for raw in body_lines[1:]:
        rec = json.loads(raw)
        t = rec["t"]
        if t == "slot":
            k = fine.append_empty()
            if rec["active"]:
                fine.active[k] = True
                fine.codewords[k] = rec["codeword"]
                fine.ema_sum[k] = rec["ema_sum"]
                fine.ema_count[k] = rec["ema_count"]
            fine.created_step[k] = rec["created_step"]
            fine.growing_since[k] = -1 if rec["growing_since"] is None else rec["growing_since"]
        elif t == "coarse":
            protos.append(
                CoarsePrototype(np.array(rec["embedding"], dtype=np.float64), float(rec["ema_count"]), list(rec["members"]))
            )
        elif t == "layer":
            cb = VqCodebook(int(rec["K"]), d, rec["metric"], float(rec["gamma"]))
            cb.filled = int(rec["filled"])
            cb.step = int(rec["step"])
            art.layers.append(cb)
        elif t == "code":
            cb = art.layers[rec["l"]]
            k = rec["k"]
            cb.codewords[k] = rec["codeword"]
            cb.ema_sum[k] = rec["ema_sum"]
            cb.ema_count[k] = rec["ema_count"]
        elif t == "assign":
            for i, k in rec["pairs"]:
                index.assign(i, k)
        else:
            raise CodebookFormatError(f"unknown record type {t!r}")
    if has_fine:
        art.fine = fine
    if header.get("coarse") is not None:
        parent = np.full(len(fine), -1, dtype=np.int64)
        for c, p in enumerate(protos):
            parent[p.members] = c
        art.coarse = CoarseCodebook(protos, parent)
    if index is not None:
        index.coarse = art.coarse
    art.index = index
    return art


def load_artifact(path) -> CodebookArtifact:
    return loads_artifact(Path(path).read_bytes())


def save_codebook(fine: FineCodebook, coarse: Optional[CoarseCodebook], path, **extra) -> None:
    save_artifact(CodebookArtifact(kind="merge", d=fine.d, fine=fine, coarse=coarse, **extra), path)


def load_codebook(path) -> tuple[FineCodebook, Optional[CoarseCodebook]]:
    art = load_artifact(path)
    if art.fine is None:
        raise CodebookFormatError(f"{path} holds a {art.kind} codebook, not a fine codebook")
    return art.fine, art.coarse
