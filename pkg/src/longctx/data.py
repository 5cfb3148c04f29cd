"""Corpus ingestion, benchmark assembly, and the synthetic ablation corpus.

Two on-disk corpus layouts are supported: line-delimited JSON records, and
tar shards where an image member (``<base>.npy``) and a caption member
(``<base>.txt``) share a basename.  Images are precomputed feature vectors
throughout; pixels are out of scope.
"""

from __future__ import annotations

import io
import json
import tarfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError
from .words import CLASS_WORDS, DISTRACTOR_POOL, SIGNATURE_POOL

# Reference token-length statistics reported for the two long-text benchmark
# corpora this lab models.  The two PMC-attributed rows disagree at the
# source; both are recorded verbatim rather than reconciled.
BENCHMARK_LENGTH_STATS = {
    "cxr_reports": {"mean": 168.3, "median": 158, "min": 49, "max": 427},
    "pmc_reports_as_printed": {"mean": 510, "median": 460, "min": 251, "max": 1022},
}


@dataclass(frozen=True)
class CorpusRecord:
    id: str
    image: np.ndarray            # flat feature vector
    caption: str
    context: dict = field(default_factory=dict)


class PairedCorpus:
    """Indexed set of (image features, caption) records with unique ids."""

    def __init__(self, records: list[CorpusRecord]):
        self.records = list(records)
        self._by_id = {}
        dim = None
        for rec in self.records:
            if rec.id in self._by_id:
                raise DataError(f"duplicate record id {rec.id!r}")
            if rec.image.ndim != 1:
                raise DataError(f"record {rec.id!r}: image features must be a flat vector")
            if dim is None:
                dim = rec.image.shape[0]
            elif rec.image.shape[0] != dim:
                raise DataError(
                    f"record {rec.id!r}: feature dim {rec.image.shape[0]} != {dim}")
            self._by_id[rec.id] = rec

    def __len__(self):
        return len(self.records)

    def __getitem__(self, rec_id: str) -> CorpusRecord:
        return self._by_id[rec_id]

    def __contains__(self, rec_id: str) -> bool:
        return rec_id in self._by_id

    @property
    def image_dim(self) -> int:
        if not self.records:
            raise UsageError("empty corpus has no feature dimension")
        return self.records[0].image.shape[0]

    def captions(self) -> list[str]:
        return [r.caption for r in self.records]

    def images(self) -> np.ndarray:
        return np.stack([r.image for r in self.records])


# -- records / shards I/O ---------------------------------------------------------


def load_corpus(path, format: str = "records") -> PairedCorpus:
    """Load and validate a corpus from a record file or tar shard(s)."""
    if format == "records":
        return _load_records(Path(path))
    if format == "shards":
        return _load_shards(Path(path))
    raise UsageError(f"unknown corpus format {format!r}")


def save_corpus(corpus: PairedCorpus, path, format: str = "records",
                shard_size: int = 1000) -> None:
    if format == "records":
        _save_records(corpus, Path(path))
    elif format == "shards":
        _save_shards(corpus, Path(path), shard_size)
    else:
        raise UsageError(f"unknown corpus format {format!r}")


def _load_records(path: Path) -> PairedCorpus:
    records = []
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rec = CorpusRecord(
                id=str(obj["id"]),
                image=np.asarray(obj["image"], dtype=np.float64),
                caption=str(obj["caption"]),
                context=obj.get("context", {}),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{path} line {lineno}: malformed record ({exc})") from exc
        records.append(rec)
    return PairedCorpus(records)


def _save_records(corpus: PairedCorpus, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in corpus.records:
            obj = {"id": rec.id, "image": [float(x) for x in rec.image],
                   "caption": rec.caption}
            if rec.context:
                obj["context"] = rec.context
            fh.write(json.dumps(obj, sort_keys=True) + "\n")


def _shard_paths(path: Path) -> list[Path]:
    if path.is_dir():
        found = sorted(path.glob("*.tar"))
        if not found:
            raise DataError(f"no .tar shards under {path}")
        return found
    return [path]


def _load_shards(path: Path) -> PairedCorpus:
    records = []
    for shard in _shard_paths(path):
        members: dict[str, dict[str, bytes]] = {}
        try:
            with tarfile.open(shard) as tar:
                for info in tar:
                    if not info.isfile():
                        continue
                    base, dot, ext = info.name.rpartition(".")
                    if not dot or ext not in ("npy", "txt", "json"):
                        raise DataError(f"{shard}: unexpected member {info.name!r}")
                    members.setdefault(base, {})[ext] = tar.extractfile(info).read()
        except tarfile.TarError as exc:
            raise DataError(f"cannot read shard {shard}: {exc}") from exc
        for base in sorted(members):
            parts = members[base]
            if "npy" not in parts or "txt" not in parts:
                missing = "npy" if "npy" not in parts else "txt"
                raise DataError(f"{shard}: member {base!r} is missing its .{missing} half")
            image = np.load(io.BytesIO(parts["npy"]), allow_pickle=False)
            context = json.loads(parts["json"]) if "json" in parts else {}
            records.append(CorpusRecord(id=base, image=np.asarray(image, dtype=np.float64),
                                        caption=parts["txt"].decode("utf-8"),
                                        context=context))
    return PairedCorpus(records)


def _save_shards(corpus: PairedCorpus, path: Path, shard_size: int) -> None:
    path.mkdir(parents=True, exist_ok=True)
    chunks = [corpus.records[i:i + shard_size]
              for i in range(0, len(corpus.records), shard_size)]
    for si, chunk in enumerate(chunks):
        with tarfile.open(path / f"shard-{si:05d}.tar", "w") as tar:
            for rec in chunk:
                buf = io.BytesIO()
                np.save(buf, rec.image)
                _add_member(tar, f"{rec.id}.npy", buf.getvalue())
                _add_member(tar, f"{rec.id}.txt", rec.caption.encode("utf-8"))
                if rec.context:
                    _add_member(tar, f"{rec.id}.json",
                                json.dumps(rec.context, sort_keys=True).encode("utf-8"))


def _add_member(tar, name, payload: bytes):
    info = tarfile.TarInfo(name)
    info.size = len(payload)
    info.mtime = 0
    tar.addfile(info, io.BytesIO(payload))


# -- long-caption benchmark --------------------------------------------------------


@dataclass(frozen=True)
class Figure:
    figure_id: str
    image: np.ndarray
    caption: str
    inline_refs: tuple[str, ...] = ()


@dataclass(frozen=True)
class Article:
    article_id: str
    figures: tuple[Figure, ...]
    date: str = ""               # ISO date for optional filtering


@dataclass(frozen=True)
class BenchmarkBuild:
    corpus: PairedCorpus
    skipped_articles: int
    manifest: list[tuple[str, str, int]]   # (pair id, article id, caption words)


def build_long_caption_benchmark(articles: list[Article], seed: int = 0,
                                 min_date: str = "") -> BenchmarkBuild:
    """One seeded image-caption pair per article; no article reused.

    The pair caption is the article's inline references followed by the
    figure caption, separated by a blank line.  Articles without figures
    (or older than ``min_date`` when given) are skipped and counted.
    """
    rng = np.random.default_rng(seed)
    records = []
    manifest = []
    skipped = 0
    for article in articles:
        if min_date and article.date and article.date < min_date:
            skipped += 1
            continue
        if not article.figures:
            skipped += 1
            continue
        fig = article.figures[int(rng.integers(len(article.figures)))]
        refs = " ".join(fig.inline_refs).strip()
        caption = f"{refs}\n\n{fig.caption}" if refs else fig.caption
        pair_id = f"{article.article_id}/{fig.figure_id}"
        records.append(CorpusRecord(id=pair_id, image=np.asarray(fig.image, dtype=np.float64),
                                    caption=caption,
                                    context={"article_id": article.article_id}))
        manifest.append((pair_id, article.article_id, len(caption.split())))
    return BenchmarkBuild(corpus=PairedCorpus(records), skipped_articles=skipped,
                          manifest=manifest)


def load_articles(path) -> list[Article]:
    """Minimal fixture parser for line-delimited article records."""
    articles = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            figures = tuple(
                Figure(figure_id=str(f["figure_id"]),
                       image=np.asarray(f["image"], dtype=np.float64),
                       caption=str(f["caption"]),
                       inline_refs=tuple(f.get("inline_refs", [])))
                for f in obj.get("figures", []))
            articles.append(Article(article_id=str(obj["article_id"]),
                                    figures=figures, date=str(obj.get("date", ""))))
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{path} line {lineno}: malformed article ({exc})") from exc
    return articles


def write_benchmark_manifest(build: BenchmarkBuild, path) -> None:
    lines = ["id,article_id,caption_words"]
    lines += [f"{pid},{aid},{n}" for pid, aid, n in build.manifest]
    Path(path).write_text("\n".join(lines) + "\n")


# -- synthetic ablation corpus ------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Knobs for the context-length ablation corpus.

    Captions carry no image signal in their first ``distractor_prefix_tokens``
    words (all drawn from the shared distractor pool, class-exchangeable).
    The slots between the prefix and ``class_token_position`` hold the
    sample's image signature, drawn from a disjoint signature vocabulary:
    the image's within-class offset points along the summed directions of
    those words.  The class word sits at ``class_token_position`` (0-based).
    A short context window therefore sees pure distractors; only a window
    reaching past the prefix sees anything predictive of the image.
    """

    num_classes: int = 10
    samples_per_class: int = 200
    image_dim: int = 64
    distractor_prefix_tokens: int = 100
    class_token_position: int = 110
    noise_std: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.class_token_position <= self.distractor_prefix_tokens:
            raise UsageError("class_token_position must exceed distractor_prefix_tokens")
        if self.num_classes > len(CLASS_WORDS):
            raise UsageError(
                f"num_classes {self.num_classes} exceeds class-word pool "
                f"capacity {len(CLASS_WORDS)}")
        if self.num_classes < 1 or self.samples_per_class < 1:
            raise UsageError("need at least one class and one sample per class")


MAX_PROTOTYPE_COSINE = 0.5
ZIPF_EXPONENT = 1.1


def _zipf_weights(n: int, s: float = ZIPF_EXPONENT) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = ranks ** -s
    return w / w.sum()


def generate_synthetic(spec: SyntheticSpec) -> tuple[PairedCorpus, list[str]]:
    """Deterministic corpus pairing images with distractor+signature captions.

    image = class prototype + noise_std * sqrt(dim) * signature direction,
    where the signature direction is the normalized sum of fixed random unit
    vectors assigned to the caption words at positions
    [distractor_prefix_tokens, class_token_position).  Returns the corpus
    and the per-record class word.  Class prototypes are redrawn (still
    seeded) until all pairwise cosines are below ``MAX_PROTOTYPE_COSINE``.
    """
    rng = np.random.default_rng(spec.seed)
    prototypes = _draw_prototypes(rng, spec.num_classes, spec.image_dim)
    sig_dirs = rng.normal(size=(len(SIGNATURE_POOL), spec.image_dim))
    sig_dirs /= np.linalg.norm(sig_dirs, axis=1, keepdims=True)
    pool = np.array(DISTRACTOR_POOL)
    sig_pool = np.array(SIGNATURE_POOL)
    n_sig = spec.class_token_position - spec.distractor_prefix_tokens
    noise_scale = spec.noise_std * np.sqrt(spec.image_dim)
    # distractors follow a Zipf law like natural text; signature words are
    # uniform so per-sample signatures stay distinct
    zipf = _zipf_weights(len(pool))
    records = []
    labels = []
    for c in range(spec.num_classes):
        class_word = CLASS_WORDS[c]
        for s in range(spec.samples_per_class):
            prefix_idx = rng.choice(len(pool), size=spec.distractor_prefix_tokens,
                                    p=zipf)
            sig_idx = rng.integers(0, len(sig_pool), size=n_sig)
            signature = sig_dirs[sig_idx].sum(axis=0)
            norm = np.linalg.norm(signature)
            if norm > 0:
                signature /= norm
            image = prototypes[c] + noise_scale * signature
            words = pool[prefix_idx].tolist() + sig_pool[sig_idx].tolist() + [class_word]
            records.append(CorpusRecord(id=f"syn-{c:02d}-{s:04d}",
                                        image=image, caption=" ".join(words)))
            labels.append(class_word)
    return PairedCorpus(records), labels


def _draw_prototypes(rng, num_classes, dim, max_tries=50):
    for _ in range(max_tries):
        protos = rng.normal(size=(num_classes, dim))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        cos = protos @ protos.T
        np.fill_diagonal(cos, 0.0)
        if num_classes == 1 or np.abs(cos).max() < MAX_PROTOTYPE_COSINE:
            return protos
    raise NumericErrorForPrototypes(
        f"could not draw {num_classes} prototypes with pairwise |cos| < "
        f"{MAX_PROTOTYPE_COSINE} in {max_tries} tries at dim {dim}")


class NumericErrorForPrototypes(UsageError):
    """Prototype separation is unattainable for the requested geometry."""
