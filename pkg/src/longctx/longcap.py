"""Caption-augmentation pipeline against a pluggable generation backend.

Four steps per record: (1) augment the caption with article context, (2) ask
the backend to label each atomic caption feature FEASIBLE / NOT_FEASIBLE as
an XML document, (3) rewrite keeping only feasible features, (4) expand
acronyms by rule.  Records fail individually (the run always continues) and
an append-only journal makes reruns idempotent: records already done are
never re-sent to the backend.

Prompt templates are versioned artifacts; every output records the version
it was produced with.
"""

from __future__ import annotations

import json
import os
import re
import threading
import xml.etree.ElementTree as ET
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from xml.sax.saxutils import escape, quoteattr

import requests

from .errors import DataError, UsageError

TEMPLATE_VERSION = "v1"

AUGMENT_TEMPLATE = """TASK: augment
Rewrite the figure caption below into a longer, self-contained image
description.  Use only the provided context; do not invent facts.

CAPTION:
{caption}

INLINE MENTIONS:
{mentions}

ABSTRACT:
{abstract}

ACRONYMS:
{acronyms}
"""

ASSESS_TEMPLATE = """TASK: assess
Split the caption below into atomic features (one visually checkable
assertion each).  Judge whether each feature can be discerned from the image
alone, without external sources or information not visually present, unless
text is explicitly overlaid on the image.  Reply with an XML document only:
<features>
  <feature label="FEASIBLE|NOT_FEASIBLE" rationale="...">feature text</feature>
</features>

CAPTION:
{caption}
"""

REFINE_TEMPLATE = """TASK: refine
Rewrite the caption so it keeps only the FEASIBLE features listed below,
removing or rewording everything else.  If no features are feasible, reply
with a minimal generic image description.

CAPTION:
{caption}

FEASIBLE:
{feasible}

NOT_FEASIBLE:
{not_feasible}
"""

REPAIR_SUFFIX = """

The previous reply could not be parsed.  Reply again with exactly one
well-formed XML document in the schema shown above and nothing else.
"""

NOT_VISUAL_MARKERS = (
    "survival", "improved", "outcome", "prognosis", "efficacy", "mortality",
    "follow-up", "response rate", "p <", "p<", "significant", "history of",
)


@dataclass(frozen=True)
class CaptionRecord:
    id: str
    image_ref: str
    caption: str
    inline_mentions: tuple[str, ...] = ()
    abstract: str = ""
    acronym_map: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.caption:
            raise UsageError(f"record {self.id!r}: caption must be nonempty")


@dataclass(frozen=True)
class FeatureJudgment:
    text: str
    label: str          # FEASIBLE | NOT_FEASIBLE
    rationale: str


@dataclass(frozen=True)
class FeasibilityReport:
    features: tuple[FeatureJudgment, ...]

    def feasible(self):
        return [f.text for f in self.features if f.label == "FEASIBLE"]

    def not_feasible(self):
        return [f.text for f in self.features if f.label == "NOT_FEASIBLE"]


class BackendError(Exception):
    """Backend transport failure after the configured number of attempts."""

    def __init__(self, message, attempts=1):
        super().__init__(message)
        self.attempts = attempts


class ParseFailure(Exception):
    """Backend reply was unusable even after the repair reprompt."""


# -- backends --------------------------------------------------------------------


class MockBackend:
    """Deterministic in-process stand-in for the generation model.

    Responses are a pure function of (prompt, image_ref, seed): augmentation
    echoes the caption plus its context, assessment labels features by a
    fixed non-visual marker list, refinement joins the feasible features.
    A request log supports resume and determinism assertions.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.requests: list[str] = []
        self._lock = threading.Lock()

    def generate(self, prompt: str, image_ref: str | None = None) -> str:
        with self._lock:
            self.requests.append(prompt)
        task = prompt.split("\n", 1)[0].removeprefix("TASK: ").strip()
        if task == "augment":
            return self._augment(prompt)
        if task == "assess":
            return self._assess(prompt)
        if task == "refine":
            return self._refine(prompt)
        return f"echo[{self.seed}]: {prompt.splitlines()[-1] if prompt else ''}"

    def _augment(self, prompt):
        caption = _section(prompt, "CAPTION")
        mentions = _section(prompt, "INLINE MENTIONS")
        abstract = _section(prompt, "ABSTRACT")
        parts = [caption]
        if mentions:
            parts.append(mentions.replace("\n", " "))
        if abstract:
            parts.append("Context: " + abstract.replace("\n", " "))
        return " ".join(p.strip() for p in parts if p.strip())

    def _assess(self, prompt):
        caption = _section(prompt, "CAPTION")
        features = split_atomic_features(caption)
        rows = []
        for feat in features:
            lowered = feat.lower()
            if any(marker in lowered for marker in NOT_VISUAL_MARKERS):
                label, why = "NOT_FEASIBLE", "not verifiable from the image alone"
            else:
                label, why = "FEASIBLE", "directly visible in the image"
            rows.append(f"  <feature label={quoteattr(label)} "
                        f"rationale={quoteattr(why)}>{escape(feat)}</feature>")
        return "<features>\n" + "\n".join(rows) + "\n</features>"

    def _refine(self, prompt):
        feasible = [ln[2:] for ln in _section(prompt, "FEASIBLE").splitlines()
                    if ln.startswith("- ")]
        if not feasible:
            return "An image without independently verifiable features."
        return ". ".join(feasible) + "."


def _section(prompt: str, header: str) -> str:
    pattern = rf"^{re.escape(header)}:\n(.*?)(?=^\S[^\n]*:$|\Z)"
    m = re.search(pattern, prompt, flags=re.MULTILINE | re.DOTALL)
    return m.group(1).strip() if m else ""


def split_atomic_features(caption: str) -> list[str]:
    """Sentence/clause split; the backend contract works on these pieces."""
    parts = re.split(r"[.;]\s*", caption)
    return [p.strip() for p in parts if p.strip()]


class HttpBackend:
    """POSTs the prompt (and an opaque image reference) to a text endpoint."""

    def __init__(self, endpoint: str, token_env: str = "LONGCTX_BACKEND_TOKEN",
                 timeout: float = 60.0, transport_attempts: int = 3):
        self.endpoint = endpoint
        self.token_env = token_env
        self.timeout = timeout
        self.transport_attempts = transport_attempts
        self.requests: list[str] = []
        self._lock = threading.Lock()

    def generate(self, prompt: str, image_ref: str | None = None) -> str:
        with self._lock:
            self.requests.append(prompt)
        headers = {}
        token = os.environ.get(self.token_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        payload = {"prompt": prompt}
        if image_ref:
            payload["image_ref"] = image_ref
        last = None
        for attempt in range(1, self.transport_attempts + 1):
            try:
                resp = requests.post(self.endpoint, json=payload,
                                     headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                return resp.text
            except requests.RequestException as exc:
                last = exc
        raise BackendError(f"backend {self.endpoint} failed: {last}",
                           attempts=self.transport_attempts)


def make_backend(descriptor: str, seed: int = 0):
    """``mock`` or an HTTP(S) endpoint URL."""
    if descriptor == "mock":
        return MockBackend(seed=seed)
    if descriptor.startswith(("http://", "https://")):
        return HttpBackend(descriptor)
    raise UsageError(f"unknown backend descriptor {descriptor!r}")


# -- the four steps ----------------------------------------------------------------


def augment_caption(record: CaptionRecord, backend) -> str:
    """Step 1: contextualize the caption with mentions/abstract/acronyms."""
    acronyms = "\n".join(f"{k} = {v}" for k, v in sorted(record.acronym_map.items()))
    prompt = AUGMENT_TEMPLATE.format(
        caption=record.caption,
        mentions="\n".join(record.inline_mentions),
        abstract=record.abstract,
        acronyms=acronyms,
    )
    return backend.generate(prompt, record.image_ref).strip()


def assess_feasibility(image_ref: str, caption: str, backend) -> FeasibilityReport:
    """Step 2: atomic features labeled FEASIBLE/NOT_FEASIBLE via XML reply.

    A malformed reply earns exactly one repair reprompt; a second failure
    raises ``ParseFailure``.
    """
    if not caption:
        raise UsageError("cannot assess an empty caption")
    prompt = ASSESS_TEMPLATE.format(caption=caption)
    reply = backend.generate(prompt, image_ref)
    try:
        return _parse_feature_xml(reply)
    except DataError:
        reply = backend.generate(prompt + REPAIR_SUFFIX, image_ref)
        try:
            return _parse_feature_xml(reply)
        except DataError as exc:
            raise ParseFailure(f"unparseable feasibility reply after repair: {exc}") from exc


def _parse_feature_xml(reply: str) -> FeasibilityReport:
    text = reply.strip()
    start = text.find("<features")
    if start >= 0:
        text = text[start:]
    try:
        root = ET.fromstring(text)
    except ET.ParseError as exc:
        raise DataError(f"invalid XML: {exc}") from exc
    if root.tag != "features":
        raise DataError(f"expected <features> root, got <{root.tag}>")
    judged = []
    for el in root.iter("feature"):
        label = (el.get("label") or "").strip()
        if label not in ("FEASIBLE", "NOT_FEASIBLE"):
            raise DataError(f"bad feature label {label!r}")
        judged.append(FeatureJudgment(text=(el.text or "").strip(), label=label,
                                      rationale=(el.get("rationale") or "").strip()))
    if not judged:
        raise DataError("no <feature> elements found")
    return FeasibilityReport(features=tuple(judged))


def refine_caption(caption: str, report: FeasibilityReport, backend,
                   image_ref: str | None = None) -> str:
    """Step 3: rewrite keeping FEASIBLE features only, with one retry.

    The reply is validated: no NOT_FEASIBLE feature text may appear
    verbatim.
    """
    if not report.features:
        raise UsageError("feasibility report is empty")
    prompt = REFINE_TEMPLATE.format(
        caption=caption,
        feasible="\n".join(f"- {t}" for t in report.feasible()),
        not_feasible="\n".join(f"- {t}" for t in report.not_feasible()),
    )
    reply = backend.generate(prompt, image_ref).strip()
    blocked = [t for t in report.not_feasible() if t and t in reply]
    if blocked:
        reply = backend.generate(prompt + REPAIR_SUFFIX, image_ref).strip()
        blocked = [t for t in report.not_feasible() if t and t in reply]
        if blocked:
            raise ParseFailure(
                f"refined caption still contains blocked features: {blocked[:2]}")
    return reply


_ACRO_CACHE: dict = {}


def expand_acronyms(caption: str, acronym_map: dict) -> str:
    """Step 4 (rule-based): first word-boundary occurrence of each acronym
    becomes ``expansion (ACRONYM)``; later occurrences stay as they are."""
    for acro in sorted(acronym_map):
        expansion = acronym_map[acro]
        if not expansion:
            raise UsageError(f"empty expansion for acronym {acro!r}")
        pattern = _ACRO_CACHE.get(acro)
        if pattern is None:
            pattern = re.compile(rf"\b{re.escape(acro)}\b")
            _ACRO_CACHE[acro] = pattern
        caption = pattern.sub(f"{expansion} ({acro})", caption, count=1)
    return caption


# -- pipeline ----------------------------------------------------------------------


@dataclass(frozen=True)
class RecordResult:
    id: str
    status: str                 # done | failed
    caption: str = ""
    stage: str = ""             # failure stage when status == failed
    low_content: bool = False
    template_version: str = TEMPLATE_VERSION


@dataclass
class LongCapCorpus:
    results: list[RecordResult]

    def by_id(self) -> dict[str, RecordResult]:
        return {r.id: r for r in self.results}

    @property
    def failure_rate(self) -> float:
        if not self.results:
            return 0.0
        return sum(r.status == "failed" for r in self.results) / len(self.results)

    def captions(self) -> dict[str, str]:
        return {r.id: r.caption for r in self.results if r.status == "done"}


def process_record(record: CaptionRecord, backend) -> RecordResult:
    """All four steps for one record; failures carry the stage name."""
    stage = "augment"
    try:
        augmented = augment_caption(record, backend)
        stage = "assess"
        report = assess_feasibility(record.image_ref, augmented, backend)
        stage = "refine"
        refined = refine_caption(augmented, report, backend, record.image_ref)
        stage = "expand"
        final = expand_acronyms(refined, record.acronym_map)
    except (BackendError, ParseFailure, UsageError) as exc:
        return RecordResult(id=record.id, status="failed", stage=f"{stage}: {exc}")
    return RecordResult(id=record.id, status="done", caption=final,
                        low_content=not report.feasible())


def run_pipeline(corpus: list[CaptionRecord], backend,
                 journal_path=None, max_workers: int = 4) -> LongCapCorpus:
    """Process a corpus with at most ``max_workers`` in-flight records.

    The journal (line-delimited results) is both the progress log and the
    resume state: records present as ``done`` are returned as-is without any
    backend traffic.  Output ordering is by record id regardless of
    completion order.
    """
    if not corpus:
        raise UsageError("empty corpus")
    seen = set()
    for rec in corpus:
        if rec.id in seen:
            raise UsageError(f"duplicate record id {rec.id!r}")
        seen.add(rec.id)

    done: dict[str, RecordResult] = {}
    if journal_path and Path(journal_path).exists():
        for result in read_journal(journal_path):
            if result.status == "done":
                done[result.id] = result

    pending = [r for r in corpus if r.id not in done]
    journal_lock = threading.Lock()
    fresh: dict[str, RecordResult] = {}

    def handle(record):
        result = process_record(record, backend)
        if journal_path:
            with journal_lock:
                append_journal(journal_path, result)
        return result

    if max_workers <= 1 or len(pending) <= 1:
        for record in pending:
            fresh[record.id] = handle(record)
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            for result in pool.map(handle, pending):
                fresh[result.id] = result

    merged = {**done, **fresh}
    ordered = [merged[rid] for rid in sorted(merged)]
    return LongCapCorpus(results=ordered)


# -- record and journal files --------------------------------------------------------


def read_caption_records(path) -> list[CaptionRecord]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            records.append(CaptionRecord(
                id=str(obj["id"]),
                image_ref=str(obj.get("image_ref", "")),
                caption=str(obj["caption"]),
                inline_mentions=tuple(obj.get("inline_mentions", [])),
                abstract=str(obj.get("abstract", "")),
                acronym_map=dict(obj.get("acronym_map", {})),
            ))
        except (KeyError, ValueError, TypeError) as exc:
            raise DataError(f"{path} line {lineno}: malformed caption record ({exc})") from exc
    return records


def write_caption_records(records, path) -> None:
    with Path(path).open("w") as fh:
        for r in records:
            fh.write(json.dumps({
                "id": r.id, "image_ref": r.image_ref, "caption": r.caption,
                "inline_mentions": list(r.inline_mentions), "abstract": r.abstract,
                "acronym_map": r.acronym_map,
            }, sort_keys=True) + "\n")


def write_output_corpus(corpus: LongCapCorpus, path) -> None:
    with Path(path).open("w") as fh:
        for r in corpus.results:
            fh.write(json.dumps({
                "id": r.id, "status": r.status, "caption": r.caption,
                "low_content": r.low_content, "stage": r.stage,
                "template_version": r.template_version,
            }, sort_keys=True) + "\n")


def append_journal(path, result: RecordResult) -> None:
    with Path(path).open("a") as fh:
        fh.write(json.dumps({
            "id": result.id, "status": result.status, "caption": result.caption,
            "stage": result.stage, "low_content": result.low_content,
            "template_version": result.template_version,
        }, sort_keys=True) + "\n")


def read_journal(path) -> list[RecordResult]:
    results = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        results.append(RecordResult(
            id=obj["id"], status=obj["status"], caption=obj.get("caption", ""),
            stage=obj.get("stage", ""), low_content=obj.get("low_content", False),
            template_version=obj.get("template_version", TEMPLATE_VERSION)))
    return results
