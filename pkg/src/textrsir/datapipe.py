"""Manifests, onboard data preparation, caption providers and downlink budgets.

Prepared layout for a record ``id``::

    out_dir/{id}.jpg        compressed low-resolution (CLR) image
    out_dir/{id}.txt        UTF-8 caption, no trailing newline
    out_dir/payloads.jsonl  one PayloadRecord per line, manifest order
"""

import base64
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import requests

from .errors import (
    ArgumentError,
    CaptionTransportError,
    ManifestError,
    MissingCaptionError,
    TextRSIRError,
)
from .imagecore import downsample_bicubic, encode_lossless, jpeg_decode, jpeg_encode, read_image

log = logging.getLogger(__name__)

SPLITS = ("train", "test")
DEFAULT_PROMPT = "Describe this satellite image in one sentence."
PAYLOADS_FILE = "payloads.jsonl"
METHODS = ("HR", "downsample", "downsample_compress", "tgrsit")


@dataclass
class ManifestRecord:
    id: str
    hr_path: str
    split: str
    class_label: str
    caption: str = None

    def to_json(self):
        d = asdict(self)
        if d["caption"] is None:
            del d["caption"]
        return json.dumps(d, ensure_ascii=False)


@dataclass
class PayloadRecord:
    """Per-image downlink bytes.

    ``clr_raster_bytes`` is the size of the downsampled image stored
    losslessly as uncompressed TIFF, the "downsample only" downlink option.
    """

    id: str
    clr_bytes: int
    caption_bytes: int
    hr_reference_bytes: int
    clr_raster_bytes: int = 0


@dataclass
class PrepareResult:
    payloads: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)


def load_manifest(path):
    """Parse a line-delimited JSON manifest.

    Relative ``hr_path`` values are resolved against the manifest's directory.
    Blank lines are skipped.
    """
    path = Path(path)
    base = path.parent
    records, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: expected a JSON object")
            missing = {"id", "hr_path", "split", "class_label"} - obj.keys()
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing fields {sorted(missing)}")
            unknown = obj.keys() - {"id", "hr_path", "split", "class_label", "caption"}
            if unknown:
                raise ManifestError(f"{path}:{lineno}: unknown fields {sorted(unknown)}")
            if obj["split"] not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: split must be one of {SPLITS}")
            rid = str(obj["id"])
            if rid in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id {rid!r}")
            seen.add(rid)
            hr = Path(obj["hr_path"])
            if not hr.is_absolute():
                hr = base / hr
            records.append(
                ManifestRecord(rid, str(hr), obj["split"], str(obj["class_label"]), obj.get("caption"))
            )
    return records


def write_manifest(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def split_records(records, split):
    return [r for r in records if r.split == split]


# ---------------------------------------------------------------- captions


class CaptionProvider:
    kind = None

    def caption(self, image, id):
        raise NotImplementedError


class ConstantCaptionProvider(CaptionProvider):
    kind = "constant"

    def __init__(self, text):
        if not text:
            raise ArgumentError("constant caption must be non-empty")
        self.text = text

    def caption(self, image, id):
        return self.text


class CachedCaptionProvider(CaptionProvider):
    """Looks captions up by id; the image is ignored.

    ``cache`` is a mapping or a path to either a JSON object ``{id: caption}``
    or a JSONL file of ``{"id": ..., "caption": ...}`` lines.
    """

    kind = "cached"

    def __init__(self, cache):
        if isinstance(cache, (str, os.PathLike)):
            cache = _read_caption_cache(cache)
        self.cache = dict(cache)

    @classmethod
    def from_records(cls, records):
        return cls({r.id: r.caption for r in records if r.caption})

    def caption(self, image, id):
        try:
            text = self.cache[id]
        except KeyError:
            raise MissingCaptionError(f"no cached caption for id {id!r}") from None
        if not text:
            raise MissingCaptionError(f"empty cached caption for id {id!r}")
        return text


def _read_caption_cache(path):
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    # a one-line JSONL file is also a valid JSON object, so the suffix decides
    if path.suffix != ".jsonl":
        try:
            obj = json.loads(text)
            if isinstance(obj, dict):
                return {str(k): str(v) for k, v in obj.items()}
        except json.JSONDecodeError:
            pass
    cache = {}
    for line in text.splitlines():
        if line.strip():
            row = json.loads(line)
            cache[str(row["id"])] = str(row["caption"])
    return cache


class RemoteCaptionProvider(CaptionProvider):
    """POSTs ``{"image": <base64 PNG>, "prompt": ...}`` and reads ``{"caption": ...}``.

    At most ``max_in_flight`` requests run concurrently per provider. Each
    request has ``timeout`` seconds and is retried up to ``retries`` times.
    """

    kind = "remote"

    def __init__(self, endpoint, prompt=DEFAULT_PROMPT, timeout=30.0, retries=2,
                 max_in_flight=2, backoff=0.5):
        if not timeout or timeout <= 0:
            raise ArgumentError("remote caption provider needs a finite positive timeout")
        if max_in_flight < 1:
            raise ArgumentError("max_in_flight must be >= 1")
        self.endpoint = endpoint
        self.prompt = prompt
        self.timeout = float(timeout)
        self.retries = int(retries)
        self.backoff = backoff
        self.max_in_flight = max_in_flight
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._session = requests.Session()

    def caption(self, image, id):
        body = {
            "image": base64.b64encode(encode_lossless(image, "PNG").data).decode("ascii"),
            "prompt": self.prompt,
        }
        last = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * attempt)
            try:
                with self._slots:
                    resp = self._session.post(self.endpoint, json=body, timeout=self.timeout)
                resp.raise_for_status()
                text = resp.json().get("caption")
                if isinstance(text, str) and text.strip():
                    return text.strip()
                last = ValueError("response has no non-empty 'caption'")
            except (requests.RequestException, ValueError) as exc:
                last = exc
            log.warning("caption request for %s failed (attempt %d): %s", id, attempt + 1, last)
        raise CaptionTransportError(f"caption request for {id!r} failed: {last}", retries=self.retries)


def make_provider(kind, text=None, cache=None, endpoint=None, prompt=DEFAULT_PROMPT,
                  timeout=30.0, retries=2, max_in_flight=2):
    if kind == "constant":
        return ConstantCaptionProvider(text)
    if kind == "cached":
        if cache is None:
            raise ArgumentError("cached caption provider needs a cache path")
        return CachedCaptionProvider(cache)
    if kind == "remote":
        if not endpoint:
            raise ArgumentError("remote caption provider needs an endpoint")
        return RemoteCaptionProvider(endpoint, prompt, timeout, retries, max_in_flight)
    raise ArgumentError(f"unknown caption provider kind {kind!r}")


def caption(provider, image, id):
    text = provider.caption(image, id)
    if not text:
        raise MissingCaptionError(f"provider returned an empty caption for {id!r}")
    return text


# ---------------------------------------------------------------- prepare


def _prepare_one(record, factor, quality, provider, out_dir, caption_source):
    hr = read_image(record.hr_path)
    clr = downsample_bicubic(hr, factor)
    blob = jpeg_encode(clr, quality)
    source = hr if caption_source == "hr" else jpeg_decode(blob)
    text = caption(provider, source, record.id)
    (out_dir / f"{record.id}.jpg").write_bytes(blob.data)
    encoded = text.encode("utf-8")
    (out_dir / f"{record.id}.txt").write_bytes(encoded)
    return PayloadRecord(
        id=record.id,
        clr_bytes=blob.byte_count,
        caption_bytes=len(encoded),
        hr_reference_bytes=os.path.getsize(record.hr_path),
        clr_raster_bytes=encode_lossless(clr, "TIFF").byte_count,
    )


def prepare(records, factor, quality, provider, out_dir, caption_source="hr", workers=1):
    """Downsample, compress and caption every record.

    Failures are isolated per record and reported in ``PrepareResult.failures``
    (id -> message); the rest of the batch still completes.
    """
    if caption_source not in ("hr", "clr"):
        raise ArgumentError(f"caption_source must be 'hr' or 'clr', got {caption_source!r}")
    result = PrepareResult()
    if not records:
        return result
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    def job(rec):
        try:
            return _prepare_one(rec, factor, quality, provider, out_dir, caption_source)
        except (TextRSIRError, OSError) as exc:
            return exc

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        outcomes = list(pool.map(job, records))
    for rec, out in zip(records, outcomes):
        if isinstance(out, Exception):
            result.failures[rec.id] = f"{type(out).__name__}: {out}"
        else:
            result.payloads.append(out)
    write_payloads(out_dir / PAYLOADS_FILE, result.payloads)
    if result.failures:
        log.warning("%d of %d records failed: %s", len(result.failures), len(records),
                    ", ".join(result.failures))
    return result


def write_payloads(path, payloads):
    with open(path, "w", encoding="utf-8") as fh:
        for p in payloads:
            fh.write(json.dumps(asdict(p)) + "\n")


def read_payloads(path):
    path = Path(path)
    if path.is_dir():
        path = path / PAYLOADS_FILE
    with open(path, encoding="utf-8") as fh:
        return [PayloadRecord(**json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------- budget


@dataclass
class BudgetRow:
    method: str
    total_bytes: int
    hr_total_bytes: int
    ratio: float = None


def payload_report(payloads, method):
    """Total downlink bytes for ``method`` and its ratio to the HR total."""
    if method == "HR":
        total = sum(p.hr_reference_bytes for p in payloads)
    elif method == "downsample":
        total = sum(p.clr_raster_bytes for p in payloads)
    elif method == "downsample_compress":
        total = sum(p.clr_bytes for p in payloads)
    elif method == "tgrsit":
        total = sum(p.clr_bytes + p.caption_bytes for p in payloads)
    else:
        raise ArgumentError(f"unknown downlink method {method!r}")
    hr_total = sum(p.hr_reference_bytes for p in payloads)
    ratio = total / hr_total if hr_total else None
    return BudgetRow(method, total, hr_total, ratio)


def budget_table(payloads):
    return [payload_report(payloads, m) for m in METHODS]


_FORMAT_LABEL = {"HR": "TIF", "downsample": "TIF", "downsample_compress": "JPG", "tgrsit": "JPG + TXT"}


def format_budget(rows):
    lines = [f"{'method':<22}{'format':<11}{'bytes':>14}{'ratio':>10}"]
    for r in rows:
        ratio = "-" if r.ratio is None else f"{100 * r.ratio:.2f}%"
        lines.append(f"{r.method:<22}{_FORMAT_LABEL[r.method]:<11}{r.total_bytes:>14}{ratio:>10}")
    return "\n".join(lines)
