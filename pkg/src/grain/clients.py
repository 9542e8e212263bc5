"""Clients the annotation pipeline talks to.

Two roles: a generation client that answers prompts about an image, and a
detection client that proposes pixel boxes for a text query.  Mock
implementations are table-driven and fully deterministic so the pipeline can
be exercised offline; the HTTP variants are thin stubs over a JSON endpoint.
"""

from __future__ import annotations

import json
import urllib.error
import urllib.request
from typing import TYPE_CHECKING, Mapping, Protocol, Sequence, runtime_checkable

from .errors import ClientFailure

if TYPE_CHECKING:
    from .data import ImageSample

# Prompt kinds used to key mock replies.
KIND_SUBJECT = "subject"
KIND_FEATURES = "features"
KIND_CAPTION = "caption"

# (x0, y0, x1, y1, score) in source-image pixels.
PixelDetection = tuple[float, float, float, float, float]


@runtime_checkable
class GenerationClient(Protocol):
    identifier: str

    def generate(self, sample: "ImageSample", prompt: str, kind: str) -> str: ...


@runtime_checkable
class DetectionClient(Protocol):
    identifier: str

    def detect(self, sample: "ImageSample", query: str) -> list[PixelDetection]: ...


class MockGenerationClient:
    """Replays canned replies keyed by (image_id, prompt kind)."""

    def __init__(self, replies: Mapping[tuple[str, str], str], identifier: str = "mock-gen"):
        self.replies = dict(replies)
        self.identifier = identifier
        self.calls = 0

    def generate(self, sample, prompt: str, kind: str) -> str:
        self.calls += 1
        key = (sample.image_id, kind)
        if key not in self.replies:
            raise ClientFailure(f"no canned {kind} reply for image {sample.image_id!r}")
        return self.replies[key]


class MockDetectionClient:
    """Replays canned detections keyed by (image_id, query); missing keys
    mean "nothing found"."""

    def __init__(
        self,
        detections: Mapping[tuple[str, str], Sequence[PixelDetection]],
        identifier: str = "mock-det",
    ):
        self.detections = {k: [tuple(d) for d in v] for k, v in detections.items()}
        self.identifier = identifier
        self.calls = 0

    def detect(self, sample, query: str) -> list[PixelDetection]:
        self.calls += 1
        return list(self.detections.get((sample.image_id, query), []))


def _post_json(url: str, payload: dict, timeout: float) -> dict:
    body = json.dumps(payload).encode("utf-8")
    req = urllib.request.Request(url, data=body, headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))
    except (urllib.error.URLError, OSError, ValueError) as exc:
        raise ClientFailure(f"request to {url} failed: {exc}") from exc


class HttpGenerationClient:
    """POSTs {image_id, prompt} and expects {"text": ...} back."""

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url
        self.timeout = timeout
        self.identifier = f"http-gen:{url}"

    def generate(self, sample, prompt: str, kind: str) -> str:
        reply = _post_json(
            self.url, {"image_id": sample.image_id, "prompt": prompt, "kind": kind}, self.timeout
        )
        if "text" not in reply:
            raise ClientFailure(f"malformed reply from {self.url}: missing 'text'")
        return str(reply["text"])


class HttpDetectionClient:
    """POSTs {image_id, query} and expects {"detections": [[x0,y0,x1,y1,score],...]}."""

    def __init__(self, url: str, timeout: float = 30.0):
        self.url = url
        self.timeout = timeout
        self.identifier = f"http-det:{url}"

    def detect(self, sample, query: str) -> list[PixelDetection]:
        reply = _post_json(self.url, {"image_id": sample.image_id, "query": query}, self.timeout)
        dets = reply.get("detections")
        if not isinstance(dets, list):
            raise ClientFailure(f"malformed reply from {self.url}: missing 'detections'")
        out: list[PixelDetection] = []
        for d in dets:
            if len(d) != 5:
                raise ClientFailure(f"malformed detection from {self.url}: {d!r}")
            out.append(tuple(float(v) for v in d))
        return out
