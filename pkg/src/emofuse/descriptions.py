"""Stage one of the pipeline: ask a hosted vision-language service to
describe how the subject feels.

The subject's bounding box is burned into the pixels as a red outline,
the prompt is instantiated byte-exactly from the dataset's class names,
and the (image, box, prompt) triple keys an append-only JSONL cache so
reruns never repeat a network call.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import random
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import requests

from .metrics import Box

log = logging.getLogger(__name__)

EMOTIC_CLASSES = (
    "Affection", "Anger", "Annoyance", "Anticipation", "Aversion", "Confidence",
    "Disapproval", "Disconnection", "Disquietment", "Doubt/Confusion", "Embarrassment",
    "Engagement", "Esteem", "Excitement", "Fatigue", "Fear", "Happiness", "Pain",
    "Peace", "Pleasure", "Sadness", "Sensitivity", "Suffering", "Surprise",
    "Sympathy", "Yearning",
)

CAERS_CLASSES = ("Anger", "Disgust", "Fear", "Happiness", "Sadness", "Surprise", "Neutral")


@dataclass(frozen=True)
class PromptSpec:
    class_names: tuple[str, ...]
    has_bbox: bool

    def __post_init__(self):
        if not self.class_names:
            raise ValueError("prompt needs at least one class name")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("duplicate class names in prompt")


def build_prompt(spec: PromptSpec) -> str:
    """The instruction sent alongside the image, byte-stable.

    With a box the description targets "the person in the red box";
    without one it falls back to the person in the overall scene.
    """
    subject = "the person in the red box" if spec.has_bbox else "the person"
    names = ", ".join(spec.class_names)
    return (
        "USER: <image>\n"
        f"Given the following list of emotions: {names}, "
        "please explain in detail which emotions are more suitable "
        f"for describing how {subject} feels based on the image context."
    )


def render_bbox(image: np.ndarray, box: Box, stroke: int = 3) -> np.ndarray:
    """Copy of ``image`` with a red outline burned in along ``box``.

    The stroke runs inward from the box edges; the interior stays
    untouched. Boxes poking outside the image are clamped (and logged).
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    h, w = image.shape[:2]
    x1, y1 = int(round(box.x1)), int(round(box.y1))
    x2, y2 = int(round(box.x2)), int(round(box.y2))
    cx1, cy1 = max(0, x1), max(0, y1)
    cx2, cy2 = min(w, x2), min(h, y2)
    if (cx1, cy1, cx2, cy2) != (x1, y1, x2, y2):
        log.warning("box (%s,%s,%s,%s) clamped to image %sx%s", x1, y1, x2, y2, w, h)
    if cx2 - cx1 <= 0 or cy2 - cy1 <= 0:
        raise ValueError(f"box {box.as_tuple()} lies outside the {w}x{h} image")
    out = np.array(image, dtype=np.float64, copy=True)
    red = np.array([1.0, 0.0, 0.0])
    s = stroke
    out[cy1 : min(cy1 + s, cy2), cx1:cx2] = red
    out[max(cy2 - s, cy1) : cy2, cx1:cx2] = red
    out[cy1:cy2, cx1 : min(cx1 + s, cx2)] = red
    out[cy1:cy2, max(cx2 - s, cx1) : cx2] = red
    return out


def image_digest(image: np.ndarray) -> str:
    arr = np.ascontiguousarray(image, dtype=np.float64)
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def encode_image_png_base64(image: np.ndarray) -> str:
    """Lossless PNG bytes of a float [0,1] RGB image, base64-encoded."""
    from PIL import Image

    pixels = np.clip(np.asarray(image) * 255.0, 0, 255).round().astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(pixels, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


@dataclass
class DescriptionRecord:
    image_digest: str
    box: tuple[float, float, float, float] | None
    prompt_digest: str
    description: str
    model: str
    timestamp: float

    @property
    def key(self) -> str:
        box_part = ",".join(map(str, self.box)) if self.box else "-"
        return f"{self.image_digest}|{box_part}|{self.prompt_digest}"

    def to_json(self) -> str:
        return json.dumps(vars(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "DescriptionRecord":
        data = json.loads(line)
        if data.get("box") is not None:
            data["box"] = tuple(data["box"])
        return cls(**data)


def cache_key(digest: str, box: Box | None, pdigest: str) -> str:
    box_part = ",".join(map(str, box.as_tuple())) if box else "-"
    return f"{digest}|{box_part}|{pdigest}"


class DescriptionCache:
    """Append-only JSONL store keyed by (image digest, box, prompt digest)."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._records: dict[str, DescriptionRecord] = {}
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    record = DescriptionRecord.from_json(line)
                    self._records[record.key] = record

    def get(self, key: str) -> DescriptionRecord | None:
        return self._records.get(key)

    def put(self, record: DescriptionRecord) -> None:
        self._records[record.key] = record
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(record.to_json() + "\n")

    def __len__(self) -> int:
        return len(self._records)


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 3
    base_delay: float = 0.5
    max_delay: float = 8.0


class DescriptionError(RuntimeError):
    """The captioning service failed after exhausting retries."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


_RETRYABLE = {429, 500, 502, 503, 504}


class DescriptionClient:
    """Talks to an OpenAI-compatible chat-completion endpoint."""

    def __init__(
        self,
        endpoint: str,
        model: str = "llava-1.5",
        api_key: str | None = None,
        retry: RetryPolicy = RetryPolicy(),
        cache: DescriptionCache | None = None,
        session: requests.Session | None = None,
        sleep=time.sleep,
        jitter_seed: int = 0,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.retry = retry
        self.cache = cache
        self.session = session or requests.Session()
        self.sleep = sleep
        self._jitter = random.Random(jitter_seed)

    def describe_image(self, image: np.ndarray, prompt: str, box: Box | None = None) -> DescriptionRecord:
        """Description for one image, drawing the box first if given.

        Served from the cache when the same (image, box, prompt) triple
        was answered before.
        """
        return self._describe(image, prompt, box, model_tag=self.model)

    def describe_video(
        self, frames: Sequence[np.ndarray], prompt: str, box: Box | None = None
    ) -> DescriptionRecord:
        """Description for a clip via its temporally middle frame.

        A generic endpoint cannot average frame tokens inside the
        language model, so the middle frame stands in for the clip; the
        record's model field flags the substitution.
        """
        if not frames:
            raise ValueError("describe_video needs at least one frame")
        middle = frames[len(frames) // 2]
        return self._describe(middle, prompt, box, model_tag=f"{self.model} (middle-frame substitute)")

    def _describe(self, image: np.ndarray, prompt: str, box: Box | None, model_tag: str) -> DescriptionRecord:
        digest = image_digest(image)
        key = cache_key(digest, box, prompt_digest(prompt))
        if self.cache is not None:
            hit = self.cache.get(key)
            if hit is not None:
                return hit
        rendered = render_bbox(image, box) if box is not None else image
        text = self._post(rendered, prompt)
        record = DescriptionRecord(
            image_digest=digest,
            box=box.as_tuple() if box else None,
            prompt_digest=prompt_digest(prompt),
            description=text,
            model=model_tag,
            timestamp=time.time(),
        )
        if self.cache is not None:
            self.cache.put(record)
        return record

    def _post(self, image: np.ndarray, prompt: str) -> str:
        payload = {
            "model": self.model,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        {
                            "type": "image_url",
                            "image_url": {"url": "data:image/png;base64," + encode_image_png_base64(image)},
                        },
                        {"type": "text", "text": prompt},
                    ],
                }
            ],
        }
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last_error: str = "no attempt made"
        last_status: int | None = None
        for attempt in range(self.retry.max_retries + 1):
            if attempt:
                delay = min(self.retry.base_delay * 2 ** (attempt - 1), self.retry.max_delay)
                delay *= 0.5 + self._jitter.random()
                log.warning("retrying description request (attempt %d): %s", attempt + 1, last_error)
                self.sleep(delay)
            try:
                response = self.session.post(self.endpoint, json=payload, headers=headers, timeout=60)
            except requests.RequestException as exc:
                last_error, last_status = str(exc), None
                continue
            if response.status_code in _RETRYABLE:
                last_error, last_status = f"HTTP {response.status_code}", response.status_code
                continue
            if response.status_code != 200:
                raise DescriptionError(
                    f"description request failed: HTTP {response.status_code}", response.status_code
                )
            text = self._parse(response.json())
            if not text:
                raise DescriptionError("endpoint returned an empty description")
            return text
        raise DescriptionError(
            f"description request failed after {self.retry.max_retries} retries: {last_error}",
            last_status,
        )

    @staticmethod
    def _parse(data: dict) -> str:
        try:
            return data["choices"][0]["message"]["content"].strip()
        except (KeyError, IndexError, TypeError, AttributeError):
            raise DescriptionError(f"malformed response: {json.dumps(data)[:200]}")
