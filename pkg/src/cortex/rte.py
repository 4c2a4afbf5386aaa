"""Offline extraction of compositional-reasoning sentences from a VLM.

Each image is sent on its own to a chat-style JSON endpoint together with a
fixed prompt; the reply is normalised into a list of sentences and written
to an RTE file (one JSON record per line). Responses are cached on disk by
``(image digest, prompt hash, model id)`` so reruns never hit the network.
"""
from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import re
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DegenerateOutputError, ExtractionError
from .toy_scene import ScenePair, describe_difference, perceive_scene, rasterize, render_pseudo_rte

log = logging.getLogger(__name__)

COMPOSITIONAL_PROMPT = (
    "Analyze the image thoroughly. For each distinct object in the scene, generate at least one "
    "sentence that describes that object in detail and includes its relationship to at least one "
    "other object. Each sentence should mention the object's color, shape, size, and relevant "
    "spatial relationships (such as distance, proximity, or grouping)."
)

GENERIC_PROMPT = "Analyze the image and list sentences that describe the scene."

_DIRECT_EXAMPLES = """\
1. there are people on the stairs now
2. there is a person walking now
3. the person is not there anymore
4. the person walking is no longer there
5. person sitting at table far left moved slightly
6. there is a group of people in between the two buildings
7. the people in the previous picture are gone
8. there is not a person near the red car
9. there are 2 people in the last one that were not in the first one
10. the white car is not there anymore
11. the grey car in the back is not there anymore
12. there white car by the truck is not there anymore
13. there is a car in the middle now
14. there is a black car behind the red car in the middle
15. there is a black car in the middle row missing that was next to a silver car
16. black car is parked in after image and still driving in before image
17. there is less tables
18. shadow on umbrella at bottom left has changed a little bit
19. the before picture has a lady in front of the blue awning
20. the after picture contains two people walking towards the left"""

_DIRECT_REQUIREMENTS = """\
1. Generate the caption describing the difference between the two images in ONE SINGLE SENTENCE ONLY.
2. DO NOT include any numbering, such as "1.", "2.", etc., or any bullet points.
3. DO NOT generate multiple sentences or paragraphs. The output MUST be one concise sentence.
4. If there are no changes, output must be "there are no differences" or "no change".
5. Recheck the output to confirm that it is ONLY ONE SENTENCE and follows the style of the EXAMPLES above."""

DIRECT_PAIR_PROMPT = f"EXAMPLES:\n{_DIRECT_EXAMPLES}\n\nREQUIREMENTS:\n{_DIRECT_REQUIREMENTS}"

PROMPTS = {
    "compositional": COMPOSITIONAL_PROMPT,
    "generic": GENERIC_PROMPT,
    "direct_pair": DIRECT_PAIR_PROMPT,
}

# observed per-dataset maxima of sentences per image
DATASET_CAPS = {"clevr-change": 15, "clevr-dc": 13, "spot-the-diff": 16}
DEFAULT_CAP = 15

API_KEY_ENV = "CORTEX_VLM_API_KEY"


@dataclass(frozen=True)
class RtePrompt:
    mode: str
    template: str

    @property
    def prompt_hash(self) -> str:
        return hashlib.sha256(self.template.encode("utf-8")).hexdigest()


def build_prompt(mode: str = "compositional") -> RtePrompt:
    try:
        return RtePrompt(mode, PROMPTS[mode])
    except KeyError:
        raise ValueError(f"unknown prompt mode {mode!r}; expected one of {sorted(PROMPTS)}") from None


# ---------------------------------------------------------------------------
# parsing

_MARKER = re.compile(r"^\s*(?:\(?\d+[.)]|[-*•])\s*")


def _strip_markers(line: str) -> str:
    prev = None
    line = line.strip()
    while prev != line:
        prev = line
        line = _MARKER.sub("", line, count=1).strip()
    return line


def parse_sentences(raw: str) -> list[str]:
    """Split a VLM reply into sentences.

    One sentence per line, enumeration markers ("1.", "2)", "-", "*", bullets)
    removed, fragments under three words dropped. Order is preserved and the
    function is idempotent on its own joined output.
    """
    out = []
    for line in raw.splitlines():
        s = _strip_markers(line)
        if len(s.split()) >= 3:
            out.append(s)
    return out


_SENTENCE_END = re.compile(r"[.!?]+(?=\s+\S)")


def is_single_sentence(text: str) -> bool:
    text = text.strip()
    return bool(text) and "\n" not in text and not _SENTENCE_END.search(text)


# ---------------------------------------------------------------------------
# records


@dataclass
class RteRecord:
    pair_id: str
    scene: str
    sentences: list[str]
    n_sentences: int
    source_model: str
    prompt_hash: str

    def validate(self, cap: int | None = None) -> "RteRecord":
        if self.scene not in ("before", "after"):
            raise ValueError(f"scene must be before/after, got {self.scene!r}")
        if self.n_sentences != len(self.sentences):
            raise ValueError("n_sentences does not match the sentence list")
        if self.n_sentences < 1 or (cap is not None and self.n_sentences > cap):
            raise ValueError(f"n_sentences={self.n_sentences} outside [1, {cap}]")
        for s in self.sentences:
            if len(s.split()) < 3:
                raise ValueError(f"sentence shorter than three words: {s!r}")
            if _strip_markers(s) != s.strip():
                raise ValueError(f"sentence carries a list marker: {s!r}")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RteRecord":
        return cls(**{k: d[k] for k in ("pair_id", "scene", "sentences", "n_sentences", "source_model", "prompt_hash")})


def write_records(records: Iterable[RteRecord], path: str | Path, cap: int | None = None, append: bool = True) -> None:
    with open(path, "a" if append else "w") as fh:
        for rec in records:
            fh.write(rec.validate(cap).to_json() + "\n")


def read_records(path: str | Path, cap: int | None = None) -> list[RteRecord]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path) as fh:
        return [RteRecord.from_dict(json.loads(line)).validate(cap) for line in fh if line.strip()]


def load_rte_index(path: str | Path, cap: int | None = None) -> dict[tuple[str, str], list[str]]:
    return {(r.pair_id, r.scene): r.sentences for r in read_records(path, cap)}


# ---------------------------------------------------------------------------
# transport


def encode_png(image: np.ndarray) -> bytes:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    from PIL import Image

    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def image_digest(image: np.ndarray) -> str:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h = hashlib.sha256(repr(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


@dataclass
class VlmRequest:
    images: list[bytes]
    prompt: str
    temperature: float = 0.0
    max_tokens: int = 512

    def to_payload(self, model: str) -> dict:
        content = [{"type": "text", "text": self.prompt}]
        for png in self.images:
            url = "data:image/png;base64," + base64.b64encode(png).decode("ascii")
            content.append({"type": "image_url", "image_url": {"url": url}})
        return {
            "model": model,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "messages": [{"role": "user", "content": content}],
        }


@dataclass
class VlmResponse:
    text: str
    latency: float
    model_id: str


def post_json(url: str, payload: dict, *, api_key: str | None = None, timeout: float = 60.0) -> dict:
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    req = urllib.request.Request(url, data=json.dumps(payload).encode(), headers=headers, method="POST")
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return json.loads(resp.read().decode("utf-8"))


class VlmClient:
    """Chat-completions style client with bounded retries.

    ``endpoint`` is a base URL; requests go to ``<endpoint>/v1/chat/completions``.
    The API key is read from ``CORTEX_VLM_API_KEY`` unless given.
    """

    def __init__(self, endpoint: str, model: str = "internvl2-8b", *, temperature: float = 0.0,
                 max_tokens: int = 512, retries: int = 3, backoff: float = 1.0, timeout: float = 60.0,
                 api_key: str | None = None):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self._lock = threading.Lock()
        self.calls = 0

    def _send(self, request: VlmRequest) -> str:
        body = post_json(f"{self.endpoint}/v1/chat/completions", request.to_payload(self.model),
                         api_key=self.api_key, timeout=self.timeout)
        return body["choices"][0]["message"]["content"]

    def complete(self, prompt: str, images: Sequence[bytes]) -> VlmResponse:
        request = VlmRequest(list(images), prompt, self.temperature, self.max_tokens)
        last_exc = None
        for attempt in range(self.retries):
            with self._lock:
                self.calls += 1
            t0 = time.perf_counter()
            try:
                text = self._send(request)
                return VlmResponse(text, time.perf_counter() - t0, self.model)
            except (urllib.error.URLError, OSError, KeyError, ValueError) as exc:
                last_exc = exc
                log.warning("VLM request failed (attempt %d/%d): %s", attempt + 1, self.retries, exc)
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff * 2**attempt)
        raise ExtractionError(f"VLM request failed after {self.retries} attempts: {last_exc}")


class ToySceneVlm(VlmClient):
    """In-process stand-in for a VLM that reads clean toy renders.

    Selected with the ``mock://`` endpoint. It perceives each image exactly
    and answers in the style the prompt asks for, so the full pipeline can
    run offline.
    """

    def __init__(self, model: str = "toy-scene-vlm", grid_size: int = 5, **kwargs):
        super().__init__("mock://", model, **kwargs)
        self.grid_size = grid_size

    def _send(self, request: VlmRequest) -> str:
        return toy_vlm_answer(request.prompt, [decode_png(b) for b in request.images], self.grid_size)


def toy_vlm_answer(prompt: str, images: Sequence[np.ndarray], grid_size: int = 5) -> str:
    scenes = [perceive_scene(img, grid_size) for img in images]
    if prompt == DIRECT_PAIR_PROMPT or len(scenes) == 2:
        return describe_difference(scenes[0], scenes[1])
    scene = scenes[0]
    if prompt == GENERIC_PROMPT:
        lines = [f"there is a {o.phrase} in the scene" for o in scene.objects]
    elif scene.objects:
        lines = render_pseudo_rte(scene)
    else:
        lines = []
    return "\n".join(f"{i}. {s}" for i, s in enumerate(lines, 1))


def make_client(endpoint: str, **kwargs) -> VlmClient:
    if endpoint.startswith("mock://"):
        return ToySceneVlm(**{k: v for k, v in kwargs.items() if k != "model"})
    return VlmClient(endpoint, **kwargs)


# ---------------------------------------------------------------------------
# cache


class ResponseCache:
    """Raw VLM replies keyed by image, prompt and model; on disk if ``directory`` is set."""

    def __init__(self, directory: str | Path | None = None):
        self.directory = Path(directory) if directory is not None else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
        self._mem: dict[str, str] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    @staticmethod
    def key(image_digests: Sequence[str], prompt_hash: str, model_id: str) -> str:
        return hashlib.sha256("|".join([*image_digests, prompt_hash, model_id]).encode()).hexdigest()

    def lock_for(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def get(self, key: str) -> str | None:
        if key in self._mem:
            return self._mem[key]
        if self.directory is not None:
            path = self.directory / f"{key}.json"
            if path.exists():
                text = json.loads(path.read_text())["text"]
                self._mem[key] = text
                return text
        return None

    def put(self, key: str, text: str, model_id: str) -> None:
        self._mem[key] = text
        if self.directory is not None:
            tmp = self.directory / f"{key}.json.tmp"
            tmp.write_text(json.dumps({"text": text, "model": model_id}))
            tmp.replace(self.directory / f"{key}.json")


def _cached_complete(client: VlmClient, prompt: RtePrompt, images: Sequence[np.ndarray],
                     cache: ResponseCache | None) -> str:
    if cache is None:
        return client.complete(prompt.template, [encode_png(i) for i in images]).text
    key = cache.key([image_digest(i) for i in images], prompt.prompt_hash, client.model)
    with cache.lock_for(key):
        hit = cache.get(key)
        if hit is not None:
            return hit
        text = client.complete(prompt.template, [encode_png(i) for i in images]).text
        cache.put(key, text, client.model)
        return text


# ---------------------------------------------------------------------------
# extraction


def extract_scene(image: np.ndarray, prompt: RtePrompt, client: VlmClient, *, pair_id: str = "",
                  scene: str = "before", cap: int = DEFAULT_CAP,
                  cache: ResponseCache | None = None) -> RteRecord:
    try:
        raw = _cached_complete(client, prompt, [image], cache)
    except ExtractionError as exc:
        raise ExtractionError(str(exc), pair_id) from exc
    sentences = parse_sentences(raw)[:cap]
    if not sentences:
        raise DegenerateOutputError("no usable sentences in VLM output", pair_id)
    return RteRecord(pair_id, scene, sentences, len(sentences), client.model, prompt.prompt_hash).validate(cap)


@dataclass
class ExtractionSummary:
    n_records: int = 0
    n_skipped: int = 0
    failures: list[dict] = field(default_factory=list)
    mean_sentences: float = 0.0
    max_sentences: int = 0
    network_calls: int = 0

    @property
    def ok(self) -> bool:
        return not self.failures


def run_extraction(dataset: Sequence[ScenePair], client: VlmClient, mode: str = "compositional", *,
                   out_path: str | Path, cap: int = DEFAULT_CAP, cache: ResponseCache | None = None,
                   resolution: int = 40, workers: int = 4) -> ExtractionSummary:
    """Extract sentences for both scenes of every pair and append them to ``out_path``.

    Records already present in ``out_path`` are skipped, so an interrupted run
    can be resumed. Failures are collected rather than raised.
    """
    if not dataset:
        raise ContractError("dataset is empty")
    prompt = build_prompt(mode)
    done = {(r.pair_id, r.scene) for r in read_records(out_path)}
    jobs = []
    for pair in dataset:
        for scene_name, spec in (("before", pair.before), ("after", pair.after)):
            if (pair.pair_id, scene_name) not in done:
                jobs.append((pair.pair_id, scene_name, spec))
    summary = ExtractionSummary(n_skipped=2 * len(dataset) - len(jobs))
    calls_before = client.calls

    def work(job):
        pair_id, scene_name, spec = job
        try:
            return extract_scene(rasterize(spec, resolution), prompt, client, pair_id=pair_id,
                                 scene=scene_name, cap=cap, cache=cache)
        except ExtractionError as exc:
            return exc

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(work, jobs))

    records = []
    for (pair_id, scene_name, _), res in zip(jobs, results):
        if isinstance(res, ExtractionError):
            summary.failures.append({"pair_id": pair_id, "scene": scene_name,
                                     "kind": type(res).__name__, "error": str(res)})
        else:
            records.append(res)
    write_records(records, out_path, cap)
    summary.n_records = len(records)
    counts = [r.n_sentences for r in read_records(out_path)]
    if counts:
        summary.mean_sentences = float(np.mean(counts))
        summary.max_sentences = int(max(counts))
    summary.network_calls = client.calls - calls_before
    return summary


@dataclass(frozen=True)
class DirectCaption:
    text: str
    protocol_violation: bool


def direct_pair_caption(before: np.ndarray, after: np.ndarray, client: VlmClient,
                        cache: ResponseCache | None = None) -> DirectCaption:
    """Ask the VLM for a one-sentence change caption given both images at once."""
    raw = _cached_complete(client, build_prompt("direct_pair"), [before, after], cache)
    text = raw.strip()
    return DirectCaption(text, not is_single_sentence(text))


# ---------------------------------------------------------------------------
# offline mock server


class MockVlmServer:
    """Threaded local HTTP server speaking the chat and embedding wire formats.

    ``responder(prompt, images)`` produces chat replies (default: the toy
    scene reader); ``embedder(texts)`` produces embedding vectors for
    ``POST /embed``. ``requests`` counts every request served.
    """

    def __init__(self, responder: Callable[[str, list[np.ndarray]], str] | None = None,
                 embedder: Callable[[list[str]], list[list[float]]] | None = None,
                 fail_first: int = 0):
        self.responder = responder or (lambda prompt, images: toy_vlm_answer(prompt, images))
        self.embedder = embedder
        self.fail_first = fail_first
        self.requests = 0
        self.payloads: list[dict] = []
        self._count_lock = threading.Lock()
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def _handler(self):
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # keep test output quiet
                pass

            def _reply(self, code, body):
                data = json.dumps(body).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_POST(self):
                payload = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                with outer._count_lock:
                    outer.requests += 1
                    outer.payloads.append(payload)
                    n = outer.requests
                if n <= outer.fail_first:
                    return self._reply(503, {"error": "unavailable"})
                if self.path.endswith("/embed"):
                    if outer.embedder is None:
                        return self._reply(404, {"error": "no embedder"})
                    return self._reply(200, {"vectors": outer.embedder(payload["texts"])})
                content = payload["messages"][0]["content"]
                prompt = next(p["text"] for p in content if p["type"] == "text")
                images = [decode_png(base64.b64decode(p["image_url"]["url"].split(",", 1)[1]))
                          for p in content if p["type"] == "image_url"]
                text = outer.responder(prompt, images)
                return self._reply(200, {"id": f"mock-{n}", "model": payload.get("model"),
                                         "choices": [{"message": {"role": "assistant", "content": text}}]})

        return Handler

    def __enter__(self) -> "MockVlmServer":
        self._server = ThreadingHTTPServer(("127.0.0.1", 0), self._handler())
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._server.shutdown()
        self._server.server_close()
