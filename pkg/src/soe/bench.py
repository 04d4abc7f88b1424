"""Small-object benchmark construction and evaluation.

Building a split:

1. keep annotations whose object is not occluded and whose larger side is
   strictly between 1/8 and 1/6 of the matching image side;
2. ask a VQA client for the object's primary color;
3. emit a label prompt and a color+label prompt per object.

Evaluation scores a square crop around each edit with a CLIP-style cosine
score and compares crop features of edited and source images with FID.
VQA and embedding models are reached through small client protocols; the
deterministic stubs below keep runs hermetic.
"""

from __future__ import annotations

import base64
import csv
import io
import json
import math
import threading
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from . import numcore as nc
from .errors import (AttributionError, ConfigError, DegenerateInputError, DimensionError,
                     GeometryError, ServiceError, SOEError, StorageError, UsageError)
from .guidance import GuidanceConfig, guided_sample, unguided_sample
from .imageio import read_ppm
from .latentdiff import DenoiserModel, NoiseSchedule, image_to_latent, latent_to_image
from .masks import RectMask
from .text import make_condition, token_vector, tokenize

COLOR_QUESTION = "What is the primary color of the object in this area?"
FID_RIDGE = 1e-6
REPORT_HEADER = ["split", "prompt_kind", "method", "clip_score", "fid", "n"]


# --- records --------------------------------------------------------------


@dataclass(frozen=True)
class AnnotationRecord:
    image_id: str
    img_w: int
    img_h: int
    bbox: RectMask
    category: str
    occluded: bool = False
    image: str = ""  # path of the image file, relative to the annotation file

    def __post_init__(self):
        if (self.bbox.img_w, self.bbox.img_h) != (self.img_w, self.img_h):
            raise DimensionError(f"{self.image_id}: bbox image size disagrees with record")

    @property
    def side_fraction(self) -> float:
        return max(self.bbox.w / self.img_w, self.bbox.h / self.img_h)


def read_annotations(path) -> list[AnnotationRecord]:
    """Parse COCO-style JSON lines.

    Each line holds ``image_id``, ``width``, ``height``, ``bbox`` as
    ``[x, y, w, h]`` with a top-left origin, ``category`` and optionally
    ``occluded`` (default false) and ``file_name`` (default ``image_id``).
    """
    out = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise StorageError(f"cannot read annotations {path}: {exc}") from exc
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            x, y, w, h = d["bbox"]
            W, H = int(d["width"]), int(d["height"])
            out.append(AnnotationRecord(
                image_id=str(d["image_id"]), img_w=W, img_h=H,
                bbox=RectMask.from_xywh(x, y, w, h, W, H), category=str(d["category"]),
                occluded=bool(d.get("occluded", False)),
                image=str(d.get("file_name", d["image_id"]))))
        except (KeyError, TypeError, ValueError) as exc:
            raise UsageError(f"{path}:{n}: bad annotation ({exc})") from exc
    return out


def filter_candidates(records: Iterable[AnnotationRecord]) -> list[AnnotationRecord]:
    """Unoccluded records whose larger side fraction lies strictly in (1/8, 1/6)."""
    kept = []
    for r in records:
        w, h = r.bbox.w, r.bbox.h
        # cross-multiplied so the bounds are compared exactly
        above = 8 * w > r.img_w or 8 * h > r.img_h
        below = 6 * w < r.img_w and 6 * h < r.img_h
        if not r.occluded and above and below:
            kept.append(r)
    return kept


# --- VQA ------------------------------------------------------------------


class VQAClient(Protocol):
    def answer(self, image: np.ndarray, question: str) -> str: ...


# hue bins in degrees, upper bound exclusive
_HUES = ((15, "red"), (40, "orange"), (70, "yellow"), (170, "green"), (260, "blue"),
         (330, "purple"), (361, "red"))


def _hsv(image: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r, g, b = (np.asarray(image, dtype=np.float64).reshape(3, -1))
    v = np.maximum(np.maximum(r, g), b)
    c = v - np.minimum(np.minimum(r, g), b)
    s = np.where(v > 0, c / np.where(v > 0, v, 1), 0.0)
    safe = np.where(c > 0, c, 1)
    h = np.where(v == r, (g - b) / safe % 6, np.where(v == g, (b - r) / safe + 2, (r - g) / safe + 4))
    return 60.0 * np.where(c > 0, h, 0.0), s, v


def quantized_colors(image: np.ndarray) -> list[str]:
    """A color word per pixel: achromatic by value, otherwise by hue bin."""
    h, s, v = _hsv(image)
    names = []
    for hi, si, vi in zip(h, s, v):
        if vi < 0.2:
            names.append("black")
        elif si < 0.25:
            names.append("white" if vi > 0.75 else "gray")
        else:
            names.append(next(name for bound, name in _HUES if hi < bound))
    return names


class StubVQA:
    """Answers the color question with the modal quantized color of the crop."""

    def answer(self, image: np.ndarray, question: str) -> str:
        if question != COLOR_QUESTION:
            return ""
        names = quantized_colors(image)
        counts: dict[str, int] = {}
        for n in names:
            counts[n] = counts.get(n, 0) + 1
        # ties go to the color seen first
        return max(counts, key=lambda k: (counts[k], -names.index(k)))


def _ppm_bytes(image: np.ndarray) -> bytes:
    img = np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    _, h, w = img.shape
    return b"P6\n%d %d\n255\n" % (w, h) + img.transpose(1, 2, 0).tobytes()


def _post_json(url: str, payload: dict, timeout: float) -> dict:
    req = urllib.request.Request(url, json.dumps(payload).encode("utf-8"),
                                 {"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))
    except (urllib.error.URLError, OSError, ValueError) as exc:
        raise ServiceError(f"{url}: {exc}") from exc


class HTTPVQA:
    """POSTs ``{"image": base64 PPM, "question": ...}`` and reads ``{"answer": ...}``."""

    def __init__(self, url: str, timeout: float = 30.0):
        self.url, self.timeout = url, timeout

    def answer(self, image: np.ndarray, question: str) -> str:
        reply = _post_json(self.url, {"image": base64.b64encode(_ppm_bytes(image)).decode("ascii"),
                                      "question": question}, self.timeout)
        return str(reply.get("answer", ""))


def query_color(crop: np.ndarray, client: VQAClient) -> str:
    crop = np.asarray(crop, dtype=np.float64)
    if crop.size == 0:
        raise UsageError("empty crop")
    try:
        reply = client.answer(crop, COLOR_QUESTION)
    except SOEError:
        raise
    except Exception as exc:
        raise ServiceError(f"VQA client failed: {exc}") from exc
    color = (reply or "").strip().lower()
    if not color:
        raise AttributionError("VQA client returned an empty answer")
    return color


# --- prompts and crops ----------------------------------------------------


def build_prompts(label: str, color: str) -> tuple[str, str]:
    label = label.strip()
    if not label:
        raise UsageError("label must be non-empty")
    return f"a {label}", f"a {color.strip()} {label}"


def _span(center: float, side: int, limit: int) -> tuple[int, int]:
    lo = int(math.floor(center - side / 2 + 0.5))
    lo = min(max(lo, 0), limit - side)
    return lo, lo + side


def eval_crop_box(mask: RectMask) -> tuple[int, int, int, int]:
    """``(x0, y0, x1, y1)`` of the square of side ``2 * max(w, h)`` around the mask."""
    side = int(round(2 * max(mask.w, mask.h)))
    sx, sy = min(side, mask.img_w), min(side, mask.img_h)
    x0, x1 = _span(mask.cx, sx, mask.img_w)
    y0, y1 = _span(mask.cy, sy, mask.img_h)
    return x0, y0, x1, y1


def crop_eval_region(image: np.ndarray, mask: RectMask) -> np.ndarray:
    image = np.asarray(image)
    if image.shape[1:] != (mask.img_h, mask.img_w):
        raise DimensionError(f"image {image.shape[1:]} does not match mask image size")
    x0, y0, x1, y1 = eval_crop_box(mask)
    return image[:, y0:y1, x0:x1].copy()


def mask_crop(image: np.ndarray, mask: RectMask) -> np.ndarray:
    """The pixels under the mask rectangle (outer integer bounds)."""
    x0, x1 = int(math.floor(mask.x0)), int(math.ceil(mask.x1))
    y0, y1 = int(math.floor(mask.y0)), int(math.ceil(mask.y1))
    return np.asarray(image)[:, y0:y1, x0:x1]


# --- embeddings and scores ------------------------------------------------


class Embedder(Protocol):
    def embed_image(self, image: np.ndarray) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


def thumbnail(image: np.ndarray, size: int = 8) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return np.stack([nc.bilinear_resize(ch, size, size) for ch in image])


class StubEmbedder:
    """Fixed random projections of an 8x8 thumbnail and of summed word vectors."""

    def __init__(self, dim: int = 32, seed: int = 0, thumb: int = 8):
        rng = np.random.default_rng(seed)
        self.dim, self.thumb = dim, thumb
        self.image_proj = rng.standard_normal((dim, 3 * thumb * thumb))
        self.text_proj = rng.standard_normal((dim, dim))

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        v = self.image_proj @ (thumbnail(image, self.thumb).ravel() - 0.5)
        return v / max(np.linalg.norm(v), 1e-12)

    def embed_text(self, text: str) -> np.ndarray:
        words = tokenize(text) or [""]
        v = self.text_proj @ np.sum([token_vector(w, self.dim) for w in words], axis=0)
        return v / max(np.linalg.norm(v), 1e-12)


class HTTPEmbedder:
    """POSTs ``{"image": base64 PPM}`` or ``{"text": ...}``; reads ``{"embedding": [...]}``."""

    def __init__(self, url: str, timeout: float = 30.0):
        self.url, self.timeout = url, timeout

    def _vector(self, payload: dict) -> np.ndarray:
        reply = _post_json(self.url, payload, self.timeout)
        try:
            return np.asarray(reply["embedding"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ServiceError(f"{self.url}: malformed embedding reply") from exc

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        return self._vector({"image": base64.b64encode(_ppm_bytes(image)).decode("ascii")})

    def embed_text(self, text: str) -> np.ndarray:
        return self._vector({"text": text})


class Serialized:
    """Wraps a client so that calls from worker threads run one at a time."""

    def __init__(self, client):
        self._client = client
        self._lock = threading.Lock()

    def __getattr__(self, name):
        attr = getattr(self._client, name)
        if not callable(attr):
            return attr

        def call(*args, **kwargs):
            with self._lock:
                return attr(*args, **kwargs)

        return call


def cosine_score(e_img, e_txt) -> float:
    """``100 * max(0, cos)`` of two embeddings."""
    a, b = np.asarray(e_img, dtype=np.float64).ravel(), np.asarray(e_txt, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ConfigError(f"embedding widths differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("zero-length embedding")
    return float(100.0 * min(1.0, max(0.0, float(a @ b) / (na * nb))))


def clip_score(crop: np.ndarray, prompt: str, embedder: Embedder) -> float:
    try:
        e_img, e_txt = embedder.embed_image(crop), embedder.embed_text(prompt)
    except SOEError:
        raise
    except Exception as exc:
        raise ServiceError(f"embedder failed: {exc}") from exc
    return cosine_score(e_img, e_txt)


def fid_score(features_a, features_b) -> float:
    """Fréchet distance between Gaussian fits of two feature sets (rows are samples).

    Covariances are unbiased with a small ridge. The cross term uses the
    symmetric product ``sqrt(S1) S2 sqrt(S1)``, whose square root has the
    same trace as ``(S1 S2)^(1/2)``.
    """
    a, b = np.asarray(features_a, dtype=np.float64), np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"feature shapes {a.shape} and {b.shape} are incompatible")
    d = a.shape[1]
    if min(len(a), len(b)) < d + 1:
        raise DegenerateInputError(f"need at least d+1={d + 1} samples per set")
    covs = []
    for x in (a, b):
        cov = np.cov(x, rowvar=False, ddof=1).reshape(d, d) + FID_RIDGE * np.eye(d)
        w = np.linalg.eigvalsh(cov)
        if w.min() <= 1e-12 * max(w.max(), 1.0):
            raise DegenerateInputError("covariance is rank deficient")
        covs.append(cov)
    s1, s2 = covs
    r1 = nc.sym_psd_sqrt(nc.SymMatrix.from_dense((s1 + s1.T) / 2)).to_dense()
    inner = r1 @ s2 @ r1
    cross = nc.sym_psd_sqrt(nc.SymMatrix.from_dense((inner + inner.T) / 2)).to_dense()
    diff = a.mean(axis=0) - b.mean(axis=0)
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def crop_features(crop: np.ndarray) -> np.ndarray:
    """Per-channel mean and standard deviation: a 6-d stand-in for Inception features."""
    flat = np.asarray(crop, dtype=np.float64).reshape(3, -1)
    return np.concatenate([flat.mean(axis=1), flat.std(axis=1)])


# --- manifests ------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkItem:
    item_id: str
    image: str
    mask: RectMask
    label: str
    color: str
    prompt_label: str
    prompt_color: str

    def __post_init__(self):
        if not self.prompt_label or not self.prompt_color:
            raise UsageError(f"{self.item_id}: prompts must be non-empty")
        if not filter_candidates([AnnotationRecord("", self.mask.img_w, self.mask.img_h,
                                                   self.mask, self.label)]):
            raise GeometryError(f"{self.item_id}: mask violates the small-object size rule")

    def to_json(self) -> str:
        d = {"item_id": self.item_id, "image": self.image, "mask": self.mask.to_dict(),
             "label": self.label, "color": self.color, "prompt_label": self.prompt_label,
             "prompt_color": self.prompt_color}
        return json.dumps(d, ensure_ascii=False, separators=(", ", ": "))

    @classmethod
    def from_json(cls, line: str) -> BenchmarkItem:
        d = json.loads(line)
        return cls(d["item_id"], d["image"], RectMask.from_dict(d["mask"]), d["label"],
                   d["color"], d["prompt_label"], d["prompt_color"])


@dataclass
class Manifest:
    split: str
    items: list[BenchmarkItem] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for item in self.items:
            if item.item_id in seen:
                raise UsageError(f"duplicate item id {item.item_id!r}")
            seen.add(item.item_id)

    def __len__(self) -> int:
        return len(self.items)

    def write(self, path) -> None:
        text = "".join(item.to_json() + "\n" for item in self.items)
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        except OSError as exc:
            raise StorageError(f"cannot write manifest {path}: {exc}") from exc

    @classmethod
    def read(cls, path, split: str | None = None) -> Manifest:
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise StorageError(f"cannot read manifest {path}: {exc}") from exc
        try:
            items = [BenchmarkItem.from_json(s) for s in lines if s.strip()]
        except (KeyError, ValueError, TypeError) as exc:
            raise UsageError(f"{path}: bad manifest line ({exc})") from exc
        return cls(split or Path(path).stem, items, {"source": str(path)})


def _item_id(r: AnnotationRecord) -> str:
    b = r.bbox
    return f"{r.image_id}:{b.x0:g},{b.y0:g},{b.w:g},{b.h:g}"


def build_manifest(records: Sequence[AnnotationRecord], client: VQAClient, split_name: str,
                   load_image: Callable[[AnnotationRecord], np.ndarray],
                   workers: int = 1) -> Manifest:
    """Filter, color-query and prompt the records; items are ordered by (image_id, bbox).

    With ``workers > 1`` the color queries fan out over threads and the
    client is wrapped in :class:`Serialized`.
    """
    kept = sorted(filter_candidates(records),
                  key=lambda r: (r.image_id, r.bbox.x0, r.bbox.y0, r.bbox.w, r.bbox.h))

    def color_of(r: AnnotationRecord, vqa) -> str:
        try:
            return query_color(mask_crop(load_image(r), r.bbox), vqa)
        except SOEError as exc:
            raise type(exc)(f"{_item_id(r)}: {exc}") from exc

    if workers > 1:
        vqa = Serialized(client)
        with ThreadPoolExecutor(workers) as pool:
            colors = list(pool.map(lambda r: color_of(r, vqa), kept))
    else:
        colors = [color_of(r, client) for r in kept]

    items = []
    for r, color in zip(kept, colors):
        p_label, p_color = build_prompts(r.category, color)
        items.append(BenchmarkItem(_item_id(r), r.image, r.bbox, r.category, color,
                                   p_label, p_color))
    prov = {"records": len(records), "kept": len(kept), "side_fraction": "(1/8, 1/6)",
            "occluded": "excluded"}
    return Manifest(split_name, items, prov)


# --- reports --------------------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    split: str
    prompt_kind: str
    method: str
    clip_score_mean: float
    fid: float | None
    n_items: int

    def __post_init__(self):
        if self.n_items and not 0 <= self.clip_score_mean <= 100:
            raise DimensionError("clip score mean outside [0, 100]")
        if self.fid is not None and self.fid < 0:
            raise DimensionError("negative FID")

    def row(self) -> list[str]:
        clip = f"{self.clip_score_mean:.6f}" if self.n_items else ""
        fid = f"{self.fid:.6f}" if self.fid is not None else ""
        return [self.split, self.prompt_kind, self.method, clip, fid, str(self.n_items)]


def summarize(split: str, prompt_kind: str, method: str, scores: Sequence[float],
              feats_out: Sequence[np.ndarray], feats_ref: Sequence[np.ndarray]) -> MetricReport:
    """Mean score plus FID, which is left empty when there are too few items for it."""
    mean = float(np.mean(scores)) if len(scores) else 0.0
    fid = None
    if len(feats_out) and len(feats_out) > len(feats_out[0]):
        try:
            fid = fid_score(np.stack(feats_out), np.stack(feats_ref))
        except DegenerateInputError:
            fid = None
    return MetricReport(split, prompt_kind, method, mean, fid, len(scores))


def write_report(reports: Sequence[MetricReport], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in reports:
        w.writerow(r.row())
    text = buf.getvalue()
    if path is not None:
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        except OSError as exc:
            raise StorageError(f"cannot write report {path}: {exc}") from exc
    return text


# --- evaluation -----------------------------------------------------------

PROMPT_KINDS = ("label", "color")
METHODS = ("baseline", "guided")


def composite(source: np.ndarray, generated: np.ndarray, mask: RectMask) -> np.ndarray:
    """Generated pixels inside the mask rectangle, source pixels elsewhere."""
    out = np.array(source, dtype=np.float64)
    x0, x1 = int(math.floor(mask.x0)), int(math.ceil(mask.x1))
    y0, y1 = int(math.floor(mask.y0)), int(math.ceil(mask.y1))
    out[:, y0:y1, x0:x1] = generated[:, y0:y1, x0:x1]
    return out


def edit_pair(model: DenoiserModel, sched: NoiseSchedule, image: np.ndarray, mask: RectMask,
              prompt: str, label: str, cfg: GuidanceConfig, seed: int,
              trace=None) -> tuple[np.ndarray, np.ndarray]:
    """Baseline and guided edits of one image from the same initial noise."""
    z = image_to_latent(image)
    c = make_condition(prompt, label, model.config.token_dim)
    base = unguided_sample(model, sched, z, mask, c, seed)
    guided = guided_sample(model, sched, z, mask, c, cfg, seed, trace)
    return (composite(image, latent_to_image(base), mask),
            composite(image, latent_to_image(guided), mask))


def evaluate_manifest(manifest: Manifest, model: DenoiserModel, sched: NoiseSchedule,
                      cfg: GuidanceConfig, embedder: Embedder, seed: int,
                      image_root=".") -> list[MetricReport]:
    """Four report rows: both prompt kinds, each for the baseline and the guided edit.

    Item ``k`` samples with seed ``seed + k`` and draws its mask scale from
    ``cfg.seed + k``.
    """
    scores = {(p, m): [] for p in PROMPT_KINDS for m in METHODS}
    feats = {(p, m): [] for p in PROMPT_KINDS for m in METHODS}
    refs = []
    for k, item in enumerate(manifest.items):
        image = read_ppm(Path(image_root) / item.image)
        if image.shape[1:] != (item.mask.img_h, item.mask.img_w):
            raise DimensionError(f"{item.item_id}: image size disagrees with its mask")
        refs.append(crop_features(crop_eval_region(image, item.mask)))
        item_cfg = GuidanceConfig(**{**cfg.__dict__, "seed": cfg.seed + k})
        for kind, prompt in zip(PROMPT_KINDS, (item.prompt_label, item.prompt_color)):
            outs = edit_pair(model, sched, image, item.mask, prompt, item.label, item_cfg, seed + k)
            for method, out in zip(METHODS, outs):
                crop = crop_eval_region(out, item.mask)
                scores[kind, method].append(clip_score(crop, prompt, embedder))
                feats[kind, method].append(crop_features(crop))
    return [summarize(manifest.split, kind, method, scores[kind, method], feats[kind, method], refs)
            for kind in PROMPT_KINDS for method in METHODS]
