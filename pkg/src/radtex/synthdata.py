"""Synthetic chest-film analog: paired grayscale images and templated reports.

Nine finding classes each render as their own shape family at a
class-specific location.  ``edema`` doubles as the severity-graded class.
Every example draws its randomness from ``default_rng([seed, index])`` so a
corpus is identical whether generated serially or in parallel.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import textpipe

FINDINGS = (
    "atelectasis", "cardiomegaly", "consolidation", "edema", "effusion",
    "nodule", "opacity", "pneumonia", "pneumothorax",
)
EDEMA = FINDINGS.index("edema")
SEVERITY_WORDS = {1: "mild", 2: "moderate", 3: "severe"}

POSITIVE_TEMPLATES = {
    "atelectasis": ("Linear atelectasis at the left base.", "There is left basilar atelectasis."),
    "cardiomegaly": ("The heart is enlarged, compatible with cardiomegaly.", "Cardiomegaly is present."),
    "consolidation": ("Dense consolidation in the right lower lobe.",
                      "There is right lower lobe consolidation."),
    "edema": ("There is {sev} pulmonary edema.", "Findings of {sev} pulmonary edema."),
    "effusion": ("Small right pleural effusion.", "There is a right pleural effusion."),
    "nodule": ("A nodule is seen in the left upper lobe.", "Left upper lobe nodule is noted."),
    "opacity": ("Hazy opacity in the right upper zone.", "There is a right upper zone opacity."),
    "pneumonia": ("Patchy airspace disease concerning for pneumonia.", "Left mid lung pneumonia."),
    "pneumothorax": ("There is a right apical pneumothorax.", "Small right pneumothorax is seen."),
}
NEGATIVE_TEMPLATES = {name: f"No visible {name}." for name in FINDINGS}
NEGATIVE_TEMPLATES["edema"] = "No pulmonary edema."

_KEYWORDS = {name: re.compile(rf"\b{name}\b") for name in FINDINGS}


@dataclass
class SynthConfig:
    canvas: int = 64
    priors: tuple[float, ...] = (0.3,) * len(FINDINGS)
    severity_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    noise_amplitude: float = 0.08
    contrast: float = 0.4
    jitter: float = 0.08
    clutter: int = 6

    def validate(self) -> None:
        if self.canvas < 32:
            raise ValueError("canvas must be at least 32 pixels")
        if self.contrast < 0 or self.jitter < 0 or self.clutter < 0:
            raise ValueError("contrast, jitter and clutter must be non-negative")
        if len(self.priors) != len(FINDINGS):
            raise ValueError(f"need one prior per finding ({len(FINDINGS)})")
        if any(not 0 <= p <= 1 for p in self.priors):
            raise ValueError("priors must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        if "priors" in d:
            p = d["priors"]
            d["priors"] = tuple(p) if isinstance(p, (list, tuple)) else (float(p),) * len(FINDINGS)
        if "severity_weights" in d:
            d["severity_weights"] = tuple(d["severity_weights"])
        return cls(**d)


@dataclass
class SynthScene:
    canvas: int
    present: tuple[bool, ...]
    severity: int
    seed: int
    index: int = 0

    def __post_init__(self):
        if self.severity > 0 and not self.present[EDEMA]:
            raise ValueError("severity > 0 requires the edema flag")
        if self.present[EDEMA] and self.severity not in SEVERITY_WORDS:
            raise ValueError("a present edema finding needs a grade in 1..3")


@dataclass
class AugmentParams:
    rotation: float = 10.0
    translation: float = 0.05
    scale: float = field(default=1.0, init=False)


@dataclass
class ImageReportExample:
    id: str
    image: np.ndarray
    report: str
    findings: str
    labels: dict[str, int]
    severity: int | None


# ---------------------------------------------------------------------------
# labels recovered from text


def label_findings(findings_text: str) -> dict[str, int]:
    """Phrase-table labeler: a finding is positive when a sentence names it without leading "no"."""
    text = textpipe.normalize(findings_text)
    labels = dict.fromkeys(FINDINGS, 0)
    for sentence in text.split(" . "):
        sentence = sentence.strip(" .")
        if not sentence or sentence.startswith("no "):
            continue
        for name, rule in _KEYWORDS.items():
            if rule.search(sentence):
                labels[name] = 1
    return labels


# ---------------------------------------------------------------------------
# rendering


def _grid(n):
    y, x = np.mgrid[0:n, 0:n].astype(np.float64) / n
    return y, x


def _blob(y, x, cy, cx, ry, rx=None):
    rx = ry if rx is None else rx
    return np.exp(-(((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2) / 2)


def _render(scene: SynthScene, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    n = scene.canvas
    y, x = _grid(n)
    smooth = ndimage.gaussian_filter(rng.standard_normal((n, n)), sigma=n / 16, mode="wrap")
    smooth /= smooth.std() + 1e-12
    img = 0.3 + cfg.noise_amplitude * smooth + 0.02 * rng.standard_normal((n, n))
    # background clutter: faint blobs anywhere, unrelated to any finding
    for _ in range(cfg.clutter):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        img += rng.uniform(-0.15, 0.15) * _blob(y, x, cy, cx, rng.uniform(0.02, 0.08))
    k = cfg.contrast

    def jitter():
        return rng.uniform(-cfg.jitter, cfg.jitter, size=2)

    p = dict(zip(FINDINGS, scene.present))
    if p["atelectasis"]:
        dy, dx = jitter()
        band = np.exp(-((y - 0.72 - dy) / 0.025) ** 2 / 2) * (np.abs(x - 0.3 - dx) < 0.14)
        img += k * 0.35 * band
    if p["cardiomegaly"]:
        dy, dx = jitter()
        img += k * 0.3 * (((y - 0.66 - dy) / 0.17) ** 2 + ((x - 0.5 - dx) / 0.23) ** 2 < 1)
    if p["consolidation"]:
        dy, dx = jitter()
        img += k * 0.5 * _blob(y, x, 0.7 + dy, 0.72 + dx, 0.08)
    if p["edema"]:
        count = 8 * scene.severity
        amp = k * (0.1 + 0.08 * scene.severity)
        cy = rng.uniform(0.3, 0.6, size=count)
        cx = rng.uniform(0.3, 0.7, size=count)
        for by, bx in zip(cy, cx):
            img += amp * _blob(y, x, by, bx, 0.025)
    if p["effusion"]:
        dy, _ = jitter()
        ramp = np.clip((y - 0.8 - dy) / 0.15, 0, 1) * (x > 0.55)
        img += k * 0.4 * ramp
    if p["nodule"]:
        dy, dx = jitter()
        img += k * 0.6 * _blob(y, x, 0.28 + dy, 0.28 + dx, 0.03)
    if p["opacity"]:
        dy, dx = jitter()
        img += k * 0.3 * _blob(y, x, 0.3 + dy, 0.72 + dx, 0.1)
    if p["pneumonia"]:
        for _ in range(4):
            oy, ox = rng.uniform(-0.1, 0.1, size=2)
            img += k * 0.35 * _blob(y, x, 0.5 + oy, 0.28 + ox, 0.035)
    if p["pneumothorax"]:
        dy, dx = jitter()
        r = np.hypot(y - 0.14 - dy, x - 0.82 - dx)
        img -= k * 0.25 * (r < 0.13)
        img += k * 0.3 * (np.abs(r - 0.13) < 0.012)
    # quantize to the 8-bit grid so disk round-trips are lossless
    return (np.round(np.clip(img, 0, 1) * 255) / 255).astype(np.float32)


def _report(scene: SynthScene, rng: np.random.Generator) -> str:
    sentences = []
    for name, present in zip(FINDINGS, scene.present):
        if present:
            tmpl = POSITIVE_TEMPLATES[name][int(rng.integers(2))]
            sentences.append(tmpl.format(sev=SEVERITY_WORDS.get(scene.severity, "")))
        else:
            sentences.append(NEGATIVE_TEMPLATES[name])
    order = rng.permutation(len(sentences))
    findings = " ".join(sentences[i] for i in order)
    impression = "Findings as described above." if any(scene.present) else "No acute cardiopulmonary process."
    return f"FINDINGS: {findings}\nIMPRESSION: {impression}"


def sample_scene(cfg: SynthConfig, seed: int, index: int, rng: np.random.Generator) -> SynthScene:
    present = tuple(bool(v) for v in rng.random(len(FINDINGS)) < np.asarray(cfg.priors))
    severity = 0
    if present[EDEMA]:
        severity = 1 + int(rng.choice(3, p=np.asarray(cfg.severity_weights) / sum(cfg.severity_weights)))
    return SynthScene(cfg.canvas, present, severity, seed, index)


def generate(cfg: SynthConfig, seed: int, index: int = 0, scene: SynthScene | None = None) -> ImageReportExample:
    cfg.validate()
    rng = np.random.default_rng([seed, index])
    if scene is None:
        scene = sample_scene(cfg, seed, index, rng)
    image = _render(scene, cfg, rng)
    report = _report(scene, rng)
    findings = textpipe.extract_findings(report)
    return ImageReportExample(
        id=f"{index:06d}",
        image=image,
        report=report,
        findings=findings,
        labels={name: int(v) for name, v in zip(FINDINGS, scene.present)},
        severity=scene.severity,
    )


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """In-memory corpus: images N×H×W in [0,1], findings text, labels N×9, severity N (-1 = absent)."""

    ids: list[str]
    images: np.ndarray
    findings: list[str]
    labels: np.ndarray
    severity: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx: Sequence[int]) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset([self.ids[i] for i in idx], self.images[idx], [self.findings[i] for i in idx],
                       self.labels[idx], self.severity[idx])

    @classmethod
    def from_examples(cls, examples: Sequence[ImageReportExample]) -> "Dataset":
        return cls(
            ids=[e.id for e in examples],
            images=np.stack([e.image for e in examples]).astype(np.float32),
            findings=[e.findings for e in examples],
            labels=np.array([[e.labels[f] for f in FINDINGS] for e in examples], dtype=np.int64),
            severity=np.array([-1 if e.severity is None else e.severity for e in examples], dtype=np.int64),
        )


def generate_examples(cfg: SynthConfig, n: int, seed: int, start: int = 0) -> list[ImageReportExample]:
    return [generate(cfg, seed, i) for i in range(start, start + n)]


def generate_dataset(cfg: SynthConfig, n: int, seed: int, start: int = 0) -> Dataset:
    return Dataset.from_examples(generate_examples(cfg, n, seed, start))


def write_pgm(path: Path, image: np.ndarray) -> None:
    h, w = image.shape
    pixels = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return (data.reshape(h, w).astype(np.float32) / maxval)


def _record(e: ImageReportExample) -> dict:
    return {"id": e.id, "findings": e.findings, "labels": e.labels, "severity": e.severity}


def generate_corpus(cfg: SynthConfig, n: int, seed: int, out) -> Path:
    """Write ``n`` examples as ``images/<id>.pgm`` plus ``reports.jsonl``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(n):
        e = generate(cfg, seed, i)
        write_pgm(out / "images" / f"{e.id}.pgm", e.image)
        lines.append(json.dumps(_record(e)))
    (out / "reports.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def load_dataset(path) -> Dataset:
    """Read a dataset directory.  Rows without a FINDINGS body are skipped.

    A row may carry a full ``report`` instead of ``findings``; the FINDINGS
    section is then extracted from it.
    """
    path = Path(path)
    examples = []
    for line in (path / "reports.jsonl").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        findings = row.get("findings")
        if findings is None and row.get("report"):
            try:
                findings = textpipe.extract_findings(row["report"])
            except textpipe.AbsentSectionError:
                continue
        if not findings:
            continue
        labels = row.get("labels") or {}
        examples.append(ImageReportExample(
            id=str(row["id"]),
            image=read_pgm(path / "images" / f"{row['id']}.pgm"),
            report=row.get("report", ""),
            findings=findings,
            labels={f: int(labels.get(f, 0)) for f in FINDINGS},
            severity=row.get("severity"),
        ))
    if not examples:
        raise ValueError(f"{path}: no usable examples")
    return Dataset.from_examples(examples)


# ---------------------------------------------------------------------------
# augmentation


def augment(image: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Random rotation + translation at fixed scale, bilinear, zero fill outside the frame."""
    h, w = image.shape
    angle = math.radians(rng.uniform(-params.rotation, params.rotation)) if params.rotation else 0.0
    shift = rng.uniform(-params.translation, params.translation, size=2) * (h, w) if params.translation else (0, 0)
    return affine(image, angle, shift)


def affine(image: np.ndarray, angle: float, shift) -> np.ndarray:
    """Rotate by ``angle`` radians about the center, then translate by ``shift`` (dy, dx) pixels."""
    if angle == 0 and shift[0] == 0 and shift[1] == 0:
        return image.copy()
    h, w = image.shape
    c = np.array([(h - 1) / 2, (w - 1) / 2])
    cos, sin = math.cos(angle), math.sin(angle)
    inv = np.array([[cos, sin], [-sin, cos]])
    offset = c - inv @ (c + np.asarray(shift, dtype=np.float64))
    out = ndimage.affine_transform(image.astype(np.float64), inv, offset=offset, order=1,
                                   mode="constant", cval=0.0)
    return np.clip(out, 0, 1).astype(image.dtype)


def augment_batch(images: np.ndarray, params: AugmentParams | None, rng: np.random.Generator) -> np.ndarray:
    if params is None:
        return images
    return np.stack([augment(im, params, rng) for im in images])


def config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
