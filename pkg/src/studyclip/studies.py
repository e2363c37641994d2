"""Study records, line-delimited ingestion format, and graymap pixel files.

One study per JSON line with fields ``id``, ``images`` (list of objects with
``view`` plus either ``path`` to a portable graymap or inline ``pixels`` as a
nested list), optional ``findings`` / ``impression`` strings, and an optional
``labels`` map from class name to one of positive/negative/uncertain/none.
Image paths are resolved relative to the record file's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .prompts import LABEL_VALUES

VIEWS = ("AP", "PA", "LATERAL", "UNKNOWN")


class DataFormatError(ValueError):
    """Malformed study record or pixel file."""


@dataclass
class StudyImage:
    pixels: np.ndarray  # H x W, float64 in [0, 1]
    view: str = "UNKNOWN"

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2 or self.pixels.size == 0:
            raise DataFormatError(f"image must be a non-empty 2-d grid, got {self.pixels.shape}")
        if np.min(self.pixels) < -1e-9 or np.max(self.pixels) > 1 + 1e-9:
            raise DataFormatError("image intensities must lie in [0, 1]")
        if self.view not in VIEWS:
            raise DataFormatError(f"view must be one of {VIEWS}, got {self.view!r}")


@dataclass
class Study:
    """One examination: images with view tags plus report sections or labels."""

    id: str
    images: list[StudyImage]
    findings: str | None = None
    impression: str | None = None
    labels: dict[str, str] | None = None

    def __post_init__(self):
        if not self.images:
            raise DataFormatError(f"study {self.id!r} has no images")
        self.findings = self.findings.strip() if self.findings else None
        self.impression = self.impression.strip() if self.impression else None
        if self.labels is not None:
            for cls, value in self.labels.items():
                if value not in LABEL_VALUES:
                    raise DataFormatError(
                        f"study {self.id!r}: label value {value!r} for {cls!r} not in {LABEL_VALUES}"
                    )
        if self.findings is None and self.impression is None and self.labels is None:
            raise DataFormatError(f"study {self.id!r} has neither text sections nor labels")

    @property
    def sections(self) -> list[str]:
        return [s for s in (self.findings, self.impression) if s]


@dataclass
class SampledPair:
    """Per-study training quadruple with provenance flags."""

    x1: np.ndarray
    x2: np.ndarray
    t1: str
    t2: str
    image2_augmented: bool = False
    text_source: str = "sections"  # sections | section_aug | prompts

    def __post_init__(self):
        if self.x1.size == 0 or self.x2.size == 0 or not self.t1 or not self.t2:
            raise ValueError("sampled pair fields must be non-empty")


# ------------------------------------------------------------- graymap files


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    """Binary portable graymap, maxval 255; intensities quantized from [0, 1]."""
    pixels = np.asarray(pixels, dtype=np.float64)
    h, w = pixels.shape
    data = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < 4 and i < len(raw):
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i : i + 1].isspace():
            i += 1
        tokens.append(raw[start:i])
    if len(tokens) < 4:
        raise DataFormatError(f"{path}: truncated graymap header")
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P5":
        body = raw[i + 1 : i + 1 + w * h]
        if len(body) != w * h:
            raise DataFormatError(f"{path}: expected {w * h} pixel bytes, got {len(body)}")
        data = np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64)
    elif magic == b"P2":
        values = raw[i:].split()
        if len(values) != w * h:
            raise DataFormatError(f"{path}: expected {w * h} pixel values, got {len(values)}")
        data = np.array([int(v) for v in values], dtype=np.float64).reshape(h, w)
    else:
        raise DataFormatError(f"{path}: unsupported graymap magic {magic!r}")
    return data / float(maxval)


# ----------------------------------------------------------------- JSON lines


def study_to_record(study: Study, image_paths: list[str] | None = None) -> dict:
    images = []
    for k, img in enumerate(study.images):
        if image_paths is not None:
            images.append({"path": image_paths[k], "view": img.view})
        else:
            images.append({"pixels": [[round(float(v), 6) for v in row] for row in img.pixels], "view": img.view})
    record: dict = {"id": study.id, "images": images}
    if study.findings is not None:
        record["findings"] = study.findings
    if study.impression is not None:
        record["impression"] = study.impression
    if study.labels is not None:
        record["labels"] = dict(sorted(study.labels.items()))
    return record


def record_to_study(record: dict, base_dir: Path) -> Study:
    try:
        study_id = record["id"]
        raw_images = record["images"]
    except KeyError as missing:
        raise DataFormatError(f"study record missing field {missing}") from None
    images = []
    for entry in raw_images:
        view = entry.get("view", "UNKNOWN")
        if "pixels" in entry:
            pixels = np.asarray(entry["pixels"], dtype=np.float64)
        elif "path" in entry:
            pixels = read_pgm(base_dir / entry["path"])
        else:
            raise DataFormatError(f"study {study_id!r}: image entry needs 'pixels' or 'path'")
        images.append(StudyImage(pixels=pixels, view=view))
    return Study(
        id=study_id,
        images=images,
        findings=record.get("findings"),
        impression=record.get("impression"),
        labels=record.get("labels"),
    )


def save_studies(path: str | Path, studies: list[Study], image_dir_name: str = "images") -> None:
    """Write one JSON record per line; pixel grids stored as graymaps next to it."""
    path = Path(path)
    image_dir = path.parent / image_dir_name
    image_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for study in studies:
        rel_paths = []
        for k, img in enumerate(study.images):
            rel = f"{image_dir_name}/{study.id}_{k}.pgm"
            write_pgm(path.parent / rel, img.pixels)
            rel_paths.append(rel)
        lines.append(json.dumps(study_to_record(study, rel_paths), sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_studies(path: str | Path) -> list[Study]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    studies = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as err:
            raise DataFormatError(f"{path}:{lineno}: invalid JSON ({err})") from None
        studies.append(record_to_study(record, path.parent))
    if not studies:
        raise DataFormatError(f"{path}: no study records")
    return studies
