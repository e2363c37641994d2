"""Study-level sampling: two images and two texts per study, with fallbacks.

Images prefer two distinct view tags when the study has them, otherwise two
distinct images, otherwise an augmented copy of the single image. Texts use
(findings, impression) when both sections exist, a section plus its augmented
copy when only one does, and two prompt renderings of the label record for
label-only studies.

Batch assembly derives each study's sub-seed deterministically from
(global seed, study id), so batches are reproducible and order-independent
workers could assemble them concurrently.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .augment import ImageAugConfig, TextAugConfig, augment_image, augment_text, resize_bilinear
from .prompts import PromptEngine
from .studies import SampledPair, Study


class NoImages(ValueError):
    pass


class NoText(ValueError):
    pass


class SamplingError(RuntimeError):
    """Per-study failure inside batch assembly, tagged with the study id."""


@dataclass
class SamplerConfig:
    image_aug: ImageAugConfig = field(default_factory=ImageAugConfig)
    text_aug: TextAugConfig = field(default_factory=TextAugConfig)
    negative_sample_count: int | None = None  # binary-label prompt mode
    findings_first: bool = True  # assign findings to t1 (seeded swap when False)


@dataclass
class StudyBatch:
    """Aligned per-study views: n studies yield 2n image-text pairs."""

    x1: np.ndarray  # (n, S, S)
    x2: np.ndarray
    t1: list[str]
    t2: list[str]
    pairs: list[SampledPair]

    @property
    def n(self) -> int:
        return len(self.t1)


def study_rng(global_seed: int, study_id: str) -> np.random.Generator:
    """Deterministic per-study generator derived from (global seed, study id)."""
    digest = hashlib.sha256(f"{global_seed}:{study_id}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def sample_images(study: Study, cfg: ImageAugConfig, rng: np.random.Generator):
    """Pick (x1, x2) per the distinct-view preference; returns (x1, x2, augmented)."""
    if not study.images:
        raise NoImages(f"study {study.id!r} has no images")
    size = cfg.output_size
    if len(study.images) == 1:
        base = study.images[0].pixels
        x1 = resize_bilinear(base, size, size)
        x2 = augment_image(base, cfg, rng)
        return x1, x2, True

    views = [img.view for img in study.images]
    unique_views = sorted(set(views))
    if len(unique_views) >= 2:
        order = rng.permutation(len(unique_views))
        va, vb = unique_views[int(order[0])], unique_views[int(order[1])]
        group_a = [i for i, v in enumerate(views) if v == va]
        group_b = [i for i, v in enumerate(views) if v == vb]
        ia = group_a[int(rng.integers(len(group_a)))]
        ib = group_b[int(rng.integers(len(group_b)))]
    else:
        pick = rng.choice(len(study.images), size=2, replace=False)
        ia, ib = int(pick[0]), int(pick[1])
    x1 = resize_bilinear(study.images[ia].pixels, size, size)
    x2 = resize_bilinear(study.images[ib].pixels, size, size)
    return x1, x2, False


def sample_texts(
    study: Study,
    tcfg: TextAugConfig,
    rng: np.random.Generator,
    engine: PromptEngine,
    negative_sample_count: int | None = None,
    findings_first: bool = True,
):
    """Pick (t1, t2) per the section/prompt rules; returns (t1, t2, source)."""
    sections = study.sections
    if not sections and study.labels is None:
        raise NoText(f"study {study.id!r} has neither text sections nor labels")
    if not sections:
        t1 = engine.build_study_text(study.labels, rng, negative_sample_count)
        t2 = engine.build_study_text(study.labels, rng, negative_sample_count)
        return t1, t2, "prompts"
    if len(sections) == 2:
        t1, t2 = sections
        if not findings_first and rng.integers(2) == 1:
            t1, t2 = t2, t1
        return t1, t2, "sections"
    t1 = sections[0]
    return t1, augment_text(t1, tcfg, rng), "section_aug"


def sample_pair(study: Study, cfg: SamplerConfig, engine: PromptEngine, rng) -> SampledPair:
    x1, x2, augmented = sample_images(study, cfg.image_aug, rng)
    t1, t2, source = sample_texts(
        study,
        cfg.text_aug,
        rng,
        engine,
        negative_sample_count=cfg.negative_sample_count,
        findings_first=cfg.findings_first,
    )
    return SampledPair(x1=x1, x2=x2, t1=t1, t2=t2, image2_augmented=augmented, text_source=source)


def make_batch(studies: list[Study], cfg: SamplerConfig, engine: PromptEngine, seed: int) -> StudyBatch:
    """One SampledPair per study, assembled with per-study derived sub-seeds."""
    if not studies:
        raise ValueError("cannot assemble a batch from zero studies")
    pairs = []
    for study in studies:
        try:
            pairs.append(sample_pair(study, cfg, engine, study_rng(seed, study.id)))
        except Exception as err:
            raise SamplingError(f"study {study.id!r}: {err}") from err
    return StudyBatch(
        x1=np.stack([p.x1 for p in pairs]),
        x2=np.stack([p.x2 for p in pairs]),
        t1=[p.t1 for p in pairs],
        t2=[p.t2 for p in pairs],
        pairs=pairs,
    )


def sample_single(study: Study, cfg: SamplerConfig, engine: PromptEngine, rng, mode: str):
    """One (image, text) per study for the reduced training variants.

    mode 'single': first image and first section (or one prompt rendering),
    untouched. mode 'study_single': seeded random image and random section or
    prompt. Augmentation, when enabled by the caller, is applied on top.
    """
    if mode == "single":
        img = study.images[0].pixels
        text = study.sections[0] if study.sections else engine.build_study_text(
            study.labels, rng, cfg.negative_sample_count
        )
    elif mode == "study_single":
        img = study.images[int(rng.integers(len(study.images)))].pixels
        if study.sections:
            text = study.sections[int(rng.integers(len(study.sections)))]
        else:
            text = engine.build_study_text(study.labels, rng, cfg.negative_sample_count)
    else:
        raise ValueError(f"unknown single-pair sampling mode {mode!r}")
    size = cfg.image_aug.output_size
    return resize_bilinear(img, size, size), text
