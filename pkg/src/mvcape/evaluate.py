"""Novel-view evaluation against held-out renders.

Each evaluation scene holds ``pool`` reference views followed by target views.
Condition ``refs=n`` conditions on the first n pool views and scores every
target view.
"""

from __future__ import annotations

import logging

import numpy as np

from .datagen import Dataset
from .diffusion import NoiseSchedule, SamplerConfig, sample_scenes
from .metrics import MetricReport
from .model import MultiViewModel

log = logging.getLogger(__name__)

DEFAULT_REF_COUNTS = (1, 2, 3, 5, 10)


def evaluate(
    model: MultiViewModel,
    ds: Dataset,
    ref_counts=DEFAULT_REF_COUNTS,
    pool: int = 10,
    sampler: SamplerConfig | None = None,
    schedule: NoiseSchedule | None = None,
    chunk: int = 4,
    baseline_refs: int | None = 3,
    reproduction: bool = False,
) -> MetricReport:
    """Score generated target views for each reference count.

    Extra conditions: ``mean@n`` scores the per-scene pixel mean of the first
    n reference images; ``reproduce`` asks for the first reference view's own
    pose with one reference.
    """
    sampler = sampler or SamplerConfig()
    schedule = schedule or NoiseSchedule()
    S, V = ds.scene_count, ds.views_per_scene
    if V <= pool:
        raise ValueError(f"scenes have {V} views; need more than the {pool}-view reference pool")
    if max(ref_counts) > pool:
        raise ValueError(f"reference count {max(ref_counts)} exceeds the pool of {pool}")
    targets = list(range(pool, V))
    report = MetricReport()
    model.eval()
    for n in ref_counts:
        for lo in range(0, S, chunk):
            scenes = list(range(lo, min(S, lo + chunk)))
            refs = ds.images[scenes, :n]
            rp = [[ds.pose(s, v) for v in range(n)] for s in scenes]
            tp = [[ds.pose(s, v) for v in targets] for s in scenes]
            out = sample_scenes(model, refs, rp, tp, schedule, sampler)
            for i, s in enumerate(scenes):
                for j, v in enumerate(targets):
                    report.add(f"refs={n}", s, v, out[i, j], ds.images[s, v])
        log.info("refs=%d mean PSNR %.3f dB", n, report.mean_psnr(f"refs={n}"))
    if baseline_refs:
        for s in range(S):
            mean_img = ds.images[s, :baseline_refs].mean(axis=0)
            for v in targets:
                report.add(f"mean@{baseline_refs}", s, v, mean_img, ds.images[s, v])
    if reproduction:
        for lo in range(0, S, chunk):
            scenes = list(range(lo, min(S, lo + chunk)))
            rp = [[ds.pose(s, 0)] for s in scenes]
            out = sample_scenes(model, ds.images[scenes, :1], rp, rp, schedule, sampler)
            for i, s in enumerate(scenes):
                report.add("reproduce", s, 0, out[i, 0], ds.images[s, 0])
    return report


def mean_image_baseline(ds: Dataset, n: int, pool: int = 10) -> float:
    rep = MetricReport()
    for s in range(ds.scene_count):
        m = ds.images[s, :n].mean(axis=0)
        for v in range(pool, ds.views_per_scene):
            rep.add("b", s, v, m, ds.images[s, v])
    return rep.mean_psnr("b")
