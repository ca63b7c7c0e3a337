"""Counterfactual artifacts: the 3x3 treatment grid and the temporal series.

Every cell of a grid (and every day of a series) is sampled from the same
initial noise, so pixel differences isolate the effect of the conditioning
change. Difference maps are stored raw; the display threshold (mapping the
usual 0-255 exclusion band of +/-10 onto [0, 1] intensities) is applied only
when rendering.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from .model import CHEMO_ORDER, ConfigurationError
from .model import build_conditioning as _default_build
from .phantom import PhantomRecord, TreatmentContext
from .sampling import SampleSpec, euler_sample, initial_noise

DISPLAY_THRESHOLD = 10.0 / 255.0
DOSE_AXIS = (0.8, 1.0, 1.2)
CHEMO_AXIS = CHEMO_ORDER   # rows: none, adjuvant TMZ, re-RT + TMZ


def apply_display_threshold(diff: np.ndarray,
                            threshold: float = DISPLAY_THRESHOLD) -> np.ndarray:
    """Zero out |d| < threshold for display; the input is left untouched."""
    out = np.array(diff, copy=True)
    out[np.abs(out) < threshold] = 0.0
    return out


@dataclass
class CounterfactualGrid:
    record_id: str
    ref_ctx: TreatmentContext
    dose_axis: tuple
    chemo_axis: tuple
    images: list            # row-major (chemo, dose), 9 entries
    reference_image: np.ndarray
    diffs: list             # raw signed cell - reference, 9 entries
    display_threshold: float
    seed: int
    n_steps: int

    def cell(self, chemo, dose_scale):
        i = self.chemo_axis.index(chemo)
        j = self.dose_axis.index(dose_scale)
        return self.images[i * len(self.dose_axis) + j]

    def cell_contexts(self):
        return [dataclasses.replace(self.ref_ctx, chemo=c, dose_scale=d)
                for c in self.chemo_axis for d in self.dose_axis]


@dataclass
class TemporalSeries:
    record_id: str
    ctx_template: TreatmentContext
    days: list
    images: list
    diffs: list             # diffs[i] = images[i+1] - images[i], raw signed
    display_threshold: float
    seed: int
    n_steps: int


def _require_full_conditioning(net):
    cfg = net.config
    missing = [name for name, on in
               (("dose", cfg.use_dose), ("chemotherapy", cfg.use_chemo)) if not on]
    if missing:
        raise ConfigurationError(
            f"counterfactual grids need a checkpoint conditioned on {' and '.join(missing)}")


def make_grid(net, record: PhantomRecord, ref_ctx: TreatmentContext,
              seed: int = 0, n_steps: int = 4,
              build_conditioning=None) -> CounterfactualGrid:
    """Sample the 3x3 (chemo x dose scale) grid with shared noise.

    Differences are taken against the image generated from ``ref_ctx`` itself;
    when ``ref_ctx`` matches a cell (the usual center choice of dose 1.0),
    that cell's difference map is identically zero.
    """
    build = build_conditioning or _default_build
    _require_full_conditioning(net)

    noise = initial_noise(record.size, seed)
    spec = SampleSpec(n_steps=n_steps, fixed_noise=noise)

    def sample(ctx):
        bundle = build(net.config, record.baseline, record.dose, ctx)
        return euler_sample(net, bundle, spec)

    images, by_key = [], {}
    for chemo in CHEMO_AXIS:
        for d in DOSE_AXIS:
            ctx = dataclasses.replace(ref_ctx, chemo=chemo, dose_scale=d)
            img = sample(ctx)
            images.append(img)
            by_key[(chemo, d)] = img

    key = (ref_ctx.chemo, ref_ctx.dose_scale)
    reference = by_key.get(key)
    if reference is None:
        reference = sample(ref_ctx)
    diffs = [img - reference for img in images]
    return CounterfactualGrid(
        record_id=record.id, ref_ctx=ref_ctx, dose_axis=DOSE_AXIS,
        chemo_axis=CHEMO_AXIS, images=images, reference_image=reference,
        diffs=diffs, display_threshold=DISPLAY_THRESHOLD, seed=seed,
        n_steps=n_steps)


def make_series(net, record: PhantomRecord, ctx_template: TreatmentContext,
                days, seed: int = 0, n_steps: int = 4,
                build_conditioning=None) -> TemporalSeries:
    """One sample per day with shared noise plus consecutive difference maps.

    ``diffs[i] = images[i+1] - images[i]``: negative values mean the intensity
    dropped from one timepoint to the next.
    """
    build = build_conditioning or _default_build
    days = [int(d) for d in days]
    if any(b <= a for a, b in zip(days, days[1:])):
        raise ValueError("days must be strictly increasing")

    noise = initial_noise(record.size, seed)
    spec = SampleSpec(n_steps=n_steps, fixed_noise=noise)
    images = []
    for day in days:
        ctx = dataclasses.replace(ctx_template, days_since_baseline=day)
        bundle = build(net.config, record.baseline, record.dose, ctx)
        images.append(euler_sample(net, bundle, spec))
    diffs = [b - a for a, b in zip(images, images[1:])]
    return TemporalSeries(
        record_id=record.id, ctx_template=ctx_template, days=days,
        images=images, diffs=diffs, display_threshold=DISPLAY_THRESHOLD,
        seed=seed, n_steps=n_steps)
