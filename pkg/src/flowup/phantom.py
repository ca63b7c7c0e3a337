"""Synthetic longitudinal brain-slice phantom cohort with analytic dynamics.

Each phantom is a 2-D axial-slice caricature: an elliptical brain, an
elliptical ventricle (CSF) at its center, and optionally a circular enhancing
lesion with a radiotherapy dose map peaked over it. Treatment response is a
closed-form function of the dose map and the treatment context, so every
follow-up image has a known ground truth:

* ventricle axes dilate linearly with (mean brain dose x days), capped at a
  fixed fraction of the brain axes (tissue atrophy proxy);
* lesion radius shrinks exponentially with (lesion dose x days) and regrows
  after a latency when the effective lesion dose is below
  ``REGROWTH_DOSE_THRESHOLD``;
* without systemic therapy an edema ring appears around the lesion after a
  per-phantom onset day and widens with a saturating (logistic-like) profile;
  it lowers the T1-like channel and raises the FLAIR-like channel.

Images are ``(H, W, 3)`` float32 in [0, 1] with channels (T1-like,
T1Gd-like, FLAIR-like). All geometry below is in pixels unless noted.
"""

import dataclasses
import json
import math
import os
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.ndimage import gaussian_filter

from . import rawio

CHANNELS = 3
MAX_FOLLOWUP_DAY = 720

# Dynamics constants shared by the whole cohort. Effective doses are in
# cohort-normalized units (1.0 = hottest pixel in the cohort).
REGROWTH_DOSE_THRESHOLD = 0.35
REGROWTH_LATENCY_DAYS = 240.0
VENTRICLE_AXIS_CAP = 0.50      # max ventricle semi-axis as fraction of brain axis
LESION_RADIUS_CAP = 1.5        # max lesion radius as multiple of baseline radius
NOISE_AMPLITUDE = 0.03
BACKGROUND_INTENSITY = 0.0

# Edema channel shifts at full severity: (T1-like, T1Gd-like, FLAIR-like).
EDEMA_CHANNEL_SHIFT = (-0.08, -0.04, 0.32)


class ChemoArm(str, Enum):
    NONE = "none"
    ADJUVANT_TMZ = "adjuvant_tmz"
    RERT_TMZ = "rert_tmz"


class SliceLabel(str, Enum):
    HEALTHY_APPEARING = "healthy_appearing"
    DISEASED = "diseased"


# Per-arm multipliers: systemic therapy improves lesion control; a second
# radiotherapy round also accelerates atrophy; edema only develops untreated.
@dataclass(frozen=True)
class _ArmEffect:
    lesion_control: float
    atrophy: float
    edema: bool


CHEMO_EFFECTS = {
    ChemoArm.NONE: _ArmEffect(lesion_control=1.0, atrophy=1.0, edema=True),
    ChemoArm.ADJUVANT_TMZ: _ArmEffect(lesion_control=1.5, atrophy=1.0, edema=False),
    ChemoArm.RERT_TMZ: _ArmEffect(lesion_control=2.2, atrophy=1.3, edema=False),
}


@dataclass(frozen=True)
class TreatmentContext:
    """Modifiable counterfactual knobs: time, systemic therapy, dose scaling."""

    days_since_baseline: int
    chemo: ChemoArm = ChemoArm.ADJUVANT_TMZ
    dose_scale: float = 1.0

    def __post_init__(self):
        if self.days_since_baseline < 0:
            raise ValueError("days_since_baseline must be >= 0")
        if not self.dose_scale > 0:
            raise ValueError("dose_scale must be > 0")
        if not isinstance(self.chemo, ChemoArm):
            object.__setattr__(self, "chemo", ChemoArm(self.chemo))


@dataclass(frozen=True)
class PhantomParams:
    """Geometry, per-channel intensities, and dynamics coefficients."""

    brain_center: tuple    # (row, col)
    brain_axes: tuple      # semi-axes (row, col)
    vent_axes: tuple       # ventricle semi-axes, shares the brain center
    lesion_center: tuple   # (row, col); ignored when lesion_radius == 0
    lesion_radius: float   # 0 -> healthy-appearing slice
    tissue_intensity: tuple   # per channel
    csf_intensity: tuple
    lesion_intensity: tuple
    vent_growth_rate: float   # per (normalized dose x day)
    lesion_shrink_rate: float
    regrowth_rate: float      # px/day at full dose deficit
    edema_onset_day: float
    edema_growth_rate: float  # 1/day
    edema_max_width: float    # px
    edema_min_width: float    # px, ring width right after onset
    noise_seed: int

    def __post_init__(self):
        if min(self.brain_axes) <= 0 or min(self.vent_axes) <= 0:
            raise ValueError("axes must be positive")
        if self.lesion_radius < 0:
            raise ValueError("lesion_radius must be >= 0")
        for i in range(2):
            if self.vent_axes[i] >= self.brain_axes[i]:
                raise ValueError("ventricle must lie strictly inside the brain")
        if self.lesion_radius > 0:
            off = math.hypot(self.lesion_center[0] - self.brain_center[0],
                             self.lesion_center[1] - self.brain_center[1])
            if off + self.lesion_radius > min(self.brain_axes):
                raise ValueError("lesion must lie inside the brain ellipse")

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("brain_center", "brain_axes", "vent_axes", "lesion_center",
                    "tissue_intensity", "csf_intensity", "lesion_intensity"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass(eq=False)
class PhantomRecord:
    """One synthetic patient: baseline, dose map, and its oracle generator."""

    id: str
    params: PhantomParams
    baseline: np.ndarray      # (H, W, 3) float32
    dose: np.ndarray          # (H, W) float32, cohort-normalized
    followup_days: list
    slice_label: SliceLabel

    @property
    def size(self):
        return self.baseline.shape[0]


@dataclass(frozen=True)
class DynamicsState:
    """Geometry at one timepoint, fully determined by (params, dose, context)."""

    vent_axes: tuple
    lesion_radius: float
    edema_width: float


def _grid(size):
    return np.mgrid[0:size, 0:size].astype(np.float64)


def _ellipse_mask(size, center, axes):
    yy, xx = _grid(size)
    q = ((yy - center[0]) / axes[0]) ** 2 + ((xx - center[1]) / axes[1]) ** 2
    return q <= 1.0


def _disk_dist(size, center):
    yy, xx = _grid(size)
    return np.hypot(yy - center[0], xx - center[1])


def dynamics_state(params: PhantomParams, dose: np.ndarray,
                   ctx: TreatmentContext) -> DynamicsState:
    """Evaluate the analytic treatment-response model at one timepoint.

    Monotone by construction: ventricle axes are non-decreasing and lesion
    radius non-increasing in dose_scale for fixed days and chemo arm.
    """
    size = dose.shape[0]
    days = float(ctx.days_since_baseline)
    arm = CHEMO_EFFECTS[ctx.chemo]
    scaled = np.asarray(dose, dtype=np.float64) * ctx.dose_scale

    brain = _ellipse_mask(size, params.brain_center, params.brain_axes)
    mean_brain_dose = float(scaled[brain].mean())
    growth = 1.0 + params.vent_growth_rate * arm.atrophy * mean_brain_dose * days
    vent_axes = tuple(
        min(params.vent_axes[i] * growth, VENTRICLE_AXIS_CAP * params.brain_axes[i])
        for i in range(2)
    )

    radius = 0.0
    edema_width = 0.0
    if params.lesion_radius > 0:
        disk = _disk_dist(size, params.lesion_center) <= params.lesion_radius
        eff = float(scaled[disk].mean()) * arm.lesion_control
        radius = params.lesion_radius * math.exp(-params.lesion_shrink_rate * eff * days)
        deficit = max(0.0, 1.0 - eff / REGROWTH_DOSE_THRESHOLD)
        radius += params.regrowth_rate * max(0.0, days - REGROWTH_LATENCY_DAYS) * deficit
        radius = min(radius, LESION_RADIUS_CAP * params.lesion_radius)
        if arm.edema and days > params.edema_onset_day:
            grown = 1.0 - math.exp(-params.edema_growth_rate * (days - params.edema_onset_day))
            edema_width = params.edema_min_width + \
                (params.edema_max_width - params.edema_min_width) * grown
    return DynamicsState(vent_axes=vent_axes, lesion_radius=radius,
                         edema_width=edema_width)


def _smooth_noise(size, seed):
    """Per-channel smooth texture with peak amplitude NOISE_AMPLITUDE."""
    rng = np.random.default_rng(seed)
    white = rng.standard_normal((CHANNELS, size, size))
    smooth = gaussian_filter(white, sigma=(0, size / 16.0, size / 16.0))
    peak = np.abs(smooth).max(axis=(1, 2), keepdims=True)
    return NOISE_AMPLITUDE * smooth / peak


def render(params: PhantomParams, size: int, state: DynamicsState) -> np.ndarray:
    """Rasterize one timepoint to an (H, W, 3) float32 image in [0, 1].

    Draw order: tissue, ventricle (CSF), edema ring, lesion; the smooth noise
    texture (fixed per phantom) is applied inside the brain only, so the
    background is exactly 0.
    """
    brain = _ellipse_mask(size, params.brain_center, params.brain_axes)
    vent = _ellipse_mask(size, params.brain_center, state.vent_axes) & brain

    img = np.zeros((size, size, CHANNELS), dtype=np.float64)
    img[brain] = params.tissue_intensity
    img[vent] = params.csf_intensity

    if params.lesion_radius > 0 and state.lesion_radius > 0:
        dist = _disk_dist(size, params.lesion_center)
        lesion = (dist <= state.lesion_radius) & brain
        if state.edema_width > 0:
            ring = (dist > state.lesion_radius) & \
                   (dist <= state.lesion_radius + state.edema_width) & brain & ~vent
            severity = min(1.0, state.edema_width / params.edema_max_width)
            img[ring] += np.array(EDEMA_CHANNEL_SHIFT) * severity
        img[lesion] = params.lesion_intensity

    noise = np.transpose(_smooth_noise(size, params.noise_seed), (1, 2, 0))
    img[brain] += noise[brain]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def analytic_label_mask(params: PhantomParams, size: int,
                        state: DynamicsState) -> np.ndarray:
    """Ground-truth class mask (0 background, 1 tissue, 2 CSF) at a timepoint.

    Mirrors the render draw order: lesion and edema pixels count as tissue.
    """
    brain = _ellipse_mask(size, params.brain_center, params.brain_axes)
    vent = _ellipse_mask(size, params.brain_center, state.vent_axes) & brain
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[brain] = 1
    mask[vent] = 2
    if params.lesion_radius > 0 and state.lesion_radius > 0:
        lesion = (_disk_dist(size, params.lesion_center) <= state.lesion_radius) & brain
        mask[lesion] = 1
    return mask


def edema_ring_mask(record: PhantomRecord, ctx: TreatmentContext) -> np.ndarray:
    """Boolean mask of the edema ring at a timepoint (empty when no edema)."""
    params = record.params
    state = dynamics_state(params, record.dose, ctx)
    size = record.size
    if state.edema_width <= 0 or state.lesion_radius <= 0:
        return np.zeros((size, size), dtype=bool)
    brain = _ellipse_mask(size, params.brain_center, params.brain_axes)
    vent = _ellipse_mask(size, params.brain_center, state.vent_axes) & brain
    dist = _disk_dist(size, params.lesion_center)
    return (dist > state.lesion_radius) & \
           (dist <= state.lesion_radius + state.edema_width) & brain & ~vent


def oracle_followup(record: PhantomRecord, ctx: TreatmentContext) -> np.ndarray:
    """Analytic ground-truth follow-up image for any treatment context.

    ``days_since_baseline == 0`` reproduces the baseline image bit-exactly.
    """
    state = dynamics_state(record.params, record.dose, ctx)
    return render(record.params, record.size, state)


def oracle_label_mask(record: PhantomRecord, ctx: TreatmentContext) -> np.ndarray:
    state = dynamics_state(record.params, record.dose, ctx)
    return analytic_label_mask(record.params, record.size, state)


# ---------------------------------------------------------------------------
# Cohort generation
# ---------------------------------------------------------------------------

def _draw_params(rng, size, diseased):
    s = float(size)
    brain_axes = (rng.uniform(0.28, 0.36) * s, rng.uniform(0.33, 0.42) * s)
    brain_center = (s / 2 + rng.uniform(-0.02, 0.02) * s,
                    s / 2 + rng.uniform(-0.02, 0.02) * s)
    vent_axes = (rng.uniform(0.05, 0.09) * s, rng.uniform(0.06, 0.10) * s)

    if diseased:
        radius = rng.uniform(0.06, 0.10) * s
        theta = rng.uniform(0.0, 2 * math.pi)
        rho = rng.uniform(0.35, 0.70) * (0.95 * min(brain_axes) - radius - 1.0)
        lesion_center = (brain_center[0] + rho * math.sin(theta),
                         brain_center[1] + rho * math.cos(theta))
    else:
        radius = 0.0
        lesion_center = brain_center

    jitter = lambda base: tuple(b + rng.uniform(-0.03, 0.03) for b in base)
    return PhantomParams(
        brain_center=brain_center,
        brain_axes=brain_axes,
        vent_axes=vent_axes,
        lesion_center=lesion_center,
        lesion_radius=radius,
        tissue_intensity=jitter((0.72, 0.60, 0.55)),
        csf_intensity=jitter((0.22, 0.20, 0.10)),
        lesion_intensity=jitter((0.67, 0.92, 0.78)),
        vent_growth_rate=rng.uniform(0.0030, 0.0046),
        lesion_shrink_rate=rng.uniform(0.0025, 0.0040),
        regrowth_rate=rng.uniform(0.00025, 0.00045) * s,
        edema_onset_day=rng.uniform(200.0, 340.0),
        edema_growth_rate=rng.uniform(0.015, 0.030),
        edema_max_width=rng.uniform(0.75, 1.05) * max(radius, 0.06 * s) + 0.05 * s,
        edema_min_width=0.05 * s,
        noise_seed=int(rng.integers(0, 2 ** 31 - 1)),
    )


def _draw_dose(rng, size, params):
    """Raw (un-normalized) dose map in Gy-like units, Gaussian falloff."""
    s = float(size)
    sigma = rng.uniform(0.10, 0.16) * s
    if params.lesion_radius > 0:
        center = params.lesion_center
        peak = rng.uniform(25.0, 60.0)
    else:
        theta = rng.uniform(0.0, 2 * math.pi)
        rho = rng.uniform(0.0, 0.5) * min(params.brain_axes)
        center = (params.brain_center[0] + rho * math.sin(theta),
                  params.brain_center[1] + rho * math.cos(theta))
        peak = rng.uniform(6.0, 18.0)
    dist = _disk_dist(size, center)
    return peak * np.exp(-(dist ** 2) / (2 * sigma ** 2))


def generate_cohort(n_patients: int, size: int = 32, seed: int = 0):
    """Generate a reproducible synthetic cohort.

    Patients with index 0 or 3 mod 5 are healthy-appearing (lesion radius 0),
    giving a fixed 40/60 label split so both sampler pools are non-empty for
    any cohort of >= 4. Dose maps are cohort-rescaled so the hottest pixel in
    the whole cohort is exactly 1.
    """
    if n_patients < 1:
        raise ValueError("n_patients must be >= 1")
    if size < 16:
        raise ValueError("size must be >= 16")
    rng = np.random.default_rng(seed)

    params_list, raw_doses, day_lists = [], [], []
    for i in range(n_patients):
        diseased = i % 5 not in (0, 3)
        params = _draw_params(rng, size, diseased)
        params_list.append(params)
        raw_doses.append(_draw_dose(rng, size, params))
        n_days = int(rng.integers(3, 20))
        days = rng.choice(np.arange(30, MAX_FOLLOWUP_DAY + 1), size=n_days,
                          replace=False)
        day_lists.append(sorted(int(d) for d in days))

    doses = rescale_dose_cohort(raw_doses)
    records = []
    for i, params in enumerate(params_list):
        state0 = dynamics_state(params, doses[i], TreatmentContext(0))
        baseline = render(params, size, state0)
        label = SliceLabel.DISEASED if params.lesion_radius > 0 \
            else SliceLabel.HEALTHY_APPEARING
        records.append(PhantomRecord(
            id=f"p{i:03d}", params=params, baseline=baseline, dose=doses[i],
            followup_days=day_lists[i], slice_label=label,
        ))
    return records


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def normalize_percentile(img: np.ndarray, lo_pct: float = 0.5,
                         hi_pct: float = 99.5) -> np.ndarray:
    """Clip to the [lo_pct, hi_pct] percentiles (joint over all channels,
    linear-interpolation definition) and map that range to [0, 1].

    A constant image maps to all zeros.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.size == 0:
        raise ValueError("empty image")
    if not lo_pct < hi_pct:
        raise ValueError("lo_pct must be < hi_pct")
    p_lo, p_hi = np.percentile(img, [lo_pct, hi_pct])
    if p_hi == p_lo:
        return np.zeros_like(img)
    return (np.clip(img, p_lo, p_hi) - p_lo) / (p_hi - p_lo)


def rescale_dose_cohort(doses) -> list:
    """Divide every map by the single cohort-wide maximum.

    Preserves all pixel ratios within and across patients; the hottest pixel
    in the cohort becomes exactly 1.0.
    """
    doses = [np.asarray(d, dtype=np.float64) for d in doses]
    if not doses:
        raise ValueError("empty cohort")
    peak = max(float(d.max()) for d in doses)
    if peak <= 0:
        raise ValueError("cohort has no positive dose")
    return [(d / peak).astype(np.float32) for d in doses]


def balanced_sampler(records, seed: int = 0):
    """Infinite iterator alternating the healthy and diseased pools
    (healthy first), drawing uniformly inside each pool."""
    healthy = [r for r in records if r.slice_label == SliceLabel.HEALTHY_APPEARING]
    diseased = [r for r in records if r.slice_label == SliceLabel.DISEASED]
    if not healthy or not diseased:
        raise ValueError("both healthy-appearing and diseased records are required")
    rng = np.random.default_rng(seed)

    def draw():
        pools = (healthy, diseased)
        k = 0
        while True:
            pool = pools[k % 2]
            yield pool[int(rng.integers(len(pool)))]
            k += 1

    return draw()


# ---------------------------------------------------------------------------
# Cohort persistence: cohort.json manifest + one raw file per image/dose map
# ---------------------------------------------------------------------------

MANIFEST_NAME = "cohort.json"


def save_cohort(records, out_dir, cohort_id: str | None = None) -> str:
    os.makedirs(out_dir, exist_ok=True)
    if cohort_id is None:
        size = records[0].size if records else 0
        cohort_id = f"cohort-{len(records)}x{size}"
    entries = []
    for rec in records:
        baseline_file = f"{rec.id}_baseline.rfc"
        dose_file = f"{rec.id}_dose.rfc"
        rawio.write_image(os.path.join(out_dir, baseline_file), rec.baseline)
        rawio.write_image(os.path.join(out_dir, dose_file), rec.dose)
        entries.append({
            "id": rec.id,
            "params": rec.params.to_dict(),
            "slice_label": rec.slice_label.value,
            "followup_days": rec.followup_days,
            "baseline_file": baseline_file,
            "dose_file": dose_file,
        })
    manifest = {"cohort_id": cohort_id, "records": entries}
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return cohort_id


def load_cohort(cohort_dir):
    """Load a persisted cohort; returns (cohort_id, list of PhantomRecord)."""
    path = os.path.join(cohort_dir, MANIFEST_NAME)
    with open(path) as f:
        manifest = json.load(f)
    records = []
    for entry in manifest["records"]:
        baseline = rawio.read_image(os.path.join(cohort_dir, entry["baseline_file"]))
        dose = rawio.read_image(os.path.join(cohort_dir, entry["dose_file"]))[:, :, 0]
        records.append(PhantomRecord(
            id=entry["id"],
            params=PhantomParams.from_dict(entry["params"]),
            baseline=baseline,
            dose=dose,
            followup_days=list(entry["followup_days"]),
            slice_label=SliceLabel(entry["slice_label"]),
        ))
    return manifest["cohort_id"], records
