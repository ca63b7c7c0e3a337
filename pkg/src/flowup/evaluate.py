"""Evaluation pipeline: patient-level splits, identity baseline, reports.

Predictions are scored against the analytic follow-up at the record's own
acquisition days under the canonical treatment context (adjuvant TMZ, dose
scale 1.0, mirroring the prescribed treatment). Every report carries an
identity-baseline row block: the metrics of simply presenting the baseline
image as the prediction, the floor a generative predictor must beat.
"""

import dataclasses
import hashlib
import json
import math

import numpy as np
from scipy import stats

from . import metrics as metrics_mod
from . import morpho, phantom
from .metrics import SegLabel, compare_images, dice, segment
from .model import ModelCheckpoint, build_conditioning, model_from_checkpoint
from .phantom import ChemoArm, TreatmentContext, oracle_followup, oracle_label_mask
from .sampling import SampleSpec, euler_sample

EVAL_CHEMO = ChemoArm.ADJUVANT_TMZ
EVAL_DOSE_SCALE = 1.0

# Fractions follow the reference cohort proportions (21/2/2 out of 25).
VAL_FRACTION = 2.0 / 25.0
TEST_FRACTION = 2.0 / 25.0


def patient_split(records, seed: int = 0) -> dict:
    """Deterministic patient-level train/val/test split (no slice leakage)."""
    n = len(records)
    n_val = max(1, round(n * VAL_FRACTION))
    n_test = max(1, round(n * TEST_FRACTION))
    if n - n_val - n_test < 1:
        raise ValueError(f"cohort of {n} leaves no training patients after the split")
    order = np.argsort([r.id for r in records])
    rng = np.random.default_rng(seed)
    rng.shuffle(order)
    test_idx = order[:n_test]
    val_idx = order[n_test:n_test + n_val]
    train_idx = order[n_test + n_val:]
    return {"train": [records[i] for i in sorted(train_idx)],
            "val": [records[i] for i in sorted(val_idx)],
            "test": [records[i] for i in sorted(test_idx)]}


def config_hash(config) -> str:
    payload = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:12]


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _row_dict(pm: metrics_mod.PairMetrics) -> dict:
    return {k: _jsonable(v) for k, v in dataclasses.asdict(pm).items()}


def evaluate_records(ckpt: ModelCheckpoint, records, n_steps: int = 4,
                     seed: int = 0, include_morphometry: bool = True,
                     field_sink=None) -> dict:
    """Per-image and aggregate metrics for a set of records.

    Each (record, follow-up day) pair contributes one row with model metrics,
    identity-baseline metrics, Dice against the analytic oracle masks, and
    (optionally) the paired registration morphometry. ``field_sink`` receives
    (record_id, day, kind, displacement_field) for every registration so the
    CLI can persist the fields in the raw 2-channel format.
    """
    net = model_from_checkpoint(ckpt)
    rows = []
    morpho_real, morpho_pred = [], []
    row_index = 0
    for rec in records:
        for day in rec.followup_days:
            ctx = TreatmentContext(int(day), EVAL_CHEMO, EVAL_DOSE_SCALE)
            fu = oracle_followup(rec, ctx)
            bundle = build_conditioning(net.config, rec.baseline, rec.dose, ctx)
            pred = euler_sample(net, bundle, SampleSpec(n_steps=n_steps,
                                                        seed=seed + row_index))
            oracle_mask = oracle_label_mask(rec, ctx)
            pred_mask = segment(pred)
            base_mask = segment(rec.baseline)
            row = {
                "record_id": rec.id,
                "day": int(day),
                "model": _row_dict(compare_images(pred, fu)),
                "identity": _row_dict(compare_images(rec.baseline, fu)),
                "model_dice_tissue_oracle": dice(pred_mask, oracle_mask, SegLabel.TISSUE),
                "model_dice_csf_oracle": dice(pred_mask, oracle_mask, SegLabel.CSF),
                "identity_dice_tissue_oracle": dice(base_mask, oracle_mask, SegLabel.TISSUE),
                "identity_dice_csf_oracle": dice(base_mask, oracle_mask, SegLabel.CSF),
            }
            if include_morphometry:
                base_t1 = rec.baseline[:, :, 0]
                field_real = morpho.register(fu[:, :, 0], base_t1)
                field_pred = morpho.register(pred[:, :, 0], base_t1)
                comp = morpho.MorphometryComparison(
                    real=morpho.jacobian_stats(morpho.log_jacobian(field_real), base_mask),
                    pred=morpho.jacobian_stats(morpho.log_jacobian(field_pred), base_mask))
                row["morphometry"] = comp.to_dict()
                morpho_real.append(comp.real)
                morpho_pred.append(comp.pred)
                if field_sink is not None:
                    field_sink(rec.id, int(day), "real", field_real)
                    field_sink(rec.id, int(day), "pred", field_pred)
            rows.append(row)
            row_index += 1

    model_rows = [compare_from_dict(r["model"]) for r in rows]
    ident_rows = [compare_from_dict(r["identity"]) for r in rows]
    report = {
        "n_steps": n_steps,
        "seed": seed,
        "config_hash": config_hash(ckpt.config),
        "context_policy": {"chemo": EVAL_CHEMO.value, "dose_scale": EVAL_DOSE_SCALE},
        "rows": rows,
        "model": metrics_mod.aggregate(model_rows),
        "identity": metrics_mod.aggregate(ident_rows),
        "oracle_mask_dice": {
            "model_tissue_mean": float(np.mean([r["model_dice_tissue_oracle"] for r in rows])),
            "model_csf_mean": float(np.mean([r["model_dice_csf_oracle"] for r in rows])),
            "identity_tissue_mean": float(np.mean([r["identity_dice_tissue_oracle"] for r in rows])),
            "identity_csf_mean": float(np.mean([r["identity_dice_csf_oracle"] for r in rows])),
        },
    }
    if include_morphometry and morpho_real:
        report["morphometry"] = {
            "real_mean_abs_brain": float(np.mean([s.mean_abs_brain for s in morpho_real])),
            "pred_mean_abs_brain": float(np.mean([s.mean_abs_brain for s in morpho_pred])),
            "real_mean_tissue": float(np.mean([s.mean_tissue for s in morpho_real])),
            "pred_mean_tissue": float(np.mean([s.mean_tissue for s in morpho_pred])),
            "real_mean_csf": float(np.mean([s.mean_csf for s in morpho_real])),
            "pred_mean_csf": float(np.mean([s.mean_csf for s in morpho_pred])),
        }
    report["volume_tests"] = _volume_tests(rows)
    return report


def compare_from_dict(d: dict) -> metrics_mod.PairMetrics:
    clean = dict(d)
    if clean.get("psnr") is None:
        clean["psnr"] = math.inf
    return metrics_mod.PairMetrics(**clean)


def _volume_tests(rows) -> dict:
    """Paired two-sided Wilcoxon signed-rank on per-slice class areas.

    The choice of test is an implementation decision recorded here, not a
    claim inherited from any reference pipeline.
    """
    out = {"method": "wilcoxon_signed_rank_two_sided"}
    for cls in ("csf", "tissue"):
        pred = np.array([r["model"][f"pred_area_{cls}"] for r in rows], dtype=float)
        real = np.array([r["model"][f"ref_area_{cls}"] for r in rows], dtype=float)
        if len(pred) < 2 or np.all(pred == real):
            out[f"p_{cls}"] = 1.0
            continue
        try:
            out[f"p_{cls}"] = float(stats.wilcoxon(pred, real).pvalue)
        except ValueError:
            out[f"p_{cls}"] = 1.0
    return out


def evaluate_split(ckpt: ModelCheckpoint, records, split: str = "test",
                   split_seed: int = 0, **kwargs) -> dict:
    """Evaluate one side of the deterministic patient split."""
    parts = patient_split(records, seed=split_seed)
    if split not in parts:
        raise ValueError(f"unknown split '{split}'")
    if not parts[split]:
        raise ValueError(f"split '{split}' has zero patients")
    report = evaluate_records(ckpt, parts[split], **kwargs)
    report["split"] = {
        "name": split,
        "seed": split_seed,
        "sizes": {k: len(v) for k, v in parts.items()},
        "record_ids": [r.id for r in parts[split]],
    }
    return report
