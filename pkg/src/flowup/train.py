"""Rectified-flow training of the conditional velocity network.

One training example pairs a baseline/dose/context conditioning bundle with
the analytic follow-up image x1. Noise x0 and path time t are sampled fresh
per example, the network is evaluated at x_t = (1-t) x0 + t x1, and the mean
absolute error against the true path velocity x1 - x0 is minimized with Adam
under gradient accumulation. Validation loss (fixed noise/time protocol, so
epochs are comparable) selects the returned checkpoint.

Treatment contexts are augmented during training: the follow-up day is drawn
from the record's acquisition days while the chemotherapy arm and dose scale
are randomized, so the network sees the whole counterfactual input space the
oracle can label.
"""

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
import torch

from . import model as model_mod
from . import phantom
from .model import (CHEMO_ORDER, ConditioningBundle, ModelCheckpoint,
                    ModelConfig, VelocityUNet, build_conditioning,
                    image_to_tensor, init_model, model_to_checkpoint,
                    stack_conditioning)
from .phantom import TreatmentContext, balanced_sampler, oracle_followup


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


class NumericError(FloatingPointError):
    """A forward pass produced non-finite activations."""


@dataclass(frozen=True)
class TrainHyper:
    batch: int = 8
    grad_accum: int = 2
    lr: float = 1e-3
    lr_min_factor: float = 0.1   # cosine-decay floor as a fraction of lr
    epochs: int = 40
    steps_per_epoch: int = 40
    seed: int = 0
    dose_scale_range: tuple = (0.75, 1.25)
    deterministic: bool = True   # pin torch to one thread for bit reproducibility

    def __post_init__(self):
        if self.batch < 1 or self.grad_accum < 1 or self.steps_per_epoch < 1:
            raise ValueError("batch, grad_accum and steps_per_epoch must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0 < self.lr_min_factor <= 1:
            raise ValueError("lr_min_factor must be in (0, 1]")

    def to_dict(self):
        return dataclasses.asdict(self)

    def lr_at(self, epoch: int) -> float:
        """Cosine decay from lr to lr * lr_min_factor over the run."""
        if self.epochs <= 1:
            return self.lr
        frac = epoch / (self.epochs - 1)
        lo = self.lr * self.lr_min_factor
        return lo + 0.5 * (self.lr - lo) * (1.0 + math.cos(math.pi * frac))


def interpolate_path(x0: torch.Tensor, x1: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Straight path x_t = (1 - t) x0 + t x1; exact at both endpoints."""
    tb = t.reshape(-1, *([1] * (x1.ndim - 1))).to(x1.dtype)
    return (1.0 - tb) * x0 + tb * x1


def _first_nonfinite_layer(model, x_t, t, bundle) -> str:
    bad = []

    def make_hook(name):
        def hook(_mod, _inp, out):
            if bad:
                return
            outs = out if isinstance(out, (tuple, list)) else (out,)
            for o in outs:
                if torch.is_tensor(o) and not torch.isfinite(o).all():
                    bad.append(name)
                    return
        return hook

    handles = [mod.register_forward_hook(make_hook(name))
               for name, mod in model.named_modules() if name]
    try:
        with torch.no_grad():
            model(x_t, t, bundle)
    finally:
        for h in handles:
            h.remove()
    return bad[0] if bad else "<input>"


def flow_loss(model: VelocityUNet, x1: torch.Tensor, bundle: ConditioningBundle,
              generator: torch.Generator | None = None,
              x0: torch.Tensor | None = None,
              t: torch.Tensor | None = None) -> torch.Tensor:
    """Mean-absolute-error velocity-matching loss.

    x0 and t are sampled from ``generator`` unless given explicitly (tests
    pin them for closed-form checks).
    """
    if x0 is None:
        x0 = torch.randn(x1.shape, generator=generator, dtype=x1.dtype)
    if t is None:
        t = torch.rand(x1.shape[0], generator=generator, dtype=x1.dtype)
    x_t = interpolate_path(x0, x1, t)
    v_target = x1 - x0
    v_pred = model(x_t, t, bundle)
    if not torch.isfinite(v_pred).all():
        layer = _first_nonfinite_layer(model, x_t, t, bundle)
        raise NumericError(f"non-finite activations in layer '{layer}'")
    return (v_pred - v_target).abs().mean()


def rf_loss(model: VelocityUNet, x1: torch.Tensor, bundle: ConditioningBundle,
            generator: torch.Generator | None = None,
            x0: torch.Tensor | None = None,
            t: torch.Tensor | None = None):
    """Loss plus analytic gradients for every weight.

    The |.| subgradient at zero is 0, so the gradients are deterministic.
    Returns (loss value, {parameter name -> gradient array}).
    """
    model.zero_grad(set_to_none=True)
    loss = flow_loss(model, x1, bundle, generator=generator, x0=x0, t=t)
    loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        g = p.grad
        grads[name] = (torch.zeros_like(p) if g is None else g).detach().cpu().numpy().copy()
    model.zero_grad(set_to_none=True)
    return float(loss.detach()), grads


# Untreated contexts are upweighted so the edema-versus-chemotherapy contrast
# is seen often enough to be learned.
CHEMO_SAMPLING_WEIGHTS = (0.4, 0.3, 0.3)


def _sample_context(record, ctx_rng, hyper) -> TreatmentContext:
    day = int(ctx_rng.choice(record.followup_days))
    chemo = CHEMO_ORDER[int(ctx_rng.choice(len(CHEMO_ORDER), p=CHEMO_SAMPLING_WEIGHTS))]
    lo, hi = hyper.dose_scale_range
    return TreatmentContext(day, chemo, float(ctx_rng.uniform(lo, hi)))


def _make_batch(records, config, contexts):
    bundles, targets = [], []
    for rec, ctx in zip(records, contexts):
        bundles.append(build_conditioning(config, rec.baseline, rec.dose, ctx))
        targets.append(image_to_tensor(oracle_followup(rec, ctx)))
    return torch.stack(targets), stack_conditioning(bundles)


def validation_loss(model: VelocityUNet, records, seed: int = 4242,
                    chunk: int = 16) -> float:
    """Deterministic validation loss over every follow-up day of ``records``.

    Context assignment cycles the chemo arms and dose scales, and the noise
    and path times come from a fixed-seed generator, so two calls (and hence
    two epochs) are directly comparable.
    """
    config = model.config
    scales = (0.8, 1.0, 1.2)
    items = []
    for i, rec in enumerate(records):
        for j, day in enumerate(rec.followup_days):
            ctx = TreatmentContext(int(day), CHEMO_ORDER[(i + j) % len(CHEMO_ORDER)],
                                   scales[(i + j) % len(scales)])
            items.append((rec, ctx))
    gen = torch.Generator().manual_seed(seed)
    total, count = 0.0, 0
    with torch.no_grad():
        for k in range(0, len(items), chunk):
            part = items[k:k + chunk]
            x1, bundle = _make_batch([r for r, _ in part], config, [c for _, c in part])
            loss = flow_loss(model, x1, bundle, generator=gen)
            total += float(loss) * len(part)
            count += len(part)
    return total / count


def train(train_records, config: ModelConfig, hyper: TrainHyper = TrainHyper(),
          val_records=None) -> ModelCheckpoint:
    """Train the velocity network; returns the lowest-validation-loss weights.

    With ``hyper.deterministic`` (single torch thread) the result is
    bit-reproducible for a fixed seed. ``epochs == 0`` returns the untouched
    initialized network with an empty loss history.
    """
    if not train_records:
        raise ValueError("empty training cohort")
    if val_records is None:
        val_records = train_records

    old_threads = torch.get_num_threads()
    if hyper.deterministic:
        torch.set_num_threads(1)
    try:
        return _train_loop(train_records, config, hyper, val_records)
    finally:
        torch.set_num_threads(old_threads)


def _train_loop(train_records, config, hyper, val_records):
    net = init_model(config, hyper.seed)
    opt = torch.optim.Adam(net.parameters(), lr=hyper.lr, betas=(0.9, 0.999))
    sampler = balanced_sampler(train_records, seed=hyper.seed + 1)
    ctx_rng = np.random.default_rng(hyper.seed + 2)
    noise_gen = torch.Generator().manual_seed(hyper.seed + 3)

    history = {"train": [], "val": []}
    best_val = math.inf
    best_state = None
    best_epoch = -1

    for epoch in range(hyper.epochs):
        net.train()
        for group in opt.param_groups:
            group["lr"] = hyper.lr_at(epoch)
        epoch_loss, n_micro = 0.0, 0
        for _ in range(hyper.steps_per_epoch):
            opt.zero_grad(set_to_none=True)
            for _ in range(hyper.grad_accum):
                records = [next(sampler) for _ in range(hyper.batch)]
                contexts = [_sample_context(r, ctx_rng, hyper) for r in records]
                x1, bundle = _make_batch(records, config, contexts)
                try:
                    loss = flow_loss(net, x1, bundle, generator=noise_gen)
                except NumericError as e:
                    raise TrainingError(
                        f"training diverged at epoch {epoch}: {e}") from e
                (loss / hyper.grad_accum).backward()
                epoch_loss += float(loss.detach())
                n_micro += 1
            opt.step()
        mean_train = epoch_loss / n_micro
        if not math.isfinite(mean_train):
            raise TrainingError(f"training loss diverged at epoch {epoch}")
        net.eval()
        val = validation_loss(net, val_records, seed=hyper.seed + 9999)
        if not math.isfinite(val):
            raise TrainingError(f"validation loss diverged at epoch {epoch}")
        history["train"].append(mean_train)
        history["val"].append(val)
        if val < best_val:
            best_val = val
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in net.state_dict().items()}

    if best_state is not None:
        net.load_state_dict(best_state)
    net.eval()
    metadata = {
        "seed": hyper.seed,
        "epochs": hyper.epochs,
        "best_epoch": best_epoch,
        "loss_history": history,
        "hyper": hyper.to_dict(),
    }
    return model_to_checkpoint(net, metadata)
