"""Optimization: Adam, the unsupervised and supervised training loops, and
the direct coarse-to-fine per-pair field optimizer."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field as dc_field
from enum import Enum
from typing import Optional

import numpy as np

from .errors import DivergenceError, ShapeError
from .losses import (
    LossConfig,
    LossReport,
    ScaleInputs,
    epe_loss,
    overlap_loss,
    photometric_loss,
    smoothness_loss,
    total_loss,
)
from .ndgrad import Tape, Tensor
from .ndgrad.ops import add, chw_to_hwc, scalar_mul, slice_
from .pyramid import build_array_pyramid, build_field_pyramid, pad_to_pyramid
from .regnet import forward as regnet_forward
from .regnet import forward_batch, serialize, deserialize
from .warp import DeformationField, Image2D, bilinear_warp, upsample_field

logger = logging.getLogger("deformreg")

DIVERGENCE_FACTOR = 10.0


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam moments plus hyperparameters; weight decay is decoupled."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict = dc_field(default_factory=dict)
    v: dict = dc_field(default_factory=dict)

    @classmethod
    def create(cls, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
        for name, t in params.items():
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        return state


def adam_step(state, params, grads):
    """One decoupled-weight-decay Adam update, in place.

    A non-finite gradient skips the whole step (moments and step count
    untouched) and logs the offending parameter.
    """
    for name, g in grads.items():
        if g is None or not np.all(np.isfinite(g)):
            logger.warning("adam_step: non-finite gradient for %r, step skipped", name)
            return False
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        if state.weight_decay:
            p.data = p.data - state.lr * state.weight_decay * p.data
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return True


# ---------------------------------------------------------------------------
# datasets and training configuration
# ---------------------------------------------------------------------------


class TrainMode(Enum):
    UNSUPERVISED = "unsupervised"
    SUPERVISED_EPE = "supervised"


@dataclass
class RegPair:
    """One (fixed, moving) training/evaluation pair with optional annotations."""

    fixed: Image2D
    moving: Image2D
    gt_field: Optional[DeformationField] = None
    fixed_mask: Optional[np.ndarray] = None
    moving_mask: Optional[np.ndarray] = None
    fixed_landmarks: Optional[object] = None
    moving_landmarks: Optional[object] = None
    pair_id: str = ""


class PairDataset:
    """Ordered collection of same-sized registration pairs."""

    def __init__(self, pairs):
        self.pairs = list(pairs)
        if not self.pairs:
            raise ShapeError("PairDataset: empty dataset")
        hw = self.pairs[0].fixed.shape
        for i, p in enumerate(self.pairs):
            if p.fixed.shape != hw or p.moving.shape != hw:
                raise ShapeError(
                    f"PairDataset: pair {i} has size {p.fixed.shape}/{p.moving.shape}, "
                    f"expected {hw}"
                )

    @property
    def size_hw(self):
        return self.pairs[0].fixed.shape

    @property
    def has_fields(self):
        return all(p.gt_field is not None for p in self.pairs)

    @property
    def has_masks(self):
        return all(p.fixed_mask is not None and p.moving_mask is not None for p in self.pairs)

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]


@dataclass
class TrainConfig:
    """Training schedule: constant lr, halved once after ``halve_after_epochs``,
    then ``extra_epochs`` more. Default lrs follow the published setup
    (1e-5 unsupervised, 1e-4 supervised)."""

    mode: TrainMode = TrainMode.UNSUPERVISED
    batch_size: int = 8
    initial_lr: Optional[float] = None
    halve_after_epochs: int = 10
    extra_epochs: int = 7
    seed: int = 0
    loss: Optional[LossConfig] = None
    weight_decay: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999

    def __post_init__(self):
        if self.batch_size < 1 or self.halve_after_epochs < 1 or self.extra_epochs < 0:
            raise ShapeError("TrainConfig: counts must be positive")
        if self.initial_lr is None:
            self.initial_lr = 1e-5 if self.mode is TrainMode.UNSUPERVISED else 1e-4
        if self.initial_lr <= 0:
            raise ShapeError(f"TrainConfig: lr must be > 0, got {self.initial_lr}")

    @property
    def total_epochs(self):
        return self.halve_after_epochs + self.extra_epochs

    def lr_at_epoch(self, epoch):
        """Learning rate for a 1-based epoch index."""
        return self.initial_lr * (0.5 if epoch > self.halve_after_epochs else 1.0)


@dataclass
class EpochStats:
    epoch: int
    lr: float
    photometric: float
    smoothness: float
    overlap: float
    total: float


def history_to_csv(history, path):
    lines = ["epoch,lr,photometric,smooth,overlap,total"]
    for st in history:
        lines.append(
            f"{st.epoch},{st.lr:.8g},{st.photometric:.8g},{st.smoothness:.8g},"
            f"{st.overlap:.8g},{st.total:.8g}"
        )
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def check_divergence(current_mean, first_mean):
    """Raise when an epoch mean exceeds the divergence guard."""
    if current_mean > DIVERGENCE_FACTOR * first_mean and first_mean > 0:
        raise DivergenceError(
            f"training diverged: epoch mean loss {current_mean:.6g} exceeds "
            f"{DIVERGENCE_FACTOR:.0f}x the first epoch mean {first_mean:.6g}"
        )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _pyramids_for(dataset, scale_count, with_masks, with_fields):
    fixed_pyr, moving_pyr, mask_f_pyr, mask_m_pyr, field_pyr = [], [], [], [], []
    for p in dataset.pairs:
        fixed_pyr.append(build_array_pyramid(p.fixed.pixels, scale_count))
        moving_pyr.append(build_array_pyramid(p.moving.pixels, scale_count))
        if with_masks:
            mask_f_pyr.append(build_array_pyramid(p.fixed_mask.astype(np.float32), scale_count))
            mask_m_pyr.append(build_array_pyramid(p.moving_mask.astype(np.float32), scale_count))
        if with_fields:
            field_pyr.append(build_field_pyramid(p.gt_field, scale_count))
    return fixed_pyr, moving_pyr, mask_f_pyr, mask_m_pyr, field_pyr


def _unsupervised_sample_loss(flows, n, fixed_levels, moving_levels, mask_levels, config):
    """Eq.-5 style total for one batch element: warp each scale, then weight."""
    scales = []
    for s, flow in enumerate(flows):
        field = chw_to_hwc(slice_(flow, (n,)))
        warped = bilinear_warp(Tensor(moving_levels[s]), field)
        warped_mask = fixed_mask = None
        if mask_levels is not None:
            warped_mask = bilinear_warp(Tensor(mask_levels[0][s]), field)
            fixed_mask = Tensor(mask_levels[1][s])
        scales.append(ScaleInputs(warped, Tensor(fixed_levels[s]), field, warped_mask, fixed_mask))
    return total_loss(scales, config)


def _supervised_sample_loss(flows, n, field_levels):
    """Endpoint error against the downsampled ground truth, summed over scales."""
    loss = None
    finest = None
    for s, flow in enumerate(flows):
        pred = chw_to_hwc(slice_(flow, (n,)))
        term = epe_loss(pred, Tensor(field_levels[s]))
        if s == 0:
            finest = term.item()
        loss = term if loss is None else add(loss, term)
    return loss, finest


def train(model, dataset, config, log_every=0):
    """Train ``model`` on ``dataset``; returns (model, per-epoch history).

    Unsupervised mode backpropagates the multi-scale photometric +
    smoothness (+ optional mask overlap) total through warp and network;
    supervised mode regresses the per-scale fields against ground truth
    via the endpoint error. Shuffling, batching and updates are fully
    seeded and deterministic.
    """
    arch = model.arch
    h, w = dataset.size_hw
    div = 1 << (arch.levels - 1)
    if h % div or w % div:
        raise ShapeError(
            f"train: dataset size {h}x{w} must divide by 2^{arch.levels - 1}={div}; "
            "pad the images first (pad_to_pyramid)"
        )
    supervised = config.mode is TrainMode.SUPERVISED_EPE
    if supervised and not dataset.has_fields:
        raise ShapeError("train: supervised mode requires ground-truth fields on every pair")
    loss_config = config.loss or LossConfig.default(arch.levels)
    if loss_config.scale_count != arch.levels:
        raise ShapeError(
            f"train: loss config has {loss_config.scale_count} scales, arch has {arch.levels}"
        )
    use_masks = (
        not supervised
        and loss_config.gamma is not None
        and dataset.has_masks
    )

    fixed_pyr, moving_pyr, mask_f_pyr, mask_m_pyr, field_pyr = _pyramids_for(
        dataset, arch.levels, use_masks, supervised
    )

    state = AdamState.create(
        model.params,
        lr=config.initial_lr,
        beta1=config.beta1,
        beta2=config.beta2,
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(config.seed)
    history = []
    first_epoch_mean = None

    for epoch in range(1, config.total_epochs + 1):
        state.lr = config.lr_at_epoch(epoch)
        order = rng.permutation(len(dataset))
        sums = np.zeros(4)  # photometric, smooth, overlap, total
        batches = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = np.stack(
                [np.stack([fixed_pyr[i][0], moving_pyr[i][0]]) for i in idx]
            ).astype(np.float32)
            with Tape() as tape:
                flows = forward_batch(model, Tensor(batch))
                batch_loss = None
                report_acc = np.zeros(4)
                for k, i in enumerate(idx):
                    if supervised:
                        sample_loss, finest = _supervised_sample_loss(flows, k, field_pyr[i])
                        report_acc += (finest, 0.0, 0.0, sample_loss.item())
                    else:
                        masks = (mask_m_pyr[i], mask_f_pyr[i]) if use_masks else None
                        sample_loss, report = _unsupervised_sample_loss(
                            flows, k, fixed_pyr[i], moving_pyr[i], masks, loss_config
                        )
                        report_acc += (
                            float(np.sum(report.photometric)),
                            float(np.sum(report.smoothness)),
                            float(np.sum(report.overlap)),
                            report.total,
                        )
                    batch_loss = sample_loss if batch_loss is None else add(batch_loss, sample_loss)
                batch_loss = scalar_mul(batch_loss, 1.0 / len(idx))
            tape.backward(batch_loss)
            grads = {name: t.grad for name, t in model.params.items()}
            adam_step(state, model.params, grads)
            model.zero_grads()
            sums += report_acc / len(idx)
            batches += 1
        means = sums / batches
        stats = EpochStats(epoch, state.lr, means[0], means[1], means[2], means[3])
        history.append(stats)
        if log_every and epoch % log_every == 0:
            logger.info(
                "epoch %d lr %.2g photometric %.5g smooth %.5g total %.5g",
                epoch, state.lr, stats.photometric, stats.smoothness, stats.total,
            )
        if first_epoch_mean is None:
            first_epoch_mean = stats.total
        else:
            check_divergence(stats.total, first_epoch_mean)
    return model, history, state


# ---------------------------------------------------------------------------
# direct per-pair field optimization (coarse to fine)
# ---------------------------------------------------------------------------


def default_scale_count(hw):
    """7 scales at 256 px and above (the published setting), otherwise as
    many scales as keep the coarsest level at 8 px."""
    m = min(hw)
    if m >= 256:
        return 7
    count = 1
    while m % 2 == 0 and m // 2 >= 8:
        m //= 2
        count += 1
    return count


OPTIMIZE_DEFAULT_BETA = 0.01


def optimize_field(
    fixed,
    moving,
    loss_config=None,
    iterations=200,
    lr=0.1,
    masks=None,
    scale_count=None,
):
    """Optimize a deformation field directly for one image pair.

    Runs Adam on the field itself, coarse to fine: start from zero at the
    coarsest pyramid level, minimize that level's weighted photometric +
    smoothness (+ overlap) terms, then upsample (doubling magnitudes) to
    seed the next level. The best-loss iterate of each level is carried
    forward, so the per-level loss never ends above its starting value.

    The default loss config uses a weaker smoothness weight (beta 0.01)
    than the training default: a per-pair fit needs less regularization
    than a predictor that must generalize.

    Returns (DeformationField at full resolution, LossReport).
    """
    fixed_arr = fixed.pixels if isinstance(fixed, Image2D) else np.asarray(fixed, dtype=np.float32)
    moving_arr = moving.pixels if isinstance(moving, Image2D) else np.asarray(moving, dtype=np.float32)
    if fixed_arr.shape != moving_arr.shape:
        raise ShapeError(f"optimize_field: sizes differ: {fixed_arr.shape} vs {moving_arr.shape}")
    if scale_count is None:
        scale_count = loss_config.scale_count if loss_config else default_scale_count(fixed_arr.shape)
    config = loss_config or LossConfig(
        alpha=[1.0] * scale_count, beta=[OPTIMIZE_DEFAULT_BETA] * scale_count
    )
    if config.scale_count != scale_count:
        raise ShapeError(
            f"optimize_field: loss config has {config.scale_count} scales, expected {scale_count}"
        )
    iters = [iterations] * scale_count if np.isscalar(iterations) else list(iterations)
    if len(iters) != scale_count:
        raise ShapeError(f"optimize_field: {len(iters)} iteration counts for {scale_count} scales")

    fixed_levels = build_array_pyramid(fixed_arr, scale_count)
    moving_levels = build_array_pyramid(moving_arr, scale_count)
    mask_levels = None
    if masks is not None and config.gamma is not None:
        moving_mask, fixed_mask = masks
        mask_levels = (
            build_array_pyramid(np.asarray(moving_mask, dtype=np.float32), scale_count),
            build_array_pyramid(np.asarray(fixed_mask, dtype=np.float32), scale_count),
        )

    report = LossReport(
        photometric=[0.0] * scale_count,
        smoothness=[0.0] * scale_count,
        overlap=[0.0] * scale_count,
    )
    field_data = None
    for s in range(scale_count - 1, -1, -1):  # coarsest first
        if field_data is None:
            field_data = np.zeros(fixed_levels[s].shape + (2,), dtype=np.float32)
        fixed_t = Tensor(fixed_levels[s])
        moving_t = Tensor(moving_levels[s])
        field = Tensor(field_data, requires_grad=True)
        state = AdamState.create({"field": field}, lr=lr, weight_decay=0.0)

        def level_loss(field_t):
            warped = bilinear_warp(moving_t, field_t)
            photo = photometric_loss(warped, fixed_t, config.reduction)
            smooth = smoothness_loss(field_t, fixed_t, config.smooth_variant, config.reduction)
            parts = [photo.item(), smooth.item(), 0.0]
            term = add(scalar_mul(photo, config.alpha[s]), scalar_mul(smooth, config.beta[s]))
            if mask_levels is not None:
                wm = bilinear_warp(Tensor(mask_levels[0][s]), field_t)
                ov = overlap_loss(wm, Tensor(mask_levels[1][s]), config.reduction)
                parts[2] = ov.item()
                term = add(term, scalar_mul(ov, config.gamma[s]))
            return term, parts

        best = None
        start_loss = None
        window = []
        for _ in range(iters[s] + 1):  # +1 so the final iterate is scored too
            with Tape() as tape:
                loss, parts = level_loss(field)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"optimize_field: non-finite loss at scale {s}")
            if start_loss is None:
                start_loss = value
            if best is None or value < best[0]:
                best = (value, field.data.copy(), parts)
            # divergence guard: a sustained (windowed) blow-up past 10x the
            # level-start loss with no progress at all; transient Adam
            # spikes are harmless because the best iterate is kept
            window.append(value)
            if len(window) == 50:
                window_mean = float(np.mean(window))
                window = []
                if (
                    start_loss > 0
                    and window_mean > DIVERGENCE_FACTOR * start_loss
                    and best[0] >= start_loss
                ):
                    raise DivergenceError(
                        f"optimize_field diverged at scale {s}: windowed loss "
                        f"{window_mean:.6g} vs start {start_loss:.6g} with no improvement"
                    )
            tape.backward(loss)
            adam_step(state, {"field": field}, {"field": field.grad})
            field.grad = None
        _, best_field, best_parts = best
        report.photometric[s], report.smoothness[s], report.overlap[s] = best_parts
        field_data = best_field
        if s > 0:
            field_data = upsample_field(Tensor(field_data)).data
    report.total = report.recompute_total(config)
    return DeformationField(field_data), report


# ---------------------------------------------------------------------------
# inference and checkpoints
# ---------------------------------------------------------------------------


def register(model, fixed, moving):
    """One forward pass plus one warp; no gradients.

    Images that do not divide into the model's pyramid are reflect-padded
    and the outputs cropped back. Returns (DeformationField, warped Image2D).
    """
    fixed_img = fixed if isinstance(fixed, Image2D) else Image2D(fixed)
    moving_img = moving if isinstance(moving, Image2D) else Image2D(moving)
    if fixed_img.shape != moving_img.shape:
        raise ShapeError(f"register: sizes differ: {fixed_img.shape} vs {moving_img.shape}")
    padded_fixed, crop = pad_to_pyramid(fixed_img, model.arch.levels)
    padded_moving, _ = pad_to_pyramid(moving_img, model.arch.levels)
    flows = regnet_forward(model, padded_fixed, padded_moving)
    finest = flows[0].data
    warped = bilinear_warp(padded_moving.pixels, finest).data
    return (
        DeformationField(crop.crop_field(finest)),
        Image2D(crop.crop_image(warped)),
    )


ADAM_HYPER_BLOCK = "adam.hyper"


def save_checkpoint(path, model, state=None):
    """Model parameters plus optional Adam state in one named-block file."""
    extra = {}
    if state is not None:
        extra[ADAM_HYPER_BLOCK] = np.array(
            [state.lr, state.beta1, state.beta2, state.eps, state.weight_decay,
             float(state.step_count)],
            dtype=np.float32,
        )
        for name, arr in state.m.items():
            extra[f"adam.m.{name}"] = arr
        for name, arr in state.v.items():
            extra[f"adam.v.{name}"] = arr
    data = serialize(model, extra)
    with open(path, "wb") as f:
        f.write(data)


def load_checkpoint(path):
    """Returns (model, AdamState or None)."""
    with open(path, "rb") as f:
        data = f.read()
    model, extra = deserialize(data)
    if ADAM_HYPER_BLOCK not in extra:
        return model, None
    hyper = extra[ADAM_HYPER_BLOCK]
    state = AdamState(
        lr=float(hyper[0]),
        beta1=float(hyper[1]),
        beta2=float(hyper[2]),
        eps=float(hyper[3]),
        weight_decay=float(hyper[4]),
        step_count=int(hyper[5]),
    )
    for name in model.params:
        state.m[name] = extra[f"adam.m.{name}"]
        state.v[name] = extra[f"adam.v.{name}"]
    return model, state


def register_timed(model, fixed, moving):
    """register() plus its wall-clock runtime in seconds."""
    t0 = time.perf_counter()
    field, warped = register(model, fixed, moving)
    return field, warped, time.perf_counter() - t0
