"""Pipeline assembly and training.

Data flow per sample:

    features -> 1x1 channel mix + ReLU (optional) -> kernel or covariance
    aggregation -> bilinear compression on the orthonormal-column manifold
    -> (optional elementwise ReLU) -> upper-triangle vectorization ->
    power normalization -> l2 normalization -> dense softmax cross-entropy

Training follows plain SGD in two stages: stage 1 freezes the channel
mixer and trains the new layers, stage 2 fine-tunes everything.  The
compression parameters are updated by tangent projection + QR retraction;
everything else by vanilla ``theta -= lr * grad``.  The loop is
single-threaded and consumes randomness only from one seeded generator,
so one (seed, config, dataset) triple yields one bit-exact run.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError, ShapeMismatchError
from .head import (
    DenseGrads,
    DenseParams,
    dense_logits,
    dense_softmax_ce,
    l2_normalize,
    l2_normalize_backward,
    L2Tape,
    power_normalize,
    power_normalize_backward,
    vectorize,
    vectorize_backward,
)
from .kernel import (
    KernelTape,
    covariance_backward,
    covariance_forward,
    kernel_backward,
    kernel_forward,
)
from .linalg import matmul, seeded_rng
from .stiefel import (
    StiefelPoint,
    TransformTape,
    renormalize,
    retract_step,
    spd_relu,
    spd_relu_mask,
    stiefel_init,
    tangent_project,
    transform_backward_input,
    transform_backward_param,
    transform_forward,
)

__all__ = [
    "NormFlags",
    "PipelineConfig",
    "TrainConfig",
    "MixParams",
    "Params",
    "Grads",
    "MetricsRecord",
    "GradCheckReport",
    "init_params",
    "mix_forward",
    "mix_backward",
    "forward",
    "predict",
    "backward",
    "evaluate_accuracy",
    "train",
    "grad_check",
    "gradcheck_instance",
]

#: Epoch-loss improvement below this counts as a plateau epoch.
MIN_LOSS_DELTA = 1e-4

#: Every this many optimizer steps the compression matrix is re-retracted
#: to bound orthonormality drift.
RENORM_INTERVAL = 100


@dataclass(frozen=True)
class NormFlags:
    power: bool = True
    l2: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    """Architecture knobs.  ``mixed_channels = 0`` skips the 1x1 mixer."""

    in_channels: int
    mixed_channels: int
    transform_dim: int
    num_classes: int
    use_spd_relu: bool = False
    aggregator: str = "kernel"
    normalizations: NormFlags = NormFlags()

    def __post_init__(self):
        if self.in_channels < 1 or self.transform_dim < 1 or self.num_classes < 1:
            raise ValueError("channel, transform, and class counts must be >= 1")
        if self.mixed_channels < 0:
            raise ValueError("mixed_channels must be >= 0 (0 disables the mixer)")
        if self.aggregator not in ("kernel", "covariance"):
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if self.transform_dim > self.feature_channels:
            raise ValueError(
                f"transform_dim {self.transform_dim} exceeds feature channels {self.feature_channels}"
            )

    @property
    def feature_channels(self) -> int:
        return self.mixed_channels if self.mixed_channels else self.in_channels

    @property
    def head_dim(self) -> int:
        return self.transform_dim * (self.transform_dim + 1) // 2


@dataclass(frozen=True)
class TrainConfig:
    """Optimization knobs.  ``lr_stiefel = None`` tracks the Euclidean rate.

    ``freeze_stiefel`` keeps the randomly initialized compression fixed
    (the no-learning ablation); ``train_mix_in_stage1`` overrides the
    default stage-1 freeze of the channel mixer.
    """

    lr_stage1: float = 0.1
    lr_stage2: float = 0.001
    lr_stiefel: float | None = None
    decay_factor: float = 10.0
    plateau_patience: int = 3
    batch_size: int = 32
    epochs_per_stage: int = 15
    seed: int = 0
    freeze_stiefel: bool = False
    train_mix_in_stage1: bool = False

    def __post_init__(self):
        if self.lr_stage1 < 0 or self.lr_stage2 < 0:
            raise ValueError("learning rates must be >= 0")
        if self.lr_stiefel is not None and self.lr_stiefel < 0:
            raise ValueError("lr_stiefel must be >= 0 when given")
        if self.decay_factor <= 1.0:
            raise ValueError("decay_factor must exceed 1")
        if self.plateau_patience < 1 or self.batch_size < 1 or self.epochs_per_stage < 0:
            raise ValueError("patience and batch size must be >= 1, epochs >= 0")


@dataclass
class MixParams:
    """1x1 convolution = per-position channel mixing."""

    weights: np.ndarray  # (mixed_channels, in_channels)
    bias: np.ndarray  # (mixed_channels,)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ShapeMismatchError(
                f"mixer shapes inconsistent: weights {self.weights.shape}, bias {self.bias.shape}"
            )


@dataclass
class Params:
    mix: MixParams | None
    transform: StiefelPoint
    head: DenseParams


@dataclass(frozen=True)
class MixTape:
    m0: np.ndarray  # (in_channels, N) input maps
    pre: np.ndarray  # (mixed_channels, N) pre-activation
    weights: np.ndarray  # forward-time weight snapshot
    shape: tuple[int, int, int]  # input tensor shape


@dataclass(frozen=True)
class PipelineTapes:
    x: np.ndarray
    mix: MixTape | None
    agg_input: np.ndarray  # (C, N) maps entering aggregation
    kernel: KernelTape | None  # None for the covariance aggregator
    aggregate: np.ndarray  # (C, C) aggregated matrix
    transform: TransformTape
    relu_mask: np.ndarray | None
    power_tape: np.ndarray | None
    l2_tape: L2Tape | None
    v: np.ndarray
    logits: np.ndarray
    dense_grads: DenseGrads
    label: int
    loss: float


@dataclass
class Grads:
    mix_weights: np.ndarray | None
    mix_bias: np.ndarray | None
    stiefel_euclid: np.ndarray
    stiefel_tangent: np.ndarray
    dense_weights: np.ndarray
    dense_bias: np.ndarray
    input: np.ndarray


@dataclass(frozen=True)
class MetricsRecord:
    """One training epoch.  ``wall_ms`` never reaches the metrics file:
    serialized metrics must be bit-identical across replays of a seed."""

    epoch: int
    stage: int
    mean_train_loss: float
    train_accuracy: float
    test_accuracy: float | None
    lr: float
    stiefel_orthogonality_error: float
    wall_ms: float

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "stage": self.stage,
                "mean_train_loss": self.mean_train_loss,
                "train_accuracy": self.train_accuracy,
                "test_accuracy": self.test_accuracy,
                "lr": self.lr,
                "stiefel_orthogonality_error": self.stiefel_orthogonality_error,
            }
        )


def _assert_finite(name: str, arr) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values first appeared in: {name}")


def init_params(
    config: PipelineConfig, rng: np.random.Generator, random_head: bool = False
) -> Params:
    """Draw initial parameters from ``rng`` (order of draws is fixed).

    The dense head starts at zero — its gradient does not suffer from
    symmetric-initialization stalls — except for gradient checking, where
    a zero head would zero out every upstream gradient and make the check
    vacuous (``random_head=True``).
    """
    mix = None
    if config.mixed_channels:
        mix = MixParams(
            weights=rng.standard_normal((config.mixed_channels, config.in_channels))
            / math.sqrt(config.in_channels),
            bias=np.zeros(config.mixed_channels),
        )
    transform = stiefel_init(config.feature_channels, config.transform_dim, rng)
    if random_head:
        head = DenseParams(
            weights=0.5 * rng.standard_normal((config.num_classes, config.head_dim)),
            bias=0.1 * rng.standard_normal(config.num_classes),
        )
    else:
        head = DenseParams(
            weights=np.zeros((config.num_classes, config.head_dim)),
            bias=np.zeros(config.num_classes),
        )
    return Params(mix=mix, transform=transform, head=head)


def mix_forward(x, params: MixParams) -> tuple[np.ndarray, MixTape]:
    """Per-position channel mixing followed by ReLU.

    out[:, p] = max(0, W x[:, p] + b) at every spatial position p.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeMismatchError(f"mixer input must be (C, H, W), got shape {x.shape}")
    c0, h, w = x.shape
    if c0 != params.weights.shape[1]:
        raise ShapeMismatchError(
            f"input has {c0} channels but mixer expects {params.weights.shape[1]}"
        )
    m0 = x.reshape(c0, h * w)
    pre = matmul(params.weights, m0) + params.bias[:, None]
    out = np.maximum(pre, 0.0)
    tape = MixTape(m0=m0, pre=pre, weights=params.weights.copy(), shape=(c0, h, w))
    return out.reshape(params.weights.shape[0], h, w), tape


def mix_backward(tape: MixTape, grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients for (weights, bias, input maps); ReLU subgradient at 0 is 0."""
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != tape.pre.shape:
        raise ShapeMismatchError(
            f"upstream gradient shape {grad_out.shape} does not match {tape.pre.shape}"
        )
    gz = grad_out * (tape.pre > 0.0)
    return matmul(gz, tape.m0.T), gz.sum(axis=1), matmul(tape.weights.T, gz)


def forward(
    x,
    label: int,
    params: Params,
    config: PipelineConfig,
    frozen_sigma: float | None = None,
) -> tuple[float, int, PipelineTapes]:
    """Run the full chain for one sample; returns (loss, argmax class, tapes).

    ``frozen_sigma`` pins the kernel bandwidth to a reference value so
    finite-difference probes measure only the differentiated path.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ShapeMismatchError(f"input must be (C, H, W), got shape {x.shape}")
    if x.shape[0] != config.in_channels:
        raise ShapeMismatchError(
            f"input has {x.shape[0]} channels, config expects {config.in_channels}"
        )
    _assert_finite("input feature tensor", x)

    mix_tape = None
    feats = x
    if config.mixed_channels:
        feats, mix_tape = mix_forward(x, params.mix)
        _assert_finite("mixed feature tensor", feats)
    agg_input = feats.reshape(config.feature_channels, -1)

    if config.aggregator == "kernel":
        spd, kernel_tape = kernel_forward(feats, sigma=frozen_sigma)
        aggregate = spd.m
        transform_in = spd
    else:
        kernel_tape = None
        aggregate = covariance_forward(feats)
        transform_in = aggregate
    _assert_finite("aggregated matrix", aggregate)

    y_spd, transform_tape = transform_forward(transform_in, params.transform)
    y = y_spd.m
    relu_mask = None
    if config.use_spd_relu:
        relu_mask = spd_relu_mask(y)
        y = spd_relu(y)
    _assert_finite("compressed matrix", y)

    v = vectorize(y)
    power_tape = None
    l2_tape = None
    if config.normalizations.power:
        v, power_tape = power_normalize(v)
    if config.normalizations.l2:
        v, l2_tape = l2_normalize(v)
    _assert_finite("head vector", v)

    logits = dense_logits(v, params.head)
    loss, dense_grads = dense_softmax_ce(v, params.head, label)
    _assert_finite("classifier logits", logits)

    tapes = PipelineTapes(
        x=x,
        mix=mix_tape,
        agg_input=agg_input,
        kernel=kernel_tape,
        aggregate=aggregate,
        transform=transform_tape,
        relu_mask=relu_mask,
        power_tape=power_tape,
        l2_tape=l2_tape,
        v=v,
        logits=logits,
        dense_grads=dense_grads,
        label=int(label),
        loss=float(loss),
    )
    return float(loss), int(np.argmax(logits)), tapes


def predict(x, params: Params, config: PipelineConfig) -> int:
    """Argmax class for one sample (label-free forward)."""
    _, pred, _ = forward(x, 0, params, config)
    return pred


def backward(tapes: PipelineTapes, params: Params, config: PipelineConfig) -> Grads:
    """Chain all layer adjoints back from the loss.

    The compression gradient is returned both as the raw Euclidean
    partial (what entrywise finite differences measure) and as its
    tangent projection (what the manifold optimizer consumes).
    """
    dv = tapes.dense_grads.v
    if config.normalizations.l2:
        dv = l2_normalize_backward(tapes.l2_tape, dv)
    if config.normalizations.power:
        dv = power_normalize_backward(tapes.power_tape, dv)
    grad_y = vectorize_backward(dv, config.transform_dim)
    if tapes.relu_mask is not None:
        grad_y = grad_y * tapes.relu_mask

    stiefel_euclid = transform_backward_param(tapes.transform, grad_y)
    stiefel_tangent = tangent_project(params.transform, stiefel_euclid)
    grad_agg = transform_backward_input(tapes.transform, grad_y)

    if config.aggregator == "kernel":
        grad_maps = kernel_backward(tapes.kernel, grad_agg)
    else:
        grad_maps = covariance_backward(tapes.agg_input, grad_agg)

    if tapes.mix is not None:
        d_weights, d_bias, d_input = mix_backward(tapes.mix, grad_maps)
        grad_input = d_input.reshape(tapes.x.shape)
    else:
        d_weights = d_bias = None
        grad_input = grad_maps.reshape(tapes.x.shape)

    return Grads(
        mix_weights=d_weights,
        mix_bias=d_bias,
        stiefel_euclid=stiefel_euclid,
        stiefel_tangent=stiefel_tangent,
        dense_weights=tapes.dense_grads.weights,
        dense_bias=tapes.dense_grads.bias,
        input=grad_input,
    )


def evaluate_accuracy(samples, labels, params: Params, config: PipelineConfig) -> float:
    """Fraction of correct argmax predictions, iterated in dataset order."""
    labels = np.asarray(labels)
    correct = 0
    for i in range(len(labels)):
        correct += predict(samples[i], params, config) == int(labels[i])
    return correct / len(labels)


def _dataset_arrays(dataset) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(dataset, tuple):
        samples, labels = dataset
    else:
        samples, labels = dataset.samples, dataset.labels
    samples = np.asarray(samples, dtype=np.float64)
    labels = np.asarray(labels)
    if samples.ndim != 4 or len(samples) != len(labels):
        raise ShapeMismatchError(
            f"dataset needs (n, C, H, W) samples with matching labels, got {samples.shape}"
        )
    if len(labels) == 0:
        raise ValueError("dataset is empty")
    return samples, labels


def train(
    dataset,
    pipeline: PipelineConfig,
    tc: TrainConfig,
    test_dataset=None,
) -> tuple[Params, list[MetricsRecord]]:
    """Two-stage SGD over the pipeline; returns final params and metrics.

    Stage 1 trains the new layers with the channel mixer frozen; stage 2
    trains everything.  The learning rate of a stage is divided by
    ``decay_factor`` whenever the epoch mean training loss fails to
    improve by ``MIN_LOSS_DELTA`` for ``plateau_patience`` consecutive
    epochs.  Batch gradients are ordered sums over the batch divided by
    the batch size; every random choice comes from the seeded generator,
    so runs are reproducible bit-for-bit.
    """
    samples, labels = _dataset_arrays(dataset)
    n = len(labels)
    if labels.min() < 0 or labels.max() >= pipeline.num_classes:
        raise ValueError(
            f"labels must lie in [0, {pipeline.num_classes}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    test_arrays = _dataset_arrays(test_dataset) if test_dataset is not None else None

    rng = seeded_rng(tc.seed)
    params = init_params(pipeline, rng)
    history: list[MetricsRecord] = []
    global_epoch = 0
    step = 0

    for stage in (1, 2):
        base_lr = tc.lr_stage1 if stage == 1 else tc.lr_stage2
        decay_mult = 1.0
        best_loss = math.inf
        bad_epochs = 0
        train_mix = params.mix is not None and (stage == 2 or tc.train_mix_in_stage1)

        for _ in range(tc.epochs_per_stage):
            t0 = time.perf_counter()
            global_epoch += 1
            lr = base_lr / decay_mult
            stiefel_lr = (tc.lr_stiefel if tc.lr_stiefel is not None else base_lr) / decay_mult
            order = rng.permutation(n)
            losses: list[float] = []
            correct = 0
            max_orth = params.transform.orthogonality_error()

            for start in range(0, n, tc.batch_size):
                batch = order[start : start + tc.batch_size]
                acc: dict[str, np.ndarray | None] = {
                    "mw": None,
                    "mb": None,
                    "wt": None,
                    "dw": None,
                    "db": None,
                }
                for idx in batch:
                    idx = int(idx)
                    loss, pred, tapes = forward(samples[idx], int(labels[idx]), params, pipeline)
                    if not math.isfinite(loss):
                        raise NonFiniteError(
                            f"non-finite loss at epoch {global_epoch}, sample {idx}"
                        )
                    grads = backward(tapes, params, pipeline)
                    losses.append(loss)
                    correct += pred == int(labels[idx])
                    _accumulate(acc, grads, train_mix)
                scale = 1.0 / len(batch)

                if train_mix and lr != 0.0:
                    params.mix.weights = params.mix.weights - lr * (acc["mw"] * scale)
                    params.mix.bias = params.mix.bias - lr * (acc["mb"] * scale)
                if not tc.freeze_stiefel:
                    params.transform = retract_step(
                        params.transform, acc["wt"] * scale, stiefel_lr
                    )
                if lr != 0.0:
                    params.head.weights = params.head.weights - lr * (acc["dw"] * scale)
                    params.head.bias = params.head.bias - lr * (acc["db"] * scale)

                step += 1
                if not tc.freeze_stiefel and step % RENORM_INTERVAL == 0:
                    params.transform = renormalize(params.transform)
                max_orth = max(max_orth, params.transform.orthogonality_error())

            epoch_loss = sum(losses) / n
            if epoch_loss <= best_loss - MIN_LOSS_DELTA:
                best_loss = epoch_loss
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= tc.plateau_patience:
                    decay_mult *= tc.decay_factor
                    bad_epochs = 0

            test_acc = (
                evaluate_accuracy(test_arrays[0], test_arrays[1], params, pipeline)
                if test_arrays is not None
                else None
            )
            history.append(
                MetricsRecord(
                    epoch=global_epoch,
                    stage=stage,
                    mean_train_loss=epoch_loss,
                    train_accuracy=correct / n,
                    test_accuracy=test_acc,
                    lr=lr,
                    stiefel_orthogonality_error=max_orth,
                    wall_ms=(time.perf_counter() - t0) * 1000.0,
                )
            )
    return params, history


def _accumulate(acc: dict, grads: Grads, train_mix: bool) -> None:
    if train_mix:
        acc["mw"] = grads.mix_weights if acc["mw"] is None else acc["mw"] + grads.mix_weights
        acc["mb"] = grads.mix_bias if acc["mb"] is None else acc["mb"] + grads.mix_bias
    acc["wt"] = grads.stiefel_tangent if acc["wt"] is None else acc["wt"] + grads.stiefel_tangent
    acc["dw"] = grads.dense_weights if acc["dw"] is None else acc["dw"] + grads.dense_weights
    acc["db"] = grads.dense_bias if acc["db"] is None else acc["db"] + grads.dense_bias


@dataclass
class GradCheckReport:
    """Per-block max relative error of analytic vs central-difference
    gradients; a block passes iff its max error is below the tolerance."""

    tolerance: float
    max_rel_err: dict[str, float] = field(default_factory=dict)
    block_pass: dict[str, bool] = field(default_factory=dict)

    @property
    def all_passed(self) -> bool:
        return all(self.block_pass.values())

    def to_json(self) -> str:
        return json.dumps(
            {
                "tolerance": self.tolerance,
                "max_rel_err": self.max_rel_err,
                "block_pass": self.block_pass,
                "all_passed": self.all_passed,
            }
        )


#: Central-difference step for all gradient checks.
FD_STEP = 1e-5

#: grad_check refuses configurations above this many parameters (the
#: check is O(parameters) full forward passes).
GRADCHECK_PARAM_CAP = 5000


def gradcheck_instance(
    pipeline: PipelineConfig, seed: int, height: int = 3, width: int = 3
) -> tuple[np.ndarray, int, Params]:
    """The (input, label, params) triple :func:`grad_check` derives from a seed."""
    rng = seeded_rng(seed)
    x = rng.standard_normal((pipeline.in_channels, height, width))
    label = int(rng.integers(pipeline.num_classes))
    return x, label, init_params(pipeline, rng, random_head=True)


def grad_check(
    pipeline: PipelineConfig,
    seed: int = 0,
    tolerance: float = 1e-5,
    height: int = 3,
    width: int = 3,
) -> GradCheckReport:
    """Compare every analytic gradient block against central differences.

    One random sample and randomly initialized parameters are drawn from
    ``seed``; the kernel bandwidth is frozen at its baseline value so the
    probe differentiates exactly the path the analytic backward covers.
    Relative error uses the denominator max(1, |analytic|).
    """
    n_params = (
        (pipeline.mixed_channels * pipeline.in_channels + pipeline.mixed_channels)
        + pipeline.feature_channels * pipeline.transform_dim
        + pipeline.num_classes * (pipeline.head_dim + 1)
    )
    if n_params > GRADCHECK_PARAM_CAP:
        raise ValueError(
            f"configuration has {n_params} parameters; the finite-difference "
            f"check is capped at {GRADCHECK_PARAM_CAP}"
        )

    x, label, params = gradcheck_instance(pipeline, seed, height, width)

    _, _, tapes = forward(x, label, params, pipeline)
    frozen = tapes.kernel.sigma if tapes.kernel is not None else None
    analytic = backward(tapes, params, pipeline)

    def loss_with(p: Params, xs: np.ndarray) -> float:
        return forward(xs, label, p, pipeline, frozen_sigma=frozen)[0]

    blocks: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    if params.mix is not None:
        blocks["mix.weights"] = (params.mix.weights, analytic.mix_weights)
        blocks["mix.bias"] = (params.mix.bias, analytic.mix_bias)
    blocks["stiefel.w"] = (params.transform.w, analytic.stiefel_euclid)
    blocks["dense.weights"] = (params.head.weights, analytic.dense_weights)
    blocks["dense.bias"] = (params.head.bias, analytic.dense_bias)
    blocks["input"] = (x, analytic.input)

    report = GradCheckReport(tolerance=tolerance)
    for name, (value, grad) in blocks.items():
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + FD_STEP
            up = loss_with(params, x)
            flat[i] = orig - FD_STEP
            down = loss_with(params, x)
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * FD_STEP)
        rel = np.abs(grad - numeric) / np.maximum(1.0, np.abs(grad))
        worst = float(rel.max()) if rel.size else 0.0
        report.max_rel_err[name] = worst
        report.block_pass[name] = bool(worst < tolerance)
    return report
