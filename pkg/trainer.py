"""
Training loops, pretraining recipes, checkpoint selection and the k ablation.

``train`` fits either approach with binary cross-entropy, scores the
validation split every ``eval_every`` steps (and after the last step), and
restores the parameters with the lowest validation EER, earliest on ties.
"""

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

import numerics
from backbone import Backbone, backbone_from_checkpoint, checkpoint_model_config, extract_patches, save_checkpoint
from data import iterate
from errors import CheckpointError, ConfigurationError, ContractError, DataError, DivergenceError, ForenvitIOError
from heads import AdaptorSpec, Detector, FineTunePlan, FusionSpec, ThresholdPolicy, build_detector
from metrics import ScoreSet, eer, evaluate
from numerics import Block, LayerNorm, Linear, Module, OptimizerState, Parameter, Rng
from probes import FeatureMatrix

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    approach: int = 2
    epochs: int = 3
    batch_size: int = 32
    eval_every: int = 50
    seed: int = 0
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    optimizer: str = "adamw"
    fusion: FusionSpec = field(default_factory=FusionSpec)
    adaptor: AdaptorSpec = field(default_factory=AdaptorSpec)
    plan: FineTunePlan = field(default_factory=FineTunePlan)

    def __post_init__(self):
        if self.approach not in (1, 2):
            raise ConfigurationError(f"approach must be 1 or 2, got {self.approach}")
        if self.approach == 1 and self.fusion is None:
            raise ConfigurationError("approach 1 needs a fusion spec")
        if self.approach == 2 and self.plan is None:
            raise ConfigurationError("approach 2 needs a fine-tuning plan")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size <= 0 or self.eval_every <= 0:
            raise ConfigurationError("batch_size and eval_every must be positive")

    def with_k(self, k):
        if self.approach == 1:
            return replace(self, fusion=replace(self.fusion, k=k))
        return replace(self, plan=replace(self.plan, k=k))

    @property
    def k(self):
        return self.fusion.k if self.approach == 1 else self.plan.k

    def optimizer_state(self):
        return OptimizerState(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            method=self.optimizer,
        )

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class TrainRecord:
    step: int
    loss: float
    eer: float
    accuracy: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, record):
        if self.records and record.step <= self.records[-1].step:
            raise ContractError(f"step {record.step} does not follow step {self.records[-1].step}")
        self.records.append(record)

    def best(self):
        """Record with the lowest validation EER; the earliest one on ties."""
        if not self.records:
            return None
        return min(self.records, key=lambda r: (r.eer, r.step))

    def to_text(self):
        lines = ["step\tloss\teer\taccuracy"]
        for r in self.records:
            lines.append(f"{r.step}\t{r.loss:.6f}\t{r.eer:.4f}\t{r.accuracy:.4f}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(self.to_text(), encoding="utf-8")
        except OSError as e:
            raise ForenvitIOError(f"cannot write training log {path}: {e}") from e
        return path


@dataclass
class TrainResult:
    detector: Detector
    params: dict
    log: TrainLog
    best_step: int = 0
    best_eer: float = None


# ---------------------------------------------------------------------------
# Detectors and checkpoints
# ---------------------------------------------------------------------------

def detector_from_config(config, backbone):
    rng = Rng(config.seed).split("head")
    if config.approach == 1:
        return build_detector(backbone, 1, rng, fusion=config.fusion, adaptor=config.adaptor, plan=config.plan)
    return build_detector(backbone, 2, rng, plan=config.plan)


def checkpoint_metadata(detector, config=None, policy=None, extra=None):
    metadata = {
        "model": detector.backbone.config.to_dict(),
        "approach": detector.approach,
    }
    if config is not None:
        metadata["train"] = config.to_dict()
    metadata["policy"] = (policy or ThresholdPolicy.fixed_half()).to_dict()
    metadata.update(extra or {})
    return metadata


def save_detector(detector, path, config=None, policy=None, extra=None):
    return save_checkpoint(detector.state_dict(), path, checkpoint_metadata(detector, config, policy, extra))


def config_from_metadata(metadata):
    values = dict(metadata["train"])
    values["fusion"] = FusionSpec(**values["fusion"])
    values["adaptor"] = AdaptorSpec(**values["adaptor"])
    values["plan"] = FineTunePlan(**values["plan"])
    return TrainConfig(**values)


def detector_from_checkpoint(checkpoint):
    """Rebuild the detector a checkpoint was trained as and load its weights."""
    if "train" not in checkpoint.metadata:
        raise ConfigurationError("checkpoint holds a bare backbone, not a detector")
    try:
        config = config_from_metadata(checkpoint.metadata)
        policy = ThresholdPolicy.from_dict(checkpoint.metadata["policy"])
    except (KeyError, TypeError) as e:
        raise CheckpointError(f"checkpoint has an unusable training record: {e}") from e
    backbone = Backbone(checkpoint_model_config(checkpoint), Rng(config.seed).split("backbone"))
    detector = detector_from_config(config, backbone)
    detector.load_state_dict(checkpoint.params)
    return detector, config, policy


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def score_split(detector, data, batch_size=256):
    """Sigmoid scores for every sample of a split, in eval mode without recording a graph."""
    detector.eval()
    chunks = []
    with numerics.inference():
        for batch in iterate(data, batch_size):
            chunks.append(detector(batch.images).data.astype(np.float64))
    return ScoreSet(expit(np.concatenate(chunks)), data.labels, data.methods, data.sources)


def extract_cls_features(backbone, data, batch_size=256):
    """Final-block CLS rows of a frozen backbone, one pass shared by every probe."""
    backbone.eval()
    chunks = []
    with numerics.inference():
        for batch in iterate(data, batch_size):
            chunks.append(backbone(batch.images).tokens.data[:, 0, :].astype(np.float64))
    return FeatureMatrix(np.concatenate(chunks), data.labels, data.methods, data.sources)


def _check_loss(loss, step):
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"loss became {value} at step {step}")
    return value


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train(config, detector, train_data, val_data):
    """Fit ``detector`` and restore its best validation-EER parameters."""
    if len(train_data) == 0 or len(val_data) == 0:
        raise DataError("training needs non-empty train and validation splits")
    rng = Rng(config.seed).split("train")
    log = TrainLog()
    best_params = detector.state_dict()
    if config.epochs == 0:
        return TrainResult(detector, best_params, log)
    state = config.optimizer_state()
    steps_per_epoch = math.ceil(len(train_data) / config.batch_size)
    total = steps_per_epoch * config.epochs
    step, best = 0, None
    for epoch in range(config.epochs):
        for batch in iterate(train_data, config.batch_size, rng.split(f"epoch{epoch}")):
            detector.train()
            logits = detector(batch.images, rng.split(f"step{step}"))
            loss = numerics.bce_with_logits(logits, batch.labels)
            value = _check_loss(loss, step)
            detector.zero_grad()
            numerics.backward(loss)
            numerics.optimizer_step(detector.named_parameters(), state)
            step += 1
            logger.debug("step %d: loss %.4f", step, value)
            if step % config.eval_every and step != total:
                continue
            report = evaluate(score_split(detector, val_data), 0.5)
            record = TrainRecord(step, value, report.eer, report.accuracy)
            log.append(record)
            logger.info(
                "step %d/%d: loss %.4f, val eer %.2f, val accuracy %.2f",
                step, total, value, report.eer, report.accuracy,
            )
            if best is None or record.eer < best.eer:
                best = record
                best_params = detector.state_dict()
    detector.load_state_dict(best_params)
    detector.eval()
    return TrainResult(detector, best_params, log, best.step, best.eer)


# ---------------------------------------------------------------------------
# Pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretrainConfig:
    recipe: str = "masked"
    mask_ratio: float = 0.75
    epochs: int = 5
    batch_size: int = 32
    learning_rate: float = 1e-3
    weight_decay: float = 0.05
    decoder_depth: int = 2
    num_classes: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.recipe not in ("masked", "supervised"):
            raise ConfigurationError(f"unknown pretraining recipe '{self.recipe}'")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigurationError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ConfigurationError("epochs must be non-negative and batch_size positive")


def masked_count(num_patches, mask_ratio):
    """Patches hidden per image; at least one must stay hidden and one visible."""
    if not 0.0 < mask_ratio < 1.0:
        raise ConfigurationError(f"mask_ratio must lie in (0, 1), got {mask_ratio}")
    count = int(round(num_patches * mask_ratio))
    if count == 0 or count == num_patches:
        raise ConfigurationError(
            f"mask_ratio {mask_ratio} hides {count} of {num_patches} patches; "
            "at least one must be hidden and one visible"
        )
    return count


class Decoder(Module):
    """Light decoder predicting patch pixels from encoded visible tokens plus mask tokens."""

    def __init__(self, config, depth, rng):
        dim = config.width
        self.embed = Linear(dim, dim, rng.split("embed"))
        self.mask_token = Parameter(rng.split("mask_token").normal((1, 1, dim), 0.02))
        self.pos_embed = Parameter(rng.split("pos_embed").normal((1, config.num_patches, dim), 0.02))
        self.blocks = [
            Block(dim, config.heads, config.mlp_ratio, rng.split(f"block{i}")) for i in range(1, depth + 1)
        ]
        self.norm = LayerNorm(dim)
        self.pred = Linear(dim, config.channels * config.patch_size ** 2, rng.split("pred"))

    def __call__(self, visible, restore, masked):
        batch, _, dim = visible.shape
        x = self.embed(visible)
        hidden = numerics.broadcast_to(self.mask_token, (batch, masked, dim))
        x = numerics.take_rows(numerics.concat([x, hidden], axis=1), restore) + self.pos_embed
        for block in self.blocks:
            x, _ = block(x)
        return self.pred(self.norm(x))


def _joint_parameters(backbone, extra, prefix):
    named = list(backbone.named_parameters())
    named.extend((f"{prefix}/{name}", param) for name, param in extra.named_parameters())
    return named


def pretrain_masked(backbone, images, config, rng=None):
    """Masked-patch reconstruction; returns the backbone and per-step losses. The decoder is dropped."""
    rng = rng or Rng(config.seed).split("pretrain")
    cfg = backbone.config
    masked = masked_count(cfg.num_patches, config.mask_ratio)
    visible_count = cfg.num_patches - masked
    images = np.asarray(images, dtype=np.float32)
    for param in backbone.parameters():
        param.trainable = True
    decoder = Decoder(cfg, config.decoder_depth, rng.split("decoder"))
    named = _joint_parameters(backbone, decoder, "decoder")
    state = OptimizerState(learning_rate=config.learning_rate, weight_decay=config.weight_decay)
    targets = extract_patches(images, cfg.patch_size)
    losses = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.split(f"epoch{epoch}").permutation(len(images))
        for start in range(0, len(images), config.batch_size):
            rows = order[start:start + config.batch_size]
            noise = rng.split(f"mask{step}").random((rows.size, cfg.num_patches))
            shuffle = np.argsort(noise, axis=1, kind="stable")
            restore = np.argsort(shuffle, axis=1, kind="stable")
            keep, hide = shuffle[:, :visible_count], shuffle[:, visible_count:]

            backbone.train()
            decoder.train()
            patches = numerics.take_rows(backbone.patchify(images[rows]), keep)
            encoded = backbone.run_blocks(backbone.prepend_tokens(patches), (), rng.split(f"step{step}")).tokens
            visible = encoded[:, 1 + cfg.registers:, :]
            prediction = decoder(visible, restore, masked)
            target = targets[rows[:, None], hide]
            loss = numerics.mse(numerics.take_rows(prediction, hide), target)
            losses.append(_check_loss(loss, step))
            for _, param in named:
                param.grad = None
            numerics.backward(loss)
            numerics.optimizer_step(named, state)
            step += 1
        logger.info("masked pretraining epoch %d: loss %.5f", epoch, losses[-1])
    backbone.eval()
    return backbone, losses


def pretrain_supervised(backbone, images, labels, config, rng=None):
    """Cross-entropy on a temporary class head over CLS; returns the backbone and per-epoch accuracy."""
    rng = rng or Rng(config.seed).split("pretrain")
    classes, targets = np.unique(np.asarray(labels), return_inverse=True)
    if classes.size < 2:
        raise DataError(f"supervised pretraining needs at least 2 classes, got {classes.size}")
    images = np.asarray(images, dtype=np.float32)
    for param in backbone.parameters():
        param.trainable = True
    head = Linear(backbone.config.width, int(classes.size), rng.split("class_head"))
    named = _joint_parameters(backbone, head, "class_head")
    state = OptimizerState(learning_rate=config.learning_rate, weight_decay=config.weight_decay)
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.split(f"epoch{epoch}").permutation(len(images))
        hits = 0
        for start in range(0, len(images), config.batch_size):
            rows = order[start:start + config.batch_size]
            backbone.train()
            logits = head(backbone(images[rows], (), rng.split(f"step{step}")).tokens[:, 0, :])
            loss = numerics.cross_entropy(logits, targets[rows])
            _check_loss(loss, step)
            hits += int((logits.data.argmax(axis=1) == targets[rows]).sum())
            for _, param in named:
                param.grad = None
            numerics.backward(loss)
            numerics.optimizer_step(named, state)
            step += 1
        history.append(100.0 * hits / len(images))
        logger.info("supervised pretraining epoch %d: accuracy %.2f", epoch, history[-1])
    backbone.eval()
    return backbone, history


def save_backbone(backbone, path, extra=None):
    metadata = {"model": backbone.config.to_dict()}
    metadata.update(extra or {})
    return save_checkpoint(backbone.state_dict(), path, metadata)


def load_backbone(checkpoint, seed=0):
    return backbone_from_checkpoint(checkpoint, Rng(seed).split("backbone"))


# ---------------------------------------------------------------------------
# Ablation over k
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    k: int
    eer: float
    val_eer: float


@dataclass
class AblationTable:
    approach: int
    rows: list = field(default_factory=list)

    def to_text(self):
        lines = ["k\teer"]
        lines.extend(f"{row.k}\t{row.eer:.4f}" for row in self.rows)
        return "\n".join(lines) + "\n"

    def best(self):
        return min(self.rows, key=lambda row: (row.eer, row.k))


def ablate_k(config, k_values, make_backbone, train_data, val_data, test_data):
    """One full train + test evaluation per k, every run from the same seed."""
    k_values = [int(k) for k in k_values]
    if not k_values:
        raise ConfigurationError("k list is empty")
    depth = make_backbone().config.depth
    for k in k_values:
        if not 1 <= k <= depth:
            raise ConfigurationError(f"k={k} must lie in 1..{depth}")
    table = AblationTable(config.approach)
    for k in k_values:
        run = config.with_k(k)
        detector = detector_from_config(run, make_backbone())
        result = train(run, detector, train_data, val_data)
        rate, _ = eer(score_split(result.detector, test_data))
        table.rows.append(AblationRow(k, 100.0 * rate, result.best_eer))
        logger.info("k=%d: test eer %.2f", k, 100.0 * rate)
    return table


def plot_ablation(table, path):
    """Line plot of test EER against k, written with the Agg backend."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([row.k for row in table.rows], [row.eer for row in table.rows], marker="o")
    ax.set_xlabel("fine-tuned blocks k" if table.approach == 2 else "fused blocks k")
    ax.set_ylabel("test EER (%)")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=100)
    except OSError as e:
        raise ForenvitIOError(f"cannot write plot {path}: {e}") from e
    finally:
        plt.close(fig)
    return path
