"""
Detection heads on top of a backbone.

Approach 1 keeps the backbone frozen and classifies a fusion of adapted
features from its k final blocks. Approach 2 fine-tunes the k final blocks
(plus the CLS and register tokens) under a new classifier fed the CLS row.
Both end in a single logit; ``predict`` applies sigmoid and the threshold.
"""

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

import numerics
from backbone import token_layout
from errors import ConfigurationError, ContractError, StateError
from numerics import Linear, Module, Parameter

logger = logging.getLogger(__name__)

ADAPTOR_KINDS = ("none", "linear")
FUSION_MODES = ("weighted_sum", "concat")
FUSION_SCOPES = ("cls_only", "all_tokens")
HEAD_KINDS = ("linear", "mlp2")
POLICY_KINDS = ("fixed_half", "validation_eer")


@dataclass
class AdaptorSpec:
    """Per-block adaptor: dropout, then (for kind "linear") a linear map.

    output_dim 0 picks the default: width/4 for concat, width for weighted sum.
    """

    kind: str = "linear"
    output_dim: int = 0
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.kind not in ADAPTOR_KINDS:
            raise ConfigurationError(f"unknown adaptor kind '{self.kind}'")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")
        if self.output_dim < 0:
            raise ConfigurationError("adaptor output_dim must be non-negative")


@dataclass
class FusionSpec:
    k: int = 4
    mode: str = "concat"
    scope: str = "cls_only"
    include_registers: bool = False
    max_concat_dim: int = 4096

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ConfigurationError(f"unknown fusion mode '{self.mode}'")
        if self.scope not in FUSION_SCOPES:
            raise ConfigurationError(f"unknown fusion scope '{self.scope}'")

    def validate(self, depth):
        if not 1 <= self.k <= depth:
            raise ConfigurationError(f"k={self.k} must lie in 1..{depth}")
        return self

    def blocks(self, depth):
        """The k final block indices, ascending (n-k+1 .. n)."""
        return list(range(depth - self.k + 1, depth + 1))


@dataclass
class FineTunePlan:
    k: int = 2
    tune_tokens: bool = True
    head_kind: str = "linear"
    hidden_dim: int = 0

    def validate(self, depth):
        if not 1 <= self.k <= depth:
            raise ConfigurationError(f"fine-tuning k={self.k} must lie in 1..{depth}")
        return self


@dataclass
class ThresholdPolicy:
    """How tau is chosen: fixed at 0.5, or the EER threshold of a validation split."""

    kind: str = "fixed_half"
    tau: float = 0.5
    split: str = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ConfigurationError(f"unknown threshold policy '{self.kind}'")
        if self.kind == "fixed_half":
            self.tau = 0.5
        if self.tau is not None and not (math.isfinite(self.tau) and 0.0 < self.tau < 1.0):
            raise ConfigurationError(f"threshold must lie strictly between 0 and 1, got {self.tau}")

    @classmethod
    def fixed_half(cls):
        return cls("fixed_half", 0.5)

    @classmethod
    def uncalibrated(cls):
        return cls("validation_eer", None)

    def resolve(self):
        if self.tau is None:
            raise StateError("validation_eer policy has not been calibrated")
        return self.tau

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        return cls(**values)


@dataclass(frozen=True)
class Prediction:
    label: int
    score: float


def predict(logit, policy):
    """Label 1 (fake) iff sigmoid(logit) >= tau."""
    tau = policy.resolve()
    score = float(expit(float(logit)))
    return Prediction(int(score >= tau), score)


# ---------------------------------------------------------------------------
# Modules
# ---------------------------------------------------------------------------

class Adaptor(Module):
    def __init__(self, input_dim, spec, rng):
        self.kind = spec.kind
        self.input_dim = input_dim
        self.dropout_rate = spec.dropout_rate
        if spec.kind == "linear":
            self.output_dim = spec.output_dim or input_dim
            self.linear = Linear(input_dim, self.output_dim, rng)
        else:
            self.output_dim = input_dim
            self.linear = None

    @classmethod
    def identity(cls, dim):
        adaptor = cls(dim, AdaptorSpec("none", 0, 0.0), None)
        adaptor.kind = "linear"
        adaptor.linear = Linear.identity(dim)
        return adaptor

    def __call__(self, x, rng=None):
        x = numerics.dropout(x, self.dropout_rate, self.training, rng)
        if self.linear is not None:
            x = self.linear(x)
        return x


class ClassifierHead(Module):
    """Single-logit classifier: one linear layer, or two with a GELU between."""

    def __init__(self, input_dim, rng, kind="linear", hidden_dim=0):
        if kind not in HEAD_KINDS:
            raise ConfigurationError(f"unknown classifier kind '{kind}'")
        self.kind = kind
        self.input_dim = input_dim
        if kind == "linear":
            self.hidden_dim = 0
            self.fc1 = Linear(input_dim, 1, rng)
            self.fc2 = None
        else:
            self.hidden_dim = hidden_dim or max(1, input_dim // 2)
            self.fc1 = Linear(input_dim, self.hidden_dim, rng)
            self.fc2 = Linear(self.hidden_dim, 1, rng)

    def __call__(self, x):
        out = self.fc1(x)
        if self.fc2 is not None:
            out = self.fc2(numerics.gelu(out))
        return out.reshape(x.shape[0])


def feature_rows(tokens, scope, layout, include_registers=False):
    """Select the rows a fusion scope reads: CLS only, or CLS plus patches."""
    if scope == "cls_only":
        return tokens[:, 0, :]
    if include_registers or not layout.register_rows:
        return tokens
    first_patch = layout.patch_rows[0]
    return numerics.concat([tokens[:, 0:1, :], tokens[:, first_patch:, :]], axis=1)


def fused_dim(spec, layout, adaptor_dim):
    if spec.scope == "cls_only":
        rows = 1
    else:
        rows = 1 + len(layout.patch_rows) + (len(layout.register_rows) if spec.include_registers else 0)
    per_block = rows * adaptor_dim
    return per_block * spec.k if spec.mode == "concat" else per_block


def check_budget(spec, layout, adaptor_dim):
    if spec.mode == "concat" and spec.scope == "all_tokens":
        dim = fused_dim(spec, layout, adaptor_dim)
        if dim > spec.max_concat_dim:
            raise ConfigurationError(
                f"concatenating all tokens of {spec.k} blocks gives {dim} features, "
                f"over the budget of {spec.max_concat_dim}; use weighted_sum"
            )


def fuse(features, adaptors, spec, layout, fusion_weights=None, rng=None):
    """Sigma over the adapted features of the k final blocks."""
    if len(features) != spec.k or len(adaptors) != spec.k:
        raise ContractError(
            f"fusion expects {spec.k} block features and adaptors, got {len(features)}/{len(adaptors)}"
        )
    indices = [record.block_index for record in features]
    if indices != sorted(indices) or len(set(indices)) != len(indices):
        raise ContractError(f"block features must be in ascending order, got {indices}")
    check_budget(spec, layout, adaptors[0].output_dim)
    adapted = []
    for position, (record, adaptor) in enumerate(zip(features, adaptors)):
        rows = feature_rows(record.tokens, spec.scope, layout, spec.include_registers)
        out = adaptor(rows, rng.split(f"adaptor{position}") if rng is not None else None)
        adapted.append(out.reshape(out.shape[0], -1) if out.ndim == 3 else out)
    if spec.mode == "concat":
        return adapted[0] if len(adapted) == 1 else numerics.concat(adapted, axis=1)
    if fusion_weights is None:
        raise ContractError("weighted_sum fusion needs fusion weights")
    weights = numerics.softmax(fusion_weights, axis=0).reshape(spec.k, 1, 1)
    stacked = numerics.concat([a.reshape(1, *a.shape) for a in adapted], axis=0)
    return (stacked * weights).sum(axis=0)


class FusionHead(Module):
    """A_i adaptors, Sigma fusion weights (weighted sum only) and the classifier C."""

    def __init__(self, width, layout, spec, adaptor_spec, rng, head_kind="linear", hidden_dim=0):
        self.spec = spec
        self.layout = layout
        output_dim = adaptor_spec.output_dim
        if adaptor_spec.kind == "linear" and not output_dim:
            output_dim = max(1, width // 4) if spec.mode == "concat" else width
        adaptor_spec = AdaptorSpec(adaptor_spec.kind, output_dim, adaptor_spec.dropout_rate)
        self.adaptors = [Adaptor(width, adaptor_spec, rng.split(f"adaptor{i}")) for i in range(spec.k)]
        check_budget(spec, layout, self.adaptors[0].output_dim)
        if spec.mode == "weighted_sum":
            self.fusion_weights = Parameter(np.zeros(spec.k))
        else:
            self.fusion_weights = None
        input_dim = fused_dim(spec, layout, self.adaptors[0].output_dim)
        self.classifier = ClassifierHead(input_dim, rng.split("classifier"), head_kind, hidden_dim)

    def __call__(self, features, rng=None):
        fused = fuse(features, self.adaptors, self.spec, self.layout, self.fusion_weights, rng)
        return self.classifier(fused)


# ---------------------------------------------------------------------------
# Approaches
# ---------------------------------------------------------------------------

def check_frozen(backbone):
    for name, param in backbone.named_parameters():
        if param.trainable:
            raise ContractError(f"Approach 1 needs a frozen backbone, '{name}' is trainable")


def approach1_outputs(images, backbone, head, rng=None):
    check_frozen(backbone)
    taps = head.spec.blocks(backbone.depth)
    result = backbone(images, taps, rng.split("backbone") if rng is not None else None)
    logits = head(result.features, rng.split("head") if rng is not None else None)
    return logits, result


def approach1_forward(images, backbone, head, rng=None):
    """C(Sigma A_i(phi_i)) over the k final blocks of a frozen backbone."""
    return approach1_outputs(images, backbone, head, rng)[0]


def approach2_outputs(images, backbone, classifier, rng=None):
    result = backbone(images, (), rng.split("backbone") if rng is not None else None)
    return classifier(result.tokens[:, 0, :]), result


def approach2_forward(images, backbone, classifier, rng=None):
    """C(B(I)) on the CLS row of the final tokens."""
    return approach2_outputs(images, backbone, classifier, rng)[0]


def build_finetune_mask(plan, backbone):
    """Trainable flag per backbone parameter name; head parameters are always trainable."""
    plan.validate(backbone.depth)
    tuned_prefixes = [backbone.block_prefix(i) for i in range(backbone.depth - plan.k + 1, backbone.depth + 1)]
    token_names = {"cls_token", "register_tokens"}
    mask = {}
    for name, _ in backbone.named_parameters():
        if any(name.startswith(prefix) for prefix in tuned_prefixes):
            mask[name] = True
        else:
            mask[name] = plan.tune_tokens and name in token_names
    return mask


def apply_mask(backbone, mask):
    for name, param in backbone.named_parameters():
        param.trainable = mask[name]
    return backbone


class Detector(Module):
    """Backbone plus head; head parameters are named under ``head/``."""

    def __init__(self, backbone, head, approach):
        if approach not in (1, 2):
            raise ConfigurationError(f"approach must be 1 or 2, got {approach}")
        self.backbone = backbone
        self.head = head
        self.approach = approach

    def named_parameters(self):
        found = list(self.backbone.named_parameters())
        found.extend((f"head/{name}", param) for name, param in self.head.named_parameters())
        return sorted(found, key=lambda item: item[0])

    def train(self, mode=True):
        super().train(mode)
        if self.approach == 1:
            self.backbone.eval()
        return self

    def outputs(self, images, rng=None):
        if self.approach == 1:
            return approach1_outputs(images, self.backbone, self.head, rng)
        return approach2_outputs(images, self.backbone, self.head, rng)

    def __call__(self, images, rng=None):
        return self.outputs(images, rng)[0]


def build_detector(backbone, approach, rng, fusion=None, adaptor=None, plan=None):
    """Attach a fresh head and set trainable flags for the chosen approach."""
    config = backbone.config
    if approach == 1:
        fusion = (fusion or FusionSpec()).validate(config.depth)
        adaptor = adaptor or AdaptorSpec()
        backbone.freeze()
        plan = plan or FineTunePlan(k=fusion.k)
        head = FusionHead(
            config.width, token_layout(config), fusion, adaptor, rng.split("head"),
            plan.head_kind, plan.hidden_dim,
        )
    elif approach == 2:
        plan = (plan or FineTunePlan()).validate(config.depth)
        apply_mask(backbone, build_finetune_mask(plan, backbone))
        head = ClassifierHead(config.width, rng.split("head"), plan.head_kind, plan.hidden_dim)
    else:
        raise ConfigurationError(f"approach must be 1 or 2, got {approach}")
    trainable = sum(p.size for p in backbone.parameters() if p.trainable)
    logger.info("approach %d: %d trainable backbone weights", approach, trainable)
    return Detector(backbone, head, approach)
