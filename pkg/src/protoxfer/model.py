"""Y-shaped network: two private encoders, one shared encoder, and three heads."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from protoxfer.errors import ConfigError, NumericError


class DomainTag(enum.IntEnum):
    # values double as discriminator labels: 0 for target, 1 for auxiliary
    TARGET = 0
    AUXILIARY = 1

    @classmethod
    def parse(cls, value) -> "DomainTag":
        if isinstance(value, cls):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ConfigError(f"unknown domain tag {value!r}") from None
        return cls(int(value))


class InputKind(str, enum.Enum):
    VECTOR = "VECTOR"
    IMAGE = "IMAGE"


@dataclass
class BackboneConfig:
    """Layer layout of the network.

    ``input_dim`` is the feature count for vector input and the channel count
    for image input. Stages before ``split_stage`` are duplicated per domain;
    the rest are shared.
    """

    input_kind: InputKind = InputKind.VECTOR
    input_dim: int = 16
    stage_sizes: list[int] = field(default_factory=lambda: [64, 64, 64, 64])
    split_stage: int = 3
    hidden_dim_f: int = 256
    proj_dim: int = 128
    num_classes: int = 2
    disc_hidden: int = 128
    grl_lambda: float = 1.0
    # both private encoders start from the same weights, as two copies of one pretrained stem would
    tie_private_init: bool = True

    def __post_init__(self):
        self.input_kind = InputKind(self.input_kind)
        self.stage_sizes = [int(s) for s in self.stage_sizes]
        self.validate()

    def validate(self) -> None:
        if not self.stage_sizes or any(s <= 0 for s in self.stage_sizes):
            raise ConfigError("stage_sizes must be a non-empty list of positive ints")
        if not 1 <= self.split_stage < len(self.stage_sizes):
            raise ConfigError(
                f"split_stage must satisfy 1 <= split_stage < {len(self.stage_sizes)}, "
                f"got {self.split_stage}"
            )
        if self.hidden_dim_f <= 0 or self.proj_dim <= 0 or self.disc_hidden <= 0:
            raise ConfigError("hidden_dim_f, proj_dim and disc_hidden must be positive")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_dim <= 0:
            raise ConfigError("input_dim must be positive")

    @property
    def pooled_dim(self) -> int:
        return self.stage_sizes[self.split_stage - 1]

    @property
    def shared_dim(self) -> int:
        return self.stage_sizes[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_kind"] = self.input_kind.value
        return d


@dataclass
class EncoderOutputs:
    intermediate: torch.Tensor
    pooled_intermediate: torch.Tensor
    shared: torch.Tensor
    f: torch.Tensor
    logits: torch.Tensor
    z: Optional[torch.Tensor] = None


class GradReverse(torch.autograd.Function):
    """Identity on the forward pass; multiplies the gradient by ``-lambd`` on the way back."""

    @staticmethod
    def forward(ctx, x, lambd):
        ctx.lambd = lambd
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.lambd, None


def grad_reverse(x: torch.Tensor, lambd: float = 1.0) -> torch.Tensor:
    return GradReverse.apply(x, lambd)


def _mlp_stages(in_dim: int, sizes: list[int]) -> nn.ModuleList:
    stages = []
    for width in sizes:
        stages.append(nn.Sequential(nn.Linear(in_dim, width), nn.ReLU()))
        in_dim = width
    return nn.ModuleList(stages)


def _conv_stages(in_ch: int, sizes: list[int]) -> nn.ModuleList:
    stages = []
    for ch in sizes:
        stages.append(
            nn.Sequential(nn.Conv2d(in_ch, ch, kernel_size=3, stride=2, padding=1), nn.ReLU())
        )
        in_ch = ch
    return nn.ModuleList(stages)


def _pool(x: torch.Tensor) -> torch.Tensor:
    return x.mean(dim=(2, 3)) if x.dim() == 4 else x


def _check_finite(t: torch.Tensor, stage: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite activations at stage '{stage}'")


class DualBranchNet(nn.Module):
    def __init__(self, config: BackboneConfig, seed: Optional[int] = None):
        super().__init__()
        self.config = config
        # fork so model construction does not disturb the caller's global RNG stream
        with torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            self._build()

    def _build(self):
        cfg = self.config
        make = _mlp_stages if cfg.input_kind == InputKind.VECTOR else _conv_stages
        private_sizes = cfg.stage_sizes[: cfg.split_stage]
        shared_sizes = cfg.stage_sizes[cfg.split_stage:]
        self.private_target = make(cfg.input_dim, private_sizes)
        self.private_aux = make(cfg.input_dim, private_sizes)
        if cfg.tie_private_init:
            self.private_aux.load_state_dict(self.private_target.state_dict())
        self.shared = make(cfg.pooled_dim, shared_sizes)
        self.fc1 = nn.Linear(cfg.shared_dim, cfg.hidden_dim_f)
        self.fc2 = nn.Linear(cfg.hidden_dim_f, cfg.num_classes)
        self.projector = nn.Sequential(
            nn.Linear(cfg.shared_dim, cfg.shared_dim),
            nn.ReLU(),
            nn.Linear(cfg.shared_dim, cfg.proj_dim),
        )
        self.discriminator = nn.Sequential(
            nn.Linear(cfg.pooled_dim, cfg.disc_hidden),
            nn.ReLU(),
            nn.Linear(cfg.disc_hidden, 1),
        )

    def private(self, domain) -> nn.ModuleList:
        return self.private_target if DomainTag.parse(domain) == DomainTag.TARGET else self.private_aux

    def _check_input(self, x: torch.Tensor) -> None:
        cfg = self.config
        if cfg.input_kind == InputKind.VECTOR:
            ok = x.dim() == 2 and x.shape[1] == cfg.input_dim
            want = f"(N, {cfg.input_dim})"
        else:
            ok = x.dim() == 4 and x.shape[1] == cfg.input_dim
            want = f"(N, {cfg.input_dim}, H, W)"
        if not ok:
            raise ConfigError(f"expected input of shape {want}, got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor, domain=DomainTag.TARGET, with_projection: bool = False,
                check: bool = True) -> EncoderOutputs:
        self._check_input(x)
        h = x
        for i, stage in enumerate(self.private(domain)):
            h = stage(h)
            if check:
                _check_finite(h, f"private[{i}]")
        intermediate = h
        pooled = _pool(intermediate)
        for i, stage in enumerate(self.shared):
            h = stage(h)
            if check:
                _check_finite(h, f"shared[{i}]")
        shared = _pool(h)
        f = F.relu(self.fc1(shared))
        logits = self.fc2(f)
        if check:
            _check_finite(f, "fc1")
            _check_finite(logits, "fc2")
        z = self.project(shared) if with_projection else None
        return EncoderOutputs(intermediate, pooled, shared, f, logits, z)

    def project(self, shared: torch.Tensor) -> torch.Tensor:
        if shared.dim() != 2 or shared.shape[1] != self.config.shared_dim:
            raise ConfigError(
                f"projection head expects (N, {self.config.shared_dim}), got {tuple(shared.shape)}"
            )
        return self.projector(shared)

    def domain_discriminate(self, pooled: torch.Tensor, reverse: bool = True) -> torch.Tensor:
        """Probability that each pooled feature comes from the auxiliary domain.

        With ``reverse`` on, gradients flowing back into the encoders are
        negated and scaled by ``grl_lambda``; the discriminator itself still
        receives the ordinary gradient.
        """
        if pooled.dim() != 2 or pooled.shape[1] != self.config.pooled_dim:
            raise ConfigError(
                f"discriminator expects (N, {self.config.pooled_dim}), got {tuple(pooled.shape)}"
            )
        if reverse:
            pooled = grad_reverse(pooled, self.config.grl_lambda)
        return torch.sigmoid(self.discriminator(pooled)).squeeze(1)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "private_target": list(self.private_target.parameters()),
            "private_aux": list(self.private_aux.parameters()),
            "shared": list(self.shared.parameters()),
            "classifier": list(self.fc1.parameters()) + list(self.fc2.parameters()),
            "projector": list(self.projector.parameters()),
            "discriminator": list(self.discriminator.parameters()),
        }


CHECKPOINT_FORMAT = "protoxfer-checkpoint/1"


def save_checkpoint(path, model: DualBranchNet, epoch: int, train_config: Optional[dict] = None,
                    rng_state: Optional[dict] = None, extra: Optional[dict] = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "backbone_config": model.config.to_dict(),
        "train_config": train_config or {},
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "epoch": int(epoch),
        "rng_state": rng_state or {"torch": torch.get_rng_state()},
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[DualBranchNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    model = DualBranchNet(BackboneConfig(**payload["backbone_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
