"""Generator and discriminator architectures.

Generators are U-Net style encoder/decoders with symmetric skip connections
(pix2pix lineage). Discriminators are patch classifiers whose output grid is
squashed into the open interval (0, 1) so log-likelihood terms never see 0.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn as nn

from .core import ConfigError, ContractError

# Discriminator outputs live in [PROB_EPS, 1 - PROB_EPS].
PROB_EPS = 1e-6


class GeneratorRole(str, enum.Enum):
    POS_TO_NEG = "pos_to_neg"
    NEG_TO_POS = "neg_to_pos"
    POS_TO_MAP = "pos_to_map"

    @property
    def output_activation(self) -> str:
        return "squash22" if self is GeneratorRole.POS_TO_MAP else "squash11"


class Scheme(str, enum.Enum):
    CASCADED_CI = "cascaded_ci"
    CASCADED_RGAN = "cascaded_rgan"
    INTEGRATED = "integrated"


@dataclass(frozen=True)
class GeneratorSpec:
    input_size: int = 256
    base_channels: int = 64
    depth: int = 4
    skip_connections: bool = True
    output_activation: str = "squash11"
    max_channels_mult: int = 8

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("generator depth must be >= 1")
        if self.input_size % (2 ** self.depth):
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by 2**depth = {2 ** self.depth}"
            )
        if not self.skip_connections:
            raise ConfigError("generators always use skip connections")
        if self.output_activation not in ("squash11", "squash22"):
            raise ConfigError(f"unknown output activation {self.output_activation!r}")

    def for_role(self, role: GeneratorRole) -> "GeneratorSpec":
        d = asdict(self)
        d["output_activation"] = GeneratorRole(role).output_activation
        return GeneratorSpec(**d)


@dataclass(frozen=True)
class DiscriminatorSpec:
    input_size: int = 256
    base_channels: int = 64
    n_layers: int = 3

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError("discriminator needs at least one strided layer")
        if self.output_size() < 1:
            raise ConfigError(
                f"{self.n_layers}-layer discriminator leaves no output at {self.input_size} px"
            )

    def output_size(self) -> int:
        return _disc_out(self.input_size, self.n_layers)


def _init_weights(m: nn.Module, gen: Optional[torch.Generator]) -> None:
    if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
        with torch.no_grad():
            m.weight.normal_(0.0, 0.02, generator=gen)
            if m.bias is not None:
                m.bias.zero_()
    elif isinstance(m, nn.InstanceNorm2d) and m.affine:
        with torch.no_grad():
            m.weight.normal_(1.0, 0.02, generator=gen)
            m.bias.zero_()


class _UNetBlock(nn.Module):
    """One encoder/decoder level wrapping the inner levels, concatenating its input on the way out."""

    def __init__(self, outer_nc: int, inner_nc: int, submodule: Optional[nn.Module],
                 outermost: bool = False, innermost: bool = False, in_nc: Optional[int] = None):
        super().__init__()
        self.outermost = outermost
        in_nc = outer_nc if in_nc is None else in_nc
        down = [nn.Conv2d(in_nc, inner_nc, 4, 2, 1)]
        if not outermost:
            down = [nn.LeakyReLU(0.2)] + down
        if not outermost and not innermost:
            down.append(nn.InstanceNorm2d(inner_nc, affine=True))
        up_in = inner_nc if innermost else inner_nc * 2
        up = [nn.ReLU(), nn.ConvTranspose2d(up_in, outer_nc, 4, 2, 1)]
        if not outermost:
            up.append(nn.InstanceNorm2d(outer_nc, affine=True))
        self.down = nn.Sequential(*down)
        self.sub = submodule
        self.up = nn.Sequential(*up)

    def forward(self, x):
        y = self.down(x)
        if self.sub is not None:
            y = self.sub(y)
        y = self.up(y)
        if self.outermost:
            return y
        return torch.cat([x, y], dim=1)


class Generator(nn.Module):
    """U-Net generator; output squashed to [-1, 1] (images) or [-2, 2] (maps)."""

    def __init__(self, spec: GeneratorSpec, role: GeneratorRole, seed: Optional[int] = None):
        super().__init__()
        self.role = GeneratorRole(role)
        self.spec = spec.for_role(self.role)
        s = self.spec
        mults = [min(2 ** i, s.max_channels_mult) for i in range(s.depth)]
        chans = [s.base_channels * m for m in mults]
        block = None
        for i in reversed(range(s.depth)):
            outer = 1 if i == 0 else chans[i - 1]
            block = _UNetBlock(
                outer, chans[i], block,
                outermost=(i == 0), innermost=(i == s.depth - 1),
            )
        self.net = block
        self.scale = 2.0 if s.output_activation == "squash22" else 1.0
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        self.apply(lambda m: _init_weights(m, gen))
        if self.role is GeneratorRole.POS_TO_MAP:
            # start from M ~ 0, i.e. the identity counterfactual
            final = self.net.up[-1]
            with torch.no_grad():
                final.weight.mul_(0.01)
                final.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.spec.input_size or x.shape[-2] != self.spec.input_size:
            raise ContractError(
                f"generator built for {self.spec.input_size} px, got input {tuple(x.shape[-2:])}"
            )
        return self.scale * torch.tanh(self.net(x))


class Discriminator(nn.Module):
    """Patch discriminator emitting a grid of probabilities in (0, 1)."""

    def __init__(self, spec: DiscriminatorSpec, seed: Optional[int] = None):
        super().__init__()
        self.spec = spec
        b = spec.base_channels
        layers: list[nn.Module] = [nn.Conv2d(1, b, 4, 2, 1), nn.LeakyReLU(0.2)]
        nc = b
        for i in range(1, spec.n_layers):
            nxt = b * min(2 ** i, 8)
            layers += [nn.Conv2d(nc, nxt, 4, 2, 1), nn.InstanceNorm2d(nxt, affine=True), nn.LeakyReLU(0.2)]
            nc = nxt
        nxt = b * min(2 ** spec.n_layers, 8)
        layers += [nn.Conv2d(nc, nxt, 4, 1, 1), nn.InstanceNorm2d(nxt, affine=True), nn.LeakyReLU(0.2)]
        layers += [nn.Conv2d(nxt, 1, 4, 1, 1)]
        self.net = nn.Sequential(*layers)
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        self.apply(lambda m: _init_weights(m, gen))

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.spec.input_size or x.shape[-2] != self.spec.input_size:
            raise ContractError(
                f"discriminator built for {self.spec.input_size} px, got input {tuple(x.shape[-2:])}"
            )
        return self.net(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return PROB_EPS + (1.0 - 2.0 * PROB_EPS) * torch.sigmoid(self.logits(x))


def build_generator(spec: GeneratorSpec, role: GeneratorRole, seed: Optional[int] = None) -> Generator:
    return Generator(spec, role, seed=seed)


def build_discriminator(spec: DiscriminatorSpec, seed: Optional[int] = None) -> Discriminator:
    return Discriminator(spec, seed=seed)


def scaled_specs(input_size: int, base_at_256: int = 64, depth: Optional[int] = None,
                 min_base: int = 8) -> tuple[GeneratorSpec, DiscriminatorSpec]:
    """Default specs with channel width scaled down from the 256 px design."""
    base = max(min_base, base_at_256 * input_size // 256)
    if depth is None:
        depth = 4
        while input_size % (2 ** depth) or input_size // (2 ** depth) < 2:
            depth -= 1
    n_layers = 3
    while n_layers > 1 and _disc_out(input_size, n_layers) < 2:
        n_layers -= 1
    return (GeneratorSpec(input_size, base, depth),
            DiscriminatorSpec(input_size, base, n_layers))


def _disc_out(size: int, n_layers: int) -> int:
    # strided k4 p1 convs halve the size; the two stride-1 k4 p1 convs each drop one pixel
    for _ in range(n_layers):
        size = (size + 2 - 4) // 2 + 1
    return size - 2


NET_NAMES = ("forward_generator", "backward_generator", "disc_pos", "disc_neg")


@dataclass
class ModelBundle:
    """The networks of one scheme plus their loss weights and training state.

    ``cascaded_rgan`` bundles carry only the map generator and D^{c-}.
    """

    scheme: Scheme
    forward_generator: Generator
    disc_neg: Discriminator
    backward_generator: Optional[Generator] = None
    disc_pos: Optional[Discriminator] = None
    weights: "LossWeights" = None
    epoch: int = 0
    trained: bool = False
    state: dict = field(default_factory=dict)  # optimizer/rng/buffer state for resuming

    def __post_init__(self):
        from .core import LossWeights
        self.scheme = Scheme(self.scheme)
        if self.weights is None:
            self.weights = LossWeights()
        want = GeneratorRole.POS_TO_NEG if self.scheme is Scheme.CASCADED_CI else GeneratorRole.POS_TO_MAP
        role = getattr(self.forward_generator, "role", want)
        if role is not want:
            raise ConfigError(f"{self.scheme.value} needs a {want.value} forward generator, got {role.value}")
        if self.scheme is not Scheme.CASCADED_RGAN and (self.backward_generator is None or self.disc_pos is None):
            raise ConfigError(f"{self.scheme.value} needs both generators and both discriminators")
        sizes = {n.spec.input_size for n in self.networks().values() if hasattr(n, "spec")}
        if len(sizes) > 1:
            raise ConfigError(f"networks disagree on input size: {sorted(sizes)}")

    def networks(self) -> dict[str, nn.Module]:
        return {k: getattr(self, k) for k in NET_NAMES if getattr(self, k) is not None}

    @property
    def input_size(self) -> int:
        return self.forward_generator.spec.input_size

    @property
    def has_map_generator(self) -> bool:
        return self.scheme is not Scheme.CASCADED_CI

    def train_mode(self, on: bool = True) -> "ModelBundle":
        for net in self.networks().values():
            net.train(on)
        return self


def build_bundle(scheme: Scheme, gen_spec: GeneratorSpec, disc_spec: DiscriminatorSpec,
                 weights=None, seed: int = 0) -> ModelBundle:
    """Freshly initialised networks for ``scheme``; each network gets its own derived seed."""
    scheme = Scheme(scheme)
    fwd_role = GeneratorRole.POS_TO_NEG if scheme is Scheme.CASCADED_CI else GeneratorRole.POS_TO_MAP
    fwd = build_generator(gen_spec, fwd_role, seed=seed * 16 + 1)
    d_neg = build_discriminator(disc_spec, seed=seed * 16 + 4)
    back = d_pos = None
    if scheme is not Scheme.CASCADED_RGAN:
        back = build_generator(gen_spec, GeneratorRole.NEG_TO_POS, seed=seed * 16 + 2)
        d_pos = build_discriminator(disc_spec, seed=seed * 16 + 3)
    return ModelBundle(scheme, fwd, d_neg, back, d_pos, weights)
