"""Multi-task, multi-domain segmentation network.

Convolution kernels are shared by every domain. Each domain owns its batch
normalization statistics and affine parameters (DSBN) and its 1x1 softmax
head. Attention gates and MBConv blocks are built from the same pieces, so
every normalization inside them is domain-specific too.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator, Mapping, NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

EPS = 1e-5
MOMENTUM = 0.1

STRATEGIES = ("dsl", "shared_bn", "individual")


def activation(name: str):
    if name == "relu":
        return F.relu
    if name == "silu":
        return F.silu
    if name == "linear":
        return lambda x: x
    raise ValueError(f"unknown activation {name!r}")


def dsbn_forward(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
                 running_mean: torch.Tensor, running_var: torch.Tensor,
                 training: bool, momentum: float = MOMENTUM, eps: float = EPS) -> torch.Tensor:
    """Batch normalization of ``x`` (B, C, H, W) with one domain's statistics.

    Train mode normalizes with this mini-batch's biased variance and updates
    the running statistics in place (unbiased variance, EMA). Eval mode uses
    the running statistics.
    """
    if x.dim() != 4 or x.shape[1] != gamma.shape[0]:
        raise ValueError(f"expected (B, {gamma.shape[0]}, H, W) input, got {tuple(x.shape)}")
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n < 2:
            raise ValueError("train-mode normalization needs at least 2 values per channel")
        mean = x.mean(dim=(0, 2, 3))
        var = x.var(dim=(0, 2, 3), unbiased=False)
        with torch.no_grad():
            running_mean.mul_(1 - momentum).add_(momentum * mean.detach())
            running_var.mul_(1 - momentum).add_(momentum * var.detach() * n / (n - 1))
    else:
        mean, var = running_mean, running_var
    scale = gamma / torch.sqrt(var + eps)
    return (x - mean[None, :, None, None]) * scale[None, :, None, None] + beta[None, :, None, None]


class DSBN(nn.Module):
    """One (gamma, beta, running mean, running var) set per domain slot."""

    def __init__(self, channels: int, n_domains: int, eps: float = EPS, momentum: float = MOMENTUM):
        super().__init__()
        self.channels = channels
        self.n_domains = n_domains
        self.eps = eps
        self.momentum = momentum
        self.gamma = nn.ParameterList([nn.Parameter(torch.ones(channels)) for _ in range(n_domains)])
        self.beta = nn.ParameterList([nn.Parameter(torch.zeros(channels)) for _ in range(n_domains)])
        for k in range(n_domains):
            self.register_buffer(f"running_mean_{k}", torch.zeros(channels))
            self.register_buffer(f"running_var_{k}", torch.ones(channels))

    def forward(self, x: torch.Tensor, d: int) -> torch.Tensor:
        if not 0 <= d < self.n_domains:
            raise ValueError(f"domain slot {d} out of range")
        return dsbn_forward(x, self.gamma[d], self.beta[d], getattr(self, f"running_mean_{d}"),
                            getattr(self, f"running_var_{d}"), self.training, self.momentum, self.eps)


def _conv(cin: int, cout: int, k: int = 1, groups: int = 1, bias: bool = False) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, padding=k // 2, groups=groups, bias=bias)


class MultiDomainBlock(nn.Module):
    """rho(DSBN_k(W * x)) with a bias-free shared convolution."""

    def __init__(self, cin: int, cout: int, n_domains: int, kernel: int = 3, act: str = "relu"):
        super().__init__()
        self.conv = _conv(cin, cout, kernel)
        self.bn = DSBN(cout, n_domains)
        self.act_name = act
        self.act = activation(act)

    def forward(self, x: torch.Tensor, d: int) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.conv.in_channels:
            raise ValueError(f"expected {self.conv.in_channels} input channels, got {tuple(x.shape)}")
        return self.act(self.bn(self.conv(x), d))


class MBConv(nn.Module):
    """Mobile inverted bottleneck: expand, depthwise, squeeze-excite, project."""

    def __init__(self, cin: int, cout: int, n_domains: int, expansion: int = 4,
                 se_ratio: float = 0.25, kernel: int = 3, act: str = "silu"):
        super().__init__()
        mid = cin * expansion
        squeezed = max(1, int(cin * se_ratio))
        self.cin, self.cout = cin, cout
        self.expand = _conv(cin, mid, 1)
        self.bn_expand = DSBN(mid, n_domains)
        self.depthwise = _conv(mid, mid, kernel, groups=mid)
        self.bn_depthwise = DSBN(mid, n_domains)
        self.se_reduce = _conv(mid, squeezed, 1, bias=True)
        self.se_expand = _conv(squeezed, mid, 1, bias=True)
        self.project = _conv(mid, cout, 1)
        self.bn_project = DSBN(cout, n_domains)
        self.act = activation(act)
        self.use_se = True

    @property
    def residual(self) -> bool:
        return self.cin == self.cout

    def se_gate(self, h: torch.Tensor) -> torch.Tensor:
        s = h.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.se_expand(self.act(self.se_reduce(s))))

    def forward(self, x: torch.Tensor, d: int) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.cin:
            raise ValueError(f"expected {self.cin} input channels, got {tuple(x.shape)}")
        h = self.act(self.bn_expand(self.expand(x), d))
        h = self.act(self.bn_depthwise(self.depthwise(h), d))
        if self.use_se:
            h = h * self.se_gate(h)
        h = self.bn_project(self.project(h), d)
        return h + x if self.residual else h


class AttentionGate(nn.Module):
    """Additive spatial attention on a skip connection.

    Returns the gated skip features and the coefficient map alpha (B, 1, H, W).
    """

    def __init__(self, skip_ch: int, gate_ch: int, inter_ch: int, n_domains: int, act: str = "relu"):
        super().__init__()
        self.skip_ch, self.gate_ch = skip_ch, gate_ch
        self.theta = _conv(skip_ch, inter_ch, 1)
        self.bn_theta = DSBN(inter_ch, n_domains)
        self.phi = _conv(gate_ch, inter_ch, 1)
        self.bn_phi = DSBN(inter_ch, n_domains)
        self.psi = _conv(inter_ch, 1, 1)
        self.bn_psi = DSBN(1, n_domains)
        self.act = activation(act)

    def forward(self, skip: torch.Tensor, gate: torch.Tensor, d: int) -> tuple[torch.Tensor, torch.Tensor]:
        if skip.dim() != 4 or gate.dim() != 4 or skip.shape[0] != gate.shape[0]:
            raise ValueError("skip and gate must be 4D with matching batch size")
        if skip.shape[1] != self.skip_ch or gate.shape[1] != self.gate_ch:
            raise ValueError(f"channel mismatch: skip {skip.shape[1]} (want {self.skip_ch}), "
                             f"gate {gate.shape[1]} (want {self.gate_ch})")
        if gate.shape[2] > skip.shape[2] or gate.shape[3] > skip.shape[3]:
            raise ValueError("gate must not be spatially larger than skip")
        g = self.bn_phi(self.phi(gate), d)
        if g.shape[2:] != skip.shape[2:]:
            g = F.interpolate(g, size=skip.shape[2:], mode="bilinear", align_corners=False)
        s = self.bn_theta(self.theta(skip), d)
        alpha = torch.sigmoid(self.bn_psi(self.psi(self.act(s + g)), d))
        return skip * alpha, alpha


class Stage(nn.Module):
    def __init__(self, cin: int, cout: int, n_domains: int, n_blocks: int, block: str, act: str,
                 expansion: int = 4, se_ratio: float = 0.25):
        super().__init__()
        blocks = []
        for j in range(n_blocks):
            c_in = cin if j == 0 else cout
            if block == "mbconv" and j > 0:
                blocks.append(MBConv(c_in, cout, n_domains, expansion, se_ratio, act=act))
            elif block in ("plain", "mbconv"):
                # an mbconv stage opens with a plain block to change width
                blocks.append(MultiDomainBlock(c_in, cout, n_domains, 3, act))
            else:
                raise ValueError(f"unknown block type {block!r}")
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: torch.Tensor, d: int) -> torch.Tensor:
        for b in self.blocks:
            x = b(x, d)
        return x


@dataclass
class ArchConfig:
    widths: tuple[int, ...] = (32, 64, 128, 256, 512)
    blocks_per_stage: int = 2
    block: str | tuple[str, ...] = "plain"
    attention_gates: bool = True
    activation: str = "relu"
    in_channels: int = 1
    expansion: int = 4
    se_ratio: float = 0.25
    attention_inter_divisor: int = 2

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if isinstance(self.block, (list, tuple)):
            self.block = tuple(self.block)
            if len(self.block) != len(self.widths):
                raise ValueError("one block type per stage is required")
        if len(self.widths) < 1:
            raise ValueError("at least one stage is required")
        activation(self.activation)

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def n_scales(self) -> int:
        return 2 * self.depth - 1

    def stage_block(self, i: int) -> str:
        return self.block[i] if isinstance(self.block, tuple) else self.block

    def embedding_dims(self) -> tuple[int, ...]:
        return self.widths + tuple(reversed(self.widths[:-1]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        if isinstance(self.block, tuple):
            d["block"] = list(self.block)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchConfig":
        return cls(**dict(d))


class SegOutput(NamedTuple):
    probs: torch.Tensor
    embeddings: list[torch.Tensor]
    attention: list[torch.Tensor]
    logits: torch.Tensor


class DomainLayout:
    """Maps domain ids to normalization slots, heads and label spaces.

    ``dsl``/``individual``: one DSBN slot and one head per domain.
    ``shared_bn``: a single slot and a union head over background plus every
    structure of every domain (domain k's class c lives at offset_k + c).
    """

    def __init__(self, domain_classes: Mapping[int, int], strategy: str = "dsl"):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown model strategy {strategy!r}")
        self.domain_classes = {int(k): int(v) for k, v in sorted(domain_classes.items())}
        if not self.domain_classes:
            raise ValueError("at least one domain is required")
        if any(c < 2 for c in self.domain_classes.values()):
            raise ValueError("every domain needs >= 2 classes")
        if strategy == "individual" and len(self.domain_classes) != 1:
            raise ValueError("an individual model serves exactly one domain")
        self.strategy = strategy
        self.domain_ids = list(self.domain_classes)
        self.offsets = {}
        off = 0
        for k, c in self.domain_classes.items():
            self.offsets[k] = off
            off += c - 1
        self.union_classes = off + 1

    @property
    def shared(self) -> bool:
        return self.strategy == "shared_bn"

    @property
    def n_slots(self) -> int:
        return 1 if self.shared else len(self.domain_ids)

    def head_channels(self) -> list[int]:
        if self.shared:
            return [self.union_classes]
        return [self.domain_classes[k] for k in self.domain_ids]

    def slot(self, domain: int) -> int:
        try:
            idx = self.domain_ids.index(int(domain))
        except ValueError:
            raise ValueError(f"unknown domain {domain}; model serves {self.domain_ids}") from None
        return 0 if self.shared else idx

    def model_channels(self, domain: int) -> int:
        return self.union_classes if self.shared else self.domain_classes[int(domain)]

    def to_model_target(self, domain: int, target: torch.Tensor) -> torch.Tensor:
        """Embed a local one-hot/probability stack (B, C_k, H, W) in the model's label space."""
        if not self.shared:
            return target
        off = self.offsets[int(domain)]
        out = target.new_zeros((target.shape[0], self.union_classes) + tuple(target.shape[2:]))
        out[:, 0] = target[:, 0]
        out[:, off + 1: off + target.shape[1]] = target[:, 1:]
        return out

    def local_labels(self, domain: int, model_labels):
        """Union-space label map -> local label map; foreign classes become background."""
        if not self.shared:
            return model_labels
        off, c = self.offsets[int(domain)], self.domain_classes[int(domain)]
        own = (model_labels > off) & (model_labels <= off + c - 1)
        return (model_labels - off) * own

    def local_probs(self, domain: int, probs):
        """Own-class probabilities with foreign mass added to background."""
        if not self.shared:
            return probs
        off, c = self.offsets[int(domain)], self.domain_classes[int(domain)]
        own = probs[:, off + 1: off + c]
        bg = 1.0 - own.sum(1, keepdims=True)
        if isinstance(probs, torch.Tensor):
            return torch.cat([bg, own], 1)
        return np.concatenate([bg, own], 1)

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "domain_classes": {str(k): v for k, v in self.domain_classes.items()}}


def _init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_uniform_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class SegModel(nn.Module):
    """Att-UNet-style encoder-decoder with domain-specific layers.

    ``forward(x, domain)`` returns per-pixel class probabilities for that
    domain and one pooled, L2-normalized embedding per scale (encoder stages,
    then decoder stages: 2 * depth - 1 taps).
    """

    def __init__(self, arch: ArchConfig, domain_classes: Mapping[int, int], strategy: str = "dsl"):
        super().__init__()
        self.arch = arch
        self.layout = DomainLayout(domain_classes, strategy)
        n = self.layout.n_slots
        w, act = arch.widths, arch.activation
        self.encoder = nn.ModuleList()
        cin = arch.in_channels
        for i, cout in enumerate(w):
            self.encoder.append(Stage(cin, cout, n, arch.blocks_per_stage, arch.stage_block(i), act,
                                      arch.expansion, arch.se_ratio))
            cin = cout
        self.up = nn.ModuleList()
        self.gates = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for i in range(arch.depth - 1):
            self.up.append(MultiDomainBlock(w[i + 1], w[i], n, 3, act))
            if arch.attention_gates:
                inter = max(1, w[i] // arch.attention_inter_divisor)
                self.gates.append(AttentionGate(w[i], w[i + 1], inter, n, act))
            self.decoder.append(Stage(2 * w[i], w[i], n, arch.blocks_per_stage, arch.stage_block(i), act,
                                      arch.expansion, arch.se_ratio))
        self.heads = nn.ModuleList(nn.Conv2d(w[0], c, 1, bias=True) for c in self.layout.head_channels())
        _init_weights(self)

    @property
    def domain_ids(self) -> list[int]:
        return self.layout.domain_ids

    @property
    def strategy(self) -> str:
        return self.layout.strategy

    def check_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x[:, None]
        if x.dim() != 4 or x.shape[1] != self.arch.in_channels:
            raise ValueError(f"expected (B, {self.arch.in_channels}, H, W) input, got {tuple(x.shape)}")
        f = 2 ** (self.arch.depth - 1)
        if x.shape[2] % f or x.shape[3] % f:
            raise ValueError(f"input size {tuple(x.shape[2:])} is not divisible by {f}")
        return x

    def forward(self, x: torch.Tensor, domain: int) -> SegOutput:
        x = self.check_input(x)
        d = self.layout.slot(domain)
        taps, skips, attention = [], [], []
        h = x
        for i, stage in enumerate(self.encoder):
            if i:
                h = F.max_pool2d(h, 2)
            h = stage(h, d)
            taps.append(h)
            skips.append(h)
        for i in reversed(range(self.arch.depth - 1)):
            gate = h
            up = self.up[i](F.interpolate(h, scale_factor=2, mode="nearest"), d)
            skip = skips[i]
            if self.arch.attention_gates:
                skip, alpha = self.gates[i](skip, gate, d)
                attention.append(alpha)
            h = self.decoder[i](torch.cat([skip, up], dim=1), d)
            taps.append(h)
        logits = self.heads[0 if self.layout.shared else d](h)
        probs = torch.softmax(logits, dim=1)
        embeddings = [pool_embedding(t) for t in taps]
        return SegOutput(probs, embeddings, attention, logits)

    # -- parameter accounting -------------------------------------------------
    def domain_parameters(self, domain: int) -> Iterator[nn.Parameter]:
        """Gamma_k: the DSBN affine parameters and head of ``domain``."""
        d = self.layout.slot(domain)
        for m in self.modules():
            if isinstance(m, DSBN):
                yield m.gamma[d]
                yield m.beta[d]
        yield from self.heads[0 if self.layout.shared else d].parameters()

    def shared_parameters(self) -> Iterator[nn.Parameter]:
        specific = {id(p) for k in self.domain_ids for p in self.domain_parameters(k)}
        return (p for p in self.parameters() if id(p) not in specific)

    def parameter_split(self) -> dict:
        shared = sum(p.numel() for p in self.shared_parameters())
        specific = sum(p.numel() for p in self.parameters()) - shared
        total = shared + specific
        return {"shared": shared, "domain_specific": specific, "total": total,
                "domain_specific_fraction": specific / total}


def pool_embedding(feature: torch.Tensor) -> torch.Tensor:
    """Global average pooling followed by L2 normalization, (B, C, H, W) -> (B, C)."""
    return F.normalize(feature.mean(dim=(2, 3)), dim=1, eps=1e-12)


def segmentation_head(u: torch.Tensor, domain: int, model: SegModel) -> torch.Tensor:
    """softmax(W_k * u + b_k) for the head serving ``domain``."""
    d = model.layout.slot(domain)
    head = model.heads[0 if model.layout.shared else d]
    if u.shape[1] != head.in_channels:
        raise ValueError(f"expected {head.in_channels} feature channels, got {u.shape[1]}")
    return torch.softmax(head(u), dim=1)
