"""Multi-joint auto-encoder used as a frozen anatomical-prior encoder."""
from __future__ import annotations

import hashlib
from typing import Iterator, Mapping, NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .segnet import DSBN, ArchConfig, DomainLayout, MultiDomainBlock, Stage, _init_weights, pool_embedding


class PriorError(RuntimeError):
    """The anatomical encoder is not frozen, or its weights changed after freezing."""


class AEOutput(NamedTuple):
    probs: torch.Tensor
    embeddings: list[torch.Tensor]
    code: torch.Tensor
    logits: torch.Tensor


class AEModel(nn.Module):
    """Encoder F / decoder G over label stacks, without skip connections.

    Each domain has its own 1x1 input layer (|C_k| -> width[0]), its own DSBN
    slots and its own 1x1 output head; all other kernels are shared.
    """

    def __init__(self, arch: ArchConfig, domain_classes: Mapping[int, int], strategy: str = "dsl"):
        super().__init__()
        self.arch = arch
        self.layout = DomainLayout(domain_classes, strategy)
        n = self.layout.n_slots
        w, act = arch.widths, arch.activation
        channels = self.layout.head_channels()
        self.inputs = nn.ModuleList(nn.Conv2d(c, w[0], 1, bias=True) for c in channels)
        self.encoder = nn.ModuleList()
        cin = w[0]
        for i, cout in enumerate(w):
            self.encoder.append(Stage(cin, cout, n, arch.blocks_per_stage, arch.stage_block(i), act,
                                      arch.expansion, arch.se_ratio))
            cin = cout
        self.up = nn.ModuleList(MultiDomainBlock(w[i + 1], w[i], n, 3, act) for i in range(arch.depth - 1))
        self.decoder = nn.ModuleList(
            Stage(w[i], w[i], n, arch.blocks_per_stage, arch.stage_block(i), act, arch.expansion, arch.se_ratio)
            for i in range(arch.depth - 1)
        )
        self.heads = nn.ModuleList(nn.Conv2d(w[0], c, 1, bias=True) for c in channels)
        _init_weights(self)
        self.frozen_fingerprint: str | None = None

    @property
    def domain_ids(self) -> list[int]:
        return self.layout.domain_ids

    def _slot(self, domain: int) -> int:
        return self.layout.slot(domain)

    def encode(self, y: torch.Tensor, domain: int) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Code (bottleneck feature map) and the encoder-side embeddings."""
        d = self._slot(domain)
        expected = self.layout.model_channels(domain)
        if y.dim() != 4 or y.shape[1] != expected:
            raise ValueError(f"expected (B, {expected}, H, W) label stack, got {tuple(y.shape)}")
        f = 2 ** (self.arch.depth - 1)
        if y.shape[2] % f or y.shape[3] % f:
            raise ValueError(f"input size {tuple(y.shape[2:])} is not divisible by {f}")
        h = self.inputs[d](y)
        taps = []
        for i, stage in enumerate(self.encoder):
            if i:
                h = F.max_pool2d(h, 2)
            h = stage(h, d)
            taps.append(pool_embedding(h))
        return h, taps

    def decode(self, code: torch.Tensor, domain: int) -> tuple[torch.Tensor, list[torch.Tensor], torch.Tensor]:
        d = self._slot(domain)
        h = code
        taps = []
        for i in reversed(range(self.arch.depth - 1)):
            h = self.up[i](F.interpolate(h, scale_factor=2, mode="nearest"), d)
            h = self.decoder[i](h, d)
            taps.append(pool_embedding(h))
        logits = self.heads[d](h)
        return torch.softmax(logits, dim=1), taps, logits

    def forward(self, y: torch.Tensor, domain: int) -> AEOutput:
        code, enc_taps = self.encode(y, domain)
        probs, dec_taps, logits = self.decode(code, domain)
        return AEOutput(probs, enc_taps + dec_taps, code, logits)

    # -- freezing ------------------------------------------------------------
    def encoder_state(self) -> Iterator[tuple[str, torch.Tensor]]:
        for name, t in self.state_dict().items():
            if name.startswith(("inputs.", "encoder.")):
                yield name, t

    def encoder_fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.encoder_state()):
            h.update(name.encode())
            h.update(str(t.dtype).encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def freeze(self) -> str:
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen_fingerprint = self.encoder_fingerprint()
        return self.frozen_fingerprint

    def check_frozen(self, expected: str | None = None) -> None:
        if self.frozen_fingerprint is None:
            raise PriorError("anatomical encoder has not been frozen")
        if expected is not None and expected != self.frozen_fingerprint:
            raise PriorError("anatomical encoder fingerprint does not match the expected value")
        if self.training:
            raise PriorError("anatomical encoder must run in eval mode")
        if any(p.requires_grad for p in self.parameters()):
            raise PriorError("anatomical encoder parameters must not require gradients")
        if self.encoder_fingerprint() != self.frozen_fingerprint:
            raise PriorError("anatomical encoder weights changed after freezing")

    def domain_parameters(self, domain: int) -> Iterator[nn.Parameter]:
        d = self._slot(domain)
        for m in self.modules():
            if isinstance(m, DSBN):
                yield m.gamma[d]
                yield m.beta[d]
        yield from self.inputs[d].parameters()
        yield from self.heads[d].parameters()

    def parameter_split(self) -> dict:
        specific = {id(p) for k in self.domain_ids for p in self.domain_parameters(k)}
        n_spec = sum(p.numel() for p in self.parameters() if id(p) in specific)
        total = sum(p.numel() for p in self.parameters())
        return {"shared": total - n_spec, "domain_specific": n_spec, "total": total,
                "domain_specific_fraction": n_spec / total}
