"""Cascaded reconstruction network with interleaved data-consistency blocks.

The default architecture is five convolutional blocks, each five 3x3 conv
layers (2 -> 32 -> 32 -> 32 -> 32 -> 2) with ReLU after the first four and a
residual connection over the block, alternating with data-consistency blocks
in k-space.  That plan has 28,930 parameters per block, 144,650 total.

The universal variant inserts per-anatomy instance normalization after conv
layers 1-4 of every block: instance statistics are shared, only the affine
pair (gamma, beta) is selected by anatomy.  One anatomy's affine set is
20 sites x 2 x 32 = 1,280 parameters, and new anatomies can be added without
touching existing ones.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .kspace import data_consistency


def instance_norm(h, gamma, beta, eps=1e-5):
    """Normalize each channel over its own spatial extent, then apply an affine.

    ``h`` is (..., C, H, W); ``gamma`` and ``beta`` are length-C vectors.
    Mean and (population) variance are computed per channel over H x W only.
    """
    h = torch.as_tensor(h)
    gamma = torch.as_tensor(gamma)
    beta = torch.as_tensor(beta)
    c = h.shape[-3]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"affine parameters must have shape ({c},), got {tuple(gamma.shape)} and {tuple(beta.shape)}"
        )
    mu = h.mean(dim=(-2, -1), keepdim=True)
    var = h.var(dim=(-2, -1), unbiased=False, keepdim=True)
    normalized = (h - mu) / torch.sqrt(var + eps)
    return gamma[:, None, None] * normalized + beta[:, None, None]


class AnatomyNormBank(nn.Module):
    """Parallel per-anatomy affine parameter sets over shared instance statistics.

    ``gamma[name]`` and ``beta[name]`` each hold one (num_sites, C) tensor,
    initialized to ones/zeros so a fresh anatomy starts as plain
    normalization.  Anatomies are addressed by registration index or name;
    an unregistered anatomy is an error, never a silent fallback.
    """

    def __init__(self, num_sites, num_features, eps=1e-5, anatomies=()):
        super().__init__()
        self.num_sites = num_sites
        self.num_features = num_features
        self.eps = eps
        self.gamma = nn.ParameterDict()
        self.beta = nn.ParameterDict()
        self._names = []
        for name in anatomies:
            self.add_anatomy(name)

    def add_anatomy(self, name):
        name = str(name)
        if name in self.gamma:
            raise ValueError(f"anatomy {name!r} is already registered")
        self.gamma[name] = nn.Parameter(torch.ones(self.num_sites, self.num_features))
        self.beta[name] = nn.Parameter(torch.zeros(self.num_sites, self.num_features))
        self._names.append(name)
        return len(self._names) - 1

    @property
    def registry(self):
        return {name: i for i, name in enumerate(self._names)}

    def resolve(self, anatomy):
        if isinstance(anatomy, str):
            if anatomy not in self.gamma:
                raise KeyError(f"anatomy {anatomy!r} is not registered (have {self._names})")
            return anatomy
        index = int(anatomy)
        if not 0 <= index < len(self._names):
            raise KeyError(f"anatomy index {index} is not registered (have {len(self._names)})")
        return self._names[index]

    def forward(self, h, site, anatomy):
        if not 0 <= site < self.num_sites:
            raise ValueError(f"site {site} out of range [0, {self.num_sites})")
        name = self.resolve(anatomy)
        return instance_norm(h, self.gamma[name][site], self.beta[name][site], self.eps)


class CascadeNet(nn.Module):
    """Unrolled reconstruction model: conv blocks interleaved with DC blocks."""

    def __init__(
        self,
        num_cascades=5,
        layers_per_block=5,
        features=32,
        image_channels=2,
        kernel_size=3,
        use_aspin=False,
        anatomies=(),
        dc_mode="hard",
        trace_layer=3,
        eps=1e-5,
        seed=None,
    ):
        super().__init__()
        if not 1 <= trace_layer <= layers_per_block:
            raise ValueError(f"trace_layer must lie in [1, {layers_per_block}]")
        self.num_cascades = num_cascades
        self.layers_per_block = layers_per_block
        self.features = features
        self.image_channels = image_channels
        self.kernel_size = kernel_size
        self.dc_mode = dc_mode
        self.trace_layer = trace_layer
        self.eps = eps

        pad = kernel_size // 2
        channels = [image_channels] + [features] * (layers_per_block - 1) + [image_channels]
        self.cascades = nn.ModuleList()
        for _ in range(num_cascades):
            block = nn.ModuleList(
                nn.Conv2d(channels[i], channels[i + 1], kernel_size, padding=pad)
                for i in range(layers_per_block)
            )
            self.cascades.append(block)

        self.norm_sites = num_cascades * (layers_per_block - 1)
        if use_aspin:
            self.anatomy_norm = AnatomyNormBank(
                self.norm_sites, features, eps=eps, anatomies=anatomies
            )
        else:
            if anatomies:
                raise ValueError("anatomies require use_aspin=True")
            self.anatomy_norm = None

        self._reset_parameters(seed)

    def _reset_parameters(self, seed):
        # Kaiming-uniform interior layers; zero final layer so every block
        # starts as the identity and the unrolled model starts at the
        # zero-filled image instead of amplifying noise.
        gen = torch.Generator()
        if seed is not None:
            gen.manual_seed(int(seed))
        with torch.no_grad():
            for block in self.cascades:
                for conv in block[:-1]:
                    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
                    bound = math.sqrt(6.0 / fan_in)
                    conv.weight.uniform_(-bound, bound, generator=gen)
                    conv.bias.zero_()
                block[-1].weight.zero_()
                block[-1].bias.zero_()

    def arch_config(self):
        return {
            "num_cascades": self.num_cascades,
            "layers_per_block": self.layers_per_block,
            "features": self.features,
            "image_channels": self.image_channels,
            "kernel_size": self.kernel_size,
            "use_aspin": self.anatomy_norm is not None,
            "dc_mode": self.dc_mode,
            "trace_layer": self.trace_layer,
            "eps": self.eps,
        }

    @classmethod
    def from_arch(cls, arch, anatomies=()):
        return cls(anatomies=anatomies, **arch)

    def anatomy_registry(self):
        return {} if self.anatomy_norm is None else self.anatomy_norm.registry

    def add_anatomy(self, name):
        """Register a fresh (gamma=1, beta=0) affine set; existing ones are untouched."""
        if self.anatomy_norm is None:
            raise ValueError("model was built without an anatomy norm bank")
        return self.anatomy_norm.add_anatomy(name)

    def _resolve_anatomy(self, anatomy):
        if self.anatomy_norm is not None:
            if anatomy is None:
                raise ValueError("model has an anatomy norm bank: a forward pass must name an anatomy")
            return self.anatomy_norm.resolve(anatomy)
        if anatomy is not None:
            raise ValueError("model has no anatomy norm bank but an anatomy was given")
        return None

    def block_forward(self, x, cascade, anatomy=None, trace_layer=None):
        """One conv block with residual connection; returns (output, traced activation).

        The trace is the activation after the conv (and anatomy norm, when
        present) at ``trace_layer``, before the nonlinearity.
        """
        name = self._resolve_anatomy(anatomy)
        if trace_layer is None:
            trace_layer = self.trace_layer
        block = self.cascades[cascade]
        h = x
        trace = None
        for layer, conv in enumerate(block, start=1):
            h = conv(h)
            if self.anatomy_norm is not None and layer < self.layers_per_block:
                site = cascade * (self.layers_per_block - 1) + (layer - 1)
                h = self.anatomy_norm(h, site, name)
            if layer == trace_layer:
                trace = h
            if layer < self.layers_per_block:
                h = F.relu(h)
        return x + h, trace

    def forward(self, x_u, y, mask, anatomy=None, collect_traces=False, trace_layer=None):
        """Alternate conv blocks and data consistency; input is the zero-filled image.

        With ``collect_traces`` the return value is (output, [trace per cascade]).
        """
        x = torch.as_tensor(x_u)
        traces = []
        for cascade in range(self.num_cascades):
            x, trace = self.block_forward(x, cascade, anatomy=anatomy, trace_layer=trace_layer)
            if collect_traces:
                traces.append(trace)
            x = data_consistency(x, y, mask, self.dc_mode)
        if collect_traces:
            return x, traces
        return x


def count_parameters(model, scope="base"):
    """Parameter accounting: shared conv weights, one anatomy's affine set, or everything."""
    if scope == "base":
        return sum(p.numel() for name, p in model.named_parameters() if name.startswith("cascades."))
    if scope == "per_anatomy":
        return model.norm_sites * 2 * model.features
    if scope == "total":
        return sum(p.numel() for p in model.parameters())
    raise ValueError(f"scope must be 'base', 'per_anatomy' or 'total', got {scope!r}")
