"""Siamese CNN for 5-way ordinal grading of patch pairs.

Both patches share one trunk of 3x3 conv blocks (conv -> instance norm ->
LeakyReLU 0.2) with strided downsampling, channel dropout between block
groups, and a bottleneck pooled either by directional separable max-pooling
(vertical-horizontal or horizontal-vertical, with a 1x1 conv nonlinearity in
between) or by global average pooling. The two pooled vectors are
concatenated, passed through dropout and one fully-connected layer.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

POOLINGS = ("sam_hv", "sam_vh", "gap")

CHECKPOINT_MAGIC = b"SXLCKPT1"
_DTYPE_TAGS = {torch.float32: "<f4", torch.float64: "<f8"}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


@dataclass(frozen=True)
class NetworkConfig:
    pooling: str = "sam_hv"
    dropout_rate: float = 0.35
    widths: tuple[int, int, int, int] = (32, 64, 128, 256)
    input_size: int = 128
    n_classes: int = 5

    def __post_init__(self):
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.input_size % 8 != 0:
            raise ValueError("input_size must be divisible by 8")
        if len(self.widths) != 4:
            raise ValueError("widths must give 4 stage channel counts")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))


def instance_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
                  eps: float = 1e-5) -> torch.Tensor:
    """Per-sample, per-channel normalization over the spatial dims with a
    learnable affine. Zero-variance inputs (including single-element maps)
    normalize to 0 before the affine."""
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), unbiased=False, keepdim=True)
    y = (x - mean) / torch.sqrt(var + eps)
    return y * gamma.view(1, -1, 1, 1) + beta.view(1, -1, 1, 1)


def _dropout(x: torch.Tensor, p: float, mask_shape: tuple, train: bool,
             g: torch.Generator | None) -> torch.Tensor:
    if not train or p <= 0.0:
        return x
    keep = torch.rand(mask_shape, generator=g, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def dropout_channels(x, p, train=False, g=None):
    """Whole-channel Bernoulli dropout, uniform across spatial positions."""
    return _dropout(x, p, (x.shape[0], x.shape[1], 1, 1), train, g)


def dropout_dense(x, p, train=False, g=None):
    return _dropout(x, p, x.shape, train, g)


class ConvBlock(nn.Module):
    """3x3 conv (zero pad 1, no bias) -> instance norm -> LeakyReLU(0.2)."""

    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch, 3, 3))
        self.gamma = nn.Parameter(torch.ones(out_ch))
        self.beta = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x):
        y = F.conv2d(x, self.weight, None, stride=self.stride, padding=1)
        y = instance_norm(y, self.gamma, self.beta)
        return F.leaky_relu(y, 0.2)


class SamPool(nn.Module):
    """Separable adaptive max-pooling bottleneck.

    'vh': column-wise max (collapse height) -> 1x1 conv -> IN -> LeakyReLU
    -> row-wise max (collapse width). 'hv' swaps the two max steps.
    """

    def __init__(self, channels: int, variant: str):
        super().__init__()
        if variant not in ("vh", "hv"):
            raise ValueError("variant must be 'vh' or 'hv'")
        self.variant = variant
        self.weight = nn.Parameter(torch.empty(channels, channels, 1, 1))
        self.gamma = nn.Parameter(torch.ones(channels))
        self.beta = nn.Parameter(torch.zeros(channels))

    def forward(self, x, bypass_norm: bool = False):
        first_dim, last_dim = (2, 3) if self.variant == "vh" else (3, 2)
        y = x.amax(dim=first_dim, keepdim=True)
        y = F.conv2d(y, self.weight)
        if not bypass_norm:
            y = instance_norm(y, self.gamma, self.beta)
        y = F.leaky_relu(y, 0.2)
        return y.amax(dim=last_dim, keepdim=True)


def sam_pool(featmap: torch.Tensor, variant: str, params: SamPool,
             bypass_norm: bool = False) -> torch.Tensor:
    """Functional wrapper; `variant` must match the module's."""
    if variant.removeprefix("sam_") != params.variant:
        raise ValueError("variant does not match pooling parameters")
    return params(featmap, bypass_norm=bypass_norm)


def gap_pool(featmap: torch.Tensor) -> torch.Tensor:
    """Spatial mean per channel, C x 1 x 1."""
    return featmap.mean(dim=(2, 3), keepdim=True)


# trunk layout: (stage index into widths, stride); dropout after each group
_TRUNK_PLAN = ((0, 1), (0, 1), (0, 1),
               (1, 2), (1, 1),
               (2, 2), (2, 1),
               (3, 2), (3, 1))
_DROPOUT_AFTER = (2, 4, 6, 8)


def feature_shapes(config: NetworkConfig) -> list[tuple[int, int]]:
    """(channels, spatial side) after each trunk block."""
    shapes = []
    side = config.input_size
    for stage, stride in _TRUNK_PLAN:
        side = side // stride
        shapes.append((config.widths[stage], side))
    return shapes


class SiameseGrader(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        blocks = []
        in_ch = 1
        for stage, stride in _TRUNK_PLAN:
            out_ch = config.widths[stage]
            blocks.append(ConvBlock(in_ch, out_ch, stride))
            in_ch = out_ch
        self.trunk = nn.ModuleList(blocks)
        if config.pooling == "gap":
            self.pool = None
        else:
            self.pool = SamPool(in_ch, config.pooling.removeprefix("sam_"))
        self.fc = nn.Linear(2 * in_ch, config.n_classes)

    def embed(self, patches: torch.Tensor, train: bool = False,
              g: torch.Generator | None = None) -> torch.Tensor:
        """Run (M, 1, H, H) patches through the shared trunk to (M, C)."""
        p = self.config.dropout_rate
        x = patches
        for i, block in enumerate(self.trunk):
            x = block(x)
            if i in _DROPOUT_AFTER:
                x = dropout_channels(x, p, train, g)
        pooled = gap_pool(x) if self.pool is None else self.pool(x)
        return pooled.flatten(1)

    def features(self, pairs: torch.Tensor, train: bool = False,
                 g: torch.Generator | None = None) -> torch.Tensor:
        """Concatenated (lateral | medial) feature vector, before dropout/FC."""
        n = pairs.shape[0]
        patches = pairs.reshape(n * 2, 1, *pairs.shape[2:])
        feat = self.embed(patches, train, g)
        return feat.view(n, -1)

    def forward(self, pairs: torch.Tensor, train: bool = False,
                g: torch.Generator | None = None) -> torch.Tensor:
        """Logits for a (N, 2, H, H) batch of pairs. Dropout is active only
        when train=True; pass a torch.Generator for replayable masks."""
        v = self.features(pairs, train, g)
        v = dropout_dense(v, self.config.dropout_rate, train, g)
        return self.fc(v)


def init_params(config: NetworkConfig, seed: int) -> SiameseGrader:
    """Fresh network with fan-in-scaled normal init for conv/FC weights,
    unit gains and zero shifts elsewhere. Deterministic per seed."""
    net = SiameseGrader(config)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for block in net.trunk:
            fan_in = block.weight.shape[1] * 9
            block.weight.copy_(torch.randn(block.weight.shape, generator=g)
                               * (2.0 / fan_in) ** 0.5)
            block.gamma.fill_(1.0)
            block.beta.fill_(0.0)
        if net.pool is not None:
            fan_in = net.pool.weight.shape[1]
            net.pool.weight.copy_(torch.randn(net.pool.weight.shape, generator=g)
                                  * (2.0 / fan_in) ** 0.5)
            net.pool.gamma.fill_(1.0)
            net.pool.beta.fill_(0.0)
        fan_in = net.fc.in_features
        net.fc.weight.copy_(torch.randn(net.fc.weight.shape, generator=g)
                            * (2.0 / fan_in) ** 0.5)
        net.fc.bias.fill_(0.0)
    return net


def zero_grads(net: nn.Module) -> None:
    for p in net.parameters():
        p.grad = None


def backward(net: nn.Module, output: torch.Tensor,
             upstream_grad: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
    """Fill every parameter's grad slot with d(output)/d(param).

    `output` must come from a forward pass on this net with the graph still
    alive; non-scalar outputs need an upstream gradient.
    """
    zero_grads(net)
    if upstream_grad is None:
        output.backward()
    else:
        output.backward(gradient=upstream_grad)
    return {name: p.grad for name, p in net.named_parameters()}


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


# ---------------------------------------------------------------------------
# checkpoint container: magic + u64 header length + JSON header + raw payload

def save_checkpoint(path: str | Path, net: SiameseGrader,
                    meta: dict | None = None) -> None:
    tensors = []
    payload = bytearray()
    for name, p in net.named_parameters():
        arr = p.detach().cpu().numpy()
        tag = _DTYPE_TAGS[p.dtype]
        raw = arr.astype(tag, copy=False).tobytes()
        tensors.append({"name": name, "dtype": tag, "shape": list(arr.shape),
                        "offset": len(payload), "nbytes": len(raw)})
        payload.extend(raw)
    header = json.dumps({"config": asdict(net.config), "meta": meta or {},
                         "tensors": tensors}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        fh.write(payload)


def load_checkpoint(path: str | Path) -> tuple[SiameseGrader, dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    hlen = int.from_bytes(blob[8:16], "little")
    header = json.loads(blob[16:16 + hlen])
    payload = blob[16 + hlen:]

    cfg_dict = dict(header["config"])
    cfg_dict["widths"] = tuple(cfg_dict["widths"])
    config = NetworkConfig(**cfg_dict)
    net = SiameseGrader(config)
    if header["tensors"] and header["tensors"][0]["dtype"] == "<f8":
        net.double()
    params = dict(net.named_parameters())
    with torch.no_grad():
        for t in header["tensors"]:
            raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
            arr = np.frombuffer(raw, dtype=t["dtype"]).reshape(t["shape"])
            params[t["name"]].copy_(torch.from_numpy(arr.copy()))
    return net, header["meta"]
