"""ExtendNLNet and the CsiNet-style baseline.

Both architectures share one skeleton:

    encoder: conv3x3(2->2) -> BN -> LeakyReLU -> [Non-Local] -> flatten -> dense L->K
    decoder: dense K->L -> reshape 2xSxS -> [Non-Local] -> RefineBlock x2
             -> conv3x3(2->2) -> sigmoid

ExtendNLNet enables the Non-Local blocks and widens the Refine kernels to
3/5/9; the baseline drops the Non-Local blocks and uses 3/3/3.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn


class Architecture(str, enum.Enum):
    EXTENDNLNET = "extendnlnet"
    CSINET = "csinet"


@dataclass(frozen=True)
class ModelConfig:
    compression_ratio: int = 16
    architecture: Architecture = Architecture.EXTENDNLNET
    image_size: int = 32
    leaky_slope: float = 0.3
    nl_downsampled_channels: int = 16
    nl_embed_channels: int = 8
    encoder_nonlocal_blocks: int = 1
    decoder_nonlocal_blocks: int = 1
    refine_blocks: int = 2
    refine_kernels: tuple[int, int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "architecture", Architecture(self.architecture))
        if self.refine_kernels is None:
            kernels = (3, 5, 9) if self.architecture is Architecture.EXTENDNLNET else (3, 3, 3)
            object.__setattr__(self, "refine_kernels", kernels)
        else:
            object.__setattr__(self, "refine_kernels", tuple(int(k) for k in self.refine_kernels))
        if self.image_size < 2 or self.image_size % 2:
            raise ValueError("image_size must be an even integer >= 2")
        if self.compression_ratio < 1 or self.flattened_length % self.compression_ratio:
            raise ValueError(
                f"compression ratio {self.compression_ratio} does not divide L={self.flattened_length}"
            )
        if min(self.nl_downsampled_channels, self.nl_embed_channels) < 1:
            raise ValueError("Non-Local channel counts must be >= 1")
        if any(k < 1 or k % 2 == 0 for k in self.refine_kernels):
            raise ValueError("refine kernels must be odd and positive")

    @property
    def flattened_length(self) -> int:
        return 2 * self.image_size * self.image_size

    @property
    def codeword_length(self) -> int:
        return self.flattened_length // self.compression_ratio

    @property
    def uses_nonlocal(self) -> bool:
        return self.architecture is Architecture.EXTENDNLNET

    def to_dict(self) -> dict:
        d = asdict(self)
        d["architecture"] = self.architecture.value
        d["refine_kernels"] = list(self.refine_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("refine_kernels") is not None:
            d["refine_kernels"] = tuple(d["refine_kernels"])
        return cls(**d)


def _conv(c_in: int, c_out: int, kernel: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(c_in, c_out, kernel, stride=stride, padding=kernel // 2)


def _check_spatial(x: torch.Tensor, channels: int, size: int) -> None:
    if x.dim() != 4 or x.shape[1] != channels or x.shape[2:] != (size, size):
        raise ValueError(
            f"expected input (batch, {channels}, {size}, {size}), got {tuple(x.shape)}"
        )


class NonLocalBlock(nn.Module):
    """Embedded-Gaussian Non-Local block on a stride-2 downsampled feature map.

    The value branch keeps the full downsampled width; query/key are projected
    to ``embed_channels``.
    """

    def __init__(self, channels: int, size: int = 32, inner_channels: int = 16,
                 embed_channels: int = 8):
        super().__init__()
        self.channels = channels
        self.size = size
        self.down = _conv(channels, inner_channels, 3, stride=2)
        self.theta = nn.Conv2d(inner_channels, embed_channels, 1)
        self.phi = nn.Conv2d(inner_channels, embed_channels, 1)
        self.g = nn.Conv2d(inner_channels, inner_channels, 1)
        self.out = nn.Conv2d(inner_channels, inner_channels, 1)
        # 3x3, stride 2, padding 1: output_padding 1 restores an even size exactly
        self.up = nn.ConvTranspose2d(inner_channels, channels, 3, stride=2, padding=1,
                                     output_padding=1)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        """Row-normalized ``(batch, P, P)`` affinity over the ``P`` downsampled positions."""
        _check_spatial(x, self.channels, self.size)
        return self._attention(self.down(x))

    def _attention(self, y: torch.Tensor) -> torch.Tensor:
        query = self.theta(y).flatten(2).transpose(1, 2)
        key = self.phi(y).flatten(2)
        return torch.softmax(query @ key, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_spatial(x, self.channels, self.size)
        y = self.down(x)
        b, c, h, w = y.shape
        weights = self._attention(y)
        value = self.g(y).flatten(2).transpose(1, 2)
        agg = (weights @ value).transpose(1, 2).reshape(b, c, h, w)
        return self.up(self.out(agg)) + x


class RefineBlock(nn.Module):
    """Residual three-convolution refinement, 2 -> 8 -> 16 -> 2 feature maps."""

    def __init__(self, kernels=(3, 5, 9), slope: float = 0.3):
        super().__init__()
        k1, k2, k3 = kernels
        self.body = nn.Sequential(
            _conv(2, 8, k1), nn.BatchNorm2d(8), nn.LeakyReLU(slope),
            _conv(8, 16, k2), nn.BatchNorm2d(16), nn.LeakyReLU(slope),
            _conv(16, 2, k3), nn.BatchNorm2d(2),
        )
        self.act = nn.LeakyReLU(slope)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 2:
            raise ValueError(f"expected (batch, 2, H, W), got {tuple(x.shape)}")
        return self.act(self.body(x) + x)


class Encoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        s = config.image_size
        self.head = nn.Sequential(_conv(2, 2, 3), nn.BatchNorm2d(2), nn.LeakyReLU(config.leaky_slope))
        n_nl = config.encoder_nonlocal_blocks if config.uses_nonlocal else 0
        self.nonlocal_blocks = nn.Sequential(*[
            NonLocalBlock(2, s, config.nl_downsampled_channels, config.nl_embed_channels)
            for _ in range(n_nl)
        ])
        self.fc = nn.Linear(config.flattened_length, config.codeword_length)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        """Flattened ``(batch, L)`` input to the dense layer; row-major over (plane, row, col)."""
        _check_spatial(x, 2, self.config.image_size)
        return self.nonlocal_blocks(self.head(x)).flatten(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(x))


class Decoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        s = config.image_size
        self.fc = nn.Linear(config.codeword_length, config.flattened_length)
        n_nl = config.decoder_nonlocal_blocks if config.uses_nonlocal else 0
        self.nonlocal_blocks = nn.Sequential(*[
            NonLocalBlock(2, s, config.nl_downsampled_channels, config.nl_embed_channels)
            for _ in range(n_nl)
        ])
        self.refine = nn.Sequential(*[
            RefineBlock(config.refine_kernels, config.leaky_slope)
            for _ in range(config.refine_blocks)
        ])
        self.tail = _conv(2, 2, 3)

    def forward(self, s: torch.Tensor) -> torch.Tensor:
        k = self.config.codeword_length
        if s.dim() != 2 or s.shape[1] != k:
            raise ValueError(f"expected codewords of shape (batch, {k}), got {tuple(s.shape)}")
        size = self.config.image_size
        x = self.fc(s).view(-1, 2, size, size)
        x = self.refine(self.nonlocal_blocks(x))
        return torch.sigmoid(self.tail(x))


class CsiAutoencoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.decoder = Decoder(config)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


def build_model(config: ModelConfig, seed: int | None = None) -> CsiAutoencoder:
    if seed is not None:
        torch.manual_seed(seed)
    return CsiAutoencoder(config)


@dataclass
class ParameterAudit:
    total: int
    fc_params: int
    non_fc_params: int
    layers: list[tuple[str, int]] = field(default_factory=list)
    # BatchNorm over the last (width) axis with 4 scalars per feature, as
    # Keras counts a channels_first CsiNet; explains published totals
    legacy_non_fc_params: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [{"name": n, "params": c} for n, c in self.layers]
        return d


def count_parameters(model: nn.Module | None) -> ParameterAudit:
    """Trainable scalars split into the two dense layers and everything else.

    BatchNorm running statistics are buffers, not parameters, and are excluded.
    """
    if model is None:
        return ParameterAudit(total=0, fc_params=0, non_fc_params=0, legacy_non_fc_params=0)
    layers, fc, legacy = [], 0, 0
    fc_modules = set()
    if isinstance(model, CsiAutoencoder):
        fc_modules = {model.encoder.fc, model.decoder.fc}
    for name, module in model.named_modules():
        own = sum(p.numel() for p in module.parameters(recurse=False) if p.requires_grad)
        if not own:
            continue
        layers.append((name, own))
        if module in fc_modules:
            fc += own
        elif isinstance(module, nn.BatchNorm2d):
            width = model.config.image_size if isinstance(model, CsiAutoencoder) else module.num_features
            legacy += 4 * width
        else:
            legacy += own
    total = sum(c for _, c in layers)
    return ParameterAudit(
        total=total,
        fc_params=fc,
        non_fc_params=total - fc,
        layers=layers,
        legacy_non_fc_params=legacy,
    )


def closed_form_fc_params(config: ModelConfig) -> int:
    L, K = config.flattened_length, config.codeword_length
    return 2 * L * K + K + L


def conv_params(kernel: int, c_in: int, c_out: int) -> int:
    return kernel * kernel * c_in * c_out + c_out


def zero_branch_(module: nn.Module) -> nn.Module:
    """Zero the residual branch so the block reduces to its skip path (in place).

    For a Non-Local block that is the upsampling convolution; for a Refine block
    every convolution (BatchNorm left identity-initialized).
    """
    with torch.no_grad():
        if isinstance(module, NonLocalBlock):
            module.up.weight.zero_()
            module.up.bias.zero_()
        elif isinstance(module, RefineBlock):
            for layer in module.body:
                if isinstance(layer, nn.Conv2d):
                    layer.weight.zero_()
                    layer.bias.zero_()
        else:
            raise TypeError(f"no residual branch defined for {type(module).__name__}")
    return module


def published_non_fc_budget(architecture: Architecture) -> int:
    """Non-dense budget implied by the published CR=16 totals."""
    totals = {Architecture.EXTENDNLNET: 543_456, Architecture.CSINET: 530_656}
    return totals[Architecture(architecture)] - closed_form_fc_params(ModelConfig(16))


CHECKPOINT_MAGIC = b"NFCK"
CHECKPOINT_VERSION = 1
_CK_PREFIX = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, model: CsiAutoencoder, *,
                    extra_tensors: dict[str, torch.Tensor] | None = None,
                    metadata: dict | None = None) -> Path:
    """Write ``model`` as a self-describing binary container.

    Layout: magic ``NFCK``, u16 version, u32 header length, a JSON header
    (config echo, tensor table, metadata), then little-endian tensor blobs.
    Floating tensors are stored as f32, integer buffers as i64.
    """
    tensors = dict(model.state_dict())
    for name, t in (extra_tensors or {}).items():
        tensors[f"extra/{name}"] = t
    table, blobs, offset = [], [], 0
    for name, t in tensors.items():
        t = t.detach().cpu()
        dtype = "<f4" if t.is_floating_point() else "<i8"
        blob = t.numpy().astype(dtype).tobytes()
        table.append({"name": name, "shape": list(t.shape), "dtype": dtype,
                      "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({
        "format": "nfcsi-checkpoint",
        "config": model.config.to_dict(),
        "tensors": table,
        "metadata": metadata or {},
    }, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_CK_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header))
                     + header + b"".join(blobs))
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Return the JSON header and every stored tensor by name."""
    data = Path(path).read_bytes()
    if len(data) < _CK_PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _CK_PREFIX.unpack_from(data)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    start = _CK_PREFIX.size + hlen
    try:
        header = json.loads(data[_CK_PREFIX.size:start])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    tensors = {}
    for entry in header["tensors"]:
        lo = start + entry["offset"]
        if lo + entry["nbytes"] > len(data):
            raise CheckpointError(f"{path}: truncated blob {entry['name']}")
        dtype = np.dtype(entry["dtype"])
        arr = np.frombuffer(data, dtype=dtype, count=entry["nbytes"] // dtype.itemsize, offset=lo)
        tensors[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    return header, tensors


def load_checkpoint(path: str | Path) -> tuple[CsiAutoencoder, dict]:
    """Rebuild the model stored at ``path``; returns ``(model, header)``."""
    header, tensors = read_checkpoint(path)
    model = CsiAutoencoder(ModelConfig.from_dict(header["config"]))
    state = {k: v for k, v in tensors.items() if not k.startswith("extra/")}
    model.load_state_dict(state)
    return model, header
