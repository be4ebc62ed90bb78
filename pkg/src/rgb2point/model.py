"""Generator network: frozen image backbone, attention feature integrator, MLP projection head."""

from __future__ import annotations

import dataclasses
import glob
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision

from .errors import (
    CheckpointError,
    InputShapeError,
    MissingWeightsError,
    VersionMismatchError,
    WidthMismatchError,
)
from .pointcloud import PointCloud

CHECKPOINT_FORMAT = "rgb2point-ckpt-v1"
IMAGE_SIZE = 224
BACKBONES = ("vit-imagenet", "resnet50-imagenet")
STANDARD_N_POINTS = (256, 1024, 8192)
CACHE_ENV = "RGB2POINT_CACHE"

# file-name prefixes of the standard torchvision ImageNet checkpoints
_BUNDLE_PREFIX = {"vit-imagenet": "vit_b_16", "resnet50-imagenet": "resnet50"}
_TOKEN_SHAPE = {"vit-imagenet": (197, 768), "resnet50-imagenet": (49, 2048)}


@dataclass
class ModelConfig:
    heads: int = 4
    hidden_dim: int = 2048
    feature_dim: int = 1024
    n_points: int = 1024
    backbone: str = "vit-imagenet"
    pretrained: bool = True
    enable_cfi: bool = True
    enable_gpm: bool = True
    leaky_slope: float = 0.2
    seed: int = 0
    weights_path: Optional[str] = None

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if min(self.heads, self.hidden_dim, self.feature_dim, self.n_points) < 1:
            raise ValueError("heads, hidden_dim, feature_dim and n_points must be positive")
        if self.feature_dim % self.heads:
            raise ValueError(f"feature_dim {self.feature_dim} is not divisible by heads {self.heads}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def find_weight_bundle(backbone: str, weights_path: Optional[str] = None) -> Path:
    """Locate a local ImageNet checkpoint for ``backbone``.

    An explicit ``weights_path`` wins; otherwise the directory named by the
    ``RGB2POINT_CACHE`` environment variable is searched for the standard
    torchvision file name (e.g. ``vit_b_16-*.pth``).
    """
    if weights_path:
        p = Path(weights_path)
        if not p.is_file():
            raise MissingWeightsError(f"weight bundle not found: {p}")
        return p
    cache = os.environ.get(CACHE_ENV)
    if cache:
        hits = sorted(glob.glob(os.path.join(cache, _BUNDLE_PREFIX[backbone] + "*.pth")))
        if hits:
            return Path(hits[0])
    raise MissingWeightsError(
        f"no pretrained weights for {backbone}: pass weights_path or put "
        f"{_BUNDLE_PREFIX[backbone]}-*.pth in ${CACHE_ENV}"
    )


def file_sha256(path: Union[str, os.PathLike]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def state_checksum(module: nn.Module) -> str:
    """SHA-256 over a module's state tensors, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class Backbone(nn.Module):
    """Frozen image encoder returning a token sequence ``(B, L, C)``."""

    def __init__(self, kind: str, pretrained: bool, weights_path: Optional[str] = None):
        super().__init__()
        self.kind = kind
        self.bundle_hash: Optional[str] = None
        if kind == "vit-imagenet":
            net = torchvision.models.vit_b_16(weights=None)
            net.heads = nn.Identity()
        else:
            net = torchvision.models.resnet50(weights=None)
            net.fc = nn.Identity()
        if pretrained:
            bundle = find_weight_bundle(kind, weights_path)
            state = torch.load(bundle, map_location="cpu", weights_only=True)
            state = {k: v for k, v in state.items() if not k.startswith(("heads.", "fc."))}
            net.load_state_dict(state, strict=True)
            self.bundle_hash = file_sha256(bundle)
        self.net = net
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def token_shape(self) -> Tuple[int, int]:
        return _TOKEN_SHAPE[self.kind]

    def train(self, mode: bool = True):
        # always frozen: batch-norm statistics and dropout stay in eval mode
        return super().train(False)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        net = self.net
        if self.kind == "vit-imagenet":
            x = net._process_input(images)
            cls = net.class_token.expand(x.shape[0], -1, -1)
            return net.encoder(torch.cat([cls, x], dim=1))
        x = net.maxpool(net.relu(net.bn1(net.conv1(images))))
        x = net.layer4(net.layer3(net.layer2(net.layer1(x))))
        return x.flatten(2).transpose(1, 2)


def _init_linear(layer: nn.Linear) -> None:
    bound = 1.0 / math.sqrt(layer.in_features)
    nn.init.uniform_(layer.weight, -bound, bound)
    nn.init.zeros_(layer.bias)


class ContextualFeatureIntegrator(nn.Module):
    """Feed-forward lift to ``width`` followed by multi-head self-attention over tokens.

    Head outputs are concatenated, mean-pooled over the token axis and passed
    through a linear projection, giving one ``width`` vector per image. With
    ``enabled=False`` the module degrades to mean pooling plus one linear map.
    """

    def __init__(self, in_dim: int, width: int, heads: int, slope: float = 0.2, enabled: bool = True):
        super().__init__()
        self.in_dim, self.width, self.heads = in_dim, width, heads
        self.slope = slope
        self.enabled = enabled
        if enabled:
            self.ff = nn.Linear(in_dim, width)
            self.qkv = nn.Linear(width, 3 * width)
            self.proj = nn.Linear(width, width)
        else:
            self.proj = nn.Linear(in_dim, width)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                _init_linear(m)

    def attend(self, tokens: torch.Tensor) -> torch.Tensor:
        """Per-token concatenated head outputs, shape ``(B, L, width)``."""
        b, L, _ = tokens.shape
        x = F.leaky_relu(self.ff(tokens), self.slope)
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        hd = self.width // self.heads

        def split(t):
            return t.reshape(b, L, self.heads, hd).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        return (weights @ v).transpose(1, 2).reshape(b, L, self.width)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.ndim != 3 or tokens.shape[1] < 1:
            raise InputShapeError(f"expected a (B, L, C) token tensor, got {tuple(tokens.shape)}")
        if tokens.shape[-1] != self.in_dim:
            raise WidthMismatchError(f"token width {tokens.shape[-1]} != expected {self.in_dim}")
        if not self.enabled:
            return self.proj(tokens.mean(dim=1))
        return self.proj(self.attend(tokens).mean(dim=1))


class GeometricProjection(nn.Module):
    """MLP head mapping a context vector to ``n_points`` xyz coordinates."""

    def __init__(self, width: int, hidden: int, n_points: int, slope: float = 0.2, enabled: bool = True):
        super().__init__()
        self.width, self.n_points = width, n_points
        if enabled:
            self.layers = nn.Sequential(
                nn.Linear(width, hidden),
                nn.LeakyReLU(slope),
                nn.Linear(hidden, hidden),
                nn.LeakyReLU(slope),
                nn.Linear(hidden, n_points * 3),
            )
        else:
            self.layers = nn.Sequential(nn.Linear(width, n_points * 3))
        for m in self.modules():
            if isinstance(m, nn.Linear):
                _init_linear(m)

    @property
    def final_layer(self) -> nn.Linear:
        return self.layers[-1]

    def forward(self, ctx: torch.Tensor) -> torch.Tensor:
        if ctx.shape[-1] != self.width:
            raise WidthMismatchError(f"context width {ctx.shape[-1]} != expected {self.width}")
        return self.layers(ctx).reshape(*ctx.shape[:-1], self.n_points, 3)


class GeneratorModel(nn.Module):
    """Image -> point cloud generator. Only the integrator and projection head train."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.backbone = Backbone(config.backbone, config.pretrained, config.weights_path)
            in_dim = self.backbone.token_shape[1]
            self.cfi = ContextualFeatureIntegrator(
                in_dim, config.feature_dim, config.heads, config.leaky_slope, config.enable_cfi
            )
            self.gpm = GeometricProjection(
                config.feature_dim, config.hidden_dim, config.n_points, config.leaky_slope, config.enable_gpm
            )

    @property
    def device(self) -> torch.device:
        return next(self.cfi.parameters()).device

    def trainable_parameters(self):
        return [p for m in (self.cfi, self.gpm) for p in m.parameters()]

    def trainable_state_dict(self) -> dict:
        return {
            **{"cfi." + k: v for k, v in self.cfi.state_dict().items()},
            **{"gpm." + k: v for k, v in self.gpm.state_dict().items()},
        }

    def load_trainable_state_dict(self, state: dict) -> None:
        self.cfi.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("cfi.")})
        self.gpm.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("gpm.")})

    def backbone_checksum(self) -> str:
        return state_checksum(self.backbone)

    def prepare_images(self, images) -> torch.Tensor:
        """Accept ``(224, 224, 3)`` / ``(B, 224, 224, 3)`` arrays or ``(B, 3, 224, 224)`` tensors."""
        x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
        if x.ndim == 3:
            x = x.unsqueeze(0)
        if x.ndim == 4 and x.shape[-1] == 3 and x.shape[1] != 3:
            x = x.permute(0, 3, 1, 2)
        if x.ndim != 4 or tuple(x.shape[1:]) != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise InputShapeError(
                f"expected images of shape (B, 3, {IMAGE_SIZE}, {IMAGE_SIZE}), got {tuple(x.shape)}"
            )
        return x.to(device=self.device, dtype=torch.float32)

    @torch.no_grad()
    def extract_features(self, images) -> torch.Tensor:
        return self.backbone(self.prepare_images(images))

    def head(self, features: torch.Tensor) -> torch.Tensor:
        """Trainable part of the network: token features -> ``(B, N, 3)`` points."""
        return self.gpm(self.cfi(features))

    def forward(self, images) -> torch.Tensor:
        return self.head(self.extract_features(images))

    @torch.no_grad()
    def generate(self, image, category: Optional[str] = None, id: Optional[str] = None) -> PointCloud:
        was_training = self.training
        self.eval()
        try:
            pts = self.forward(image)[0].double().cpu().numpy()
        finally:
            self.train(was_training)
        return PointCloud(pts, category=category, id=id)


def count_parameters(model: GeneratorModel) -> Tuple[int, int]:
    """``(frozen, trainable)`` parameter counts."""
    frozen = sum(p.numel() for p in model.backbone.parameters())
    trainable = sum(p.numel() for p in model.trainable_parameters())
    return frozen, trainable


# --------------------------------------------------------------------------
# checkpoints


def save_model_checkpoint(model: GeneratorModel, path, extra: Optional[dict] = None) -> None:
    """Single-file archive: config JSON, trainable weights, backbone hashes, format tag."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": json.dumps(model.config.to_dict(), sort_keys=True),
        "trainable": {k: v.detach().cpu().clone() for k, v in model.trainable_state_dict().items()},
        "backbone_checksum": model.backbone_checksum(),
        "backbone_bundle_hash": model.backbone.bundle_hash,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint archive ({exc})") from exc
    if not isinstance(payload, dict) or "format" not in payload:
        raise CheckpointError(f"{path}: not a model checkpoint")
    if payload["format"] != CHECKPOINT_FORMAT:
        raise VersionMismatchError(f"{path}: format {payload['format']!r}, expected {CHECKPOINT_FORMAT!r}")
    return payload


def load_model_checkpoint(path, weights_path: Optional[str] = None) -> Tuple[GeneratorModel, dict]:
    """Rebuild the model from a checkpoint and verify its backbone against the recorded hash."""
    payload = read_checkpoint(path)
    config = ModelConfig.from_dict(json.loads(payload["config"]))
    if weights_path:
        config.weights_path = weights_path
    model = GeneratorModel(config)
    if model.backbone_checksum() != payload["backbone_checksum"]:
        raise CheckpointError(f"{path}: backbone weights differ from the ones used for training")
    model.load_trainable_state_dict(payload["trainable"])
    return model, payload.get("extra", {})
