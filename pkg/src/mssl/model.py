"""Segmentation networks and the ParamMap abstraction used by EMA/checkpointing."""

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (UnknownFamily, MissingPretrainedWeights, ShapeError,
                     IncompatibleArchitecture)

ROLE_LEARNABLE = "learnable"
ROLE_STATISTIC = "statistic"


@dataclass(frozen=True)
class ArchSpec:
    family: str = "tiny_unet"
    levels: int = 4
    base_width: int = 16
    pretrained_encoder: bool = False
    encoder_weights: str = ""


@dataclass
class ParamEntry:
    name: str
    array: np.ndarray       # float32
    role: str               # learnable | statistic


@dataclass
class ParamMap:
    entries: list = field(default_factory=list)   # ordered ParamEntry list
    arch_digest: str = ""

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def names(self):
        return [e.name for e in self.entries]

    def get(self, name):
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def copy(self):
        return ParamMap(entries=[ParamEntry(e.name, e.array.copy(), e.role)
                                 for e in self.entries],
                        arch_digest=self.arch_digest)

    def content_digest(self):
        h = hashlib.sha256()
        h.update(self.arch_digest.encode())
        for e in self.entries:
            h.update(e.name.encode())
            h.update(np.ascontiguousarray(e.array, dtype=np.float32).tobytes())
        return h.hexdigest()

    def compatible_with(self, other):
        if self.arch_digest != other.arch_digest:
            return False
        mine = [(e.name, e.array.shape, e.role) for e in self.entries]
        theirs = [(e.name, e.array.shape, e.role) for e in other.entries]
        return mine == theirs


def _struct_digest(family, items):
    payload = json.dumps({"family": family, "params": items}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


class _ConvBlock(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(c_out)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class TinyUNet(nn.Module):
    """Small encoder-decoder with skip connections; downsampling factor 2**levels."""

    def __init__(self, levels=4, base_width=16, max_width=64):
        super().__init__()
        self.levels = levels
        self.factor = 2 ** levels
        widths = [min(base_width * (2 ** i), max_width) for i in range(levels)]
        self.enc = nn.ModuleList()
        c = 3
        for w in widths:
            self.enc.append(_ConvBlock(c, w))
            c = w
        self.bottleneck = _ConvBlock(c, c)
        self.dec = nn.ModuleList()
        for w in reversed(widths):
            self.dec.append(_ConvBlock(c + w, w))
            c = w
        self.head = nn.Conv2d(c, 1, 1)

    def forward(self, x):
        skips = []
        for block in self.enc:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for block, skip in zip(self.dec, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1))
        return self.head(x)


class FpnDenseNet169(nn.Module):
    """DenseNet169 encoder with a standard FPN head (256-ch pyramid, summed maps)."""

    factor = 32

    def __init__(self, pretrained_encoder=False, encoder_weights=""):
        super().__init__()
        import torchvision
        backbone = torchvision.models.densenet169(weights=None)
        if pretrained_encoder:
            if not encoder_weights or not os.path.isfile(encoder_weights):
                raise MissingPretrainedWeights(
                    f"encoder weight file not found: {encoder_weights!r}")
            state = torch.load(encoder_weights, map_location="cpu")
            backbone.load_state_dict(state, strict=False)
        f = backbone.features
        self.stem = nn.Sequential(f.conv0, f.norm0, f.relu0, f.pool0)
        self.stage1 = nn.Sequential(f.denseblock1, f.transition1)
        self.stage2 = nn.Sequential(f.denseblock2, f.transition2)
        self.stage3 = nn.Sequential(f.denseblock3, f.transition3)
        self.stage4 = nn.Sequential(f.denseblock4, f.norm5)
        chans = [128, 256, 640, 1664]
        self.lateral = nn.ModuleList([nn.Conv2d(c, 256, 1) for c in chans])
        self.smooth = nn.ModuleList([nn.Conv2d(256, 256, 3, padding=1) for _ in chans])
        self.head = nn.Conv2d(256, 1, 1)

    def forward(self, x):
        size = x.shape[-2:]
        c1 = self.stage1(self.stem(x))
        c2 = self.stage2(c1)
        c3 = self.stage3(c2)
        c4 = self.stage4(c3)
        feats = [c1, c2, c3, c4]
        laterals = [lat(c) for lat, c in zip(self.lateral, feats)]
        for i in range(len(laterals) - 2, -1, -1):
            laterals[i] = laterals[i] + F.interpolate(
                laterals[i + 1], size=laterals[i].shape[-2:], mode="nearest")
        maps = [sm(l) for sm, l in zip(self.smooth, laterals)]
        fused = maps[0]
        for m in maps[1:]:
            fused = fused + F.interpolate(m, size=fused.shape[-2:], mode="bilinear",
                                          align_corners=False)
        logits = self.head(fused)
        return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)


def build_model(spec, seed):
    """Construct a segmentation model with deterministic initialization."""
    torch.manual_seed(seed)
    if spec.family == "tiny_unet":
        model = TinyUNet(levels=spec.levels, base_width=spec.base_width)
    elif spec.family == "fpn_densenet169":
        model = FpnDenseNet169(pretrained_encoder=spec.pretrained_encoder,
                               encoder_weights=spec.encoder_weights)
    else:
        raise UnknownFamily(f"unknown model family {spec.family!r}")
    items = ([[n, list(p.shape), ROLE_LEARNABLE] for n, p in model.named_parameters()]
             + [[n, list(b.shape), ROLE_STATISTIC] for n, b in model.named_buffers()])
    model.arch_digest = _struct_digest(spec.family, items)
    model.family = spec.family
    return model


def forward_logits(model, images):
    """images: B x H x W x 3 array (or NCHW tensor) -> B x H x W logits tensor."""
    if isinstance(images, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
        x = x.permute(0, 3, 1, 2)
    else:
        x = images
    factor = getattr(model, "factor", 1)
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"input {h}x{w} not divisible by downsampling factor {factor}")
    out = model(x)
    return out[:, 0]


@torch.no_grad()
def predict_probs(model, images):
    """Eval-mode foreground probabilities for a B x H x W x 3 batch."""
    was_training = model.training
    model.eval()
    probs = torch.sigmoid(forward_logits(model, images)).numpy()
    if was_training:
        model.train()
    return probs


def named_parameters_map(model):
    """Snapshot all parameters and normalization statistics as a ParamMap."""
    entries = []
    for name, p in model.named_parameters():
        entries.append(ParamEntry(name, p.detach().numpy().astype(np.float32, copy=True),
                                  ROLE_LEARNABLE))
    for name, b in model.named_buffers():
        entries.append(ParamEntry(name, b.detach().numpy().astype(np.float32, copy=True),
                                  ROLE_STATISTIC))
    return ParamMap(entries=entries, arch_digest=model.arch_digest)


def load_parameters(model, params):
    """Copy ParamMap values into the model (never aliases the source arrays)."""
    if params.arch_digest != getattr(model, "arch_digest", None):
        raise IncompatibleArchitecture("architecture digest mismatch")
    by_name = {e.name: e for e in params.entries}
    with torch.no_grad():
        for name, p in model.named_parameters():
            e = by_name.get(name)
            if e is None or tuple(e.array.shape) != tuple(p.shape):
                raise IncompatibleArchitecture(f"parameter {name!r} missing or shape mismatch")
            p.copy_(torch.from_numpy(e.array.copy()))
        for name, b in model.named_buffers():
            e = by_name.get(name)
            if e is None or tuple(e.array.shape) != tuple(b.shape):
                raise IncompatibleArchitecture(f"buffer {name!r} missing or shape mismatch")
            b.copy_(torch.from_numpy(e.array.copy()).to(b.dtype))
