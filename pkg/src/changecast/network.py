"""Backbone, Siamese detection pathway and task heads.

A bundle couples a U-Net feature extractor with a small convolutional head.
The backbone is what gets transferred between stages; heads are always built
fresh for a new task.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

TASK_KINDS = ("detect", "forecast", "timerange")
PROVENANCES = ("scratch", "stage1", "external")


@dataclass(frozen=True)
class Task:
    kind: str
    horizon: int | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "forecast" and (self.horizon is None or self.horizon < 1):
            raise ValueError("forecast task needs a horizon >= 1 month")

    @property
    def out_logits(self) -> int:
        return 3 if self.kind == "timerange" else 1

    def __str__(self):
        return f"forecast({self.horizon})" if self.kind == "forecast" else self.kind

    @classmethod
    def parse(cls, text: str) -> "Task":
        text = text.strip()
        if text.startswith("forecast(") and text.endswith(")"):
            return cls("forecast", int(text[len("forecast("):-1]))
        if text == "timerange":
            return cls("timerange", 24)
        return cls(text)


@dataclass
class BackboneConfig:
    encoder_scale: str = "tiny"
    feature_dim: int = 16
    input_channels: int = 3
    tiny_widths: tuple[int, ...] = (8, 16, 32)

    def __post_init__(self):
        if self.encoder_scale not in ("tiny", "full"):
            raise ValueError(f"encoder_scale must be 'tiny' or 'full', got {self.encoder_scale!r}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        self.tiny_widths = tuple(self.tiny_widths)


@dataclass
class HeadConfig:
    hidden_layers: int = 2
    kernel: int = 3
    hidden_depth: int = 16
    out_logits: int = 1

    def __post_init__(self):
        if self.out_logits not in (1, 3):
            raise ValueError("out_logits must be 1 or 3")


def conv_bn_relu(in_ch, out_ch, kernel=3):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, padding=kernel // 2, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


def double_conv(in_ch, out_ch):
    return nn.Sequential(conv_bn_relu(in_ch, out_ch), conv_bn_relu(out_ch, out_ch))


class TinyUNet(nn.Module):
    """U-Net with one 2x downsampling per encoder width."""

    def __init__(self, in_ch: int, widths: tuple[int, ...], feature_dim: int):
        super().__init__()
        self.downsampling = 2 ** len(widths)
        self.encoder = nn.ModuleList()
        ch = in_ch
        for w in widths:
            self.encoder.append(double_conv(ch, w))
            ch = w
        self.bottleneck = double_conv(ch, ch)
        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for w in reversed(widths):
            self.up.append(nn.ConvTranspose2d(ch, w, kernel_size=2, stride=2))
            self.decoder.append(double_conv(2 * w, w))
            ch = w
        self.out = conv_bn_relu(ch, feature_dim)

    def forward(self, x):
        skips = []
        for block in self.encoder:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, block, skip in zip(self.up, self.decoder, reversed(skips)):
            x = block(torch.cat([up(x), skip], dim=1))
        return self.out(x)


class ResNet50UNet(nn.Module):
    """U-Net decoder on a ResNet-50 encoder (torchvision layout, no weights)."""

    downsampling = 32

    def __init__(self, in_ch: int, feature_dim: int):
        super().__init__()
        from torchvision.models import resnet50

        self.encoder = resnet50(weights=None)
        if in_ch != 3:
            self.encoder.conv1 = nn.Conv2d(in_ch, 64, 7, stride=2, padding=3, bias=False)
        del self.encoder.fc, self.encoder.avgpool
        dec = [(2048 + 1024, 256), (256 + 512, 128), (128 + 256, 64), (64 + 64, 32), (32, 16)]
        self.decoder = nn.ModuleList(double_conv(i, o) for i, o in dec)
        self.out = conv_bn_relu(16, feature_dim)

    def forward(self, x):
        e = self.encoder
        x0 = e.relu(e.bn1(e.conv1(x)))
        x1 = e.layer1(e.maxpool(x0))
        x2 = e.layer2(x1)
        x3 = e.layer3(x2)
        x = e.layer4(x3)
        for block, skip in zip(self.decoder, (x3, x2, x1, x0, None)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            if skip is not None:
                x = torch.cat([x, skip], dim=1)
            x = block(x)
        return self.out(x)


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig | None = None):
        super().__init__()
        self.cfg = cfg or BackboneConfig()
        if self.cfg.encoder_scale == "tiny":
            self.net = TinyUNet(self.cfg.input_channels, self.cfg.tiny_widths, self.cfg.feature_dim)
        else:
            self.net = ResNet50UNet(self.cfg.input_channels, self.cfg.feature_dim)
        self.downsampling = self.net.downsampling

    def forward(self, x):
        h, w = x.shape[-2:]
        m = self.downsampling
        if h % m or w % m:
            raise ValueError(f"spatial size {h}x{w} must be a multiple of {m} for the {self.cfg.encoder_scale} encoder")
        return self.net(x)


class Head(nn.Module):
    """Hidden 3x3 conv layers with ReLU, then a 1x1 logit layer (zero-initialised)."""

    def __init__(self, in_ch: int, cfg: HeadConfig | None = None):
        super().__init__()
        self.cfg = cfg or HeadConfig()
        layers = []
        ch = in_ch
        for _ in range(self.cfg.hidden_layers):
            layers += [nn.Conv2d(ch, self.cfg.hidden_depth, self.cfg.kernel, padding=self.cfg.kernel // 2), nn.ReLU(inplace=True)]
            ch = self.cfg.hidden_depth
        self.hidden = nn.Sequential(*layers)
        self.logits = nn.Conv2d(ch, self.cfg.out_logits, 1)

    def forward(self, x):
        return self.logits(self.hidden(x))


def init_weights(module: nn.Module, zero_logits: bool = True):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    if zero_logits:
        for m in module.modules():
            if isinstance(m, Head):
                nn.init.zeros_(m.logits.weight)
                nn.init.zeros_(m.logits.bias)


class ModelBundle(nn.Module):
    """Backbone + head + task tag. Calling it dispatches on the task."""

    def __init__(self, task: Task, backbone: Backbone | None = None,
                 backbone_cfg: BackboneConfig | None = None, head_cfg: HeadConfig | None = None,
                 provenance: str = "scratch"):
        super().__init__()
        if provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {provenance!r}")
        self.task = task
        self.provenance = provenance
        self.backbone = backbone if backbone is not None else Backbone(backbone_cfg)
        if backbone is None:
            init_weights(self.backbone)
        fd = self.backbone.cfg.feature_dim
        head_cfg = head_cfg or HeadConfig(out_logits=task.out_logits)
        if head_cfg.out_logits != task.out_logits:
            raise ValueError(f"head has {head_cfg.out_logits} logits but task {task} needs {task.out_logits}")
        self.head = Head(2 * fd if task.kind == "detect" else fd, head_cfg)
        init_weights(self.head)

    def forward(self, image_t0, image_t1=None):
        if self.task.kind == "detect":
            return detect_forward(self, image_t0, image_t1)
        return forecast_forward(self, image_t0)

    def sidecar(self) -> dict:
        return {
            "task": str(self.task),
            "provenance": self.provenance,
            "backbone": asdict(self.backbone.cfg),
            "head": asdict(self.head.cfg),
            "conventions": {"padding": "same", "skips": "concat at every encoder scale", "upsampling": "transposed conv (tiny) / nearest (full)"},
        }


def _batched(x):
    x = torch.as_tensor(x)
    return (x.unsqueeze(0), True) if x.dim() == 3 else (x, False)


def extract_features(backbone: Backbone, image):
    x, single = _batched(image)
    f = backbone(x)
    return f[0] if single else f


def detect_forward(bundle: ModelBundle, image_t0, image_t1):
    if bundle.task.kind != "detect":
        raise ValueError(f"detect_forward needs a detect bundle, got {bundle.task}")
    x0, single = _batched(image_t0)
    x1, _ = _batched(image_t1)
    if x0.shape != x1.shape:
        raise ValueError(f"image shapes differ: {tuple(x0.shape)} vs {tuple(x1.shape)}")
    # one backbone pass over both dates; same weights either way
    f = bundle.backbone(torch.cat([x0, x1], dim=0))
    f0, f1 = f[: len(x0)], f[len(x0):]
    out = bundle.head(torch.cat([f0, f1], dim=1))
    return out[0] if single else out


def forecast_forward(bundle: ModelBundle, image_t0):
    if bundle.task.kind == "detect":
        raise ValueError("forecast_forward got a detect bundle")
    x, single = _batched(image_t0)
    out = bundle.head(bundle.backbone(x))
    return out[0] if single else out


def timerange_probs(q_e, q_l, q_0):
    """Early-vs-late probability and change probability from the three logits.

    p_e = e^qe / (e^qe + e^ql) and p_c = e^(qe+ql) / (e^(qe+ql) + e^q0), written
    as logistic functions of logit differences so they never overflow.
    """
    q_e, q_l, q_0 = (torch.as_tensor(q, dtype=torch.get_default_dtype()) if not torch.is_tensor(q) else q
                     for q in (q_e, q_l, q_0))
    p_e = torch.sigmoid(q_e - q_l)
    p_c = torch.sigmoid((q_e + q_l) - q_0)
    return p_e, p_c


def split_logits(logits):
    """(N,3,H,W) or (3,H,W) -> q_e, q_l, q_0."""
    dim = 1 if logits.dim() == 4 else 0
    return logits.unbind(dim)


def save_bundle(bundle: ModelBundle, path, **extra) -> Path:
    """Write `<path>` (state dict) and `<path>.json` sidecar; returns the sidecar path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(bundle.state_dict(), path)
    meta = bundle.sidecar()
    meta.update(extra)
    side = path.with_name(path.name + ".json")
    side.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return side


def load_bundle(path) -> tuple[ModelBundle, dict]:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    bundle = ModelBundle(
        Task.parse(meta["task"]),
        backbone_cfg=BackboneConfig(**meta["backbone"]),
        head_cfg=HeadConfig(**meta["head"]),
        provenance=meta["provenance"],
    )
    bundle.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    return bundle, meta


def transfer_backbone(source: ModelBundle, task: Task, provenance: str = "stage1") -> ModelBundle:
    """New bundle for `task` whose backbone is a copy of `source`'s; the head is fresh."""
    backbone = Backbone(source.backbone.cfg)
    backbone.load_state_dict(source.backbone.state_dict())
    return ModelBundle(task, backbone=backbone, provenance=provenance)


def load_external_encoder(bundle: ModelBundle, archive) -> ModelBundle:
    """Load a user-supplied parameter archive into the backbone (e.g. ImageNet weights).

    Keys may be given relative to the backbone or, for the full encoder, in the
    plain torchvision ResNet-50 layout. Classifier keys are ignored.
    """
    state = torch.load(archive, map_location="cpu", weights_only=True)
    own = bundle.backbone.state_dict()
    mapped = {}
    for k, v in state.items():
        for cand in (k, f"net.{k}", f"net.encoder.{k}"):
            if cand in own and own[cand].shape == v.shape:
                mapped[cand] = v
                break
    if not mapped:
        raise ValueError(f"no parameters in {archive} match the {bundle.backbone.cfg.encoder_scale} backbone")
    bundle.backbone.load_state_dict(mapped, strict=False)
    bundle.provenance = "external"
    return bundle
