"""XmasNet classifiers, 3-D U-Net and adapted 3-D ResNet-18 segmenters.

Channel counts follow the full-size architectures; ``ModelSpec.width_divisor``
shrinks every channel/unit count (floor division, minimum 1) for desk-scale
runs and gradient checks.

Checkpoints are directories with ``index.json`` (name -> shape, offset) and
``weights.bin`` (concatenated little-endian float32 blobs).
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .geometry import ConvSpec, conv_output_size, upconv_output_size

log = logging.getLogger(__name__)

KINDS = ("xmasnet_binary", "xmasnet_pirads", "unet3d", "resnet18_3d")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    in_channels: int = 1
    input_extent: tuple[int, ...] = (28, 28)
    width_divisor: int = 1
    dense_units: tuple[int, int] = (1024, 256)
    head_channels: tuple[int, int] = (512, 512)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.in_channels < 1 or self.width_divisor < 1:
            raise ValueError("in_channels and width_divisor must be >= 1")
        ext = tuple(int(e) for e in self.input_extent)
        object.__setattr__(self, "input_extent", ext)
        if self.is_classifier:
            if len(ext) != 2 or any(e % 4 or e < 4 for e in ext):
                raise ValueError(f"xmasnet input extent must be (H, W) divisible by 4, got {ext}")
        elif self.kind == "unet3d":
            if len(ext) != 3 or any(e % 8 or e < 8 for e in ext):
                raise ValueError(f"unet3d extents must be (S, H, W) divisible by 8, got {ext}")
        elif len(ext) != 3 or any(e % 2 or e < 2 for e in ext):
            raise ValueError(f"resnet18_3d extents must be (S, H, W) divisible by 2, got {ext}")

    @property
    def is_classifier(self) -> bool:
        return self.kind.startswith("xmasnet")

    @property
    def n_outputs(self) -> int:
        return 5 if self.kind == "xmasnet_pirads" else 1

    def ch(self, c: int) -> int:
        return max(1, c // self.width_divisor)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _cbr2d(cin, cout):
    return [nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU()]


class XmasNet(nn.Module):
    """Four 3x3 conv+BN+ReLU layers with two 2x2 max-pools, then three dense layers.

    ``forward`` returns logits; use :func:`forward_classify` for probabilities.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        c1, c2 = spec.ch(32), spec.ch(64)
        self.features = nn.Sequential(
            *_cbr2d(spec.in_channels, c1), *_cbr2d(c1, c1), nn.MaxPool2d(2, 2),
            *_cbr2d(c1, c2), *_cbr2d(c2, c2), nn.MaxPool2d(2, 2))
        h, w = spec.input_extent
        self.flatten_length = (h // 4) * (w // 4) * c2
        d1, d2 = spec.ch(spec.dense_units[0]), spec.ch(spec.dense_units[1])
        self.classifier = nn.Sequential(
            nn.Flatten(), nn.Linear(self.flatten_length, d1), nn.ReLU(),
            nn.Linear(d1, d2), nn.ReLU(), nn.Linear(d2, spec.n_outputs))

    @property
    def final_layer(self) -> nn.Linear:
        return self.classifier[-1]

    def forward(self, x):
        return self.classifier(self.features(x))


def _cbr3d(cin, cout, bias=True):
    return nn.Sequential(nn.Conv3d(cin, cout, 3, padding=1, bias=bias), nn.BatchNorm3d(cout), nn.ReLU())


class UNet3D(nn.Module):
    """Three-level 3-D U-Net with concatenation shortcuts; outputs voxel probabilities."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        c = spec.ch
        self.enc1 = nn.Sequential(_cbr3d(spec.in_channels, c(32)), _cbr3d(c(32), c(64)))
        self.pool1 = nn.MaxPool3d(2, 2)
        self.enc2 = nn.Sequential(_cbr3d(c(64), c(64)), _cbr3d(c(64), c(128)))
        self.pool2 = nn.MaxPool3d(2, 2)
        self.enc3 = nn.Sequential(_cbr3d(c(128), c(128)), _cbr3d(c(128), c(256)))
        self.pool3 = nn.MaxPool3d(2, 2)
        self.bottom = nn.Sequential(_cbr3d(c(256), c(256)), _cbr3d(c(256), c(512)))
        self.up3 = nn.ConvTranspose3d(c(512), c(512), 2, stride=2)
        self.dec3 = nn.Sequential(_cbr3d(c(512) + c(256), c(256)), _cbr3d(c(256), c(256)))
        self.up2 = nn.ConvTranspose3d(c(256), c(256), 2, stride=2)
        self.dec2 = nn.Sequential(_cbr3d(c(256) + c(128), c(128)), _cbr3d(c(128), c(128)))
        self.up1 = nn.ConvTranspose3d(c(128), c(128), 2, stride=2)
        self.dec1 = nn.Sequential(_cbr3d(c(128) + c(64), c(64)), _cbr3d(c(64), c(64)))
        self.out = nn.Conv3d(c(64), 1, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool1(e1))
        e3 = self.enc3(self.pool2(e2))
        b = self.bottom(self.pool3(e3))
        d3 = self.dec3(torch.cat([self.up3(b), e3], dim=1))
        d2 = self.dec2(torch.cat([self.up2(d3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return torch.sigmoid(self.out(d1))


class BasicBlock3D(nn.Module):
    """Three 3x3x3 conv+BN+ReLU layers, stride 1; the first conv output is added to the third.

    Block A keeps the channel count, block B doubles it in the first conv.
    """

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(cout)
        self.conv3 = nn.Conv3d(cout, cout, 3, padding=1, bias=False)
        self.bn3 = nn.BatchNorm3d(cout)
        self.relu = nn.ReLU()

    def forward(self, x):
        first = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(first)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + first)


class ResNet18_3D(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        c = spec.ch
        self.conv1 = nn.Conv3d(spec.in_channels, c(64), 7, stride=1, padding=3, bias=False)
        self.bn1 = nn.BatchNorm3d(c(64))
        self.relu = nn.ReLU()
        self.maxpool = nn.MaxPool3d(2, 2)
        self.layer1 = BasicBlock3D(c(64), c(64))
        self.layer2 = BasicBlock3D(c(64), c(128))
        self.layer3 = BasicBlock3D(c(128), c(256))
        self.layer4 = BasicBlock3D(c(256), c(512))
        h0, h1 = c(spec.head_channels[0]), c(spec.head_channels[1])
        self.up = nn.ConvTranspose3d(c(512), h0, 2, stride=2)
        self.head_conv = nn.Conv3d(h0, h1, 3, padding=1)
        self.head_bn = nn.BatchNorm3d(h1)
        self.out = nn.Conv3d(h1, 1, 1)

    def forward(self, x):
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        x = self.relu(self.head_bn(self.head_conv(self.up(x))))
        return torch.sigmoid(self.out(x))


def init_weights(model: nn.Module, seed: int) -> nn.Module:
    """Kaiming fan-in normal for conv/dense weights, zero biases, BN scale 1 / shift 0."""
    gen = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.ConvTranspose3d, nn.Linear)):
            if m.weight.device.type != "meta":
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu", generator=gen)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm3d)) and m.weight.device.type != "meta":
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    return model


def build_xmasnet(spec: ModelSpec) -> XmasNet:
    if not spec.is_classifier:
        raise ValueError(f"{spec.kind} is not an XmasNet variant")
    if spec.in_channels not in (1, 2):
        raise ValueError("XmasNet takes one or two input channels")
    return init_weights(XmasNet(spec), spec.seed)


def build_unet3d(spec: ModelSpec) -> UNet3D:
    if spec.kind != "unet3d":
        raise ValueError(f"expected unet3d spec, got {spec.kind}")
    return init_weights(UNet3D(spec), spec.seed)


def build_resnet18_3d(spec: ModelSpec, weight_file: str | Path | None = None) -> ResNet18_3D:
    if spec.kind != "resnet18_3d":
        raise ValueError(f"expected resnet18_3d spec, got {spec.kind}")
    model = init_weights(ResNet18_3D(spec), spec.seed)
    if weight_file is not None:
        model.load_report = load_weights(model, weight_file)
    return model


def build_model(spec: ModelSpec, weight_file: str | Path | None = None) -> nn.Module:
    if spec.is_classifier:
        return build_xmasnet(spec)
    if spec.kind == "unet3d":
        return build_unet3d(spec)
    return build_resnet18_3d(spec, weight_file)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def _check_batch(model: nn.Module, batch: torch.Tensor, ndim: int):
    spec: ModelSpec = model.spec
    expected = (spec.in_channels, *spec.input_extent)
    if batch.ndim != ndim or tuple(batch.shape[1:]) != expected:
        raise ValueError(f"batch shape {tuple(batch.shape)} does not match (N, {expected})")


def forward_classify(model: XmasNet, batch: torch.Tensor) -> torch.Tensor:
    """Sigmoid scores (N, 1) for the binary head, softmax rows (N, 5) for PIRADS."""
    _check_batch(model, batch, 4)
    logits = model(batch)
    if model.spec.n_outputs == 1:
        return torch.sigmoid(logits)
    return torch.softmax(logits, dim=1)


def forward_segment(model: nn.Module, batch: torch.Tensor) -> torch.Tensor:
    _check_batch(model, batch, 5)
    return model(batch)


# ---------------------------------------------------------------------------
# shape introspection

_SPATIAL = (nn.Conv2d, nn.Conv3d, nn.ConvTranspose3d, nn.MaxPool2d, nn.MaxPool3d)


def trace_shapes(model_or_spec, batch_size: int = 1) -> dict[str, tuple[int, ...]]:
    """Run a meta-device forward and record spatial output extents of every conv/pool layer."""
    if isinstance(model_or_spec, ModelSpec):
        spec = model_or_spec
        with torch.device("meta"):
            model = {"unet3d": UNet3D, "resnet18_3d": ResNet18_3D}.get(spec.kind, XmasNet)(spec)
    else:
        model, spec = model_or_spec, model_or_spec.spec
    shapes: dict[str, tuple[int, ...]] = {}
    hooks = []
    for name, mod in model.named_modules():
        if isinstance(mod, _SPATIAL):
            hooks.append(mod.register_forward_hook(
                lambda m, i, o, name=name: shapes.__setitem__(name, tuple(o.shape[2:]))))
    device = next(model.parameters()).device
    x = torch.empty((batch_size, spec.in_channels, *spec.input_extent), device=device)
    try:
        with torch.no_grad():
            model(x)
    finally:
        for h in hooks:
            h.remove()
    return shapes


def _conv(ext, k, s=1, p=0):
    return tuple(conv_output_size(ConvSpec(e, k, s, p)) for e in ext)


def _up(ext, k=2, s=2):
    return tuple(upconv_output_size(ConvSpec(e, k, s, 0)) for e in ext)


def expected_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Layer output extents predicted purely from kernel/stride/padding arithmetic."""
    out: dict[str, tuple[int, ...]] = {}
    ext = spec.input_extent
    if spec.is_classifier:
        # indices in XmasNet.features: convs at 0, 3, 7, 10; pools at 6, 13
        for idx, kind in ((0, "c"), (3, "c"), (6, "p"), (7, "c"), (10, "c"), (13, "p")):
            ext = _conv(ext, 3, 1, 1) if kind == "c" else _conv(ext, 2, 2)
            out[f"features.{idx}"] = ext
        return out
    if spec.kind == "unet3d":
        skips = []
        for level in (1, 2, 3):
            for j in (0, 1):
                ext = _conv(ext, 3, 1, 1)
                out[f"enc{level}.{j}.0"] = ext
            skips.append(ext)
            ext = _conv(ext, 2, 2)
            out[f"pool{level}"] = ext
        for j in (0, 1):
            ext = _conv(ext, 3, 1, 1)
            out[f"bottom.{j}.0"] = ext
        for level in (3, 2, 1):
            ext = _up(ext)
            out[f"up{level}"] = ext
            if ext != skips[level - 1]:
                raise ValueError(f"skip extent mismatch at level {level}")
            for j in (0, 1):
                ext = _conv(ext, 3, 1, 1)
                out[f"dec{level}.{j}.0"] = ext
        out["out"] = _conv(ext, 1)
        return out
    ext = _conv(ext, 7, 1, 3)
    out["conv1"] = ext
    ext = _conv(ext, 2, 2)
    out["maxpool"] = ext
    for layer in (1, 2, 3, 4):
        for j in (1, 2, 3):
            ext = _conv(ext, 3, 1, 1)
            out[f"layer{layer}.conv{j}"] = ext
    ext = _up(ext)
    out["up"] = ext
    ext = _conv(ext, 3, 1, 1)
    out["head_conv"] = ext
    out["out"] = _conv(ext, 1)
    return out


# ---------------------------------------------------------------------------
# checkpoints

class WeightShapeError(ValueError):
    """A stored tensor has a different shape from the model parameter of the same name."""


def save_checkpoint(model: nn.Module, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index, offset = {}, 0
    with open(path / "weights.bin", "wb") as fh:
        for name, t in model.state_dict().items():
            if not t.is_floating_point():
                continue
            data = t.detach().cpu().numpy().astype("<f4").tobytes()
            index[name] = {"shape": list(t.shape), "offset": offset, "nbytes": len(data)}
            fh.write(data)
            offset += len(data)
    meta = {"tensors": index}
    if hasattr(model, "spec"):
        meta["spec"] = model.spec.to_dict()
    (path / "index.json").write_text(json.dumps(meta, indent=1))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if path.suffix in (".pth", ".pt"):
        raw = torch.load(path, map_location="cpu", weights_only=True)
        raw = raw.get("state_dict", raw)
        return {k.removeprefix("module."): v.numpy() for k, v in raw.items() if torch.is_tensor(v)}
    meta = json.loads((path / "index.json").read_text())
    blob = (path / "weights.bin").read_bytes()
    out = {}
    for name, e in meta["tensors"].items():
        arr = np.frombuffer(blob, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        out[name] = arr.reshape(e["shape"])
    return out


def load_weights(model: nn.Module, path: str | Path) -> dict:
    """Copy tensors whose names match; raise on shape mismatch; report the rest."""
    stored = read_checkpoint(path)
    state = model.state_dict()
    loaded, unexpected = [], []
    for name, arr in stored.items():
        if name not in state:
            unexpected.append(name)
            continue
        if tuple(arr.shape) != tuple(state[name].shape):
            raise WeightShapeError(f"{name}: stored {tuple(arr.shape)} vs model {tuple(state[name].shape)}")
        with torch.no_grad():
            state[name].copy_(torch.from_numpy(np.array(arr)).to(state[name].dtype))
        loaded.append(name)
    missing = [n for n, t in state.items() if n not in stored and t.is_floating_point()]
    if missing or unexpected:
        log.warning("weight file %s: %d loaded, %d missing, %d unexpected",
                    path, len(loaded), len(missing), len(unexpected))
    return {"loaded": loaded, "missing": missing, "unexpected": unexpected}
