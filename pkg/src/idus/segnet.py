"""U-Net style segmentation network with a residual encoder.

Decoder stages 1-4 upsample, concatenate an encoder skip (res3, res2, res1,
res_conv) and apply two conv-BN-ReLU blocks; stage 5 upsamples without a
skip.  The head is a 3x3 convolution followed by softmax.  Parameters are
partitioned into ``encoder``, ``decoder`` and ``head``.
"""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.models.resnet import BasicBlock

from .errors import ConfigurationError

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "idus-checkpoint"
CHECKPOINT_VERSION = 1
PARTITIONS = ("encoder", "decoder", "head")


@dataclass
class NetworkConfig:
    n_classes: int = 7
    encoder_layers: tuple = (2, 2, 2, 2)  # residual blocks per stage; (2,2,2,2) is ResNet-18
    encoder_width: int = 64
    decoder_filters: tuple = (256, 128, 64, 32, 16)
    head_kernel: int = 3
    pretrained_encoder: bool = True
    allow_random_encoder: bool = True
    stem_downsample: bool = True  # strided stem conv + max-pool, as in ResNet

    def __post_init__(self):
        self.encoder_layers = tuple(self.encoder_layers)
        self.decoder_filters = tuple(self.decoder_filters)
        if len(self.decoder_filters) != 5 or any(f < 1 for f in self.decoder_filters):
            raise ConfigurationError(f"decoder_filters must list 5 positive counts, got {self.decoder_filters}")
        if self.n_classes < 2:
            raise ConfigurationError("n_classes must be at least 2")
        if len(self.encoder_layers) != 4 or any(b < 1 for b in self.encoder_layers):
            raise ConfigurationError("encoder_layers must list 4 positive block counts")

    @property
    def total_stride(self) -> int:
        return 32 if self.stem_downsample else 8


def device() -> torch.device:
    return torch.device(os.environ.get("IDUS_DEVICE", "cpu"))


class ResNetEncoder(nn.Module):
    """Residual encoder with torchvision ResNet parameter names."""

    def __init__(self, layers=(2, 2, 2, 2), width=64, stem_downsample=True):
        super().__init__()
        stride = 2 if stem_downsample else 1
        self.conv1 = nn.Conv2d(3, width, 7, stride, 3, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, 2, 1) if stem_downsample else nn.Identity()
        self.inplanes = width
        self.layer1 = self._make_layer(width, layers[0], 1)
        self.layer2 = self._make_layer(2 * width, layers[1], 2)
        self.layer3 = self._make_layer(4 * width, layers[2], 2)
        self.layer4 = self._make_layer(8 * width, layers[3], 2)
        self.channels = (width, width, 2 * width, 4 * width, 8 * width)

    def _make_layer(self, planes, blocks, stride):
        down = None
        if stride != 1 or self.inplanes != planes:
            down = nn.Sequential(
                nn.Conv2d(self.inplanes, planes, 1, stride, bias=False), nn.BatchNorm2d(planes)
            )
        mods = [BasicBlock(self.inplanes, planes, stride, down)]
        self.inplanes = planes
        mods += [BasicBlock(planes, planes) for _ in range(1, blocks)]
        return nn.Sequential(*mods)

    def forward(self, x) -> List[torch.Tensor]:
        """Return [res_conv, res1, res2, res3, res4]."""
        c0 = self.relu(self.bn1(self.conv1(x)))
        c1 = self.layer1(self.maxpool(c0))
        c2 = self.layer2(c1)
        c3 = self.layer3(c2)
        c4 = self.layer4(c3)
        return [c0, c1, c2, c3, c4]


def _conv_bn_relu(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)
    )


class Decoder(nn.Module):
    def __init__(self, enc_channels, filters):
        super().__init__()
        skips = [enc_channels[3], enc_channels[2], enc_channels[1], enc_channels[0], 0]
        prev = enc_channels[4]
        self.stages = nn.ModuleList()
        for f, s in zip(filters, skips):
            self.stages.append(nn.Sequential(_conv_bn_relu(prev + s, f), _conv_bn_relu(f, f)))
            prev = f

    def forward(self, feats, out_size):
        c0, c1, c2, c3, c4 = feats
        h = c4
        for stage, skip in zip(self.stages, (c3, c2, c1, c0, None)):
            size = skip.shape[-2:] if skip is not None else out_size
            h = F.interpolate(h, size=size, mode="nearest")
            if skip is not None:
                h = torch.cat([h, skip], dim=1)
            h = stage(h)
        return h


class SegNet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ResNetEncoder(cfg.encoder_layers, cfg.encoder_width, cfg.stem_downsample)
        self.decoder = Decoder(self.encoder.channels, cfg.decoder_filters)
        k = cfg.head_kernel
        self.head = nn.Conv2d(cfg.decoder_filters[-1], cfg.n_classes, k, padding=k // 2)
        self.encoder_weights = "random"
        self.seed = 0

    def _check(self, x):
        h, w = x.shape[-2:]
        s = self.cfg.total_stride
        if h % s or w % s:
            raise ValueError(f"input size {h}x{w} must be divisible by {s}")
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        return x

    def features(self, x):
        """Decoder output (conv5b)."""
        x = self._check(x)
        return self.decoder(self.encoder(x), x.shape[-2:])

    def forward(self, x):
        """Logits; apply softmax over dim 1 for class probabilities."""
        return self.head(self.features(x))


def _he_uniform(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_uniform_(m.weight, a=0, mode="fan_in", nonlinearity="relu", generator=gen)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            m.reset_parameters()
            m.reset_running_stats()


def _random_encoder_init(enc: nn.Module, gen: torch.Generator) -> None:
    for m in enc.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu", generator=gen)
        elif isinstance(m, nn.BatchNorm2d):
            m.reset_parameters()
            m.reset_running_stats()


def _load_pretrained(enc: ResNetEncoder) -> bool:
    """Load cached ImageNet ResNet-18 weights; False when they are not available."""
    try:
        from torchvision.models import ResNet18_Weights

        w = ResNet18_Weights.IMAGENET1K_V1
        cache = Path(torch.hub.get_dir()) / "checkpoints" / Path(w.url).name
        if not cache.exists():
            state = w.get_state_dict(progress=False)
        else:
            state = torch.load(cache, map_location="cpu", weights_only=True)
    except Exception as exc:  # offline, or the download failed
        log.warning("pretrained ResNet-18 weights unavailable: %s", exc)
        return False
    state = {k: v for k, v in state.items() if not k.startswith("fc.")}
    enc.load_state_dict(state, strict=False)
    return True


def build(cfg: NetworkConfig, seed: int = 0) -> SegNet:
    """Construct the network; decoder and head get He-uniform weights."""
    torch.manual_seed(seed)
    model = SegNet(cfg)
    model.seed = seed
    gen = torch.Generator().manual_seed(seed)
    _random_encoder_init(model.encoder, gen)
    if cfg.pretrained_encoder:
        pretrained_ok = (
            cfg.encoder_layers == (2, 2, 2, 2) and cfg.encoder_width == 64 and _load_pretrained(model.encoder)
        )
        if pretrained_ok:
            model.encoder_weights = "imagenet"
        elif not cfg.allow_random_encoder:
            raise ConfigurationError("pretrained encoder requested but weights are unavailable")
        else:
            log.warning("falling back to a randomly initialized encoder")
    reinit_decoder_head(model, seed)
    return model.to(device())


def reinit_decoder_head(model: SegNet, seed: int) -> SegNet:
    """Redraw decoder and head parameters in place; the encoder is untouched."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        _he_uniform(model.decoder, gen)
        _he_uniform(model.head, gen)
    return model


def reinit_head(model: SegNet, seed: int) -> SegNet:
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        _he_uniform(model.head, gen)
    return model


def partition(model: SegNet) -> Dict[str, List[nn.Parameter]]:
    return {name: list(getattr(model, name).parameters()) for name in PARTITIONS}


def n_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _to_batch(pixels, dev) -> torch.Tensor:
    x = np.asarray(pixels, dtype=np.float32)
    if x.ndim == 2:
        x = x[None]
    return torch.from_numpy(x)[:, None].to(dev)


@torch.no_grad()
def forward(model: SegNet, pixels, batch_size: int = 8) -> np.ndarray:
    """Softmax probabilities, H x W x C (or B x H x W x C for a stack), in inference mode."""
    return _infer(model, pixels, batch_size, lambda m, x: torch.softmax(m(x), dim=1))


@torch.no_grad()
def decoder_features(model: SegNet, pixels, batch_size: int = 8) -> np.ndarray:
    """conv5b activations, H x W x 16 (or stacked), in inference mode."""
    return _infer(model, pixels, batch_size, lambda m, x: m.features(x))


def _infer(model, pixels, batch_size, fn):
    was_training = model.training
    model.eval()
    dev = next(model.parameters()).device
    single = np.ndim(pixels) == 2
    x = _to_batch(pixels, dev)
    outs = [fn(model, x[i : i + batch_size]).permute(0, 2, 3, 1).cpu().numpy() for i in range(0, len(x), batch_size)]
    model.train(was_training)
    out = np.concatenate(outs).astype(np.float64)
    return out[0] if single else out


def predict_labels(model: SegNet, pixels, batch_size: int = 8) -> np.ndarray:
    return forward(model, pixels, batch_size).argmax(axis=-1)


def save_checkpoint(path, model: SegNet, state: Optional[dict] = None) -> None:
    """One archive holding the parameter partition, config, seed and counters."""
    sd = model.state_dict()
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "seed": model.seed,
        "encoder_weights": model.encoder_weights,
        "params": {p: {k[len(p) + 1 :]: v for k, v in sd.items() if k.startswith(p + ".")} for p in PARTITIONS},
        "state": state or {},
    }
    torch.save(payload, path)


def load_checkpoint(path):
    """Return (model, state) from an archive written by ``save_checkpoint``."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not an IDUS checkpoint")
    if payload["version"] > CHECKPOINT_VERSION:
        raise ConfigurationError(f"checkpoint version {payload['version']} is newer than supported")
    cfg = NetworkConfig(**payload["config"])
    model = SegNet(cfg)
    sd = {f"{p}.{k}": v for p, part in payload["params"].items() for k, v in part.items()}
    model.load_state_dict(sd)
    model.seed = payload["seed"]
    model.encoder_weights = payload["encoder_weights"]
    return model.to(device()), payload["state"]
