"""Shared residual encoder, BYOL heads, linear probe and six segmentation decoders."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from . import gradcore as gc
from .gradcore import BatchNorm2d, Conv2d, Linear

DECODER_KINDS = ("FCN", "UNET", "ATTN_UNET", "DEEPLABV3PLUS", "UPERNET", "PAN")
STAGE_DOWNSAMPLE = (4, 8, 16, 32)


@dataclass
class EncoderConfig:
    widths: tuple = (16, 24, 32, 48, 64)
    blocks: tuple = (1, 1, 1, 1)
    stem_downsample: int = 4
    total_downsample: int = 32

    def __post_init__(self):
        self.widths, self.blocks = tuple(self.widths), tuple(self.blocks)
        if len(self.widths) != 5 or min(self.widths) <= 0:
            raise ValueError("encoder needs 5 strictly positive widths (stem + 4 stages)")
        if len(self.blocks) != 4 or min(self.blocks) < 1:
            raise ValueError("encoder needs 4 stage block counts >= 1")
        if self.total_downsample % self.stem_downsample:
            raise ValueError("stem downsample must divide total downsample")
        if self.stem_downsample != 4 or self.total_downsample != 32:
            raise ValueError("only the {4, 8, 16, 32} stage geometry is supported")

    @property
    def stage_widths(self):
        return self.widths[1:]


def conv_bn_relu(cin, cout, k=3, stride=1, dilation=1):
    return nn.Sequential(Conv2d(cin, cout, k, stride, dilation=dilation, bias=False), BatchNorm2d(cout), nn.ReLU())


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, stride, bias=False)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, 1, bias=False)
        self.bn2 = BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(Conv2d(cin, cout, 1, stride, bias=False), BatchNorm2d(cout))

    def forward(self, x):
        out = torch.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return torch.relu(out + skip)


class Encoder(nn.Module):
    """Miniature ResNet: a x4 stem followed by four residual stages at x4/x8/x16/x32."""

    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = config = config or EncoderConfig()
        w = config.widths
        self.stem = nn.Sequential(conv_bn_relu(3, w[0], 3, 2), conv_bn_relu(w[0], w[0], 3, 2))
        stages, cin = [], w[0]
        for i, (cout, n) in enumerate(zip(w[1:], config.blocks)):
            stride = 1 if i == 0 else 2
            blocks = [BasicBlock(cin, cout, stride)] + [BasicBlock(cout, cout, 1) for _ in range(n - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            ph, pw = (-h) % 32, (-w) % 32
            raise ValueError(f"input {h}x{w} is not divisible by 32; pad by ({ph}, {pw}) rows/cols")
        feats, x = [], self.stem(x)
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def encode(encoder: Encoder, image):
    return encoder(image)


def global_pool(feature):
    return feature.mean(dim=(2, 3))


def global_embed(encoder: Encoder, image):
    return global_pool(encoder(image)[-1])


class MLPHead(nn.Module):
    def __init__(self, cin, hidden, cout):
        super().__init__()
        self.fc1 = Linear(cin, hidden)
        self.bn = BatchNorm2d(hidden)
        self.fc2 = Linear(hidden, cout)

    def forward(self, x):
        return self.fc2(torch.relu(self.bn(self.fc1(x))))


class ByolHeads(nn.Module):
    def __init__(self, feature_dim, hidden=256, dim=64):
        super().__init__()
        self.projector = MLPHead(feature_dim, hidden, dim)
        self.predictor = MLPHead(dim, hidden, dim)


# ---------------------------------------------------------------- decoders


class FCNDecoder(nn.Module):
    """FCN-8s: class scores from S4, S3 and S2 fused top-down, then x8 upsample."""

    def __init__(self, widths, n_classes, hidden=64):
        super().__init__()
        self.head = nn.Sequential(conv_bn_relu(widths[3], hidden), Conv2d(hidden, n_classes, 1))
        self.score16 = Conv2d(widths[2], n_classes, 1)
        self.score8 = Conv2d(widths[1], n_classes, 1)

    def forward(self, feats):
        _, s2, s3, s4 = feats
        x = gc.bilinear_upsample(self.head(s4), 2) + self.score16(s3)
        x = gc.bilinear_upsample(x, 2) + self.score8(s2)
        return gc.bilinear_upsample(x, 8)


class AttentionGate(nn.Module):
    """Additive attention: sigmoid(psi(relu(Wg*g + Wx*x))) scales the skip features x."""

    def __init__(self, g_ch, x_ch, inter):
        super().__init__()
        self.wg = nn.Sequential(Conv2d(g_ch, inter, 1, bias=False), BatchNorm2d(inter))
        self.wx = nn.Sequential(Conv2d(x_ch, inter, 1, bias=False), BatchNorm2d(inter))
        self.psi = Conv2d(inter, 1, 1)
        self.last_coefficients = None

    def forward(self, g, x):
        alpha = torch.sigmoid(self.psi(torch.relu(self.wg(g) + self.wx(x))))
        self.last_coefficients = alpha.detach()
        return x * alpha


class UNetDecoder(nn.Module):
    """Mirror decoder: bilinear x2 + skip concat per stage, then an extra x4 stage for the stem."""

    def __init__(self, widths, n_classes, channels=(48, 32, 24, 16), attention=False):
        super().__init__()
        w1, w2, w3, w4 = widths
        skips = (w3, w2, w1)
        self.blocks = nn.ModuleList()
        self.gates = nn.ModuleList() if attention else None
        cin = w4
        for skip, cout in zip(skips, channels[:3]):
            if attention:
                self.gates.append(AttentionGate(cin, skip, max(skip // 2, 4)))
            self.blocks.append(nn.Sequential(conv_bn_relu(cin + skip, cout), conv_bn_relu(cout, cout)))
            cin = cout
        self.final = nn.Sequential(conv_bn_relu(cin, channels[3]), conv_bn_relu(channels[3], channels[3]))
        self.head = Conv2d(channels[3], n_classes, 1)

    def forward(self, feats):
        s1, s2, s3, s4 = feats
        x = s4
        for i, (skip, block) in enumerate(zip((s3, s2, s1), self.blocks)):
            x = gc.bilinear_upsample(x, 2)
            if self.gates is not None:
                skip = self.gates[i](x, skip)
            x = block(torch.cat([x, skip], 1))
        x = self.final(gc.bilinear_upsample(x, 4))
        return self.head(x)


class ASPP(nn.Module):
    def __init__(self, cin, cout, rates=(1, 6, 12, 18)):
        super().__init__()
        self.branches = nn.ModuleList(
            [conv_bn_relu(cin, cout, 1 if r == 1 else 3, dilation=r) for r in rates])
        self.pool_conv = Conv2d(cin, cout, 1)
        self.project = conv_bn_relu(cout * (len(rates) + 1), cout, 1)

    def forward(self, x):
        outs = [b(x) for b in self.branches]
        pooled = torch.relu(self.pool_conv(x.mean(dim=(2, 3), keepdim=True)))
        outs.append(pooled.expand(-1, -1, *x.shape[-2:]))
        return self.project(torch.cat(outs, 1))


class DeepLabV3PlusDecoder(nn.Module):
    """ASPP on S4, upsampled and fused with the S1 low-level skip."""

    def __init__(self, widths, n_classes, channels=48, low_channels=16, rates=(1, 6, 12, 18)):
        super().__init__()
        self.aspp = ASPP(widths[3], channels, rates)
        self.low = conv_bn_relu(widths[0], low_channels, 1)
        self.fuse = nn.Sequential(conv_bn_relu(channels + low_channels, channels), conv_bn_relu(channels, channels))
        self.head = Conv2d(channels, n_classes, 1)

    def forward(self, feats):
        s1, s4 = feats[0], feats[3]
        x = gc.bilinear_upsample(self.aspp(s4), 8)
        x = self.fuse(torch.cat([x, self.low(s1)], 1))
        return gc.bilinear_upsample(self.head(x), 4)


class PyramidPooling(nn.Module):
    def __init__(self, cin, cout, bins=(1, 2, 3, 6)):
        super().__init__()
        self.bins = bins
        self.convs = nn.ModuleList([conv_bn_relu(cin, cout, 1) for _ in bins])
        self.bottleneck = conv_bn_relu(cin + cout * len(bins), cout)

    def forward(self, x):
        size = x.shape[-2:]
        outs = [x]
        for b, conv in zip(self.bins, self.convs):
            pooled = nn.functional.adaptive_avg_pool2d(x, b)
            outs.append(gc.resize(conv(pooled), size))
        return self.bottleneck(torch.cat(outs, 1))


class UPerNetDecoder(nn.Module):
    """Pyramid pooling on S4, top-down FPN, head reading every pyramid level."""

    def __init__(self, widths, n_classes, channels=32, bins=(1, 2, 3, 6)):
        super().__init__()
        self.ppm = PyramidPooling(widths[3], channels, bins)
        self.lateral = nn.ModuleList([conv_bn_relu(w, channels, 1) for w in widths[:3]])
        self.smooth = nn.ModuleList([conv_bn_relu(channels, channels) for _ in widths[:3]])
        self.fuse = conv_bn_relu(channels * 4, channels)
        self.head = Conv2d(channels, n_classes, 1)

    def forward(self, feats):
        top = self.ppm(feats[3])
        levels = [top]
        for i in (2, 1, 0):
            top = self.lateral[i](feats[i]) + gc.bilinear_upsample(top, 2)
            levels.append(self.smooth[i](top))
        size = levels[-1].shape[-2:]
        x = self.fuse(torch.cat([gc.resize(l, size) for l in levels[::-1]], 1))
        return gc.bilinear_upsample(self.head(x), 4)


class FPA(nn.Module):
    """Feature pyramid attention: a 7/5/3-kernel downsampling pyramid forms a spatial mask."""

    def __init__(self, cin, cout, kernels=(7, 5, 3)):
        super().__init__()
        self.main = conv_bn_relu(cin, cout, 1)
        self.glob = conv_bn_relu(cin, cout, 1)
        self.down = nn.ModuleList()
        self.refine = nn.ModuleList()
        c = cin
        for k in kernels:
            self.down.append(conv_bn_relu(c, cout, k, 2))
            self.refine.append(Conv2d(cout, cout, k, bias=False))
            c = cout
        self.to_mask = Conv2d(cout, cout, 1)

    def forward(self, x):
        size = x.shape[-2:]
        main = self.main(x)
        downs, y = [], x
        for down in self.down:
            y = down(y)
            downs.append(y)
        att = None
        for y, refine in zip(reversed(downs), reversed(list(self.refine))):
            y = refine(y)
            att = y if att is None else y + gc.resize(att, y.shape[-2:])
        mask = torch.sigmoid(self.to_mask(gc.resize(att, size)))
        glob = self.glob(x.mean(dim=(2, 3), keepdim=True))
        return main * mask + glob


class GAU(nn.Module):
    """Global attention upsample: pooled high-level context gates low-level channels."""

    def __init__(self, high_ch, low_ch, cout):
        super().__init__()
        self.low = conv_bn_relu(low_ch, cout, 3)
        self.gate = Conv2d(high_ch, cout, 1)
        self.high = conv_bn_relu(high_ch, cout, 1) if high_ch != cout else None
        self.last_weights = None

    def forward(self, high, low):
        weights = torch.sigmoid(self.gate(high.mean(dim=(2, 3), keepdim=True)))
        self.last_weights = weights.detach()
        up = gc.resize(high if self.high is None else self.high(high), low.shape[-2:])
        return self.low(low) * weights + up


class PANDecoder(nn.Module):
    def __init__(self, widths, n_classes, channels=32, kernels=(7, 5, 3)):
        super().__init__()
        self.fpa = FPA(widths[3], channels, kernels)
        self.gaus = nn.ModuleList([GAU(channels, w, channels) for w in (widths[2], widths[1], widths[0])])
        self.head = Conv2d(channels, n_classes, 1)

    def forward(self, feats):
        x = self.fpa(feats[3])
        for gau, low in zip(self.gaus, (feats[2], feats[1], feats[0])):
            x = gau(x, low)
        return gc.bilinear_upsample(self.head(x), 4)


def _make_decoder(kind, widths, n_classes):
    if kind == "FCN":
        return FCNDecoder(widths, n_classes)
    if kind == "UNET":
        return UNetDecoder(widths, n_classes)
    if kind == "ATTN_UNET":
        return UNetDecoder(widths, n_classes, attention=True)
    if kind == "DEEPLABV3PLUS":
        return DeepLabV3PlusDecoder(widths, n_classes)
    if kind == "UPERNET":
        return UPerNetDecoder(widths, n_classes)
    if kind == "PAN":
        return PANDecoder(widths, n_classes)
    raise ValueError(f"unknown decoder kind {kind!r}; expected one of {DECODER_KINDS}")


class SegModel(nn.Module):
    """Encoder + decoder producing per-pixel class logits at input resolution."""

    def __init__(self, kind="UNET", encoder_config: EncoderConfig | None = None, n_classes=8):
        super().__init__()
        kind = kind.upper()
        self.kind, self.n_classes = kind, n_classes
        self.encoder = Encoder(encoder_config)
        self.decoder = _make_decoder(kind, self.encoder.config.stage_widths, n_classes)

    def forward(self, x):
        return self.decoder(self.encoder(x))

    def predict_proba(self, x):
        return torch.softmax(self(x), dim=1)

    def describe(self):
        return {"kind": self.kind, "n_classes": self.n_classes,
                "encoder": asdict(self.encoder.config)}


def build_decoder(kind, encoder_config: EncoderConfig | None = None, n_classes=8, seed=None) -> SegModel:
    if seed is not None:
        torch.manual_seed(seed)
    return SegModel(kind, encoder_config, n_classes)


@dataclass
class ProbeConfig:
    stages: tuple = field(default=(4,))  # 1-based stage indices whose features are read


class LinearProbe(nn.Module):
    """1x1 convolution + softmax on frozen, bilinearly upsampled encoder features."""

    def __init__(self, encoder: Encoder, n_classes=8, stages=(4,)):
        super().__init__()
        self.encoder = encoder
        self.stages = tuple(stages)
        width = sum(encoder.config.stage_widths[s - 1] for s in self.stages)
        self.classifier = Conv2d(width, n_classes, 1)
        for p in self.encoder.parameters():
            p.requires_grad_(False)

    def train(self, mode=True):
        super().train(mode)
        self.encoder.eval()
        return self

    def features(self, x):
        with torch.no_grad():
            feats = self.encoder(x)
        if len(self.stages) == 1:
            return feats[self.stages[0] - 1]
        size = feats[self.stages[0] - 1].shape[-2:]
        return torch.cat([gc.resize(feats[s - 1], size) for s in self.stages], 1)

    def forward(self, x):
        # 1x1 conv commutes with bilinear interpolation, so classify first and upsample the logits.
        logits = self.classifier(self.features(x))
        return gc.resize(logits, x.shape[-2:])

    def predict_proba(self, x):
        return torch.softmax(self(x), dim=1)


def probe_forward(probe: LinearProbe, image):
    return probe.predict_proba(image)


def count_parameters(module: nn.Module, trainable_only=False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def save_segmodel(model: SegModel, path, extra_meta=None):
    meta = {"model": "segmodel", **model.describe(), **(extra_meta or {})}
    gc.save_checkpoint(path, gc.module_tensors(model), meta)


def load_segmodel(path) -> SegModel:
    tensors, meta = gc.load_checkpoint(path)
    if meta.get("model") == "probe":
        return load_probe(path)
    model = SegModel(meta["kind"], EncoderConfig(**meta["encoder"]), meta["n_classes"])
    gc.load_module_tensors(model, tensors)
    model.eval()
    return model


def save_probe(probe: LinearProbe, path, extra_meta=None):
    meta = {"model": "probe", "n_classes": probe.classifier.weight.shape[0], "stages": list(probe.stages),
            "encoder": asdict(probe.encoder.config), **(extra_meta or {})}
    gc.save_checkpoint(path, gc.module_tensors(probe), meta)


def load_probe(path) -> LinearProbe:
    tensors, meta = gc.load_checkpoint(path)
    probe = LinearProbe(Encoder(EncoderConfig(**meta["encoder"])), meta["n_classes"], meta["stages"])
    gc.load_module_tensors(probe, tensors)
    probe.eval()
    return probe


def save_encoder(encoder: Encoder, path, extra_meta=None):
    meta = {"model": "encoder", "encoder": asdict(encoder.config), **(extra_meta or {})}
    gc.save_checkpoint(path, gc.module_tensors(encoder), meta)


def load_encoder(path) -> Encoder:
    tensors, meta = gc.load_checkpoint(path)
    enc = Encoder(EncoderConfig(**meta["encoder"]))
    gc.load_module_tensors(enc, tensors)
    return enc


@torch.no_grad()
def recalibrate_batchnorm(module: nn.Module, images, batch=32):
    """Re-estimate every batchnorm running statistic as the average over ``images`` batches.

    ``images`` is an (N, 3, H, W) float tensor.  Parameters are untouched.
    """
    bns = [m for m in module.modules() if isinstance(m, BatchNorm2d)]
    saved = [(m.momentum, m.update_running, m.training) for m in bns]
    for m in bns:
        m.running_mean.zero_()
        m.running_var.fill_(1.0)
        m.update_running = True
    was = module.training
    module.eval()
    n_batches = 0
    for s in range(0, len(images), batch):
        chunk = images[s:s + batch]
        if len(chunk) < 2 and n_batches:
            continue
        n_batches += 1
        for m in bns:
            m.momentum = 1.0 / n_batches  # cumulative mean over batches
            m.train()
        module(chunk)
        for m in bns:
            m.eval()
    module.train(was)
    for m, (mom, upd, tr) in zip(bns, saved):
        m.momentum, m.update_running = mom, upd
        m.train(tr)
    return module
