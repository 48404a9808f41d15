"""Network architectures: FCN segmenter, StarGAN and CycleGAN translators, feature critics.

All builders return plain ``nn.Module`` objects. Images live in [-1, 1],
segmentation outputs in (0, 1). Instance norm never tracks running
statistics, so ``eval()`` only switches dropout off.
"""
from __future__ import annotations

import torch
import torch.nn as nn

from .seeding import torch_generator

LEAK = 0.01

# Parameter counts reported for the translation comparison (64x64 RGB, 2 domains).
TABLE1 = {
    "cyclegan/G_ab": 194_051,
    "cyclegan/G_ba": 194_051,
    "cyclegan/D_a": 694_241,
    "cyclegan/D_b": 694_241,
    "stargan/G": 197_504,
    "stargan/D": 694_496,
}


def _activation(name: str) -> nn.Module:
    if name == "relu":
        return nn.ReLU()
    if name == "leaky_relu":
        return nn.LeakyReLU(LEAK)
    if name == "sigmoid":
        return nn.Sigmoid()
    if name == "tanh":
        return nn.Tanh()
    if name == "none":
        return nn.Identity()
    raise ValueError(f"unknown activation {name!r}")


def conv_block(kind: str, in_ch: int, out_ch: int, kernel: int, *, norm: str = "none",
               activation: str = "relu", dropout: float = 0.0, bias: bool = True,
               affine: bool = False) -> nn.Sequential:
    """conv (or transposed conv) -> dropout -> instance norm -> activation.

    ``down`` halves and ``up`` doubles the spatial size for kernels 3 and 4;
    ``plain`` keeps it.
    """
    if kind == "down":
        conv = nn.Conv2d(in_ch, out_ch, kernel, stride=2, padding=1, bias=bias)
    elif kind == "up":
        conv = nn.ConvTranspose2d(in_ch, out_ch, kernel, stride=2, padding=1,
                                  output_padding=kernel % 2, bias=bias)
    elif kind == "plain":
        conv = nn.Conv2d(in_ch, out_ch, kernel, stride=1, padding=kernel // 2, bias=bias)
    else:
        raise ValueError(f"unknown block kind {kind!r}")
    layers = [conv]
    if dropout > 0:
        layers.append(nn.Dropout(dropout))
    if norm == "instance":
        layers.append(nn.InstanceNorm2d(out_ch, affine=affine, track_running_stats=False))
    elif norm != "none":
        raise ValueError(f"unknown norm {norm!r}")
    layers.append(_activation(activation))
    return nn.Sequential(*layers)


def init_weights(net: nn.Module, seed: int = 0, stream: str = "init") -> nn.Module:
    """N(0, 0.02) conv/linear weights, zero biases; norm affine terms stay (1, 0)."""
    g = torch_generator(seed, stream)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                m.weight.normal_(0.0, 0.02, generator=g)
                if m.bias is not None:
                    m.bias.zero_()
    return net


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


def parameter_table(net: nn.Module) -> list[tuple[str, tuple[int, ...], int]]:
    return [(name, tuple(p.shape), p.numel()) for name, p in net.named_parameters()]


# --------------------------------------------------------------------------- FCN

class FCNEncoder(nn.Module):
    def __init__(self, in_channels: int, base: int = 32, dropout: float = 0.2):
        super().__init__()
        kw = dict(norm="instance", activation="relu", dropout=dropout)
        self.blocks = nn.Sequential(
            conv_block("plain", in_channels, base, 3, **kw),
            conv_block("down", base, base * 2, 4, **kw),
            conv_block("down", base * 2, base * 4, 4, **kw),
        )
        self.out_channels = base * 4

    def forward(self, x):
        return self.blocks(x)


class FCNDecoder(nn.Module):
    """Upsampling path + 3x3 conv + sigmoid; also the segmenter S on G_e features."""

    def __init__(self, in_channels: int = 128, num_classes: int = 1, dropout: float = 0.2):
        super().__init__()
        kw = dict(norm="instance", activation="relu", dropout=dropout)
        self.blocks = nn.Sequential(
            conv_block("up", in_channels, in_channels // 2, 4, **kw),
            conv_block("up", in_channels // 2, in_channels // 4, 4, **kw),
            nn.Conv2d(in_channels // 4, num_classes, 3, padding=1),
            nn.Sigmoid(),
        )

    def forward(self, h):
        return self.blocks(h)


class FCNSegmenter(nn.Module):
    def __init__(self, in_channels: int, base: int = 32, dropout: float = 0.2):
        super().__init__()
        self.encoder = FCNEncoder(in_channels, base, dropout)
        self.decoder = FCNDecoder(base * 4, 1, dropout)

    def encoder_forward(self, x):
        return self.encoder(x)

    def decoder_forward(self, h):
        return self.decoder(h)

    def forward(self, x):
        return self.decoder(self.encoder(x))


def build_fcn_segmenter(in_channels: int, resolution: int, base_channels: int = 32,
                        dropout: float = 0.2, seed: int = 0) -> FCNSegmenter:
    if resolution % 4:
        raise ValueError(f"resolution {resolution} not divisible by 4")
    return init_weights(FCNSegmenter(in_channels, base_channels, dropout), seed, "init/fcn")


def build_segmenter_decoder(feature_channels: int = 128, dropout: float = 0.2,
                            seed: int = 0) -> FCNDecoder:
    return init_weights(FCNDecoder(feature_channels, 1, dropout), seed, "init/segmenter")


# --------------------------------------------------------------------------- translators

class Translator(nn.Module):
    """Initial block, two down blocks, two up blocks, final conv + tanh.

    With ``num_domains > 0`` the target-domain one-hot is replicated spatially
    and concatenated to the image (StarGAN); with 0 it is a CycleGAN generator.
    """

    def __init__(self, image_channels: int = 3, num_domains: int = 0, base: int = 32,
                 end_kernel: int = 7, sample_kernel: int = 3, bias: bool = True,
                 affine: bool = False, dropout: float = 0.0):
        super().__init__()
        self.num_domains = num_domains
        kw = dict(norm="instance", activation="relu", dropout=dropout, bias=bias, affine=affine)
        self.encoder = nn.Sequential(
            conv_block("plain", image_channels + num_domains, base, end_kernel, **kw),
            conv_block("down", base, base * 2, sample_kernel, **kw),
            conv_block("down", base * 2, base * 4, sample_kernel, **kw),
        )
        self.decoder = nn.Sequential(
            conv_block("up", base * 4, base * 2, sample_kernel, **kw),
            conv_block("up", base * 2, base, sample_kernel, **kw),
            nn.Conv2d(base, image_channels, end_kernel, padding=end_kernel // 2, bias=bias),
            nn.Tanh(),
        )
        self.feature_channels = base * 4

    def label_planes(self, image: torch.Tensor, label) -> torch.Tensor:
        """(B, num_domains, H, W) one-hot planes from domain indices or one-hot rows."""
        b, _, h, w = image.shape
        label = torch.as_tensor(label, device=image.device)
        if label.ndim == 0:
            label = label.expand(b)
        if label.ndim == 1:
            label = nn.functional.one_hot(label.long(), self.num_domains)
        if label.shape != (b, self.num_domains):
            raise ValueError(f"label shape {tuple(label.shape)} incompatible with batch {b}")
        return label.to(image.dtype)[:, :, None, None].expand(b, self.num_domains, h, w)

    def encode(self, image, label=None):
        if self.num_domains:
            if label is None:
                raise ValueError("conditional generator needs a domain label")
            image = torch.cat([image, self.label_planes(image, label)], dim=1)
        return self.encoder(image)

    def decode(self, h):
        return self.decoder(h)

    def forward(self, image, label=None):
        return self.decode(self.encode(image, label))


def build_stargan_generator(image_channels: int = 3, num_domains: int = 2, base_channels: int = 32,
                            end_kernel: int = 7, sample_kernel: int = 3, dropout: float = 0.0,
                            seed: int = 0) -> Translator:
    if num_domains != 2:
        raise ValueError("only two domains are supported")
    net = Translator(image_channels, num_domains, base_channels, end_kernel, sample_kernel,
                     bias=False, affine=True, dropout=dropout)
    return init_weights(net, seed, "init/stargan_G")


def build_cyclegan_generator(image_channels: int = 3, base_channels: int = 32, end_kernel: int = 7,
                             sample_kernel: int = 3, seed: int = 0, stream: str = "G") -> Translator:
    net = Translator(image_channels, 0, base_channels, end_kernel, sample_kernel,
                     bias=True, affine=False)
    return init_weights(net, seed, f"init/cyclegan_{stream}")


# --------------------------------------------------------------------------- image critics

def _down_stack(in_ch: int, base: int, n: int, norm: str, dropout: float) -> tuple[nn.Sequential, int]:
    blocks, ch = [], in_ch
    for i in range(n):
        out = base * 2 ** i
        blocks.append(conv_block("down", ch, out, 4, norm=norm, activation="leaky_relu",
                                 dropout=dropout))
        ch = out
    return nn.Sequential(*blocks), ch


class StarGANDiscriminator(nn.Module):
    """Four stride-2 blocks, then a real/fake critic head and a domain head."""

    def __init__(self, image_channels: int = 3, num_domains: int = 2, resolution: int = 64,
                 base: int = 32, dropout: float = 0.0):
        super().__init__()
        self.body, ch = _down_stack(image_channels, base, 4, "none", dropout)
        flat = ch * (resolution // 16) ** 2
        self.rf = nn.Linear(flat, 1)
        self.dom = nn.Linear(flat, num_domains)

    def forward(self, x):
        f = self.body(x).flatten(1)
        return self.rf(f), self.dom(f)

    def critic(self, x):
        return self.rf(self.body(x).flatten(1))


def build_stargan_discriminator(image_channels: int = 3, num_domains: int = 2, resolution: int = 64,
                                base_channels: int = 32, dropout: float = 0.0,
                                seed: int = 0) -> StarGANDiscriminator:
    if resolution % 16:
        raise ValueError(f"resolution {resolution} not divisible by 16")
    if num_domains != 2:
        raise ValueError("only two domains are supported")
    net = StarGANDiscriminator(image_channels, num_domains, resolution, base_channels, dropout)
    return init_weights(net, seed, "init/stargan_D")


class CycleGANDiscriminator(nn.Module):
    def __init__(self, image_channels: int = 3, resolution: int = 64, base: int = 32):
        super().__init__()
        self.body, ch = _down_stack(image_channels, base, 4, "instance", 0.0)
        self.fc = nn.Linear(ch * (resolution // 16) ** 2, 1)

    def forward(self, x):
        return self.fc(self.body(x).flatten(1))


def build_cyclegan_discriminator(image_channels: int = 3, resolution: int = 64,
                                 base_channels: int = 32, seed: int = 0,
                                 stream: str = "D") -> CycleGANDiscriminator:
    if resolution % 16:
        raise ValueError(f"resolution {resolution} not divisible by 16")
    net = CycleGANDiscriminator(image_channels, resolution, base_channels)
    return init_weights(net, seed, f"init/cyclegan_{stream}")


# --------------------------------------------------------------------------- feature critics

class FeatureDiscOutCond(nn.Module):
    """Upsamples bottleneck features to a per-pixel source/target score map."""

    def __init__(self, feature_channels: int = 128, dropout: float = 0.2):
        super().__init__()
        kw = dict(activation="leaky_relu", dropout=dropout)
        self.net = nn.Sequential(
            conv_block("up", feature_channels, feature_channels // 2, 4, **kw),
            conv_block("up", feature_channels // 2, feature_channels // 4, 4, **kw),
            nn.Conv2d(feature_channels // 4, 1, 3, padding=1),
        )

    def forward(self, h):
        return self.net(h)


class FeatureDiscUncond(nn.Module):
    def __init__(self, feature_channels: int = 128, dropout: float = 0.2):
        super().__init__()
        kw = dict(activation="leaky_relu", dropout=dropout)
        self.net = nn.Sequential(
            conv_block("down", feature_channels, feature_channels * 2, 4, **kw),
            conv_block("down", feature_channels * 2, feature_channels * 4, 4, **kw),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(feature_channels * 4, 1),
        )

    def forward(self, h):
        return self.net(h)


class FeatureDiscInCond(nn.Module):
    """Upsample features, concatenate the segmentation, four down blocks, pool, FC."""

    def __init__(self, feature_channels: int = 128, num_classes: int = 1, dropout: float = 0.2):
        super().__init__()
        kw = dict(activation="leaky_relu", dropout=dropout)
        c = feature_channels // 4
        self.up = nn.Sequential(
            conv_block("up", feature_channels, feature_channels // 2, 4, **kw),
            conv_block("up", feature_channels // 2, c, 4, **kw),
        )
        blocks, ch = [], c + num_classes
        for i in range(4):
            blocks.append(conv_block("down", ch, c * 2 ** (i + 1), 4, **kw))
            ch = c * 2 ** (i + 1)
        self.down = nn.Sequential(*blocks, nn.AdaptiveAvgPool2d(1), nn.Flatten())
        self.fc = nn.Linear(ch, 1)

    def forward(self, h, seg):
        u = self.up(h)
        if seg.shape[0] != u.shape[0] or seg.shape[2:] != u.shape[2:]:
            raise ValueError(f"segmentation {tuple(seg.shape)} does not match upsampled features "
                             f"{tuple(u.shape)}")
        return self.fc(self.down(torch.cat([u, seg], dim=1)))


def build_feature_disc_outcond(feature_channels: int = 128, feature_resolution: int = 16,
                               dropout: float = 0.2, seed: int = 0) -> FeatureDiscOutCond:
    return init_weights(FeatureDiscOutCond(feature_channels, dropout), seed, "init/D_f")


def build_feature_disc_uncond(feature_channels: int = 128, dropout: float = 0.2,
                              seed: int = 0) -> FeatureDiscUncond:
    return init_weights(FeatureDiscUncond(feature_channels, dropout), seed, "init/D_f")


def build_feature_disc_incond(feature_channels: int = 128, num_classes: int = 1,
                              dropout: float = 0.2, seed: int = 0) -> FeatureDiscInCond:
    return init_weights(FeatureDiscInCond(feature_channels, num_classes, dropout), seed, "init/D_f")


def reference_translation_nets(image_channels: int = 3, resolution: int = 64) -> dict[str, nn.Module]:
    """The six translation networks compared by parameter count."""
    return {
        "cyclegan/G_ab": build_cyclegan_generator(image_channels, stream="G_ab"),
        "cyclegan/G_ba": build_cyclegan_generator(image_channels, stream="G_ba"),
        "cyclegan/D_a": build_cyclegan_discriminator(image_channels, resolution, stream="D_a"),
        "cyclegan/D_b": build_cyclegan_discriminator(image_channels, resolution, stream="D_b"),
        "stargan/G": build_stargan_generator(image_channels),
        "stargan/D": build_stargan_discriminator(image_channels, resolution=resolution),
    }


ARCHITECTURES = {
    "fcn": build_fcn_segmenter,
    "segmenter": build_segmenter_decoder,
    "stargan_G": build_stargan_generator,
    "stargan_D": build_stargan_discriminator,
    "cyclegan_G": build_cyclegan_generator,
    "cyclegan_D": build_cyclegan_discriminator,
    "D_f_out_cond": build_feature_disc_outcond,
    "D_f_uncond": build_feature_disc_uncond,
    "D_f_in_cond": build_feature_disc_incond,
}
