"""Small trainable conv stacks standing in for the pre-trained backbones."""

from __future__ import annotations

from .core import ops
from .core.nn import Conv2d, ConvReLU, Module
from .core.tensor import concat, relu


class Encoder(Module):
    """Five stride-2 stages; returns features at strides 2, 4, 8, 16, 32."""

    def __init__(self, rng, c_in, widths, dtype=None):
        self.stages = []
        prev = c_in
        for w in widths:
            self.stages.append([ConvReLU(rng, prev, w, 3, 2, dtype), ConvReLU(rng, w, w, 3, 1, dtype)])
            prev = w

    def forward(self, x):
        feats = []
        for down, conv in self.stages:
            x = conv(down(x))
            feats.append(x)
        return feats


class Decoder(Module):
    """U-Net style upsampling path over encoder features.

    Produces one feature per entry of ``widths``: strides 16, 8, 4, 2 and,
    with a fifth width, stride 1.
    """

    def __init__(self, rng, enc_widths, widths, dtype=None):
        self.blocks = []
        prev = enc_widths[-1]
        skips = list(enc_widths[-2::-1]) + [0]
        for w, skip in zip(widths, skips):
            self.blocks.append(ConvReLU(rng, prev + skip, w, 3, 1, dtype))
            prev = w

    def forward(self, feats, out_hw=None):
        x = feats[-1]
        skips = feats[-2::-1]
        out = []
        for i, block in enumerate(self.blocks):
            h, w = x.shape[2] * 2, x.shape[3] * 2
            x = ops.bilinear_resize(x, h, w)
            if i < len(skips):
                x = concat([x, skips[i]], axis=1)
            x = block(x)
            out.append(x)
        return out


class ResBlock(Module):
    def __init__(self, rng, c_in, c_out, stride=2, dtype=None):
        self.conv1 = Conv2d(rng, c_in, c_out, 3, stride, dtype=dtype)
        self.conv2 = Conv2d(rng, c_out, c_out, 3, 1, dtype=dtype)
        self.skip = Conv2d(rng, c_in, c_out, 1, stride, pad=0, dtype=dtype)

    def forward(self, x):
        return relu(self.conv2(relu(self.conv1(x))) + self.skip(x))


class ResidualStack(Module):
    """Stride-2 residual blocks, one per width."""

    def __init__(self, rng, c_in, widths, dtype=None):
        self.blocks = []
        prev = c_in
        for w in widths:
            self.blocks.append(ResBlock(rng, prev, w, 2, dtype))
            prev = w

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return x
