import math

from torch import nn


class ConvBackbone(nn.Module):
    """Plain conv stages (3x3 conv, GroupNorm, ReLU); total stride = product of strides."""

    def __init__(self, channels, strides, in_channels=1):
        super().__init__()
        layers = []
        prev = in_channels
        for c, s in zip(channels, strides):
            layers += [
                nn.Conv2d(prev, c, kernel_size=3, stride=s, padding=1),
                nn.GroupNorm(math.gcd(8, c), c),
                nn.ReLU(inplace=True),
            ]
            prev = c
        self.body = nn.Sequential(*layers)
        self.out_channels = prev
        self.stride = math.prod(strides)

    def forward(self, x):
        return self.body(x)
