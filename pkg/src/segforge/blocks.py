"""Network building blocks: residual conv units, channel gating, dilated pyramids.

Blocks are plain parameter containers with a ``forward(x, training)``
method composed from tensor ops. Each exposes ``params()`` (trainable
tensors, name-prefixed) and ``stats()`` (batch-norm running statistics)
so the network can enumerate, count and checkpoint them uniformly.
"""

import numpy as np

from . import tensor as T
from .errors import ConfigError


def he_uniform(rng, shape, fan_in):
    """He-style uniform init, suited to ReLU stacks."""
    bound = np.sqrt(6.0 / fan_in)
    return T.Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape):
    return T.Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape):
    return T.Tensor(np.ones(shape), requires_grad=True)


class Conv2d:
    """Conv parameters with \"same\" padding for odd kernels (padding = dilation*(k-1)/2)."""

    def __init__(self, rng, cin, cout, ksize, dilation=1):
        self.dilation = dilation
        self.padding = dilation * (ksize - 1) // 2
        self.weight = he_uniform(rng, (cout, cin, ksize, ksize), cin * ksize * ksize)
        self.bias = _zeros(cout)

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, dilation=self.dilation, padding=self.padding)

    def params(self, prefix):
        return [(prefix + ".weight", self.weight), (prefix + ".bias", self.bias)]

    def stats(self, prefix):
        return []


class BatchNorm:
    def __init__(self, channels):
        self.gamma = _ones(channels)
        self.beta = _zeros(channels)
        self.running = T.BNStats(channels)

    def forward(self, x, training):
        return T.batch_norm(x, self.gamma, self.beta, self.running, training)

    def params(self, prefix):
        return [(prefix + ".gamma", self.gamma), (prefix + ".beta", self.beta)]

    def stats(self, prefix):
        return [(prefix + ".running", self.running)]


class ConvBNRelu:
    def __init__(self, rng, cin, cout, ksize=3, dilation=1):
        self.conv = Conv2d(rng, cin, cout, ksize, dilation)
        self.bn = BatchNorm(cout)

    def forward(self, x, training):
        return T.relu(self.bn.forward(self.conv.forward(x), training))

    def params(self, prefix):
        return self.conv.params(prefix + ".conv") + self.bn.params(prefix + ".bn")

    def stats(self, prefix):
        return self.bn.stats(prefix + ".bn")


class PlainBlock:
    """Two conv-BN-ReLU layers, the non-residual variant of the basic unit."""

    def __init__(self, rng, cin, cout):
        self.layer1 = ConvBNRelu(rng, cin, cout)
        self.layer2 = ConvBNRelu(rng, cout, cout)

    def forward(self, x, training):
        return self.layer2.forward(self.layer1.forward(x, training), training)

    def params(self, prefix):
        return self.layer1.params(prefix + ".layer1") + self.layer2.params(prefix + ".layer2")

    def stats(self, prefix):
        return self.layer1.stats(prefix + ".layer1") + self.layer2.stats(prefix + ".layer2")


class ResidualUnit:
    """conv-BN-ReLU-conv-BN plus a shortcut, joined before the final ReLU.

    The shortcut is the identity when channel counts match and a 1x1 conv
    otherwise, so matched units add zero extra parameters.
    """

    def __init__(self, rng, cin, cout):
        self.conv1 = Conv2d(rng, cin, cout, 3)
        self.bn1 = BatchNorm(cout)
        self.conv2 = Conv2d(rng, cout, cout, 3)
        self.bn2 = BatchNorm(cout)
        self.shortcut = Conv2d(rng, cin, cout, 1) if cin != cout else None

    def forward(self, x, training):
        if x.shape[1] != self.conv1.weight.shape[1]:
            raise ConfigError(
                f"residual unit expects {self.conv1.weight.shape[1]} channels, got {x.shape[1]}"
            )
        h = T.relu(self.bn1.forward(self.conv1.forward(x), training))
        h = self.bn2.forward(self.conv2.forward(h), training)
        skip = self.shortcut.forward(x) if self.shortcut is not None else x
        return T.relu(T.add(h, skip))

    def params(self, prefix):
        out = self.conv1.params(prefix + ".conv1") + self.bn1.params(prefix + ".bn1")
        out += self.conv2.params(prefix + ".conv2") + self.bn2.params(prefix + ".bn2")
        if self.shortcut is not None:
            out += self.shortcut.params(prefix + ".shortcut")
        return out

    def stats(self, prefix):
        return self.bn1.stats(prefix + ".bn1") + self.bn2.stats(prefix + ".bn2")


class SEBlock:
    """Squeeze-and-excitation channel gating: pooled descriptor, bottleneck MLP, sigmoid scale."""

    def __init__(self, rng, channels, reduction=16):
        self.channels = channels
        hidden = max(channels // reduction, 1)
        self.w1 = he_uniform(rng, (hidden, channels), channels)
        self.b1 = _zeros(hidden)
        self.w2 = he_uniform(rng, (channels, hidden), hidden)
        self.b2 = _zeros(channels)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ConfigError(f"SE block built for {self.channels} channels, got {x.shape[1]}")
        s = T.global_avg_pool(x)
        s = T.relu(T.linear(s, self.w1, self.b1))
        s = T.sigmoid(T.linear(s, self.w2, self.b2))
        return T.mul(x, s.reshape(x.shape[0], self.channels, 1, 1))

    def params(self, prefix):
        return [
            (prefix + ".w1", self.w1),
            (prefix + ".b1", self.b1),
            (prefix + ".w2", self.w2),
            (prefix + ".b2", self.b2),
        ]

    def stats(self, prefix):
        return []


class ASPPBlock:
    """Parallel conv branches at several dilation rates, fused by a 1x1 conv.

    Rate 1 is a 1x1 conv; every other rate is a 3x3 conv with padding equal
    to its rate, so all branches preserve the spatial size and read the
    same input in parallel.
    """

    def __init__(self, rng, cin, cout, rates=(1, 6, 12, 18)):
        self.rates = tuple(rates)
        self.branches = []
        for rate in self.rates:
            if rate == 1:
                self.branches.append(ConvBNRelu(rng, cin, cout, ksize=1))
            else:
                self.branches.append(ConvBNRelu(rng, cin, cout, ksize=3, dilation=rate))
        self.fuse = ConvBNRelu(rng, cout * len(self.rates), cout, ksize=1)

    def forward(self, x, training):
        outs = [b.forward(x, training) for b in self.branches]
        merged = outs[0]
        for o in outs[1:]:
            merged = T.concat_channels(merged, o)
        return self.fuse.forward(merged, training)

    def params(self, prefix):
        out = []
        for rate, b in zip(self.rates, self.branches):
            out += b.params(f"{prefix}.rate{rate}")
        return out + self.fuse.params(prefix + ".fuse")

    def stats(self, prefix):
        out = []
        for rate, b in zip(self.rates, self.branches):
            out += b.stats(f"{prefix}.rate{rate}")
        return out + self.fuse.stats(prefix + ".fuse")


def param_count(params):
    """Total trainable scalars in a params() listing."""
    return sum(p.data.size for _, p in params)
