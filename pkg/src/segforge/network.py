"""Configurable encoder/decoder segmentation network.

One declarative :class:`ModelConfig` drives the whole family used by the
ablation study: plain U-Net, residual U-Net, and the SE/ASPP variants up
to the full model (residual blocks + SE gating in the encoder + ASPP at
the bottleneck and before the output head).

Layout for depth d and base width b:

  encoder stage i (i < d):  block(C -> b*2^i) -> [SE] -> maxpool
  bottleneck:               ASPP or block (b*2^(d-1) -> b*2^d)
  decoder stage j:          upsample x2 -> concat skip -> block(-> skip width)
  head:                     [ASPP(b -> b)] -> 1x1 conv -> sigmoid

Skips are taken after the SE gate, so the decoder consumes the gated
features. The final head is a single foreground-probability channel.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import ASPPBlock, Conv2d, PlainBlock, ResidualUnit, SEBlock
from .errors import ConfigError, FormatError, InputError


@dataclass
class ModelConfig:
    input_size: int = 512
    base_channels: int = 64
    depth: int = 4
    use_residual: bool = True
    use_se: bool = True
    use_aspp: bool = True
    se_reduction: int = 16
    aspp_rates: tuple = (1, 6, 12, 18)
    upsample_mode: str = "bilinear"
    out_channels: int = 1

    def __post_init__(self):
        self.aspp_rates = tuple(int(r) for r in self.aspp_rates)
        if self.input_size % (1 << self.depth) != 0:
            raise ConfigError(
                f"input_size {self.input_size} not divisible by 2^depth = {1 << self.depth}"
            )
        if self.upsample_mode not in ("nearest", "bilinear"):
            raise ConfigError(f"unknown upsample mode {self.upsample_mode!r}")
        if self.depth < 1 or self.base_channels < 1 or self.out_channels < 1:
            raise ConfigError("depth, base_channels and out_channels must be positive")

    def stage_channels(self, i):
        return self.base_channels << i


# the five ablation arms, keyed by CLI variant name
VARIANTS = {
    "unet": dict(use_residual=False, use_se=False, use_aspp=False),
    "res": dict(use_residual=True, use_se=False, use_aspp=False),
    "se-res": dict(use_residual=True, use_se=True, use_aspp=False),
    "aspp-res": dict(use_residual=True, use_se=False, use_aspp=True),
    "sar": dict(use_residual=True, use_se=True, use_aspp=True),
}


def desk_config(**overrides):
    """Bench-scale default: full 4-pool topology at 1/16 width on 64x64 inputs."""
    base = dict(input_size=64, base_channels=16, depth=4)
    base.update(overrides)
    return ModelConfig(**base)


def variant_config(name, **overrides):
    if name not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
    kw = dict(VARIANTS[name])
    kw.update(overrides)
    return desk_config(**kw)


class SegModel:
    def __init__(self, config, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        make_block = (lambda r, ci, co: ResidualUnit(r, ci, co)) if c.use_residual else (
            lambda r, ci, co: PlainBlock(r, ci, co)
        )

        self.enc_blocks = []
        self.enc_se = []
        cin = 1
        for i in range(c.depth):
            cout = c.stage_channels(i)
            self.enc_blocks.append(make_block(rng, cin, cout))
            self.enc_se.append(SEBlock(rng, cout, c.se_reduction) if c.use_se else None)
            cin = cout

        bott_out = c.stage_channels(c.depth)
        if c.use_aspp:
            self.bottleneck = ASPPBlock(rng, cin, bott_out, c.aspp_rates)
        else:
            self.bottleneck = make_block(rng, cin, bott_out)

        self.dec_blocks = []
        prev = bott_out
        for j in range(c.depth):
            skip = c.stage_channels(c.depth - 1 - j)
            self.dec_blocks.append(make_block(rng, prev + skip, skip))
            prev = skip

        self.head_aspp = ASPPBlock(rng, prev, prev, c.aspp_rates) if c.use_aspp else None
        self.head_conv = Conv2d(rng, prev, c.out_channels, 1)

    # --- traversal -----------------------------------------------------------

    def components(self):
        """(name, block) pairs at breakdown granularity."""
        out = []
        for i, b in enumerate(self.enc_blocks):
            out.append((f"enc{i}.block", b))
            if self.enc_se[i] is not None:
                out.append((f"enc{i}.se", self.enc_se[i]))
        out.append(("bottleneck", self.bottleneck))
        for j, b in enumerate(self.dec_blocks):
            out.append((f"dec{j}.block", b))
        if self.head_aspp is not None:
            out.append(("head.aspp", self.head_aspp))
        out.append(("head.conv", self.head_conv))
        return out

    def parameters(self):
        out = []
        for name, block in self.components():
            out += block.params(name)
        return out

    def bn_stats(self):
        out = []
        for name, block in self.components():
            out += block.stats(name)
        return out

    # --- forward ---------------------------------------------------------------

    def forward(self, x, training=False, observer=None):
        """Run the net; ``observer(name, tensor)`` sees every traced layer output."""
        c = self.config
        if x.ndim != 4 or x.shape[1] != 1:
            raise ConfigError(f"expected input (N, 1, S, S), got {x.shape}")
        if x.shape[2] != c.input_size or x.shape[3] != c.input_size:
            raise ConfigError(
                f"model built for {c.input_size}x{c.input_size} inputs, got {x.shape[2]}x{x.shape[3]}"
            )
        see = observer if observer is not None else (lambda name, t: None)
        see("Input", x)
        skips = []
        h = x
        conv_idx = 1
        for i in range(c.depth):
            h = self.enc_blocks[i].forward(h, training)
            see(f"Conv{conv_idx}_x", h)
            conv_idx += 1
            if self.enc_se[i] is not None:
                h = self.enc_se[i].forward(h)
                see(f"SE_Block{i + 1}", h)
            skips.append(h)
            h = T.max_pool2d(h)
            see("Maxpooling", h)

        h = self.bottleneck.forward(h, training)
        if c.use_aspp:
            see("ASPP1", h)
        else:
            see(f"Conv{conv_idx}_x", h)
            conv_idx += 1

        for j in range(c.depth):
            h = T.upsample2d(h, factor=2, mode=c.upsample_mode)
            see(f"Upsample_{j + 1}", h)
            h = T.concat_channels(h, skips[c.depth - 1 - j])
            see(f"Concatenat{j + 1}", h)
            h = self.dec_blocks[j].forward(h, training)
            see(f"Conv{conv_idx}_x", h)
            conv_idx += 1

        if self.head_aspp is not None:
            h = self.head_aspp.forward(h, training)
            see("ASPP2", h)
        out = T.sigmoid(self.head_conv.forward(h))
        see(f"Conv{conv_idx}_x", out)
        return out

    def predict_proba(self, batch):
        """Eval-mode probabilities for a (N,1,S,S) float array, tape-free."""
        with T.no_grad():
            return self.forward(T.Tensor(batch), training=False).data

    def predict_mask(self, volume_slices, threshold=0.5, batch_size=8):
        """Binary mask volume from per-slice inputs: foreground where p >= threshold."""
        slices = [np.asarray(s, dtype=np.float64) for s in volume_slices]
        if not slices:
            raise InputError("predict_mask needs at least one slice")
        s = self.config.input_size
        for a in slices:
            if a.shape != (s, s):
                raise ConfigError(f"slice shape {a.shape} does not match model input {s}x{s}")
        masks = []
        for start in range(0, len(slices), batch_size):
            chunk = np.stack(slices[start : start + batch_size])[:, None]
            prob = self.predict_proba(chunk)
            masks.append(prob[:, 0] >= threshold)
        return np.concatenate(masks, axis=0)


def build_model(config, seed=0):
    return SegModel(config, seed)


def shape_trace(config):
    """Static (layer name, (H, W, C)) ladder; matches forward without allocating features."""
    c = config
    s = c.input_size
    rows = [("Input", (s, s, 1))]
    conv_idx = 1
    for i in range(c.depth):
        ch = c.stage_channels(i)
        rows.append((f"Conv{conv_idx}_x", (s, s, ch)))
        conv_idx += 1
        if c.use_se:
            rows.append((f"SE_Block{i + 1}", (s, s, ch)))
        s //= 2
        rows.append(("Maxpooling", (s, s, ch)))
    bott = c.stage_channels(c.depth)
    if c.use_aspp:
        rows.append(("ASPP1", (s, s, bott)))
    else:
        rows.append((f"Conv{conv_idx}_x", (s, s, bott)))
        conv_idx += 1
    prev = bott
    for j in range(c.depth):
        skip = c.stage_channels(c.depth - 1 - j)
        s *= 2
        rows.append((f"Upsample_{j + 1}", (s, s, prev)))
        rows.append((f"Concatenat{j + 1}", (s, s, prev + skip)))
        rows.append((f"Conv{conv_idx}_x", (s, s, skip)))
        conv_idx += 1
        prev = skip
    if c.use_aspp:
        rows.append(("ASPP2", (s, s, prev)))
    rows.append((f"Conv{conv_idx}_x", (s, s, c.out_channels)))
    return rows


def param_count(model):
    """(total, per-component breakdown); breakdown sums exactly to the total."""
    breakdown = {}
    for name, block in model.components():
        breakdown[name] = sum(p.data.size for _, p in block.params(name))
    return sum(breakdown.values()), breakdown


# --- checkpoints ------------------------------------------------------------------

_BOOL_FIELDS = {"use_residual", "use_se", "use_aspp"}
_INT_FIELDS = {"input_size", "base_channels", "depth", "se_reduction", "out_channels"}


def config_to_items(config):
    items = []
    for key in (
        "input_size",
        "base_channels",
        "depth",
        "use_residual",
        "use_se",
        "use_aspp",
        "se_reduction",
        "aspp_rates",
        "upsample_mode",
        "out_channels",
    ):
        val = getattr(config, key)
        if key == "aspp_rates":
            val = ",".join(str(r) for r in val)
        elif isinstance(val, bool):
            val = "true" if val else "false"
        items.append((key, str(val)))
    return items


def config_from_items(items):
    kw = {}
    for key, val in items:
        if key in _BOOL_FIELDS:
            kw[key] = val == "true"
        elif key in _INT_FIELDS:
            kw[key] = int(val)
        elif key == "aspp_rates":
            kw[key] = tuple(int(r) for r in val.split(","))
        elif key in ("upsample_mode",):
            kw[key] = val
    return ModelConfig(**kw)


def save_checkpoint(model, path, seed=0, epoch=0):
    """Manifest (key=value text) plus one binary payload file per tensor."""
    os.makedirs(path, exist_ok=True)
    lines = [f"config.{k}={v}" for k, v in config_to_items(model.config)]
    lines.append(f"seed={seed}")
    lines.append(f"epoch={epoch}")
    with open(os.path.join(path, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    for name, p in model.parameters():
        T.save_array(os.path.join(path, name + ".sft"), p.data)
    for name, st in model.bn_stats():
        T.save_array(os.path.join(path, name + ".mean.sft"), st.mean)
        T.save_array(os.path.join(path, name + ".var.sft"), st.var)


def read_manifest(path):
    manifest_path = os.path.join(path, "manifest.txt")
    if not os.path.exists(manifest_path):
        raise FormatError(f"no manifest.txt in checkpoint directory {path}")
    out = {}
    with open(manifest_path) as f:
        for line in f:
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, val = line.split("=", 1)
            out[key] = val
    return out


def load_checkpoint(path):
    """Rebuild the model and restore every parameter and running statistic."""
    manifest = read_manifest(path)
    items = [(k[len("config.") :], v) for k, v in manifest.items() if k.startswith("config.")]
    config = config_from_items(items)
    model = SegModel(config, seed=int(manifest.get("seed", "0")))
    for name, p in model.parameters():
        arr = T.load_array(os.path.join(path, name + ".sft"))
        if arr.shape != p.data.shape:
            raise FormatError(
                f"checkpoint tensor {name} has shape {arr.shape}, model expects {p.data.shape}"
            )
        p.data = arr
    for name, st in model.bn_stats():
        st.mean = T.load_array(os.path.join(path, name + ".mean.sft"))
        st.var = T.load_array(os.path.join(path, name + ".var.sft"))
    return model, manifest
