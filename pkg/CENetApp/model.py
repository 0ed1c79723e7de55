"""
CE-Net and its ablation variants.

  encoder  : ResNet-34 style stem + four residual stages (3, 4, 6, 3 basic blocks)
  context  : DAC (dense atrous convolution) and RMP (residual multi-kernel pooling)
  decoder  : 1x1 conv -> 3x3 transposed conv (x2) -> 1x1 conv blocks with additive skips
  head     : 4x4 transposed conv (x2) -> 3x3 conv -> 3x3 conv -> sigmoid / softmax

`variant="backbone"` drops the context extractor, `variant="unet"` builds
the two-conv-per-level U-Net baseline with concatenated skips.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from .autograd import Tape, Variable, add, concat_channels, relu, sigmoid
from .config import ModelConfig
from .exceptions import ConfigurationError, ContractError
from .nn_ops import (
    ConvSpec,
    PoolSpec,
    batch_norm2d,
    bilinear_upsample,
    conv2d,
    max_pool2d,
    softmax_channels,
    transposed_conv2d,
)
from .params import FAN_IN_UNIFORM, Binder, ParamStore
from .state import LayerSummary
from .tensor import load_tensors

logger = logging.getLogger(__name__)

STAGE_BLOCKS = (3, 4, 6, 3)
STAGE_CHANNELS = (64, 128, 256, 512)
STEM_CHANNELS = 64
HEAD_CHANNELS = 32
UNET_CHANNELS = (64, 128, 256, 512, 1024)
# four 2x2 pools between the five U-Net levels
UNET_DEEPEST_SCALE = 2 ** (len(UNET_CHANNELS) - 1)

# (kernel, rate) per conv of each DAC branch; every branch ends in a ReLU
DAC_BRANCHES: Tuple[Tuple[Tuple[int, int], ...], ...] = (
    ((3, 1),),
    ((3, 3), (1, 1)),
    ((3, 1), (3, 3), (1, 1)),
    ((3, 1), (3, 3), (3, 5), (1, 1)),
)
RMP_KERNELS = (2, 3, 5, 6)

DIVISOR = 32


# ─── helpers ────────────────────────────────────────────────────────────────

def _conv(bind: Binder, prefix: str, x, stride: int = 1, padding: int = 0, dilation: int = 1) -> Variable:
    w = bind(f"{prefix}.weight")
    b = bind(f"{prefix}.bias") if bind.has(f"{prefix}.bias") else None
    cout, cin, kh, kw = w.shape
    spec = ConvSpec(cin, cout, (kh, kw), (stride, stride), (padding, padding), dilation)
    return _trace(bind, prefix, conv2d(x, w, b, spec))


def _deconv(bind: Binder, prefix: str, x, stride: int, padding: int, output_padding: int = 0) -> Variable:
    w = bind(f"{prefix}.weight")
    b = bind(f"{prefix}.bias") if bind.has(f"{prefix}.bias") else None
    return _trace(bind, prefix, transposed_conv2d(x, w, b, stride, padding, output_padding))


def _bn(bind: Binder, prefix: str, x) -> Variable:
    out = batch_norm2d(x, bind(f"{prefix}.gamma"), bind(f"{prefix}.beta"), bind.running(prefix), mode=bind.mode)
    return _trace(bind, prefix, out)


def _trace(bind: Binder, name: str, out: Variable) -> Variable:
    if getattr(bind, "trace", None) is not None:
        bind.trace.append((name, list(out.shape)))
    return out


# ─── encoder ────────────────────────────────────────────────────────────────

def build_encoder(cfg: ModelConfig, store: ParamStore) -> List[Dict[str, Any]]:
    """
    Register the stem and the four residual stages. Returns one entry per
    stage: name, block count, channels, stride of the first block.
    """
    stem = cfg.channels(STEM_CHANNELS)
    store.add_conv("encoder.stem.conv", stem, cfg.input_channels, 7, 7)
    store.add_bn("encoder.stem.bn", stem)

    stages = []
    cin = stem
    for i, (blocks, base) in enumerate(zip(STAGE_BLOCKS, STAGE_CHANNELS), start=1):
        cout = cfg.channels(base)
        stride = 1 if i == 1 else 2
        for j in range(blocks):
            prefix = f"encoder.stage{i}.block{j}"
            block_in = cin if j == 0 else cout
            store.add_conv(f"{prefix}.conv1", cout, block_in, 3, 3)
            store.add_bn(f"{prefix}.bn1", cout)
            store.add_conv(f"{prefix}.conv2", cout, cout, 3, 3)
            store.add_bn(f"{prefix}.bn2", cout)
            if j == 0 and (stride != 1 or block_in != cout):
                store.add_conv(f"{prefix}.downsample.conv", cout, block_in, 1, 1)
                store.add_bn(f"{prefix}.downsample.bn", cout)
        stages.append({"name": f"encoder.stage{i}", "blocks": blocks, "channels": cout, "stride": stride})
        cin = cout
    return stages


def basic_block_forward(x, bind: Binder, prefix: str, stride: int) -> Variable:
    out = relu(_bn(bind, f"{prefix}.bn1", _conv(bind, f"{prefix}.conv1", x, stride=stride, padding=1)))
    out = _bn(bind, f"{prefix}.bn2", _conv(bind, f"{prefix}.conv2", out, padding=1))
    if bind.has(f"{prefix}.downsample.conv.weight"):
        shortcut = _bn(bind, f"{prefix}.downsample.bn", _conv(bind, f"{prefix}.downsample.conv", x, stride=stride))
    else:
        shortcut = x
    return _trace(bind, prefix, relu(add(out, shortcut)))


def stage_forward(x, bind: Binder, stage: int) -> Variable:
    j = 0
    while bind.has(f"encoder.stage{stage}.block{j}.conv1.weight"):
        x = basic_block_forward(x, bind, f"encoder.stage{stage}.block{j}", 1 if (stage == 1 or j > 0) else 2)
        j += 1
    return x


def encoder_forward(x, bind: Binder) -> List[Variable]:
    """Stem then the four stages; returns the four stage outputs (skip sources)."""
    x = relu(_bn(bind, "encoder.stem.bn", _conv(bind, "encoder.stem.conv", x, stride=2, padding=3)))
    x = _trace(bind, "encoder.stem.pool", max_pool2d(x, PoolSpec.square(3, 2, 1)))
    features = []
    for stage in range(1, len(STAGE_BLOCKS) + 1):
        x = stage_forward(x, bind, stage)
        features.append(x)
    return features


# ─── context extractor ──────────────────────────────────────────────────────

def dac_branch_specs(channels: int, atrous: bool = True) -> List[List[ConvSpec]]:
    """ConvSpec chains of the four DAC branches (padding = rate keeps H x W)."""
    chains = []
    for branch in DAC_BRANCHES:
        chain = []
        for k, r in branch:
            r = r if atrous else 1
            chain.append(ConvSpec.square(channels, channels, k, 1, r if k == 3 else 0, r))
        chains.append(chain)
    return chains


def build_dac(store: ParamStore, channels: int, prefix: str = "context.dac") -> None:
    for b, branch in enumerate(DAC_BRANCHES, start=1):
        for j, (k, _) in enumerate(branch, start=1):
            store.add_conv(f"{prefix}.branch{b}.conv{j}", channels, channels, k, k, bias=True, init=FAN_IN_UNIFORM)


def dac_forward(x, params: Binder, prefix: str = "context.dac", atrous: bool = True) -> Variable:
    """
    Four cascaded atrous branches (receptive fields 3, 7, 9, 19) added to the input.
    """
    out = x
    for b, chain in enumerate(dac_branch_specs(x.shape[1], atrous), start=1):
        y = x
        for j, spec in enumerate(chain, start=1):
            y = _conv(params, f"{prefix}.branch{b}.conv{j}", y, padding=spec.padding[0], dilation=spec.dilation)
        out = add(out, relu(y))
    return _trace(params, prefix, out)


def build_rmp(store: ParamStore, channels: int, prefix: str = "context.rmp") -> None:
    for k in RMP_KERNELS:
        store.add_conv(f"{prefix}.pool{k}.conv", 1, channels, 1, 1, bias=True, init=FAN_IN_UNIFORM)


def rmp_pool_spec(k: int, h: int, w: int, pad_small: bool = False) -> PoolSpec:
    """
    Non-overlapping k x k pool. With `pad_small`, an axis shorter than k is
    padded with -inf up to k so the pool becomes a global max on that axis.
    """
    ph = -(-(k - h) // 2) if (pad_small and h < k) else 0
    pw = -(-(k - w) // 2) if (pad_small and w < k) else 0
    return PoolSpec((k, k), (k, k), (ph, pw))


def rmp_forward(x, params: Binder, prefix: str = "context.rmp", pad_small: bool = False) -> Variable:
    """
    Max pools of 2, 3, 5 and 6, each reduced to one channel by a 1x1 conv,
    upsampled back to H x W and concatenated after the input: C -> C + 4.
    """
    _, _, h, w = x.shape
    largest = max(RMP_KERNELS)
    if not pad_small and (h < largest or w < largest):
        raise ConfigurationError(f"RMP needs H, W >= {largest} for its {largest}x{largest} pool, got {h}x{w}")
    maps = [x]
    for k in RMP_KERNELS:
        pooled = max_pool2d(x, rmp_pool_spec(k, h, w, pad_small))
        reduced = _conv(params, f"{prefix}.pool{k}.conv", pooled)
        maps.append(bilinear_upsample(reduced, (h, w)))
    return _trace(params, prefix, concat_channels(maps))


# ─── decoder ────────────────────────────────────────────────────────────────

def build_decoder_block(store: ParamStore, prefix: str, cin: int, cout: int) -> None:
    if cin < 4:
        raise ConfigurationError(f"decoder block {prefix} needs at least 4 input channels, got {cin}")
    mid = cin // 4
    store.add_conv(f"{prefix}.conv1", mid, cin, 1, 1)
    store.add_bn(f"{prefix}.bn1", mid)
    store.add_deconv(f"{prefix}.deconv2", mid, mid, 3, 3)
    store.add_bn(f"{prefix}.bn2", mid)
    store.add_conv(f"{prefix}.conv3", cout, mid, 1, 1)
    store.add_bn(f"{prefix}.bn3", cout)


def decoder_block_forward(x, params: Binder, prefix: str) -> Variable:
    """1x1 conv (C -> C/4), 3x3 transposed conv stride 2, 1x1 conv (C/4 -> Cout); doubles H and W."""
    if x.shape[1] < 4:
        raise ConfigurationError(f"decoder block {prefix} needs at least 4 input channels, got {x.shape[1]}")
    y = relu(_bn(params, f"{prefix}.bn1", _conv(params, f"{prefix}.conv1", x)))
    y = relu(_bn(params, f"{prefix}.bn2", _deconv(params, f"{prefix}.deconv2", y, 2, 1, 1)))
    y = relu(_bn(params, f"{prefix}.bn3", _conv(params, f"{prefix}.conv3", y)))
    return _trace(params, prefix, y)


# ─── assembly ───────────────────────────────────────────────────────────────

def build_params(cfg: ModelConfig, seed: int = 0, dtype=None) -> ParamStore:
    """
    Create and initialize every parameter of the configured model.
    """
    store = ParamStore(seed=seed, dtype=dtype)
    if cfg.variant == "unet":
        _build_unet(cfg, store)
        return store

    stages = build_encoder(cfg, store)
    ctx_channels = stages[-1]["channels"]
    if cfg.enable_dac:
        build_dac(store, ctx_channels)
    if cfg.enable_rmp:
        build_rmp(store, ctx_channels)
        ctx_channels += len(RMP_KERNELS)

    c1, c2, c3, c4 = (s["channels"] for s in stages)
    build_decoder_block(store, "decoder.dec4", ctx_channels, c3)
    build_decoder_block(store, "decoder.dec3", c3, c2)
    build_decoder_block(store, "decoder.dec2", c2, c1)
    build_decoder_block(store, "decoder.dec1", c1, c1)

    head = cfg.channels(HEAD_CHANNELS)
    store.add_deconv("head.deconv", c1, head, 4, 4, bias=True)
    store.add_conv("head.conv2", head, head, 3, 3, bias=True)
    store.add_conv("head.conv3", cfg.num_classes, head, 3, 3, bias=True)
    logger.debug(f"🧱 Built {cfg.label}: {len(store)} tensors, {store.count()} trainable values")
    return store


def _check_input(cfg: ModelConfig, image) -> None:
    if len(image.shape) != 4:
        raise ContractError(f"model input must be [N, C, H, W], got {list(image.shape)}")
    n, c, h, w = image.shape
    if c != cfg.input_channels:
        raise ContractError(f"model expects {cfg.input_channels} input channels, got {c}")
    if h % DIVISOR or w % DIVISOR:
        raise ContractError(f"input size {h}x{w} is not divisible by {DIVISOR}; pad it with pad_to_32 first")


def forward_logits(cfg: ModelConfig, bind: Binder, image) -> Variable:
    _check_input(cfg, image)
    if cfg.variant == "unet":
        return _unet_forward(image, bind)

    e1, e2, e3, e4 = encoder_forward(image, bind)
    ctx = e4
    if cfg.enable_dac:
        ctx = dac_forward(ctx, bind, atrous=cfg.dac_atrous)
    if cfg.enable_rmp:
        ctx = rmp_forward(ctx, bind, pad_small=True)

    d4 = add(decoder_block_forward(ctx, bind, "decoder.dec4"), e3)
    d3 = add(decoder_block_forward(d4, bind, "decoder.dec3"), e2)
    d2 = add(decoder_block_forward(d3, bind, "decoder.dec2"), e1)
    d1 = decoder_block_forward(d2, bind, "decoder.dec1")

    y = relu(_deconv(bind, "head.deconv", d1, 2, 1))
    y = relu(_conv(bind, "head.conv2", y, padding=1))
    return _conv(bind, "head.conv3", y, padding=1)


def forward(cfg: ModelConfig, params: ParamStore, image, mode: str = "eval", tape: Optional[Tape] = None,
            bind: Optional[Binder] = None) -> Variable:
    """
    Probability map [N, K, H, W]: sigmoid for K == 1, channel softmax otherwise.

    With a tape, parameters are bound as differentiable leaves (use `bind`
    afterwards to collect their gradients); without one the pass is
    evaluated eagerly and nothing is recorded.
    """
    bind = bind or Binder(params, tape, mode)
    if not isinstance(image, Variable):
        image = Variable(np.asarray(image, dtype=params.dtype))
    logits = forward_logits(cfg, bind, image)
    return sigmoid(logits) if cfg.num_classes == 1 else softmax_channels(logits)


def predict(cfg: ModelConfig, params: ParamStore, image: np.ndarray) -> np.ndarray:
    """
    Eval-mode probabilities for an [N, C, H, W] or [C, H, W] array of any size;
    the input is padded to a multiple of 32 and the output cropped back.
    """
    single = image.ndim == 3
    batch = image[None] if single else image
    h, w = batch.shape[-2:]
    prob = forward(cfg, params, pad_to_32(batch), mode="eval").value
    prob = crop_to(prob, h, w)
    return prob[0] if single else prob


# ─── U-Net baseline ─────────────────────────────────────────────────────────

def _build_unet(cfg: ModelConfig, store: ParamStore) -> None:
    chans = [cfg.channels(c) for c in UNET_CHANNELS]
    cin = cfg.input_channels
    for i, c in enumerate(chans):
        _build_double_conv(store, f"unet.down{i}", cin, c)
        cin = c
    for i in reversed(range(len(chans) - 1)):
        store.add_deconv(f"unet.up{i}.deconv", chans[i + 1], chans[i], 2, 2, bias=True)
        _build_double_conv(store, f"unet.up{i}", 2 * chans[i], chans[i])
    store.add_conv("unet.head", cfg.num_classes, chans[0], 1, 1, bias=True)


def _build_double_conv(store: ParamStore, prefix: str, cin: int, cout: int) -> None:
    store.add_conv(f"{prefix}.conv1", cout, cin, 3, 3)
    store.add_bn(f"{prefix}.bn1", cout)
    store.add_conv(f"{prefix}.conv2", cout, cout, 3, 3)
    store.add_bn(f"{prefix}.bn2", cout)


def _double_conv(x, bind: Binder, prefix: str) -> Variable:
    x = relu(_bn(bind, f"{prefix}.bn1", _conv(bind, f"{prefix}.conv1", x, padding=1)))
    return relu(_bn(bind, f"{prefix}.bn2", _conv(bind, f"{prefix}.conv2", x, padding=1)))


def _unet_forward(x, bind: Binder) -> Variable:
    levels = len(UNET_CHANNELS)
    skips = []
    for i in range(levels):
        if i:
            x = max_pool2d(x, PoolSpec.square(2))
        x = _double_conv(x, bind, f"unet.down{i}")
        skips.append(x)
    for i in reversed(range(levels - 1)):
        up = _deconv(bind, f"unet.up{i}.deconv", x, 2, 0)
        x = _double_conv(concat_channels([skips[i], up]), bind, f"unet.up{i}")
    return _conv(bind, "unet.head", x)


# ─── weights ────────────────────────────────────────────────────────────────

def save_weights(store: ParamStore, path: Union[str, Path]) -> None:
    store.save(path)
    logger.info(f"💾 Weights saved to {path}")


def load_weights(path: Union[str, Path], cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """
    Load a CETNSR1 weight file for `cfg`. Every expected tensor must be present
    with the expected shape; the first offending tensor is reported.
    """
    tensors = load_tensors(path)
    store = build_params(cfg, seed=seed)
    store.fill_from(tensors)
    extra = [n for n in tensors if n not in store]
    if extra:
        logger.warning(f"⚠️ {len(extra)} tensors in {path} are not used by {cfg.label}: {extra[:5]}")
    return store


def load_pretrained_encoder(path: Union[str, Path], store: ParamStore) -> List[str]:
    """
    Replace the encoder.* tensors of `store` with those in a weight file
    (e.g. converted ImageNet ResNet-34 weights). Returns the names replaced.
    """
    filled = store.fill_from(load_tensors(path), prefix="encoder.")
    logger.info(f"📥 Imported {len(filled)} encoder tensors from {path}")
    return filled


# ─── geometry helpers ───────────────────────────────────────────────────────

def pad_to_32(image: np.ndarray, value: float = 0.0) -> np.ndarray:
    """Pad the last two axes at the bottom/right up to multiples of 32."""
    h, w = image.shape[-2:]
    ph, pw = (-h) % DIVISOR, (-w) % DIVISOR
    if not ph and not pw:
        return image
    widths = [(0, 0)] * (image.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(image, widths, constant_values=value)


def crop_to(array: np.ndarray, h: int, w: int) -> np.ndarray:
    return array[..., :h, :w]


# ─── accounting ─────────────────────────────────────────────────────────────

def context_parameter_budget(store: ParamStore) -> int:
    """
    Trainable values the context extractor adds to the backbone: the DAC and
    RMP layers plus the growth of the first decoder block, which reads the
    four extra RMP channels.
    """
    budget = store.count(prefix="context.")
    if "decoder.dec4.conv1.weight" not in store:
        return budget
    plain = ParamStore(dtype=store.dtype)
    build_decoder_block(plain, "decoder.dec4", store["encoder.stage4.block0.conv1.weight"].shape[0],
                        store["decoder.dec4.conv3.weight"].shape[0])
    return budget + store.count(prefix="decoder.dec4.") - plain.count()


def model_summary(cfg: ModelConfig, input_size: Tuple[int, int] = (64, 64),
                  store: Optional[ParamStore] = None) -> List[LayerSummary]:
    """
    One row per layer (conv, transposed conv or batch norm) with its output
    shape for a [1, C, H, W] input and its trainable parameter count, then a
    "total" row.
    """
    store = store or build_params(cfg)
    bind = Binder(store.copy(), None, "eval")
    bind.trace = []
    forward(cfg, bind.store, np.zeros((1, cfg.input_channels) + tuple(input_size), dtype=store.dtype), bind=bind)
    shapes = dict(bind.trace)

    rows: List[LayerSummary] = []
    for layer in dict.fromkeys(n.rsplit(".", 1)[0] for n in store):
        rows.append(LayerSummary(
            name=layer,
            output_shape=shapes.get(layer, []),
            params=store.count(prefix=f"{layer}."),
        ))
    rows.append(LayerSummary(name="total", output_shape=[], params=store.count()))
    return rows


# ─── receptive fields ───────────────────────────────────────────────────────

def encoder_rf_stages() -> List[Tuple[str, List[Any]]]:
    """
    Cumulative layer chains along the encoder's main path (the shortcut never
    lengthens it): stem, then each residual stage.
    """
    chain: List[Any] = [ConvSpec.square(1, 1, 7, 2, 3), PoolSpec.square(3, 2, 1)]
    stages = [("stem", list(chain))]
    for i, blocks in enumerate(STAGE_BLOCKS, start=1):
        for j in range(blocks):
            stride = 2 if (i > 1 and j == 0) else 1
            chain += [ConvSpec.square(1, 1, 3, stride, 1), ConvSpec.square(1, 1, 3, 1, 1)]
        stages.append((f"stage{i}", list(chain)))
    return stages
