"""Dense-uncertainty localizer.

Two small convolutional encoders (same architecture, separate weights) feed a
matching bottleneck: the ground branch is pooled by spatial-attention heads
into one descriptor, the satellite feature volume is split into an N x N grid
of descriptors aggregated by shared heads, and their cosine similarities form
the matching map. The map is fused back onto the satellite descriptors and a
skip-connected decoder upsamples the result to an L x L logit grid whose flat
softmax is the output probability map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

ENCODER_STAGES = 3  # stride-2 convs; total downsampling 8x


@dataclass
class ModelConfig:
    L: int = 64
    L_feat: int = 8
    N: int = 4
    C: int = 32
    K: int = 4
    ground_h: int = 16
    ground_w: int = 64
    decoder_stages: int = 4
    concat_ground: bool = False
    seed: int = 0

    @property
    def d(self) -> int:
        return self.K * self.C

    def validate(self):
        down = 2**ENCODER_STAGES
        if self.L // down != self.L_feat or self.L % down:
            raise ConfigError(
                f"L_feat must be L/{down}: L={self.L}, L_feat={self.L_feat}"
            )
        if self.L_feat % self.N:
            raise ConfigError(f"L_feat={self.L_feat} not divisible by N={self.N}")
        if 2**self.decoder_stages * self.N != self.L:
            raise ConfigError(
                f"decoder stages mismatch: 2^{self.decoder_stages} * {self.N} != {self.L}"
            )
        if self.ground_h % down or self.ground_w % down:
            raise ConfigError(
                f"ground view {self.ground_h}x{self.ground_w} must divide by {down}"
            )
        if self.C % 2 or self.C < 2:
            raise ConfigError(f"C must be even and >= 2, got {self.C}")
        return self


@dataclass
class Descriptors:
    f_g: Tensor  # (d,) ground descriptor
    g_s: Tensor  # (N, N, d) satellite descriptor grid


@dataclass
class MatchMap:
    m: Tensor  # (N, N) cosine similarities


@dataclass
class HeatMap:
    """L x L probability grid; cell (u, v) covers pixel area [u,u+1)x[v,v+1)
    with center (u+0.5, v+0.5)."""

    h: np.ndarray


@dataclass
class ForwardResult:
    heatmap: HeatMap
    logits: Tensor
    match: MatchMap
    desc: Descriptors


def _encoder_widths(C: int):
    return (C // 2, C, C)


def _decoder_plan(config: ModelConfig):
    """Per-stage (resolution, up-conv width, skip channels) for the decoder.

    Widths halve stage by stage (floored at 4), mirroring the encoder; skips
    attach wherever an encoder map of matching resolution exists, with the
    input image serving as the full-resolution skip.
    """
    w1, w2, w3 = _encoder_widths(config.C)
    skip_ch = {config.L: 3, config.L // 2: w1, config.L // 4: w2, config.L // 8: w3}
    plan = []
    for t in range(config.decoder_stages):
        res = config.N * 2 ** (t + 1)
        width = max(config.C // 2**t, 4)
        plan.append((res, width, skip_ch.get(res, 0)))
    return plan


def init_encoder_params(rng, prefix: str, C: int) -> dict:
    params = {}
    widths = _encoder_widths(C)
    c_in = 3
    for i, c_out in enumerate(widths, start=1):
        fan_in = c_in * 9
        params[f"{prefix}.conv{i}.w"] = ad.uniform_init(rng, (c_out, c_in, 3, 3), fan_in)
        params[f"{prefix}.conv{i}.b"] = Tensor(np.zeros(c_out, np.float32), requires_grad=True)
        c_in = c_out
    return params


def init_safa_params(rng, prefix: str, hw: int, K: int) -> dict:
    """Attention-head perceptrons (hw -> hw/2 -> hw); weights follow the
    global init rule, the constant output bias keeps start masks anchored."""
    params = {}
    hw2 = max(1, hw // 2)
    for k in range(K):
        params[f"{prefix}.h{k}.w1"] = ad.uniform_init(rng, (hw2, hw), hw)
        params[f"{prefix}.h{k}.b1"] = Tensor(np.zeros(hw2, np.float32), requires_grad=True)
        params[f"{prefix}.h{k}.w2"] = ad.uniform_init(rng, (hw, hw2), hw2)
        params[f"{prefix}.h{k}.b2"] = Tensor(
            np.full(hw, 0.1, np.float32), requires_grad=True
        )
    return params


def safa_heads(params: dict, prefix: str, K: int):
    return [
        (
            params[f"{prefix}.h{k}.w1"],
            params[f"{prefix}.h{k}.b1"],
            params[f"{prefix}.h{k}.w2"],
            params[f"{prefix}.h{k}.b2"],
        )
        for k in range(K)
    ]


def init_localizer_params(config: ModelConfig) -> dict:
    """All trainable tensors, keyed by dotted names. The two encoder branches
    share their architecture but never their weights."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    params = {}
    params.update(init_encoder_params(rng, "g_enc", config.C))
    params.update(init_encoder_params(rng, "s_enc", config.C))
    down = 2**ENCODER_STAGES
    hw_g = (config.ground_h // down) * (config.ground_w // down)
    hw_s = (config.L_feat // config.N) ** 2
    params.update(init_safa_params(rng, "g_safa", hw_g, config.K))
    params.update(init_safa_params(rng, "s_safa", hw_s, config.K))

    c_in = config.d + 1 + (config.d if config.concat_ground else 0)
    for t, (_, width, skip) in enumerate(_decoder_plan(config)):
        params[f"dec.up{t}.w"] = ad.uniform_init(rng, (c_in, width, 4, 4), c_in * 4)
        params[f"dec.up{t}.b"] = Tensor(np.zeros(width, np.float32), requires_grad=True)
        params[f"dec.conv{t}.w"] = ad.uniform_init(
            rng, (width, width + skip, 3, 3), (width + skip) * 9
        )
        params[f"dec.conv{t}.b"] = Tensor(np.zeros(width, np.float32), requires_grad=True)
        c_in = width
    params["dec.out.w"] = ad.uniform_init(rng, (1, c_in, 3, 3), c_in * 9)
    params["dec.out.b"] = Tensor(np.zeros(1, np.float32), requires_grad=True)
    return params


def encode_image(img, params: dict, prefix: str):
    """Run one encoder branch. Returns the final volume and the list of
    (resolution, feature map) skips, the raw input included."""
    x = img if isinstance(img, Tensor) else Tensor(img)
    if x.data.ndim != 3 or x.data.shape[0] != 3:
        raise DimensionError(f"encoder input must be (3, H, W), got {x.shape}")
    skips = [(x.data.shape[1], x)]
    for i in range(1, ENCODER_STAGES + 1):
        x = ad.relu(
            ad.bias_channels(
                ad.conv2d(x, params[f"{prefix}.conv{i}.w"], stride=2, pad=1),
                params[f"{prefix}.conv{i}.b"],
            )
        )
        skips.append((x.data.shape[1], x))
    return x, skips


def encode_satellite(S, params: dict, config: ModelConfig):
    volume, skips = encode_image(S, params, "s_enc")
    if volume.data.shape[1] != config.L_feat:
        raise ConfigError(
            f"satellite features side {volume.data.shape[1]} != L_feat {config.L_feat}"
        )
    return volume, skips


def encode_ground(G, params: dict):
    volume, _ = encode_image(G, params, "g_enc")
    return volume


def safa_aggregate(volume: Tensor, heads) -> Tensor:
    """Pool a (C, h, w) volume into a K*C descriptor.

    Each head turns the channel-max map into a spatial mask through its
    two-layer perceptron, then takes the mask-weighted sum of features over
    positions; head outputs are concatenated.
    """
    C, h, w = volume.data.shape
    hw = h * w
    feats = ad.reshape(volume, (C, hw))
    pooled = ad.reshape(ad.channel_max(volume), (hw,))
    outs = []
    for w1, b1, w2, b2 in heads:
        hidden = ad.matmul(w1, pooled) + b1
        mask = ad.matmul(w2, hidden) + b2
        outs.append(ad.matmul(feats, mask))
    return ad.reshape(ad.stack(outs), (len(heads) * C,))


def split_descriptors(volume: Tensor, N: int, heads) -> Tensor:
    """Aggregate each of the N x N spatial sub-volumes with the same heads,
    yielding the (N, N, d) satellite descriptor grid."""
    _, hf, wf = volume.data.shape
    if hf != wf or hf % N:
        raise ConfigError(f"feature volume {hf}x{wf} not splittable into {N}x{N}")
    s = hf // N
    cells = []
    for i in range(N):
        for j in range(N):
            sub = ad.crop_spatial(volume, i * s, (i + 1) * s, j * s, (j + 1) * s)
            cells.append(safa_aggregate(sub, heads))
    d = cells[0].data.shape[0]
    return ad.reshape(ad.stack(cells), (N, N, d))


def matching_map(desc: Descriptors) -> MatchMap:
    """Cosine similarity between the ground descriptor and every grid cell."""
    N = desc.g_s.data.shape[0]
    sims = []
    for i in range(N):
        row = ad.slice_index(desc.g_s, i)
        for j in range(N):
            sims.append(ad.cosine_sim(desc.f_g, ad.slice_index(row, j)))
    return MatchMap(m=ad.reshape(ad.stack(sims), (N, N)))


def fuse_bottleneck(
    g_s: Tensor, M: MatchMap, f_g: Tensor, concat_ground: bool = False
) -> Tensor:
    """Channel-stack the descriptor grid with the matching score (and the
    ground descriptor, when requested) into the decoder input volume."""
    N = g_s.data.shape[0]
    d = g_s.data.shape[2]
    grid = ad.transpose_axes(g_s, (2, 0, 1))  # (d, N, N)
    fused = ad.concat_channels(grid, ad.reshape(M.m, (1, N, N)))
    if concat_ground:
        fused = ad.concat_channels(fused, ad.broadcast_spatial(f_g, N, N))
        assert fused.data.shape[0] == 2 * d + 1
    return fused


def decode_heatmap(fused: Tensor, skips, params: dict, config: ModelConfig) -> Tensor:
    """Progressively upsample the fused bottleneck to L x L logits, merging
    the matching-resolution satellite skip at every stage."""
    if fused.data.shape[1] != config.N:
        raise ConfigError(f"fused volume side {fused.data.shape[1]} != N {config.N}")
    skip_map = dict(skips)
    x = fused
    for t, (res, _, skip_ch) in enumerate(_decoder_plan(config)):
        x = ad.bias_channels(
            ad.upsample2(x, params[f"dec.up{t}.w"]), params[f"dec.up{t}.b"]
        )
        if x.data.shape[1] != res:
            raise ConfigError(
                f"decoder stage {t} produced side {x.data.shape[1]}, expected {res}"
            )
        if skip_ch:
            x = ad.concat_channels(x, skip_map[res])
        x = ad.relu(
            ad.bias_channels(
                ad.conv2d(x, params[f"dec.conv{t}.w"], stride=1, pad=1),
                params[f"dec.conv{t}.b"],
            )
        )
    logits = ad.bias_channels(
        ad.conv2d(x, params["dec.out.w"], stride=1, pad=1), params["dec.out.b"]
    )
    return ad.reshape(logits, (config.L, config.L))


def forward(G, S, params: dict, config: ModelConfig) -> ForwardResult:
    """Full pipeline from an image pair to the output probability map."""
    sat_volume, skips = encode_satellite(S, params, config)
    g_volume = encode_ground(G, params)
    f_g = safa_aggregate(g_volume, safa_heads(params, "g_safa", config.K))
    g_s = split_descriptors(sat_volume, config.N, safa_heads(params, "s_safa", config.K))
    desc = Descriptors(f_g=f_g, g_s=g_s)
    match = matching_map(desc)
    fused = fuse_bottleneck(g_s, match, f_g, config.concat_ground)
    logits = decode_heatmap(fused, skips, params, config)
    heat = ad.softmax_flat(logits)
    return ForwardResult(
        heatmap=HeatMap(h=heat.data), logits=logits, match=match, desc=desc
    )


def predict_location(heatmap) -> tuple:
    """Center coordinates of the most probable cell; ties resolve to the
    smallest (u, v) in row-major order."""
    h = heatmap.h if isinstance(heatmap, HeatMap) else np.asarray(heatmap)
    u, v = np.unravel_index(int(h.argmax()), h.shape)
    return (float(u) + 0.5, float(v) + 0.5)
