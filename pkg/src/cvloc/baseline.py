"""Regression baseline: both views collapse to single global descriptors,
which are concatenated and fed to an MLP that regresses the offset from the
patch center. A Gaussian posterior fitted on validation errors turns its
point estimate into a probability map for the prob-at-GT comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError
from .model import (
    ENCODER_STAGES,
    ModelConfig,
    encode_image,
    init_encoder_params,
    init_safa_params,
    safa_aggregate,
    safa_heads,
)

MLP_WIDTHS = (512, 128)
CENTER = 0.5  # normalized patch center, both axes


@dataclass
class CvrOutput:
    delta: tuple  # (du, dv), normalized units in [-0.5, 0.5]
    delta_t: Tensor  # same values on the tape, shape (2,)

    def predicted_norm(self):
        return (CENTER + self.delta[0], CENTER + self.delta[1])

    def predicted_pixel(self, L: int):
        return ((CENTER + self.delta[0]) * L, (CENTER + self.delta[1]) * L)


def init_cvr_params(config: ModelConfig) -> dict:
    """Encoders and attention heads mirror the dense model; the satellite
    branch aggregates the whole volume into one descriptor (N = 1)."""
    config.validate()
    rng = np.random.default_rng(config.seed + 1)
    params = {}
    params.update(init_encoder_params(rng, "g_enc", config.C))
    params.update(init_encoder_params(rng, "s_enc", config.C))
    down = 2**ENCODER_STAGES
    hw_g = (config.ground_h // down) * (config.ground_w // down)
    hw_s = config.L_feat * config.L_feat
    params.update(init_safa_params(rng, "g_safa", hw_g, config.K))
    params.update(init_safa_params(rng, "s_safa", hw_s, config.K))

    # Affine input conditioning for the MLP; identity until calibrated on
    # training descriptors (see calibrate_input_stats).
    params["mlp.in_center"] = Tensor(np.zeros(2 * config.d, np.float32), requires_grad=True)
    params["mlp.in_scale"] = Tensor(np.ones(2 * config.d, np.float32), requires_grad=True)
    widths = (2 * config.d,) + MLP_WIDTHS + (2,)
    for i in range(len(widths) - 1):
        fan_in = widths[i]
        params[f"mlp.l{i + 1}.w"] = ad.uniform_init(rng, (widths[i + 1], fan_in), fan_in)
        params[f"mlp.l{i + 1}.b"] = Tensor(
            np.zeros(widths[i + 1], np.float32), requires_grad=True
        )
    # Zero output layer: the first prediction is the patch center, and the
    # squashing stays in its linear regime while the head warms up.
    params[f"mlp.l{len(widths) - 1}.w"] = Tensor(
        np.zeros((2, widths[-2]), np.float32), requires_grad=True
    )
    return params


def descriptor_pair(G, S, params: dict, config: ModelConfig):
    """Global ground and satellite descriptors, concatenated."""
    vg, _ = encode_image(G, params, "g_enc")
    vs, _ = encode_image(S, params, "s_enc")
    f_g = safa_aggregate(vg, safa_heads(params, "g_safa", config.K))
    f_s = safa_aggregate(vs, safa_heads(params, "s_safa", config.K))
    return ad.concat_vec(f_g, f_s)


def calibrate_input_stats(params: dict, descriptors) -> None:
    """Set the MLP's affine input conditioning from raw training descriptors.

    Raw descriptors sit on a large common offset with small sample-to-sample
    variation; the regression head cannot get traction on that raw scale, so
    center/scale start from the training distribution and keep training from
    there.
    """
    d = np.asarray(descriptors, dtype=np.float32)
    params["mlp.in_center"] = Tensor(d.mean(axis=0), requires_grad=True)
    params["mlp.in_scale"] = Tensor(1.0 / (d.std(axis=0) + 1e-4), requires_grad=True)


def cvr_forward(G, S, params: dict, config: ModelConfig) -> CvrOutput:
    """Concatenated global descriptors through the MLP; the output is squashed
    to [-0.5, 0.5]^2 so the prediction can never leave the patch."""
    x = descriptor_pair(G, S, params, config)
    x = ad.mul(x - params["mlp.in_center"], params["mlp.in_scale"])
    n_layers = len(MLP_WIDTHS) + 1
    for i in range(1, n_layers + 1):
        x = ad.linear(x, params[f"mlp.l{i}.w"], params[f"mlp.l{i}.b"])
        if i < n_layers:
            x = ad.relu(x)
    delta_t = ad.mul(ad.tanh(x), 0.5)
    return CvrOutput(
        delta=(float(delta_t.data[0]), float(delta_t.data[1])), delta_t=delta_t
    )


def cvr_loss(pred: CvrOutput, gt_norm) -> Tensor:
    """Squared distance between predicted and true normalized locations."""
    gu, gv = float(gt_norm[0]), float(gt_norm[1])
    if not (0.0 <= gu <= 1.0 and 0.0 <= gv <= 1.0):
        raise DataError(f"normalized ground truth {gt_norm} outside [0, 1]^2")
    diff = pred.delta_t + CENTER - Tensor(np.array([gu, gv], np.float32))
    return ad.t_sum(ad.mul(diff, diff))


def estimate_sd(errors, n: int = None) -> float:
    """Root-mean-square of validation errors: sqrt(sum(e^2) / n)."""
    errors = list(errors)
    if not errors:
        raise DataError("estimate_sd needs at least one error")
    if n is None:
        n = len(errors)
    if n < 1:
        raise DataError(f"estimate_sd needs n >= 1, got {n}")
    return math.sqrt(sum(float(e) ** 2 for e in errors) / n)


def gaussian_heatmap(mean_pixel, sd_px: float, L: int) -> np.ndarray:
    """Isotropic Gaussian evaluated at the cell centers of an L x L grid and
    renormalized to sum 1 (float64)."""
    if sd_px <= 0:
        raise ConfigError(f"sd_px must be > 0, got {sd_px}")
    mu, mv = float(mean_pixel[0]), float(mean_pixel[1])
    centers = np.arange(L, dtype=np.float64) + 0.5
    d2 = (centers[:, None] - mu) ** 2 + (centers[None, :] - mv) ** 2
    h = np.exp(-d2 / (2.0 * sd_px * sd_px))
    return h / h.sum()
