"""Noise reduction module: learn noise features per encoder stage and
subtract their estimate from the bottleneck.

Every encoder stage output F_i is squeezed through a dedicated
downsampling block (1x1x1 conv -> ReLU -> adaptive average pool) so all
e_i share the bottleneck shape.  A learnable scalar per stage weights
the sum e_hat = sum_i lambda_i e_i, a second mamba block turns e_hat
into the noise estimate m2, and the denoised bottleneck is m1 - m2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nnops import ConvParams, adaptive_avg_pool3d, conv3d, init_conv, relu
from .ssm import MambaBlockParams, init_mamba_block, mamba_block
from .tensor import ShapeError, Tensor


@dataclass
class DownsampleBlockParams:
    """1x1x1 conv C_i -> C' followed by ReLU and adaptive pooling.

    The pooling target is the bottleneck spatial shape, taken from m1
    at forward time so one parameter set serves any input size.
    """
    conv: ConvParams

    def named(self, prefix):
        yield f"{prefix}.conv.weight", self.conv.weight
        if self.conv.bias is not None:
            yield f"{prefix}.conv.bias", self.conv.bias


def init_downsample_block(rng, c_in, c_out) -> DownsampleBlockParams:
    return DownsampleBlockParams(conv=init_conv(rng, c_in, c_out, (1, 1, 1)))


def downsample_stage(f_i: Tensor, p: DownsampleBlockParams, target) -> Tensor:
    """e_i = AdapPool(ReLU(Conv_1x1x1(F_i))) resized to ``target``."""
    return adaptive_avg_pool3d(relu(conv3d(f_i, p.conv)), target)


@dataclass
class LambdaState:
    """Per-stage aggregation weights plus their optimizer-step history."""
    values: Tensor                       # shape (l,), unconstrained
    history: list = field(default_factory=list)

    @property
    def n_stages(self):
        return self.values.shape[0]

    def log_step(self):
        self.history.append([float(v) for v in self.values.data])

    def trace(self) -> np.ndarray:
        return np.asarray(self.history, dtype=np.float64)


def init_lambda_state(n_stages, lambda_init=0.5) -> LambdaState:
    return LambdaState(values=Tensor(np.full(n_stages, lambda_init), requires_grad=True))


def aggregate(e_list, lam: LambdaState) -> Tensor:
    """Weighted sum e_hat = sum_i lambda_i e_i; gradients reach every term."""
    if len(e_list) != lam.n_stages:
        raise ShapeError(f"{len(e_list)} stage features for {lam.n_stages} lambdas")
    shape = e_list[0].shape
    for i, e in enumerate(e_list):
        if e.shape != shape:
            raise ShapeError(f"stage feature {i} has shape {e.shape}, expected {shape}")
    out = None
    for i, e in enumerate(e_list):
        lam_i = lam.values.narrow(0, i, 1).reshape(())
        term = e * lam_i
        out = term if out is None else out + term
    return out


@dataclass
class NRMParams:
    downsample: list[DownsampleBlockParams]
    lam: LambdaState
    m2: MambaBlockParams

    def named(self, prefix="nrm"):
        for i, ds in enumerate(self.downsample):
            yield from ds.named(f"{prefix}.ds{i + 1}")
        yield f"{prefix}.lambdas", self.lam.values
        yield from self.m2.named(f"{prefix}.m2")


def init_nrm(rng, stage_channels, bottleneck_channels, lambda_init=0.5,
             n_state=8, expand=2, conv_width=3) -> NRMParams:
    downsample = [init_downsample_block(rng.derive(f"nrm.ds{i}"), c, bottleneck_channels)
                  for i, c in enumerate(stage_channels)]
    lam = init_lambda_state(len(stage_channels), lambda_init)
    m2 = init_mamba_block(rng.derive("nrm.m2"), bottleneck_channels,
                          n_state=n_state, expand=expand, conv_width=conv_width)
    return NRMParams(downsample=downsample, lam=lam, m2=m2)


def nrm_forward(p: NRMParams, stage_features, m1: Tensor, capture=None) -> Tensor:
    """Denoise the bottleneck: m_hat = m1 - M2(sum_i lambda_i e_i).

    ``stage_features`` are the encoder outputs F_1..F_l; the pooling
    target is m1's spatial shape.  Intermediate e_i / e_hat / m2 land in
    ``capture`` when a dict is supplied.
    """
    target = m1.shape[2:]
    e_list = [downsample_stage(f, ds, target) for f, ds in zip(stage_features, p.downsample)]
    e_hat = aggregate(e_list, p.lam)
    m2 = mamba_block(e_hat, p.m2)
    m_hat = m1 - m2
    if capture is not None:
        capture["e_list"] = e_list
        capture["e_hat"] = e_hat
        capture["m2"] = m2
        capture["m_hat"] = m_hat
    return m_hat


def nrm_param_count(p: NRMParams | None) -> int:
    if p is None:
        return 0
    return sum(t.size for _, t in p.named())
