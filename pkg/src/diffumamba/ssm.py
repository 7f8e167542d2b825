"""Selective state-space machinery.

The continuous dynamics h'(t) = A h(t) + B x(t), y(t) = C h(t) are
discretized with a zero-order hold at timescale delta:

    Abar = exp(delta * A)
    Bbar = (delta * A)^-1 (exp(delta * A) - I) * delta * B

A is diagonal throughout, so both expressions are elementwise.  Bbar is
computed via phi(u) = (e^u - 1)/u with a second-order series fallback
phi(u) ~= 1 + u/2 for |u| < 1e-4, which also covers the a = 0 limit
(Abar = 1, Bbar = delta * b) exactly.

Two execution routes exist for the token-independent (LTI) case: the
sequential recurrence ``ssm_scan`` and the global-convolution kernel
``ssm_kernel``; they must agree and are cross-checked in the tests.
The mamba block uses the input-dependent (selective) recurrence on the
autodiff tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nnops import init_linear, silu
from .tensor import Tensor, ShapeError, exp, softplus, where

PHI_SERIES_CUTOFF = 1e-4


def _phi_np(u):
    small = np.abs(u) < PHI_SERIES_CUTOFF
    safe = np.where(small, 1.0, u)
    return np.where(small, 1.0 + u / 2.0, np.expm1(u) / safe)


def zoh_discretize(a, b, delta):
    """Zero-order-hold discretization of a diagonal system.

    Broadcasts over any common shape of ``a``, ``b``, ``delta``.
    Raises on nonpositive delta.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta <= 0):
        raise ValueError("zoh_discretize: timescale delta must be positive")
    u = delta * a
    abar = np.exp(u)
    bbar = delta * b * _phi_np(u)
    return abar, bbar


@dataclass
class SSMParams:
    """Diagonal SSM parameters, token-independent or selective.

    a: (C, N) realized diagonal state matrix.  Entries must be <= 0;
       the learned parameterization -exp(a_log) is strictly negative,
       a = 0 is accepted as the analytic limit served by the series
       fallback.
    b, c: (N,) shared across tokens (LTI) or (L, N) per token.
    delta: positive scalar, (L,), or (L, C).
    """
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    delta: float | np.ndarray

    def __post_init__(self):
        self.a = np.atleast_2d(np.asarray(self.a, dtype=np.float64))
        self.b = np.asarray(self.b, dtype=np.float64)
        self.c = np.asarray(self.c, dtype=np.float64)
        if np.any(self.a > 0):
            raise ValueError("SSMParams: diagonal state entries must be <= 0 for stability")
        if np.any(np.asarray(self.delta) <= 0):
            raise ValueError("SSMParams: delta must be positive for every token")

    @property
    def n_state(self):
        return self.a.shape[-1]

    @property
    def is_lti(self):
        return self.b.ndim == 1 and self.c.ndim == 1 and np.ndim(self.delta) == 0


def _normalize_scan_inputs(params: SSMParams, x):
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 1:
        raise ShapeError("scan needs at least one token")
    squeeze = x.ndim == 1
    x2 = x.reshape(len(x), -1)
    L, C = x2.shape
    N = params.n_state

    a = params.a
    if a.shape == (1, N) and C > 1:
        a = np.broadcast_to(a, (C, N))
    if a.shape != (C, N):
        raise ShapeError(f"state matrix shape {params.a.shape} incompatible with "
                         f"{C}-channel input (need (C, N))")

    b = params.b if params.b.ndim == 2 else np.broadcast_to(params.b, (L, N))
    c = params.c if params.c.ndim == 2 else np.broadcast_to(params.c, (L, N))
    if b.shape != (L, N) or c.shape != (L, N):
        raise ShapeError(f"b/c shapes {params.b.shape}/{params.c.shape} do not "
                         f"match L={L}, N={N}")

    delta = np.asarray(params.delta, dtype=np.float64)
    if delta.ndim == 0:
        delta = np.full((L, C), float(delta))
    elif delta.ndim == 1:
        delta = np.broadcast_to(delta[:, None], (L, C))
    if delta.shape != (L, C):
        raise ShapeError(f"delta shape {np.shape(params.delta)} does not match (L, C)")
    return x2, a, b, c, delta, squeeze


def ssm_scan(params: SSMParams, x):
    """Sequential recurrence h_t = Abar h_{t-1} + Bbar x_t, y_t = c . h_t.

    ``x`` is (L,) or (L, C); the state starts at zero and the output is
    strictly causal.  Works for both LTI and selective parameters.
    """
    x2, a, b, c, delta, squeeze = _normalize_scan_inputs(params, x)
    L, C = x2.shape
    N = a.shape[1]
    h = np.zeros((C, N))
    y = np.zeros((L, C))
    for t in range(L):
        u = delta[t][:, None] * a                        # (C, N)
        abar = np.exp(u)
        bbar = delta[t][:, None] * b[t][None, :] * _phi_np(u)
        h = abar * h + bbar * x2[t][:, None]
        y[t] = h @ c[t]
    return y[:, 0] if squeeze else y


def ssm_kernel(params: SSMParams, m: int):
    """Global-convolution kernel (c Bbar, c Abar Bbar, ..., c Abar^{m-1} Bbar).

    Token-independent parameters only; raises if called with selective
    (per-token) b/c/delta.  Returns shape (m, C).
    """
    if not params.is_lti:
        raise ValueError("ssm_kernel requires token-independent (LTI) parameters; "
                         "got selective per-token b/c/delta")
    a = params.a
    abar, bbar = zoh_discretize(a, params.b[None, :], float(params.delta))
    kernel = np.zeros((m, a.shape[0]))
    w = bbar.copy()
    for i in range(m):
        kernel[i] = w @ params.c
        w = w * abar
    return kernel


def kernel_apply(kernel, x):
    """Causal convolution of ``x`` with an ``ssm_kernel`` result."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    x2 = x.reshape(len(x), -1)
    L, C = x2.shape
    if kernel.shape[0] < L:
        raise ShapeError(f"kernel length {kernel.shape[0]} shorter than sequence {L}")
    y = np.zeros((L, C))
    for ch in range(C):
        y[:, ch] = np.convolve(x2[:, ch], kernel[:, ch])[:L]
    return y[:, 0] if squeeze else y


# ----------------------------------------------------------------------
# selective scan on the autodiff tape


def selective_scan_t(x: Tensor, dt: Tensor, b_sel: Tensor, c_sel: Tensor, a: Tensor) -> Tensor:
    """Batched selective recurrence on Tensors.

    x, dt: (B, L, C); b_sel, c_sel: (B, L, N); a: (C, N) with entries <= 0.
    """
    bsz, length, ch = x.shape
    n = a.shape[1]
    a_r = a.reshape((1, ch, n))
    h = T.zeros((bsz, ch, n), dtype=x.dtype)
    ys = []
    for t in range(length):
        d_t = dt.narrow(1, t, 1).reshape((bsz, ch, 1))
        x_t = x.narrow(1, t, 1).reshape((bsz, ch, 1))
        b_t = b_sel.narrow(1, t, 1).reshape((bsz, 1, n))
        c_t = c_sel.narrow(1, t, 1).reshape((bsz, 1, n))
        u = d_t * a_r
        small = np.abs(u.data) < PHI_SERIES_CUTOFF
        phi = where(small, u * 0.5 + 1.0, (exp(u) - 1.0) / where(small, 1.0, u))
        h = exp(u) * h + (d_t * phi) * b_t * x_t
        ys.append((h * c_t).sum(axis=2).reshape((bsz, 1, ch)))
    return T.concat(ys, axis=1)


def causal_depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-channel causal conv over the token axis; x (B, L, C), weight (C, w)."""
    width = weight.shape[1]
    length = x.shape[1]
    xp = T.pad(x, ((0, 0), (width - 1, 0), (0, 0)))
    acc = None
    for k in range(width):
        seg = xp.narrow(1, k, length)
        w_k = weight.narrow(1, k, 1).reshape((weight.shape[0],))
        term = seg * w_k
        acc = term if acc is None else acc + term
    return acc + bias


# ----------------------------------------------------------------------
# mamba block


@dataclass
class MambaBlockParams:
    """Two-path gated SSM block over flattened volume tokens.

    Tokens are layer-normalized on entry (selective timescale and
    projection magnitudes compound multiplicatively, so unnormalized
    deep-encoder features blow the state up).  Token width C then
    expands to E*C on both paths.  Path one runs a causal depthwise
    conv, SiLU and the selective scan; path two is the SiLU gate.  The
    Hadamard product of the two is projected back to C.
    """
    norm_gamma: Tensor
    norm_beta: Tensor
    in_x_w: Tensor
    in_x_b: Tensor
    in_z_w: Tensor
    in_z_b: Tensor
    conv_w: Tensor
    conv_b: Tensor
    x_proj_w: Tensor
    dt_w: Tensor
    dt_bias: Tensor
    a_log: Tensor
    out_w: Tensor
    out_b: Tensor
    n_state: int
    expand: int
    conv_width: int
    dt_rank: int

    def named(self, prefix: str):
        for f in ("norm_gamma", "norm_beta", "in_x_w", "in_x_b", "in_z_w", "in_z_b",
                  "conv_w", "conv_b", "x_proj_w", "dt_w", "dt_bias", "a_log",
                  "out_w", "out_b"):
            yield f"{prefix}.{f}", getattr(self, f)


def init_mamba_block(rng, channels, n_state=8, expand=2, conv_width=3) -> MambaBlockParams:
    inner = expand * channels
    dt_rank = max(1, int(np.ceil(channels / 16)))
    norm_gamma = Tensor(np.ones(channels), requires_grad=True)
    norm_beta = Tensor(np.zeros(channels), requires_grad=True)
    in_x_w, in_x_b = init_linear(rng, channels, inner)
    in_z_w, in_z_b = init_linear(rng, channels, inner)
    conv_w = Tensor(rng.normal((inner, conv_width), std=float(np.sqrt(1.0 / conv_width))),
                    requires_grad=True)
    conv_b = Tensor(np.zeros(inner), requires_grad=True)
    x_proj_w, _ = init_linear(rng, inner, dt_rank + 2 * n_state, bias=False)
    dt_w, _ = init_linear(rng, dt_rank, inner, bias=False)
    # softplus(dt_bias) lands log-uniformly in [1e-3, 0.1]
    dt0 = np.exp(rng.uniform(np.log(1e-3), np.log(0.1), (inner,), dtype=np.float64))
    dt_bias = Tensor(np.log(np.expm1(dt0)), requires_grad=True)
    # S4D-real style init: state n decays at rate n+1, per channel
    a_log = Tensor(np.tile(np.log(np.arange(1, n_state + 1, dtype=np.float64)), (inner, 1)),
                   requires_grad=True)
    out_w, out_b = init_linear(rng, inner, channels)
    return MambaBlockParams(norm_gamma=norm_gamma, norm_beta=norm_beta,
                            in_x_w=in_x_w, in_x_b=in_x_b, in_z_w=in_z_w, in_z_b=in_z_b,
                            conv_w=conv_w, conv_b=conv_b, x_proj_w=x_proj_w, dt_w=dt_w,
                            dt_bias=dt_bias, a_log=a_log, out_w=out_w, out_b=out_b,
                            n_state=n_state, expand=expand, conv_width=conv_width,
                            dt_rank=dt_rank)


def _token_layer_norm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mean = t.mean(axis=2, keepdims=True)
    centered = t - mean
    var = (centered * centered).mean(axis=2, keepdims=True)
    return centered / (var + eps).sqrt() * gamma + beta


def mamba_block(x: Tensor, p: MambaBlockParams) -> Tensor:
    """Apply the block to a (B, C, D, H, W) volume; output keeps the shape.

    The volume is flattened to L = D*H*W tokens of width C in row-major
    (D, then H, then W) order, processed, and reshaped back.
    """
    bsz, ch, d, h, w = x.shape
    length = d * h * w
    tokens = x.permute(0, 2, 3, 4, 1).reshape((bsz, length, ch))
    tokens = _token_layer_norm(tokens, p.norm_gamma, p.norm_beta)

    xs = tokens.matmul(p.in_x_w) + p.in_x_b
    z = tokens.matmul(p.in_z_w) + p.in_z_b

    xa = silu(causal_depthwise_conv1d(xs, p.conv_w, p.conv_b))

    proj = xa.matmul(p.x_proj_w)
    r, n = p.dt_rank, p.n_state
    dt = softplus(proj.narrow(2, 0, r).matmul(p.dt_w) + p.dt_bias)
    b_sel = proj.narrow(2, r, n)
    c_sel = proj.narrow(2, r + n, n)
    a = -exp(p.a_log)

    y = selective_scan_t(xa, dt, b_sel, c_sel, a)
    gated = y * silu(z)
    out = gated.matmul(p.out_w) + p.out_b
    return out.reshape((bsz, d, h, w, ch)).permute(0, 4, 1, 2, 3)


def mamba_param_count(p: MambaBlockParams) -> int:
    return sum(t.size for _, t in p.named("m"))
