"""Neural network layers and losses on top of the tensor engine.

3D convolution is im2col + BLAS matmul; the column matrix is rebuilt in
the backward pass rather than cached, trading a little compute for a
much smaller live graph.  The segmentation loss is the unweighted sum
of soft Dice (per class over the whole batch, averaged over foreground
classes) and mean voxel cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (ShapeError, Tensor, exp, log_softmax, make_op, mul,
                     sigmoid, where)

EPS_NORM = 1e-5       # instance norm variance floor
EPS_DICE = 1e-5       # soft Dice smooth term
LEAKY_SLOPE = 0.01    # default negative slope


@dataclass
class ConvParams:
    """Weights for a 3D convolution.

    weight: (C_out, C_in, kd, kh, kw); bias: (C_out,) or None.
    Output extent per axis is floor((in + 2*pad - k) / stride) + 1.
    """
    weight: Tensor
    bias: Tensor | None
    stride: tuple[int, int, int] = (1, 1, 1)
    padding: tuple[int, int, int] = (0, 0, 0)


def conv_output_shape(spatial, kernel, stride, padding):
    out = []
    for s, k, st, p in zip(spatial, kernel, stride, padding):
        o = (s + 2 * p - k) // st + 1
        if o <= 0:
            raise ShapeError(f"degenerate conv output extent {o} "
                             f"(in={s}, k={k}, stride={st}, pad={p})")
        out.append(o)
    return tuple(out)


def _im2col(xp, kernel, stride, out_spatial):
    # xp: padded input (B, C, Dp, Hp, Wp) -> (B*Do*Ho*Wo, C*kd*kh*kw)
    kd, kh, kw = kernel
    sd, sh, sw = stride
    view = np.lib.stride_tricks.sliding_window_view(xp, (kd, kh, kw), axis=(2, 3, 4))
    view = view[:, :, ::sd, ::sh, ::sw]
    b, c = xp.shape[0], xp.shape[1]
    do, ho, wo = out_spatial
    cols = view.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(b * do * ho * wo, c * kd * kh * kw)
    return np.ascontiguousarray(cols)


def conv3d(x: Tensor, p: ConvParams) -> Tensor:
    """Direct 3D convolution (cross-correlation) with zero padding."""
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects (B,C,D,H,W), got {x.shape}")
    c_out, c_in, kd, kh, kw = p.weight.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv3d channel mismatch: input has {x.shape[1]}, "
                         f"weight expects {c_in}")
    b = x.shape[0]
    spatial = x.shape[2:]
    out_spatial = conv_output_shape(spatial, (kd, kh, kw), p.stride, p.padding)
    do, ho, wo = out_spatial
    pd, ph, pw = p.padding

    xp = np.pad(x.data, ((0, 0), (0, 0), (pd, pd), (ph, ph), (pw, pw)))
    cols = _im2col(xp, (kd, kh, kw), p.stride, out_spatial)
    w_mat = p.weight.data.reshape(c_out, -1)
    out = cols @ w_mat.T
    if p.bias is not None:
        out += p.bias.data
    out = out.reshape(b, do, ho, wo, c_out).transpose(0, 4, 1, 2, 3)

    weight, bias = p.weight, p.bias
    sd, sh, sw = p.stride

    def backward(g):
        g_mat = g.transpose(0, 2, 3, 4, 1).reshape(-1, c_out)
        if weight.requires_grad:
            cols_b = _im2col(xp, (kd, kh, kw), p.stride, out_spatial)
            weight._accumulate((g_mat.T @ cols_b).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g_mat.sum(axis=0))
        if x.requires_grad or x._parents:
            dcols = (g_mat @ w_mat).reshape(b, do, ho, wo, c_in, kd, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kd):
                for j in range(kh):
                    for k in range(kw):
                        dxp[:, :, i:i + do * sd:sd, j:j + ho * sh:sh, k:k + wo * sw:sw] += \
                            dcols[:, :, :, :, :, i, j, k].transpose(0, 4, 1, 2, 3)
            if pd or ph or pw:
                dxp = dxp[:, :, pd:pd + spatial[0], ph:ph + spatial[1], pw:pw + spatial[2]]
            x._accumulate(dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, "conv3d", backward)


@dataclass
class ConvTransposeParams:
    """Transposed 3D conv used for decoder upsampling.

    weight: (C_in, C_out, kd, kh, kw).  Only the kernel == stride,
    zero-padding case is supported: each input voxel expands into a
    disjoint k-sized output block, so output extent is in * stride.
    """
    weight: Tensor
    bias: Tensor | None
    stride: tuple[int, int, int]


def conv_transpose3d(x: Tensor, p: ConvTransposeParams) -> Tensor:
    c_in, c_out, kd, kh, kw = p.weight.shape
    if p.stride != (kd, kh, kw):
        raise ShapeError(f"conv_transpose3d supports kernel == stride only, "
                         f"got kernel {(kd, kh, kw)} stride {p.stride}")
    if x.shape[1] != c_in:
        raise ShapeError(f"conv_transpose3d channel mismatch: input has {x.shape[1]}, "
                         f"weight expects {c_in}")
    b, _, d, h, w = x.shape
    w_mat = p.weight.data.reshape(c_in, -1)            # (C_in, C_out*k^3)
    x_mat = x.data.transpose(0, 2, 3, 4, 1).reshape(-1, c_in)
    out = x_mat @ w_mat                                # (B*D*H*W, C_out*k^3)
    out = out.reshape(b, d, h, w, c_out, kd, kh, kw)
    out = out.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(b, c_out, d * kd, h * kh, w * kw)
    if p.bias is not None:
        out = out + p.bias.data.reshape(1, c_out, 1, 1, 1)

    weight, bias = p.weight, p.bias

    def backward(g):
        g_blocks = g.reshape(b, c_out, d, kd, h, kh, w, kw)
        g_mat = g_blocks.transpose(0, 2, 4, 6, 1, 3, 5, 7).reshape(-1, c_out * kd * kh * kw)
        if weight.requires_grad:
            weight._accumulate((x_mat.T @ g_mat).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad or x._parents:
            dx = (g_mat @ w_mat.T).reshape(b, d, h, w, c_in).transpose(0, 4, 1, 2, 3)
            x._accumulate(np.ascontiguousarray(dx))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_op(out, parents, "conv_transpose3d", backward)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = EPS_NORM) -> Tensor:
    """Normalize each (batch, channel) slice to ~zero mean / unit variance.

    A spatial size of 1 is not an error: variance collapses to zero and
    the eps floor turns the slice into zeros before the affine map.
    """
    if x.ndim != 5:
        raise ShapeError(f"instance_norm expects (B,C,D,H,W), got {x.shape}")
    axes = (2, 3, 4)
    mean = x.mean(axis=axes, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=axes, keepdims=True)
    xhat = centered / (var + eps).sqrt()
    c = x.shape[1]
    return xhat * gamma.reshape((1, c, 1, 1, 1)) + beta.reshape((1, c, 1, 1, 1))


def leaky_relu(x: Tensor, alpha: float = LEAKY_SLOPE) -> Tensor:
    return where(x.data >= 0, x, x * alpha)


def relu(x: Tensor) -> Tensor:
    return where(x.data >= 0, x, x * 0.0)


def silu(x: Tensor) -> Tensor:
    return mul(x, sigmoid(x))


def softmax(x: Tensor, axis: int) -> Tensor:
    return exp(log_softmax(x, axis))


def adaptive_avg_pool3d(x: Tensor, target) -> Tensor:
    """Resize spatial dims to ``target`` by mean over half-open windows.

    Window i along an axis of size S resized to T covers source indices
    [floor(i*S/T), ceil((i+1)*S/T)).  target == source is the identity.
    """
    td, th, tw = (int(t) for t in target)
    b, c, d, h, w = x.shape
    for t, s in zip((td, th, tw), (d, h, w)):
        if t < 1 or t > s:
            raise ShapeError(f"pool target {(td, th, tw)} invalid for source {(d, h, w)}")

    def bounds(s, t):
        return [(int(np.floor(i * s / t)), int(np.ceil((i + 1) * s / t))) for i in range(t)]

    bd, bh, bw = bounds(d, td), bounds(h, th), bounds(w, tw)

    if d % td == 0 and h % th == 0 and w % tw == 0:
        # equal partition fast path: reshape + mean
        fd, fh, fw = d // td, h // th, w // tw
        out = x.data.reshape(b, c, td, fd, th, fh, tw, fw).mean(axis=(3, 5, 7))

        def backward(g):
            gg = g / (fd * fh * fw)
            gg = np.broadcast_to(gg[:, :, :, None, :, None, :, None],
                                 (b, c, td, fd, th, fh, tw, fw))
            x._accumulate(gg.reshape(b, c, d, h, w).astype(x.dtype, copy=False))

        return make_op(out, (x,), "adaptive_avg_pool3d", backward)

    out = np.empty((b, c, td, th, tw), dtype=x.dtype)
    for i, (d0, d1) in enumerate(bd):
        for j, (h0, h1) in enumerate(bh):
            for k, (w0, w1) in enumerate(bw):
                out[:, :, i, j, k] = x.data[:, :, d0:d1, h0:h1, w0:w1].mean(axis=(2, 3, 4))

    def backward(g):
        dx = np.zeros_like(x.data)
        for i, (d0, d1) in enumerate(bd):
            for j, (h0, h1) in enumerate(bh):
                for k, (w0, w1) in enumerate(bw):
                    n = (d1 - d0) * (h1 - h0) * (w1 - w0)
                    dx[:, :, d0:d1, h0:h1, w0:w1] += g[:, :, i:i + 1, j:j + 1, k:k + 1] / n
        x._accumulate(dx)

    return make_op(out, (x,), "adaptive_avg_pool3d", backward)


@dataclass
class LossValue:
    """Decomposed segmentation loss; total == dice_part + ce_part."""
    total: Tensor
    dice_part: Tensor
    ce_part: Tensor


def one_hot(labels: np.ndarray, n_classes: int, dtype) -> np.ndarray:
    # labels (B,D,H,W) int -> (B,K,D,H,W)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"label values outside [0, {n_classes}): "
                         f"min={labels.min()}, max={labels.max()}")
    oh = np.zeros((labels.shape[0], n_classes) + labels.shape[1:], dtype=dtype)
    b_idx = np.arange(labels.shape[0])[:, None, None, None]
    d_idx, h_idx, w_idx = np.ogrid[:labels.shape[1], :labels.shape[2], :labels.shape[3]]
    oh[b_idx, labels, d_idx, h_idx, w_idx] = 1
    return oh


def dice_ce_loss(logits: Tensor, labels: np.ndarray, eps: float = EPS_DICE) -> LossValue:
    """Unweighted sum of soft Dice loss and voxel cross-entropy.

    Dice is computed per class with sums over the whole batch, then
    averaged over foreground classes (class 0 is background).
    """
    if logits.ndim != 5:
        raise ShapeError(f"dice_ce_loss expects logits (B,K,D,H,W), got {logits.shape}")
    n_classes = logits.shape[1]
    if n_classes < 2:
        raise ShapeError("dice_ce_loss needs at least 2 classes")
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    onehot = one_hot(labels.astype(np.int64), n_classes, logits.dtype)

    logp = log_softmax(logits, axis=1)
    ce = -(logp * onehot).sum(axis=1).mean()

    probs = exp(logp)
    dice_terms = []
    for c in range(1, n_classes):
        p_c = probs.narrow(1, c, 1)
        y_c = onehot[:, c:c + 1]
        inter = (p_c * y_c).sum()
        denom = p_c.sum() + float(y_c.sum())
        dice_terms.append((inter * 2.0 + eps) / (denom + eps))
    mean_dice = dice_terms[0]
    for t in dice_terms[1:]:
        mean_dice = mean_dice + t
    mean_dice = mean_dice * (1.0 / len(dice_terms))
    dice_loss = 1.0 - mean_dice

    total = dice_loss + ce
    return LossValue(total=total, dice_part=dice_loss, ce_part=ce)


# ----------------------------------------------------------------------
# parameter initialization helpers


def init_conv(rng, c_in, c_out, kernel, stride=(1, 1, 1), padding=None, bias=True,
              gain=2.0) -> ConvParams:
    # gain 2 (He) ahead of rectifiers; gain 1 for linear paths
    # (shortcut projections, logit heads), which must not amplify
    kernel = tuple(kernel)
    if padding is None:
        if any(k % 2 == 0 for k in kernel):
            raise ValueError("'same' padding needs odd kernel extents")
        padding = tuple(k // 2 for k in kernel)
    fan_in = c_in * int(np.prod(kernel))
    weight = Tensor(rng.normal((c_out, c_in) + kernel, std=float(np.sqrt(gain / fan_in))),
                    requires_grad=True)
    b = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
    return ConvParams(weight=weight, bias=b, stride=tuple(stride), padding=tuple(padding))


def init_conv_transpose(rng, c_in, c_out, stride) -> ConvTransposeParams:
    stride = tuple(stride)
    weight = Tensor(rng.normal((c_in, c_out) + stride, std=float(np.sqrt(1.0 / c_in))),
                    requires_grad=True)
    b = Tensor(np.zeros(c_out), requires_grad=True)
    return ConvTransposeParams(weight=weight, bias=b, stride=stride)


def init_linear(rng, n_in, n_out, bias=True, std=None):
    w = Tensor(rng.normal((n_in, n_out), std=std if std is not None else float(np.sqrt(1.0 / n_in))),
               requires_grad=True)
    b = Tensor(np.zeros(n_out), requires_grad=True) if bias else None
    return w, b
