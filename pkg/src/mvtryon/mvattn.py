"""
Correlation modulated multi-view attention and camera conditioned
cross-attention.

Single head, no output projection. Feature tensors are ``[token, channel]``
and multi-view features are stacked as ``[view, token, channel]``. Gradients
come from torch autograd, so every function here is differentiable in its
tensor arguments.
"""
import logging
import math
from dataclasses import dataclass, fields
from typing import Dict, Optional

import torch
from einops import rearrange, repeat

from .camera import CameraToken
from .exceptions import DimensionError, InvalidCorrelationError

logger = logging.getLogger(__name__)

CORRELATION_TOLERANCE = 1e-9


@dataclass
class AttentionParams:
    """
    ``W_Q`` maps query channels to ``d``; ``W_K``/``W_V`` map key channels.
    For multi-view self attention both input widths are equal.
    """

    W_Q: torch.Tensor
    W_K: torch.Tensor
    W_V: torch.Tensor

    def __post_init__(self):
        for name in ("W_Q", "W_K", "W_V"):
            if getattr(self, name).dim() != 2:
                raise DimensionError(f"{name} must be a matrix")
        if self.W_Q.shape[1] != self.W_K.shape[1]:
            raise DimensionError(
                f"query/key head dims differ: {tuple(self.W_Q.shape)} vs "
                f"{tuple(self.W_K.shape)}"
            )
        if self.W_K.shape[0] != self.W_V.shape[0]:
            raise DimensionError(
                f"key/value input widths differ: {tuple(self.W_K.shape)} vs "
                f"{tuple(self.W_V.shape)}"
            )

    @property
    def d(self) -> int:
        return self.W_Q.shape[1]

    @property
    def query_width(self) -> int:
        return self.W_Q.shape[0]

    @property
    def key_width(self) -> int:
        return self.W_K.shape[0]

    @classmethod
    def random(
        cls,
        query_width: int,
        d: int,
        key_width: Optional[int] = None,
        value_dim: Optional[int] = None,
        generator: Optional[torch.Generator] = None,
        dtype: torch.dtype = torch.float64,
    ) -> "AttentionParams":
        key_width = key_width or query_width
        value_dim = value_dim or d

        def init(rows, cols):
            scale = 1.0 / math.sqrt(rows)
            return (
                torch.randn(rows, cols, generator=generator, dtype=dtype)
                * scale
            )

        return cls(
            init(query_width, d),
            init(key_width, d),
            init(key_width, value_dim),
        )


@dataclass
class MlpParams:
    W1: torch.Tensor
    b1: torch.Tensor
    W2: torch.Tensor
    b2: torch.Tensor

    def __post_init__(self):
        if self.W1.shape[1] != self.b1.shape[0]:
            raise DimensionError("first layer weight/bias mismatch")
        if self.W1.shape[1] != self.W2.shape[0]:
            raise DimensionError("hidden widths differ between layers")
        if self.W2.shape[1] != self.b2.shape[0]:
            raise DimensionError("second layer weight/bias mismatch")

    @property
    def out_width(self) -> int:
        return self.W2.shape[1]

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(x @ self.W1 + self.b1) @ self.W2 + self.b2


def _check_tokens(name: str, tensor: torch.Tensor, width: int):
    if tensor.dim() != 2:
        raise DimensionError(
            f"{name} must be [token, channel], got {tuple(tensor.shape)}"
        )
    if tensor.shape[1] != width:
        raise DimensionError(
            f"{name} has {tensor.shape[1]} channels, expected {width}"
        )


def check_correlation(C: torch.Tensor, m: int):
    if C.shape != (m, m):
        raise InvalidCorrelationError(
            f"correlation matrix must be {m}x{m}, got {tuple(C.shape)}"
        )
    C = C.detach()
    if not torch.all(torch.isfinite(C)):
        raise InvalidCorrelationError("correlation matrix is not finite")
    if (C < 0).any() or (C > 1).any():
        raise InvalidCorrelationError("correlation entries must lie in [0, 1]")
    if (C - C.T).abs().max() > CORRELATION_TOLERANCE:
        raise InvalidCorrelationError("correlation matrix is not symmetric")
    if (torch.diagonal(C) - 1).abs().max() > CORRELATION_TOLERANCE:
        raise InvalidCorrelationError("correlation diagonal must be 1")


def scaled_dot_product_attention(
    q: torch.Tensor,
    k: torch.Tensor,
    v: torch.Tensor,
    logit_scale: Optional[torch.Tensor] = None,
    return_weights: bool = False,
):
    """
    ``softmax(scale * q k^T / sqrt(d)) v``. Keys whose scale is exactly zero
    are excluded from the softmax.
    """
    logits = (q @ k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    if logit_scale is not None:
        logits = logits * logit_scale
        logits = logits.masked_fill(logit_scale == 0, float("-inf"))
    weights = torch.softmax(logits, dim=-1)
    out = weights @ v
    if return_weights:
        return out, weights
    return out


def modulation_matrix(
    C: torch.Tensor, tokens_per_view: int, garment_tokens: int
) -> torch.Tensor:
    """
    Expand ``C`` to one logit scale per (query token, key token). Garment
    keys get weight 1.
    """
    view_block = repeat(
        C, "i j -> (i a) (j b)", a=tokens_per_view, b=tokens_per_view
    )
    garment_block = torch.ones(
        view_block.shape[0], garment_tokens, dtype=C.dtype, device=C.device
    )
    return torch.cat([view_block, garment_block], dim=1)


def mv_attention(
    features: torch.Tensor,
    garment_front: torch.Tensor,
    garment_back: torch.Tensor,
    C: torch.Tensor,
    params: AttentionParams,
    return_weights: bool = False,
):
    """Multi-view spatial attention.

    Parameters
    ----------
    features : torch.Tensor
        ``[m, n, c]`` per-view features.
    garment_front, garment_back : torch.Tensor
        ``[g, c]`` garment features; ``g`` may be zero.
    C : torch.Tensor
        ``[m, m]`` correlation matrix.
    params : AttentionParams
        Single-head projections.

    Returns
    -------
    torch.Tensor or tuple
        ``[m, n, d_v]``; with ``return_weights`` also the
        ``[m*n, m*n + g_f + g_b]`` attention weights.
    """
    if features.dim() != 3:
        raise DimensionError(
            f"features must be [view, token, channel], got "
            f"{tuple(features.shape)}"
        )
    m, n, c = features.shape
    if params.query_width != c or params.key_width != c:
        raise DimensionError(
            f"attention params expect widths ({params.query_width}, "
            f"{params.key_width}) but features have {c} channels"
        )
    _check_tokens("garment_front", garment_front, c)
    _check_tokens("garment_back", garment_back, c)
    check_correlation(C, m)

    tokens = rearrange(features, "m n c -> (m n) c")
    context = torch.cat([tokens, garment_front, garment_back], dim=0)
    q = tokens @ params.W_Q
    k = context @ params.W_K
    v = context @ params.W_V
    scale = modulation_matrix(
        C.to(tokens.dtype),
        n,
        garment_front.shape[0] + garment_back.shape[0],
    )
    out, weights = scaled_dot_product_attention(
        q, k, v, scale, return_weights=True
    )
    out = rearrange(out, "(m n) d -> m n d", m=m)
    if return_weights:
        return out, weights
    return out


def build_condition_tokens(
    garment_embed: torch.Tensor,
    camera_token: CameraToken,
    mlp: MlpParams,
) -> torch.Tensor:
    """Append the MLP-projected camera token to the garment embedding."""
    if garment_embed.dim() != 2:
        raise DimensionError("garment embedding must be [token, channel]")
    if mlp.out_width != garment_embed.shape[1]:
        raise DimensionError(
            f"MLP produces {mlp.out_width} channels but the garment "
            f"embedding has {garment_embed.shape[1]}"
        )
    values = camera_token_tensor(camera_token, garment_embed)
    if values.shape[0] != mlp.W1.shape[0]:
        raise DimensionError(
            f"camera token has length {values.shape[0]}, MLP expects "
            f"{mlp.W1.shape[0]}"
        )
    return torch.cat([garment_embed, mlp(values)[None]], dim=0)


def camera_token_tensor(
    camera_token: CameraToken, like: torch.Tensor
) -> torch.Tensor:
    return torch.as_tensor(
        camera_token.values, dtype=like.dtype, device=like.device
    )


def cross_attention(
    H: torch.Tensor,
    Y: torch.Tensor,
    params: AttentionParams,
    return_weights: bool = False,
):
    _check_tokens("H", H, params.query_width)
    _check_tokens("Y", Y, params.key_width)
    return scaled_dot_product_attention(
        H @ params.W_Q,
        Y @ params.W_K,
        Y @ params.W_V,
        return_weights=return_weights,
    )


@dataclass
class MvAttentionGradients:
    features: torch.Tensor
    garment_front: torch.Tensor
    garment_back: torch.Tensor
    W_Q: torch.Tensor
    W_K: torch.Tensor
    W_V: torch.Tensor

    def as_dict(self) -> Dict[str, torch.Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class CrossAttentionGradients:
    H: torch.Tensor
    Y: torch.Tensor
    W_Q: torch.Tensor
    W_K: torch.Tensor
    W_V: torch.Tensor

    def as_dict(self) -> Dict[str, torch.Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _leaf(tensor: torch.Tensor) -> torch.Tensor:
    return tensor.detach().clone().requires_grad_(True)


def mv_attention_grad(
    features: torch.Tensor,
    garment_front: torch.Tensor,
    garment_back: torch.Tensor,
    C: torch.Tensor,
    params: AttentionParams,
    upstream: torch.Tensor,
) -> MvAttentionGradients:
    """
    Reverse-mode gradients of ``<upstream, mv_attention(...)>``. ``C`` is a
    constant.
    """
    inputs = [
        _leaf(x)
        for x in (
            features,
            garment_front,
            garment_back,
            params.W_Q,
            params.W_K,
            params.W_V,
        )
    ]
    with torch.enable_grad():
        out = mv_attention(
            inputs[0],
            inputs[1],
            inputs[2],
            C.detach(),
            AttentionParams(*inputs[3:]),
        )
        if out.shape != upstream.shape:
            raise DimensionError(
                f"upstream gradient {tuple(upstream.shape)} does not match "
                f"output {tuple(out.shape)}"
            )
        grads = torch.autograd.grad(
            out, inputs, grad_outputs=upstream, allow_unused=True
        )
    return MvAttentionGradients(
        *(
            torch.zeros_like(x) if g is None else g
            for x, g in zip(inputs, grads)
        )
    )


def cross_attention_grad(
    H: torch.Tensor,
    Y: torch.Tensor,
    params: AttentionParams,
    upstream: torch.Tensor,
) -> CrossAttentionGradients:
    inputs = [_leaf(x) for x in (H, Y, params.W_Q, params.W_K, params.W_V)]
    with torch.enable_grad():
        out = cross_attention(
            inputs[0], inputs[1], AttentionParams(*inputs[2:])
        )
        if out.shape != upstream.shape:
            raise DimensionError(
                f"upstream gradient {tuple(upstream.shape)} does not match "
                f"output {tuple(out.shape)}"
            )
        grads = torch.autograd.grad(
            out, inputs, grad_outputs=upstream, allow_unused=True
        )
    return CrossAttentionGradients(
        *(
            torch.zeros_like(x) if g is None else g
            for x, g in zip(inputs, grads)
        )
    )
