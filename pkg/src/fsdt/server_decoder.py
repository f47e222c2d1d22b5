"""The shared server-side causal transformer trunk.

A stack of pre-norm blocks (layer-norm, multi-head causal
self-attention, layer-norm, GELU MLP, residual connections) with no
input embedding and no output head: those live on the clients. The
trunk is agent-type agnostic; nothing in its API references a type.
With all attention/MLP output projections at zero, the whole trunk is
an exact identity on real rows, which the tests rely on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .client_models import TokenSequence
from .parameters import ParamModule
from .rng import substream


@dataclass
class DecodeContext:
    """Pairs one decode() call with its eventual decode_backward()."""

    input_leaf: Tensor
    output: Tensor
    used: bool = False


class ServerDecoder(ParamModule):
    """Causal transformer decoder shared by every client type."""

    def __init__(self, width: int = 128, n_layers: int = 3, n_heads: int = 4,
                 ff_width: int = 512, seed=0, ln_eps: float = 1e-5):
        super().__init__()
        if width % n_heads != 0:
            raise ValueError(f"width {width} not divisible by {n_heads} heads")
        self.width = width
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.ff_width = ff_width
        self.ln_eps = ln_eps
        keys = seed if isinstance(seed, tuple) else (seed,)
        self.blocks = []
        for i in range(n_layers):
            blk = {}
            blk["ln1_g"] = self._add(f"layer{i}.ln1_g", np.ones(width))
            blk["ln1_b"] = self._add(f"layer{i}.ln1_b", np.zeros(width))
            for w in ("wq", "wk", "wv", "wo"):
                blk[w] = self._add(f"layer{i}.{w}",
                                   ad.linear_init(substream(*keys, f"layer{i}.{w}"), width, (width, width)))
                blk["b" + w[1]] = self._add(f"layer{i}.b{w[1]}", np.zeros(width))
            blk["ln2_g"] = self._add(f"layer{i}.ln2_g", np.ones(width))
            blk["ln2_b"] = self._add(f"layer{i}.ln2_b", np.zeros(width))
            blk["w1"] = self._add(f"layer{i}.w1",
                                  ad.linear_init(substream(*keys, f"layer{i}.w1"), width, (width, ff_width)))
            blk["b1"] = self._add(f"layer{i}.b1", np.zeros(ff_width))
            blk["w2"] = self._add(f"layer{i}.w2",
                                  ad.linear_init(substream(*keys, f"layer{i}.w2"), ff_width, (ff_width, width)))
            blk["b2"] = self._add(f"layer{i}.b2", np.zeros(width))
            self.blocks.append(blk)
        expected = self.expected_param_count(width, n_layers, ff_width)
        actual = self.param_count()
        if expected != actual:
            raise RuntimeError(f"parameter accounting broken: closed form {expected} != summed {actual}")

    @staticmethod
    def expected_param_count(width: int, n_layers: int, ff_width: int) -> int:
        """Closed-form total: per layer 4D^2 + 2*D*F + F + 9D (attention
        projections and biases, MLP, two layer norms)."""
        per_layer = 4 * width * width + 2 * width * ff_width + ff_width + 9 * width
        return n_layers * per_layer

    def forward(self, tokens: Tensor, token_mask: np.ndarray) -> Tensor:
        """Graph-connected forward pass; padded rows are masked and zeroed."""
        if tokens.data.ndim != 3:
            raise ValueError("decoder expects (batch, length, width) tokens")
        batch, length, width = tokens.data.shape
        if width != self.width:
            raise ValueError(f"token width {width} does not match decoder width {self.width}")
        if length % 3 != 0:
            raise ValueError(f"token length {length} is not a whole number of timestep triplets")
        mask = np.asarray(token_mask, dtype=bool)
        if mask.shape != (batch, length):
            raise ValueError("token mask shape must be (batch, length)")
        x = tokens
        for blk in self.blocks:
            attn_in = ad.layer_norm(x, blk["ln1_g"], blk["ln1_b"], self.ln_eps)
            x = ad.add(x, ad.causal_self_attention(attn_in, blk, self.n_heads, key_mask=mask))
            mlp_in = ad.layer_norm(x, blk["ln2_g"], blk["ln2_b"], self.ln_eps)
            hidden = ad.gelu(ad.add(ad.matmul(mlp_in, blk["w1"]), blk["b1"]))
            x = ad.add(x, ad.add(ad.matmul(hidden, blk["w2"]), blk["b2"]))
        return ad.mul(x, mask.astype(np.float64)[:, :, None])

    def decode(self, seq: TokenSequence) -> TokenSequence:
        """Run the trunk on received token data (a fresh graph on this side).

        The returned sequence carries the context needed by
        decode_backward; the caller treats its values as wire data.
        """
        leaf = Tensor(seq.tokens.data, requires_grad=True)
        out = self.forward(leaf, seq.mask)
        return TokenSequence(tokens=out, mask=seq.mask.copy(),
                             ctx=DecodeContext(input_leaf=leaf, output=out))

    def decode_backward(self, out_seq: TokenSequence, grad_out: np.ndarray):
        """Backprop a token gradient through the matching decode() call.

        Returns (grad wrt input tokens, dict of parameter gradients); the
        parameter gradients also accumulate on the decoder tensors.
        """
        ctx = out_seq.ctx
        if ctx is None or ctx.used:
            raise RuntimeError("decode_backward without a matching decode forward pass")
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != ctx.output.data.shape:
            raise ValueError(f"grad_out shape {grad_out.shape} does not match output {ctx.output.data.shape}")
        ctx.used = True
        ctx.output.backward(seed=grad_out)
        grad_in = (ctx.input_leaf.grad if ctx.input_leaf.grad is not None
                   else np.zeros_like(ctx.input_leaf.data))
        grads = {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for name, p in self._params.items()}
        return grad_in, grads
