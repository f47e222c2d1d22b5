#!/usr/bin/env python3
"""Tour of the numeric core: tensors, reverse-mode gradients, Adam.

Everything downstream (embedding models, the transformer trunk, the
split training loop) is built from the handful of operations shown
here, so being able to trust their gradients is the whole game.
"""
import numpy as np

from fsdt import autodiff as ad
from fsdt.autodiff import Adam, Tensor, grad_check

print("== tensors and gradients ==")
w = Tensor([3.0], requires_grad=True, name="w")
loss = ad.tsum(ad.mul(w, w))  # f(w) = w^2
loss.backward()
print(f"f(w) = w^2 at w=3: f = {loss.item():.1f}, df/dw = {w.grad[0]:.1f} (expect 6)")

print("\n== the gradient checker used all over the test suite ==")
rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
gamma = Tensor(np.ones(5), requires_grad=True)
beta = Tensor(np.zeros(5), requires_grad=True)
target = rng.normal(size=(4, 5))
err = grad_check(lambda: ad.tsum(ad.mul(ad.layer_norm(x, gamma, beta, 1e-5), target)),
                 [x, gamma, beta], h=1e-5)
print(f"layer_norm reverse-mode vs central differences: max rel err = {err:.2e}")

print("\n== softmax is max-shifted, so huge logits are fine ==")
s = ad.softmax(Tensor([1000.0, 1000.0, 999.0]))
print(f"softmax([1000, 1000, 999]) = {np.round(s.data, 4)}")

print("\n== causal attention: the future cannot touch the past ==")
weights = {}
for name in ("wq", "wk", "wv", "wo"):
    weights[name] = Tensor(ad.linear_init(rng, 8, (8, 8)), requires_grad=True)
    weights["b" + name[1]] = Tensor(np.zeros(8), requires_grad=True)
tokens = rng.normal(size=(5, 8))
base = ad.causal_self_attention(Tensor(tokens), weights, n_heads=2).data
tokens_mod = tokens.copy()
tokens_mod[3:] = 999.0  # vandalize the future
out = ad.causal_self_attention(Tensor(tokens_mod), weights, n_heads=2).data
print(f"rows 0..2 bit-identical after perturbing rows 3..4: {np.array_equal(out[:3], base[:3])}")

print("\n== Adam, with freezing ==")
a = Tensor([1.0], requires_grad=True, name="trainable")
b = Tensor([1.0], requires_grad=True, name="frozen")
b.frozen = True
opt = Adam([a, b], lr=0.1)
for step in range(25):
    loss = ad.tsum(ad.add(ad.mul(a, a), ad.mul(b, b)))
    opt.zero_grad()
    loss.backward()
    opt.step()
print(f"after 25 steps minimizing a^2 + b^2: a = {a.data[0]:+.4f} (moves), "
      f"b = {b.data[0]:+.4f} (frozen stays put)")
