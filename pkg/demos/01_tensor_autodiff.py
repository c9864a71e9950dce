"""Tour of the tensor engine: forward ops, reverse-mode gradients checked
against finite differences, and differentiating through a gradient."""

import numpy as np

from mckd.tensor import (
    Tensor, backward, detach, finite_diff_grad, l2_normalize, log_softmax,
    select_columns, softmax, tmean, tsum,
)

rng = np.random.default_rng(0)

# -- forward basics ------------------------------------------------------------
print("relu([-1, 0, 2])      ->", np.maximum([-1.0, 0.0, 2.0], 0))
print("softmax([0, 0])       ->", softmax(Tensor([0.0, 0.0])).data)
print("l2_normalize([3, 4])  ->", l2_normalize(Tensor([3.0, 4.0])).data)

# -- gradients vs finite differences ----------------------------------------------
# softmax cross-entropy through a small linear layer
w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
x = Tensor(rng.normal(size=(8, 5)))
y = rng.integers(0, 3, size=8)


def loss_fn(weights):
    return -tmean(select_columns(log_softmax(x @ weights), y))


grad = backward(loss_fn(w))[w]
fd = finite_diff_grad(loss_fn, w)
print(f"\ncross-entropy grad vs FD: max rel err = "
      f"{np.abs(grad.data - fd).max() / np.abs(fd).max():.2e}")

# -- detach blocks gradient flow ----------------------------------------------------
a = Tensor(3.0, requires_grad=True)
print("\nd/dx (x * x)        =", backward(a * a)[a].data, "(both factors live)")
print("d/dx (x * detach(x)) =", backward(a * detach(a))[a].data, "(one factor frozen)")

# -- second order: backward over backward -----------------------------------------------
t = Tensor(2.0, requires_grad=True)
first = backward(t * t * t)[t]          # 3 t^2 = 12
second = backward(first)[t]             # 6 t   = 12
print(f"\nf = x^3 at x=2: f' = {float(first.data)}, f'' = {float(second.data)}")

# Hessian-vector product of sum(softmax(x) * c) against FD of the gradient
c = Tensor(rng.normal(size=4))
v = rng.normal(size=4)
x0 = rng.normal(size=4)
xt = Tensor(x0, requires_grad=True)
g = backward(tsum(softmax(xt) * c))[xt]
hvp = backward(tsum(g * Tensor(v)))[xt].data
h = 1e-5
gp = backward(tsum(softmax(Tensor(x0 + h * v, requires_grad=True)) * c))
gm = backward(tsum(softmax(Tensor(x0 - h * v, requires_grad=True)) * c))
fd_hvp = (list(gp.values())[0].data - list(gm.values())[0].data) / (2 * h)
print(f"Hessian-vector product vs FD: max abs err = {np.abs(hvp - fd_hvp).max():.2e}")
