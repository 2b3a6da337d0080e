# The numpy MLP kit every model here is built on: forward, manual backward,
# a finite-difference check, and Adam.

import numpy as np

from gacodec.tensorkit import (AdamState, adam_step, finite_diff_check, init_mlp,
                               mlp_backward, mlp_forward, prng_stream)

st = prng_stream(0)
net = init_mlp([2, 16, 16, 1], ["tanh", "tanh", "identity"], st.split("init"))
x = st.split("x").uniform((256, 2)) * 4 - 2
y = np.sin(x[:, :1]) * np.cos(x[:, 1:])


def loss_and_grad(p, xb=x, yb=y):
    out, cache = mlp_forward(p, xb)
    r = out - yb
    grads, _ = mlp_backward(p, cache, 2 * r / len(xb))
    return float(np.mean(r ** 2)), grads


# the gradient check on a small slice
print("max relative gradient error:",
      f"{finite_diff_check(lambda p: loss_and_grad(p, x[:8], y[:8]), net):.2e}")

opt = AdamState.for_params(net, lr=1e-2)
for step in range(1501):
    loss, g = loss_and_grad(net)
    adam_step(opt, net, g)
    if step % 300 == 0:
        print(f"step {step:4d}  mse {loss:.5f}")
