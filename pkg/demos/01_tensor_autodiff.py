"""Tour of the numeric core: tensors, autodiff, Adam, checkpoints.

Run:  python3 demos/01_tensor_autodiff.py
"""

import numpy as np

from protofew import numcore as nc

# --- tensors and the op vocabulary -----------------------------------------
# Every op validates shapes up front; broadcasting is limited to
# scalar*tensor and channel bias-adds, so shape bugs fail loudly.
x = nc.as_tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
w = nc.as_tensor(np.ones((3, 2)))
print("matmul:\n", nc.matmul(x, w).data)

probs = nc.softmax(nc.as_tensor([1.0, 2.0, 3.0]))
print("softmax sums to", probs.data.sum())

# the dispatcher form used by generic callers
out = nc.forward_op("squared_euclidean_pairwise", np.eye(3), np.eye(3))
print("pairwise distances of the identity basis:\n", out.data)

# --- reverse-mode autodiff ---------------------------------------------------
# The tape is rebuilt on each forward pass; backward() walks it once.
theta = nc.parameter(np.array([0.5, -1.0, 2.0]), dtype=np.float64)
loss = nc.tsum(nc.mul(theta, theta))          # sum of squares
nc.backward(loss)
print("d/dtheta sum(theta^2) =", theta.grad, "(expect 2*theta)")

# central finite differences are the house gradient oracle
numeric = nc.finite_diff_gradient(lambda t: nc.tsum(nc.mul(t, t)), theta)
print("finite-difference check, max abs diff:",
      np.abs(theta.grad - numeric).max())

# --- a short Adam descent ----------------------------------------------------
# Minimize ||A p - b||^2 from a random start.
rng = np.random.default_rng(0)
a_mat = nc.as_tensor(rng.normal(0, 1, (8, 3)), dtype=np.float64)
b_vec = rng.normal(0, 1, (8, 1))
p = nc.parameter(rng.normal(0, 1, (3, 1)), name="p", dtype=np.float64)
state = nc.AdamState(lr=0.05)
for step in range(200):
    resid = nc.add(nc.matmul(a_mat, p), nc.as_tensor(-b_vec, dtype=np.float64))
    loss = nc.tsum(nc.mul(resid, resid))
    grads = nc.backward(loss, [p])
    nc.adam_step({"p": p}, {"p": p.grad}, state)
print("least-squares loss after 200 Adam steps:", loss.item())
print("closed-form residual:",
      float(np.linalg.lstsq(a_mat.data, b_vec, rcond=None)[1]))

# --- checkpoints ------------------------------------------------------------
arrays = {"p": p.data.astype(np.float32)}
nc.save_arrays("/tmp/demo_ck.pft", arrays)
back = nc.load_arrays("/tmp/demo_ck.pft")
print("checkpoint round trip bit-exact:",
      np.array_equal(back["p"], arrays["p"]))
