"""
Forward noising and the hand-written denoiser
=============================================

Noise a batch with the closed-form marginal, run the two-pathway MLP, and
check its backward pass against a central difference on one parameter.
"""

import numpy as np

from mcdpo.model import ToyDenoiser
from mcdpo.schedule import forward_sample, make_linear_schedule, omega

sched = make_linear_schedule(50, 2e-3, 0.3)
print("alpha_bar at t=0, 25, 49:", sched.alpha_bars[[0, 25, 49]])
print("logit weight (constant mode):", omega(np.array([0, 49]), sched))

rng = np.random.default_rng(0)
x0 = rng.normal(size=(4, 2))
t = np.array([0, 10, 30, 49])
noisy = forward_sample(x0, t, rng.normal(size=(4, 2)), sched)
print("x_t:\n", noisy.x_t)

model = ToyDenoiser(d=2, D=2, n_prompts=4, T=50, hidden=16, depth=2, seed=0)
c = np.array([0, 1, 2, 3])
gamma = np.array([[1, -1], [1, 1], [0, 0], [-1, 1]])

# the reward pathway starts at zero, so the outcome condition has no effect yet
print("gamma ignored at init:",
      np.array_equal(model.predict_eps(noisy.x_t, t, c, gamma), model.predict_eps(noisy.x_t, t, c)))


def loss(m):
    pred = m.predict_eps(noisy.x_t, t, c, gamma)
    return 0.5 * np.sum((pred - noisy.eps) ** 2)


# analytic gradient of the squared error
pred, tape = model.forward(noisy.x_t, t, c, gamma)
grads = model.backward(tape, pred - noisy.eps)

# central difference on the first flat parameter
theta = model.get_flat()
h = 1e-5
theta[0] += h
model.set_flat(theta)
up = loss(model)
theta[0] -= 2 * h
model.set_flat(theta)
down = loss(model)
theta[0] += h
model.set_flat(theta)
print("analytic:", grads.flat()[0], " numeric:", (up - down) / (2 * h))
