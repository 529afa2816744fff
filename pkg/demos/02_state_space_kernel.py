#!/usr/bin/env python3
"""The state-space layer three ways.

A frozen translated-Legendre system remembers a sliding window of its input.
Discretised with the bilinear rule it can be run step by step, as one long
convolution, or (slowly) by Picard iteration; all three agree.
"""

import numpy as np

from ssmcfar.ssm import (ContinuousSSM, conv_forward, discretize_bilinear, hippo_legt, krylov_kernel,
                         legt_reconstruct, picard_solve, ssm_recurrent_forward)

# Memory: drive a 32-state LegT system and read the last second back out.
N, theta, dt = 32, 1.0, 1e-3
t = np.arange(0, 2.0, dt)
u = np.sin(2 * np.pi * 1.5 * t) * np.exp(-0.3 * t)
A, B = hippo_legt(N, theta)
d = discretize_bilinear(ContinuousSSM(A, B, np.zeros(N)), dt)
_, states = ssm_recurrent_forward(d, u, return_states=True)
lags = np.linspace(0, theta, 101)
recalled = legt_reconstruct(states[-1], lags, theta)
truth = np.interp(t[-1] - lags, t, u)
print(f"window recall error: {np.linalg.norm(recalled - truth) / np.linalg.norm(truth):.4f}")

# Step-by-step versus convolution with the kernel C Abar^j Bbar.
rng = np.random.default_rng(0)
d = discretize_bilinear(ContinuousSSM(A, B, rng.normal(size=N), 0.5), 0.01)
x = rng.normal(size=2048)
gap = np.max(np.abs(ssm_recurrent_forward(d, x) - conv_forward(krylov_kernel(d, x.size), x, d.D)))
print(f"recurrence vs FFT convolution: {gap:.2e}")

# The bilinear rule is second order: halving dt quarters the error.
scalar = ContinuousSSM([[-1.0]], [1.0], [1.0])
for step in (0.1, 0.05, 0.025):
    y = ssm_recurrent_forward(discretize_bilinear(scalar, step), np.ones(int(round(1 / step))))
    print(f"dt = {step:<6} error at t=1: {abs(y[-1] - (1 - np.exp(-1))):.3e}")

# Picard sweeps converge to the same trajectory as the recurrence.
_, rec = ssm_recurrent_forward(discretize_bilinear(scalar, 0.01), np.ones(100), return_states=True)
for sweeps in (5, 20, 80, 200):
    x_pic = picard_solve(scalar, np.ones(100), 0.01, sweeps)
    print(f"{sweeps:3d} Picard sweeps: gap {np.max(np.abs(x_pic - rec)):.2e}")
