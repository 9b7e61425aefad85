"""Walk through recursive pooling on a hand-made two-speaker toy.

Run: python3 demos/pooling_walkthrough.py
"""
import numpy as np

from recpool.pooling import (attention_baseline, expand_context, init_pooling, length_ratio,
                             run_recursion, weighted_stats)

rng = np.random.default_rng(0)

# frame embeddings H (D x T): dims 0-1 carry "speaker A" in frames 0-4,
# dims 2-3 carry "speaker B" in frames 5-9
D, T = 4, 10
H = 0.1 * rng.standard_normal((D, T))
H[:2, :5] += 2.0
H[2:, 5:] -= 2.0

exp = expand_context(H)
print("utterance mean per dim:", np.round(exp.mu.data, 3))
print("utterance std per dim: ", np.round(exp.sigma.data, 3))
print("expanded frame shape:  ", exp.E.shape)       # 3D x T: frame, mean, std

# hand-set weights: hidden unit d follows |h_d| (two relus), the output layer
# sharpens it, and the coverage term penalizes frames already attended
params = init_pooling(D, E=3, bottleneck=2 * D, seed=1)
eye = np.eye(D)
params.W1.data[:] = 0.0
params.W1.data[:D, :D], params.W1.data[D:, :D] = eye, -eye
params.W2.data[:] = 3.0 * np.hstack([eye, eye])
params.Wc.data[:] = -40.0 * np.vstack([eye, eye])

# step 1 is ordinary attentive statistics pooling
A1, _ = attention_baseline(exp, params)
print("\nstep-1 attention rows sum to", np.round(A1.data.sum(axis=1), 12))
mu, sd = weighted_stats(H, A1)
print("step-1 weighted mean:", np.round(mu.data, 3))

# later steps see the coverage of what was already attended
steps = run_recursion(H, params, n_steps=3)
for n, s in enumerate(steps, 1):
    print(f"\nstep {n}: coverage row sums {np.round(s.coverage.data.sum(axis=1), 12)}"
          f"  stop score p = {float(s.p):.3f}")
    print("  attention (dim 0):", np.round(s.A.data[0], 2))

# these weights leave the stop score untrained; a trained model stops once p >= 0.5
# longer inputs rescale coverage by T_infer / T_train before the hidden layer
print("\nlength ratio for 450 frames at T_train = 150:", length_ratio(450, 150))
