"""Pure numpy implementation of the dense MLP kernels.

Layer ``l`` maps ``acts[l]`` (n, in) to ``acts[l + 1]`` (n, out) via
``acts[l] @ W[l] + b[l]`` followed by a rectifier on every layer but the last.
"""
import numpy as np


def mlp_forward(weights, biases, X):
    acts = [X]
    a = X
    last = len(weights) - 1
    for l, (W, b) in enumerate(zip(weights, biases)):
        z = a @ W
        z += b
        if l < last:
            np.maximum(z, 0.0, out=z)
        acts.append(z)
        a = z
    return acts


def mlp_backward(weights, acts, G, G_pen=None):
    """Return (dW, db) lists for the loss whose gradient w.r.t. logits is ``G``.

    ``G_pen``, when given, is an extra gradient on the penultimate activation
    ``acts[-2]``; it is ignored when the net has no hidden layer.
    """
    L = len(weights)
    dW = [None] * L
    db = [None] * L
    delta = G
    for l in range(L - 1, -1, -1):
        a_in = acts[l]
        dW[l] = a_in.T @ delta
        db[l] = delta.sum(axis=0)
        if l == 0:
            break
        da = delta @ weights[l].T
        if l == L - 1 and G_pen is not None:
            da = da + G_pen
        # rectifier subgradient is 0 at 0
        delta = da * (a_in > 0.0)
    return dW, db
