"""Independent oracles used by the tests.

These deliberately reimplement results the package computes, using a different
route (enumeration, straight-line loops, finite differences), and must stay
independent of the implementation they check.
"""

from itertools import product

import numpy as np

from pathdetect import nn

BLOB_CENTERS = ((0.1, 0.1), (0.9, 0.1), (0.5, 0.95))


def svdd_dual_oracle(K, nu):
    """Brute-force the SVDD dual by active-set enumeration.

    Every assignment of coordinates to {0, C, free} yields an equality-
    constrained QP on the free block; all primal-feasible stationary points are
    collected and the best objective wins. Exact for this convex problem at
    n <= ~8. Returns (max-form dual objective, alpha).
    """
    K = np.asarray(K, dtype=np.float64)
    n = K.shape[0]
    C = 1.0 / (n * nu)
    diag = np.diag(K)
    best_obj, best_alpha = None, None
    for assign in product((0, 1, 2), repeat=n):
        fixed = np.array([0.0 if a == 0 else C for a in assign])
        free = [i for i, a in enumerate(assign) if a == 2]
        bound = [i for i, a in enumerate(assign) if a != 2]
        remainder = 1.0 - fixed[bound].sum()
        if not free:
            if abs(remainder) > 1e-12:
                continue
            alpha = fixed
        else:
            F = np.array(free)
            B = np.array(bound, dtype=int)
            size = len(F)
            A = np.zeros((size + 1, size + 1))
            A[:size, :size] = 2.0 * K[np.ix_(F, F)]
            A[:size, -1] = 1.0
            A[-1, :size] = 1.0
            lin = diag[F].copy()
            if len(B):
                lin -= 2.0 * K[np.ix_(F, B)] @ fixed[B]
            rhs = np.concatenate([lin, [remainder]])
            try:
                sol = np.linalg.solve(A, rhs)
            except np.linalg.LinAlgError:
                sol, *_ = np.linalg.lstsq(A, rhs, rcond=None)
            a_free = sol[:size]
            if np.any(a_free < -1e-10) or np.any(a_free > C + 1e-10):
                continue
            alpha = fixed.copy()
            alpha[F] = np.clip(a_free, 0.0, C)
            if abs(alpha.sum() - 1.0) > 1e-9:
                continue
        obj = alpha @ K @ alpha - alpha @ diag  # min form
        if best_obj is None or obj < best_obj:
            best_obj, best_alpha = obj, alpha
    return -best_obj, best_alpha


def naive_forward_trace(net, x):
    """Per-neuron straight-line recomputation of the activation trace."""
    cur = np.asarray(x, dtype=np.float64)
    layers = net.layers
    param_positions = [i for i, l in enumerate(layers)
                       if isinstance(l, (nn.Dense, nn.Conv2d))]
    last_param = param_positions[-1]
    readouts = []
    if net.trace_input:
        readouts.append(cur.reshape(-1).astype(np.float32))
    for i, layer in enumerate(layers):
        if isinstance(layer, nn.Dense):
            vec = cur.reshape(-1)
            W = layer.weight.astype(np.float64)
            b = layer.bias.astype(np.float64)
            out = np.zeros(layer.width)
            for jout in range(layer.width):
                acc = 0.0
                for jin in range(W.shape[0]):
                    acc += vec[jin] * W[jin, jout]
                out[jout] = acc + b[jout]
            cur = out
        elif isinstance(layer, nn.Conv2d):
            cout, cin, kh, kw = layer.weight.shape
            s, p = layer.stride, layer.pad
            W = layer.weight.astype(np.float64)
            b = layer.bias.astype(np.float64)
            padded = np.zeros((cur.shape[0] + 2 * p, cur.shape[1] + 2 * p, cin))
            padded[p : p + cur.shape[0], p : p + cur.shape[1], :] = cur
            oh = (padded.shape[0] - kh) // s + 1
            ow = (padded.shape[1] - kw) // s + 1
            out = np.zeros((oh, ow, cout))
            for oy in range(oh):
                for ox in range(ow):
                    for co in range(cout):
                        acc = 0.0
                        for ci in range(cin):
                            for u in range(kh):
                                for v in range(kw):
                                    acc += (padded[oy * s + u, ox * s + v, ci]
                                            * W[co, ci, u, v])
                        out[oy, ox, co] = acc + b[co]
            cur = out
        elif isinstance(layer, nn.Relu):
            cur = np.where(cur > 0.0, cur, 0.0)
        elif isinstance(layer, nn.Flatten):
            cur = cur.reshape(-1)
        elif isinstance(layer, nn.Softmax):
            e = np.exp(cur - cur.max())
            cur = e / e.sum()
        if i in param_positions and layer.traced:
            val = cur
            if i + 1 < len(layers) and isinstance(layers[i + 1], nn.Relu):
                val = np.where(val > 0.0, val, 0.0)
            if val.ndim == 3:
                total = 0.0 * val[0, 0]
                for oy in range(val.shape[0]):
                    for ox in range(val.shape[1]):
                        total = total + val[oy, ox]
                val = total / (val.shape[0] * val.shape[1])
            if i == last_param and net.output_readout == "softmax":
                e = np.exp(val - val.max())
                val = e / e.sum()
            readouts.append(val.astype(np.float32))
    return readouts


def central_difference_gradient(net, x, label, h=1e-3):
    """Finite-difference gradient of the cross-entropy loss w.r.t. x."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)

    def loss(vec):
        logits, _ = nn.forward(net, vec.reshape(x.shape))
        z = logits - logits.max()
        return float(np.log(np.exp(z).sum()) - z[label])

    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += h
        minus = flat.copy()
        minus[i] -= h
        grad[i] = (loss(plus) - loss(minus)) / (2.0 * h)
    return grad.reshape(x.shape)


def pair_auroc(scores_normal, scores_anomaly):
    """O(n*m) pair enumeration: P(anomaly < normal) with ties counted half."""
    wins = 0.0
    for a in scores_anomaly:
        for b in scores_normal:
            if a < b:
                wins += 1.0
            elif a == b:
                wins += 0.5
    return wins / (len(scores_normal) * len(scores_anomaly))


def random_mlp(rng, sizes=None, softmax=False):
    """Random small dense network for property tests."""
    if sizes is None:
        depth = int(rng.integers(2, 4))
        sizes = [int(rng.integers(2, 6)) for _ in range(depth + 1)]
    arch = nn.mlp_arch(sizes)
    if softmax:
        arch = arch + [("softmax",)]
    return nn.build_network(arch, seed=int(rng.integers(1_000_000)))


def random_convnet(rng):
    """Tiny conv+dense network on 6x6x1 inputs."""
    arch = [
        ("conv2d", 3, 3, 1, int(rng.integers(2, 4)), 1, 1),
        ("relu",),
        ("conv2d", 3, 3, None, 2, 2, 0),  # cin patched below
        ("relu",),
        ("flatten",),
        ("dense", None, 3),  # in patched below
    ]
    c1 = arch[0][4]
    arch[2] = ("conv2d", 3, 3, c1, 2, 2, 0)
    # 6x6 -> conv pad1 stride1 -> 6x6 -> conv stride2 k3 -> 2x2, 2 channels
    arch[5] = ("dense", 2 * 2 * 2, 3)
    return nn.build_network(arch, seed=int(rng.integers(1_000_000)),
                            input_shape=(6, 6, 1))
