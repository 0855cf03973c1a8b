"""ReLU surrogates for the exact log-odds, and the network-size calculators.

The network is a plain fully connected ReLU MLP written directly in numpy.
It is trained by full-batch Adam on the mean squared logit error;
its sup-norm error is measured afterwards on a fine grid, and only that
measured value enters any certificate.
"""

import math
from dataclasses import dataclass

import numpy as np

from ._normal import log_ndtr_diff, log_two_sided_tail, norm_logpdf
from .mixture_models import LogitSource, build_partition, exact_log_odds

CHECKPOINT_MAGIC = "gmdiff-relu-mlp v1"


@dataclass(frozen=True)
class MLPConfig:
    """Architecture and Adam schedule.

    The step size decays geometrically from ``step_size`` to
    ``step_size * final_step_ratio`` over ``steps`` iterations.
    """

    hidden_widths: tuple = (128, 128)
    seed: int = 0
    steps: int = 5000
    step_size: float = 1e-2
    final_step_ratio: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    grid_points: int = 2048

    def __post_init__(self):
        if any(int(w) != w or w < 1 for w in self.hidden_widths):
            raise ValueError("hidden widths must be integers >= 1")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")


@dataclass(frozen=True)
class SizeBudget:
    N_param: int
    L_param: int
    width_bound: int
    depth_bound: int
    eta_bound: float


class ReluNet:
    """``z -> out_shift + out_scale * MLP(clip(z) / R)``.

    The input and output affine maps are fixed at construction; only the
    layer weights and biases are trained.
    """

    def __init__(self, widths, R, out_shift, out_scale, params=None, seed=0):
        self.widths = tuple(int(w) for w in widths)
        self.R = float(R)
        self.out_shift = np.asarray(out_shift, dtype=float)
        self.out_scale = np.asarray(out_scale, dtype=float)
        self.seed = int(seed)
        if params is None:
            params = self.init_params(np.random.default_rng(seed))
        self.params = np.asarray(params, dtype=float)
        if self.params.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {self.params.size}")

    @property
    def shapes(self):
        return [(o, i) for i, o in zip(self.widths[:-1], self.widths[1:])]

    @property
    def n_params(self):
        return sum(o * i + o for o, i in self.shapes)

    def init_params(self, rng):
        chunks = []
        for o, i in self.shapes:
            a = math.sqrt(6.0 / (i + o))
            chunks.append(rng.uniform(-a, a, o * i))
            chunks.append(rng.uniform(-a, a, o))
        return np.concatenate(chunks)

    def layers(self, params=None):
        params = self.params if params is None else params
        out, k = [], 0
        for o, i in self.shapes:
            W = params[k:k + o * i].reshape(o, i)
            k += o * i
            b = params[k:k + o]
            k += o
            out.append((W, b))
        return out

    def raw(self, u, params=None):
        """Network output before the output affine map; ``u`` has shape (k,)."""
        a = np.asarray(u, dtype=float).reshape(-1, 1)
        layers = self.layers(params)
        for W, b in layers[:-1]:
            a = np.maximum(a @ W.T + b, 0.0)
        W, b = layers[-1]
        return a @ W.T + b

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        u = np.clip(z, -self.R, self.R) / self.R
        out = self.out_shift + self.out_scale * self.raw(u.ravel())
        return out.reshape(z.shape + (self.widths[-1],))

    def loss_and_grad(self, u, target, params=None):
        """Mean squared logit error over grid and outputs, with its gradient."""
        params = self.params if params is None else params
        layers = self.layers(params)
        acts = [np.asarray(u, dtype=float).reshape(-1, 1)]
        pre = []
        for W, b in layers[:-1]:
            pre.append(acts[-1] @ W.T + b)
            acts.append(np.maximum(pre[-1], 0.0))
        W, b = layers[-1]
        out = self.out_shift + self.out_scale * (acts[-1] @ W.T + b)
        err = out - target
        loss = np.mean(err ** 2)
        g = 2.0 * err * self.out_scale / err.size
        grads = []
        for idx in range(len(layers) - 1, -1, -1):
            W, _ = layers[idx]
            grads.append((g.sum(axis=0), g.T @ acts[idx]))
            if idx:
                g = (g @ W) * (pre[idx - 1] > 0.0)
        flat = []
        for gb, gW in reversed(grads):
            flat.extend((gW.ravel(), gb))
        return loss, np.concatenate(flat)


def training_grid(spec, points):
    return np.linspace(-spec.R, spec.R, points)


def train_relu_net(inst, spec, cfg):
    """Fit a :class:`ReluNet` to the exact log-odds on the window."""
    z = training_grid(spec, cfg.grid_points)
    target = exact_log_odds(inst, spec, z)
    shift = target.mean(axis=0)
    scale = np.maximum(target.std(axis=0), 1e-3)
    net = ReluNet((1,) + tuple(cfg.hidden_widths) + (spec.n,), spec.R, shift, scale, seed=cfg.seed)
    u = z / spec.R
    params = net.params.copy()
    m1 = np.zeros_like(params)
    m2 = np.zeros_like(params)
    gamma = cfg.final_step_ratio ** (1.0 / max(cfg.steps, 1))
    lr = cfg.step_size
    for k in range(1, cfg.steps + 1):
        loss, grad = net.loss_and_grad(u, target, params)
        if not np.isfinite(loss):
            raise FloatingPointError("non-finite training loss; reduce step_size")
        m1 = cfg.beta1 * m1 + (1.0 - cfg.beta1) * grad
        m2 = cfg.beta2 * m2 + (1.0 - cfg.beta2) * grad ** 2
        params -= lr * (m1 / (1.0 - cfg.beta1 ** k)) / (np.sqrt(m2 / (1.0 - cfg.beta2 ** k)) + 1e-12)
        lr *= gamma
    net.params = params
    return net


def measure_sup_gap(source, inst, spec, points=4096):
    """max_j sup_z |source_j(z) - exact_j(z)| over an equispaced window grid."""
    z = np.concatenate((np.linspace(-spec.R, spec.R, points), [-spec.R, spec.R]))
    return float(np.max(np.abs(source(z) - exact_log_odds(inst, spec, z))))


def neural_logit_source(net, inst, spec, points=4096):
    probe = LogitSource("neural", net, 0.0)
    return LogitSource("neural", net, measure_sup_gap(probe, inst, spec, points))


def train_logit_net(inst, spec, cfg):
    """Trained, clipped ReLU logits with their measured sup-error."""
    return neural_logit_source(train_relu_net(inst, spec, cfg), inst, spec)


def size_calculator(m, s, d, N, L, lambda_max):
    """Width/depth/error guarantees of the constructive ReLU approximation."""
    for name, v in (("m", m), ("s", s), ("d", d), ("N", N), ("L", L)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be an integer >= 1, got {v}")
    if lambda_max < 0:
        raise ValueError("lambda_max must be non-negative")
    width = m * 17 * s ** (d + 1) * 3 ** d * d * (N + 2) * math.log2(8 * N)
    depth = 18 * s ** 2 * (L + 2) * math.log2(4 * L) + 2 * d
    eta = 85 * (s + 1) ** d * 8 ** s * lambda_max * float(N) ** (-2 * s / d) * float(L) ** (-2 * s / d)
    return SizeBudget(int(N), int(L), math.floor(width + 1e-9), math.floor(depth + 1e-9), eta)


def example_budget(n, T, c_lambda):
    """Network size parameters ``N = L`` that push the logit error below 1/(4Tn)."""
    if n < 1 or T < 1 or not c_lambda > 0:
        raise ValueError("need n, T >= 1 and c_lambda > 0")
    k = math.ceil((5440.0 * T * c_lambda) ** 0.25 * n ** (9.0 / 28.0) - 1e-12)
    return k, k


def log_odds_derivative(inst, spec, z):
    """d/dz of the exact log-odds, shape ``z.shape + (n,)``."""
    z = np.asarray(z, dtype=float)[..., None]
    s = inst.sigma
    a, b = (spec.edges[:-1] - z) / s, (spec.edges[1:] - z) / s
    lg = log_ndtr_diff(a, b)
    d_int = (np.exp(norm_logpdf(a) - lg) - np.exp(norm_logpdf(b) - lg)) / s
    lo, hi = (-spec.L - z) / s, (spec.L - z) / s
    lg0 = log_two_sided_tail(lo, hi)
    d_rem = (np.exp(norm_logpdf(hi) - lg0) - np.exp(norm_logpdf(lo) - lg0)) / s
    return d_int - d_rem


def log_odds_complexity(inst, spec, points=2049):
    """Sup of the log-odds, of their derivative, and the C^1 norm after rescaling to [0, 1]."""
    z = np.linspace(-spec.R, spec.R, points)
    lam = np.abs(exact_log_odds(inst, spec, z))
    dlam = np.abs(log_odds_derivative(inst, spec, z))
    c1 = np.max(lam.max(axis=0) + 2.0 * spec.R * dlam.max(axis=0))
    return {"sup_logit": float(lam.max()), "sup_derivative": float(dlam.max()), "c1_norm": float(c1)}


def estimate_c_lambda(inst, n_list, points=2049):
    """Empirical constant in ``Lambda_max <= C n^(2/7)`` over a resolution sweep."""
    return max(log_odds_complexity(inst, build_partition(n), points)["c1_norm"] / n ** (2.0 / 7.0)
               for n in n_list)


def save_checkpoint(net, path):
    """Write a text checkpoint; see README for the layout."""
    with open(path, "w") as fh:
        fh.write(f"# {CHECKPOINT_MAGIC}\n")
        fh.write("widths " + " ".join(str(w) for w in net.widths) + "\n")
        fh.write(f"seed {net.seed}\n")
        fh.write(f"window {net.R!r}\n")
        fh.write(f"count {net.n_params}\n")
        for arr in (net.out_shift, net.out_scale, net.params):
            fh.write("\n".join(repr(float(v)) for v in arr) + "\n")


def load_checkpoint(path):
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines[0] != f"# {CHECKPOINT_MAGIC}":
        raise ValueError(f"{path}: not a gmdiff checkpoint")
    header = dict(line.split(" ", 1) for line in lines[1:5])
    widths = [int(w) for w in header["widths"].split()]
    count = int(header["count"])
    values = np.array([float(v) for v in lines[5:] if v])
    n_out = widths[-1]
    if values.size != 2 * n_out + count:
        raise ValueError(f"{path}: expected {2 * n_out + count} values, found {values.size}")
    return ReluNet(widths, float(header["window"]), values[:n_out], values[n_out:2 * n_out],
                   values[2 * n_out:], seed=int(header["seed"]))
