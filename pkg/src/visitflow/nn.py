"""Minimal dense-network toolkit with hand-written backpropagation.

Parameters live in a flat ``dict[str, ndarray]`` so that optimizers, gradient
checks and serialization can treat every model uniformly.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, DivergenceError


def _relu(a):
    return np.maximum(a, 0.0)


def _tanh(a):
    return np.tanh(a)


ACTIVATIONS = ("relu", "tanh", "identity")


class MLP:
    """Stack of affine layers ``sizes[0] -> ... -> sizes[-1]``.

    The activation is applied after every hidden layer and, when
    ``final_activation`` is true, after the last one too.
    """

    def __init__(self, name, sizes, activation="relu", final_activation=False):
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise ConfigError(f"{name}: layer sizes must be >= 1, got {list(sizes)}")
        self.name = name
        self.sizes = [int(s) for s in sizes]
        self.activation = activation
        self.final_activation = final_activation

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    @property
    def out_dim(self):
        return self.sizes[-1]

    def _key(self, kind, i):
        return f"{self.name}.{kind}{i}"

    def _activated(self, i):
        return i < self.n_layers - 1 or self.final_activation

    def init(self, rng, params):
        for i in range(self.n_layers):
            fan_in, fan_out = self.sizes[i], self.sizes[i + 1]
            gain = 2.0 if self.activation == "relu" else 1.0
            params[self._key("W", i)] = rng.normal(0.0, np.sqrt(gain / fan_in), size=(fan_in, fan_out))
            params[self._key("b", i)] = np.zeros(fan_out)
        return params

    def forward(self, params, X, trace=None):
        cache = [X]
        h = X
        for i in range(self.n_layers):
            a = h @ params[self._key("W", i)] + params[self._key("b", i)]
            if self._activated(i):
                if self.activation == "relu":
                    if trace is not None:
                        trace.append(a > 0)
                    h = _relu(a)
                elif self.activation == "tanh":
                    h = _tanh(a)
                else:
                    h = a
            else:
                h = a
            cache.append(h)
        return h, cache

    def backward(self, params, cache, dout, grads):
        """Accumulate parameter gradients into ``grads``; return d(loss)/d(input)."""
        g = dout
        for i in reversed(range(self.n_layers)):
            h = cache[i + 1]
            if self._activated(i):
                if self.activation == "relu":
                    g = g * (h > 0)
                elif self.activation == "tanh":
                    g = g * (1.0 - h * h)
            x = cache[i]
            kW, kb = self._key("W", i), self._key("b", i)
            dW = x.T @ g
            db = g.sum(axis=0)
            grads[kW] = grads[kW] + dW if kW in grads else dW
            grads[kb] = grads[kb] + db if kb in grads else db
            g = g @ params[kW].T
        return g


class Adam:
    def __init__(self, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if not learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {learning_rate}")
        self.lr = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k in sorted(grads):
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def mse_loss(pred, y):
    diff = pred - y
    n = max(len(y), 1)
    return float(np.dot(diff, diff) / n), 2.0 * diff / n


def grouped_softmax(scores, starts):
    """Softmax of ``scores`` within contiguous segments beginning at ``starts``."""
    if len(scores) == 0:
        return np.zeros(0)
    seg_max = np.maximum.reduceat(scores, starts)
    lengths = np.diff(np.r_[starts, len(scores)])
    e = np.exp(scores - np.repeat(seg_max, lengths))
    return e / np.repeat(np.add.reduceat(e, starts), lengths)


def grouped_softmax_ce(scores, y, starts):
    """Cross-entropy between per-segment softmax and per-segment normalized targets.

    Segments whose targets sum to zero carry no information and are skipped.
    The loss is averaged over the remaining segments.
    """
    lengths = np.diff(np.r_[starts, len(scores)])
    mass = np.add.reduceat(y, starts)
    live = mass > 0
    n_live = int(live.sum())
    if n_live == 0:
        return 0.0, np.zeros_like(scores)
    row_mass = np.repeat(mass, lengths)
    row_live = np.repeat(live, lengths)
    t = np.where(row_live, y / np.where(row_mass > 0, row_mass, 1.0), 0.0)
    seg_max = np.maximum.reduceat(scores, starts)
    shifted = scores - np.repeat(seg_max, lengths)
    log_z = np.log(np.add.reduceat(np.exp(shifted), starts))
    log_p = shifted - np.repeat(log_z, lengths)
    loss = -float(np.sum(t * log_p)) / n_live
    grad = np.where(row_live, np.exp(log_p) - t, 0.0) / n_live
    return loss, grad


def gradient_check(loss_and_grads, params, eps=1e-5, max_entries=None, rng=None, floor=1e-5):
    """Compare analytic gradients against central finite differences.

    ``loss_and_grads(params, trace)`` must return ``(loss, grads)`` and may
    append rectifier masks to ``trace``.  Entries whose perturbation flips any
    rectifier are skipped, since the loss is not differentiable across the
    kink.  Returns ``{name: (relative_error, n_checked, n_skipped)}`` where the
    relative error is ``|a - n| / max(|a|, |n|, floor)`` over the checked
    entries.  The floor keeps gradients that vanish identically (e.g. a bias
    under a shift-invariant softmax) from turning rounding noise into a
    relative error of 1.
    """
    base_trace = []
    _, analytic = loss_and_grads(params, base_trace)
    base_sig = _signature(base_trace)
    out = {}
    for name in sorted(params):
        p = params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False))
        a_vals, n_vals = [], []
        skipped = 0
        g = analytic.get(name, np.zeros_like(p)).reshape(-1)
        for j in idx:
            old = flat[j]
            flat[j] = old + eps
            tr_p = []
            lp, _ = loss_and_grads(params, tr_p)
            flat[j] = old - eps
            tr_m = []
            lm, _ = loss_and_grads(params, tr_m)
            flat[j] = old
            if _signature(tr_p) != base_sig or _signature(tr_m) != base_sig:
                skipped += 1
                continue
            a_vals.append(g[j])
            n_vals.append((lp - lm) / (2 * eps))
        a_vals, n_vals = np.asarray(a_vals), np.asarray(n_vals)
        denom = max(np.linalg.norm(a_vals), np.linalg.norm(n_vals), floor)
        rel = 0.0 if denom == 0 else float(np.linalg.norm(a_vals - n_vals) / denom)
        out[name] = (rel, len(a_vals), skipped)
    return out


def _signature(trace):
    return b"".join(np.packbits(t.reshape(-1)).tobytes() for t in trace)


def train_epochs(
    params,
    step_loss,
    batches,
    epochs,
    optimizer,
    eval_train,
    eval_val=None,
    rng=None,
):
    """Generic minibatch loop.

    ``batches(rng)`` yields batch descriptors for one epoch; ``step_loss(params,
    batch)`` returns ``(loss, grads)``.  After each epoch the full-batch
    training (and validation) loss is recorded.
    """
    train_curve, val_curve = [], []
    for epoch in range(1, epochs + 1):
        for batch in batches(rng):
            loss, grads = step_loss(params, batch)
            if not np.isfinite(loss):
                raise DivergenceError(epoch, loss)
            optimizer.step(params, grads)
        tl = eval_train(params)
        if not np.isfinite(tl):
            raise DivergenceError(epoch, tl)
        train_curve.append(tl)
        val_curve.append(eval_val(params) if eval_val is not None else float("nan"))
    return train_curve, val_curve
