"""Reference noise predictor: a per-token two-layer perceptron.

Each vision token is concatenated with a sinusoidal embedding of t and
the mean of the text tokens, then passed through tanh(x W1 + b1) W2 + b2.
Weights are shared across tokens and stored as one flat vector so the
optimizer and checkpoint code never need to know the layout.
"""

from __future__ import annotations

import numpy as np

from .tokens import TokenSequence


def timestep_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


class MLPDenoiser:
    def __init__(self, dim: int, hidden: int = 64, temb_dim: int = 16, seed: int = 0):
        self.dim = dim
        self.hidden = hidden
        self.temb_dim = temb_dim
        self.in_dim = 2 * dim + temb_dim
        self._shapes = [
            ("W1", (self.in_dim, hidden)),
            ("b1", (hidden,)),
            ("W2", (hidden, dim)),
            ("b2", (dim,)),
        ]
        rng = np.random.default_rng(seed)
        self.theta = np.concatenate([
            rng.normal(0.0, 1.0 / np.sqrt(self.in_dim), self.in_dim * hidden),
            np.zeros(hidden),
            rng.normal(0.0, 1.0 / np.sqrt(hidden), hidden * dim),
            np.zeros(dim),
        ])

    @property
    def n_params(self) -> int:
        return self.theta.size

    def unpack(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        if theta.size != self.n_params:
            raise ValueError(f"theta has {theta.size} entries, expected {self.n_params}")
        out, pos = {}, 0
        for name, shape in self._shapes:
            n = int(np.prod(shape))
            out[name] = theta[pos:pos + n].reshape(shape)
            pos += n
        return out

    def _inputs(self, x, t, ctx):
        B, L, _ = x.shape
        temb = timestep_embedding(t, self.temb_dim)
        return np.concatenate([
            x,
            np.broadcast_to(temb[:, None, :], (B, L, self.temb_dim)),
            np.broadcast_to(ctx[:, None, :], (B, L, self.dim)),
        ], axis=2)

    def forward(self, x: np.ndarray, t: np.ndarray, ctx: np.ndarray,
                theta: np.ndarray | None = None) -> np.ndarray:
        """Batched prediction. x: (B, L, D), t: (B,), ctx: (B, D)."""
        p = self.unpack(self.theta if theta is None else theta)
        h = np.tanh(self._inputs(x, t, ctx) @ p["W1"] + p["b1"])
        return h @ p["W2"] + p["b2"]

    def loss_and_grad(self, x, t, ctx, eps, theta=None) -> tuple[float, np.ndarray]:
        theta = self.theta if theta is None else theta
        p = self.unpack(theta)
        inp = self._inputs(x, t, ctx)
        h = np.tanh(inp @ p["W1"] + p["b1"])
        out = h @ p["W2"] + p["b2"]
        diff = out - eps
        loss = float(np.mean(diff ** 2))

        d_out = 2.0 * diff / diff.size
        flat_h = h.reshape(-1, self.hidden)
        flat_dout = d_out.reshape(-1, self.dim)
        g_W2 = flat_h.T @ flat_dout
        g_b2 = flat_dout.sum(axis=0)
        d_pre = (flat_dout @ p["W2"].T) * (1.0 - flat_h ** 2)
        g_W1 = inp.reshape(-1, self.in_dim).T @ d_pre
        g_b1 = d_pre.sum(axis=0)
        grad = np.concatenate([g_W1.ravel(), g_b1, g_W2.ravel(), g_b2])
        return loss, grad

    def evaluate(self, seq: TokenSequence, t: int, theta: np.ndarray | None = None) -> np.ndarray:
        """Predict noise for the vision block of a concatenated sequence."""
        vision = seq.vision
        if vision.shape[1] != self.dim:
            raise ValueError(f"token dim {vision.shape[1]} != denoiser dim {self.dim}")
        text = seq.text
        ctx = text.mean(axis=0) if len(text) else np.zeros(self.dim)
        out = self.forward(vision[None], np.array([t]), ctx[None], theta)
        return out[0]
