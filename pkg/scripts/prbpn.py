"""
PRBPN: recurrent back-projection network lifting a window of 2n+1 coarse RSS
slices to one fine slice at 8x the transverse resolution.

    L_t          = ConvBlock(I_t)
    M_k          = ConvBlock([I_t, I_k, |I_t - I_k|])
    wdiff_k      = sigmoid(conv(heat_k)) * heat_k,   heat_k = mean_c |I_t - I_k|
    H            = refine(NetE(L, M), L)            (L <- NetD(H) along the chain)
    SR_t         = Conv([H_t, H_{t-1}, ..., H_{t+n}])
"""
from __future__ import annotations

import zlib
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from tensorcore import (
    ConvParams,
    Tensor,
    Xoshiro256,
    absolute,
    concat,
    conv2d,
    conv_transpose2d,
    load_bundle,
    mean,
    prelu,
    save_bundle,
    sigmoid,
)

# --- CONFIGURATION ---
DEFAULT_BASE_CHANNELS = 32
DEFAULT_RESBLOCKS = 3
DEFAULT_REFINE_ITERS = 3
DEFAULT_CONTEXT_RADIUS = 2
DEFAULT_BETA = 1e-4
PRELU_INIT = 0.25
INIT_STREAM_BASE = 1 << 32  # parameter stream = INIT_STREAM_BASE + crc32(name)

# scale -> (kernel, stride, padding) of the projection convolutions
PROJECTION_GEOMETRY = {2: (6, 2, 2), 4: (8, 4, 2), 8: (12, 8, 2)}


def projection_geometry(scale):
    if scale not in PROJECTION_GEOMETRY:
        raise ValueError(f"No projection geometry for scale x{scale}. Supported: {sorted(PROJECTION_GEOMETRY)}")
    return PROJECTION_GEOMETRY[scale]


@dataclass(frozen=True)
class PrbpnConfig:
    scale: int = 8
    base_channels: int = DEFAULT_BASE_CHANNELS
    resblocks_per_net: int = DEFAULT_RESBLOCKS
    refine_iters: int = DEFAULT_REFINE_ITERS
    context_radius: int = DEFAULT_CONTEXT_RADIUS
    beta: float = DEFAULT_BETA
    dwtf_enabled: bool = True

    def __post_init__(self):
        projection_geometry(self.scale)
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.resblocks_per_net < 0 or self.refine_iters < 0 or self.context_radius < 0:
            raise ValueError("resblocks_per_net, refine_iters and context_radius must be >= 0")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.dwtf_enabled and self.context_radius == 0:
            raise ValueError("Temporal fusion needs neighbors; use context_radius >= 1 or disable DWTF")

    @property
    def window_length(self):
        return 2 * self.context_radius + 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def prbpn_loss(sr, hr, beta):
    """Mean L1 reconstruction plus beta times the mean absolute forward differences of SR."""
    if sr.shape != hr.shape:
        raise ValueError(f"SR {sr.shape} and HR {hr.shape} differ in shape")
    rec = mean(absolute(sr - hr))
    smooth = smoothness(sr)
    return rec + beta * smooth


def smoothness(sr):
    dx = sr[:, :, 1:, :] - sr[:, :, :-1, :]
    dy = sr[:, :, :, 1:] - sr[:, :, :, :-1]
    return mean(absolute(dx)) + mean(absolute(dy))


class Prbpn:
    def __init__(self, config=None, seed=0, init=True):
        self.config = config or PrbpnConfig()
        self.seed = int(seed)
        self.params = OrderedDict()
        self._build()
        if init:
            self.reset_parameters(self.seed)

    # ------------------------------------------
    # Parameters
    # ------------------------------------------
    def _tensor(self, name, shape):
        t = Tensor(np.zeros(shape), name=name)
        self.params[name] = t
        return t

    def _conv(self, name, in_c, out_c, k, stride=1, padding=None, transposed=False):
        padding = k // 2 if padding is None else padding
        shape = (in_c, out_c, k, k) if transposed else (out_c, in_c, k, k)
        return ConvParams(
            weight=self._tensor(f"{name}.weight", shape),
            bias=self._tensor(f"{name}.bias", (out_c,)),
            stride=stride,
            padding=padding,
        )

    def _resblocks(self, name):
        c = self.config.base_channels
        return [
            (self._conv(f"{name}.res{i}.conv1", c, c, 3),
             self._tensor(f"{name}.res{i}.a", ()),
             self._conv(f"{name}.res{i}.conv2", c, c, 3))
            for i in range(self.config.resblocks_per_net)
        ]

    def _build(self):
        cfg = self.config
        c = cfg.base_channels
        k, s, p = projection_geometry(cfg.scale)

        self.feat0 = self._conv("feat0", 1, c, 3)
        self.feat0_a = self._tensor("feat0.a", ())
        self.featM = self._conv("featM", 3, c, 3)
        self.featM_a = self._tensor("featM.a", ())
        self.attn_conv = self._conv("attn", 1, 1, 3) if cfg.dwtf_enabled else None

        self.up = self._conv("up.proj", 2 * c, c, k, s, p, transposed=True)
        self.up_a = self._tensor("up.a", ())
        self.up_res = self._resblocks("up")

        self.down = self._conv("down.proj", c, c, k, s, p)
        self.down_a = self._tensor("down.a", ())
        self.down_res = self._resblocks("down")

        self.res_blocks = self._resblocks("refine")
        self.res_up = self._conv("refine.proj", c, c, k, s, p, transposed=True)

        self.recon = self._conv("recon", cfg.window_length * c, 1, 3)
        self.params = OrderedDict(sorted(self.params.items()))

    def reset_parameters(self, seed):
        """Fan-in uniform weights, zero biases, PReLU slopes 0.25; one rng stream per parameter name."""
        for name, t in self.params.items():
            if name.endswith(".bias"):
                t.data = np.zeros(t.shape)
            elif name.endswith(".a"):
                t.data = np.full(t.shape, PRELU_INIT)
            else:
                bound = np.sqrt(1.0 / (t.shape[1] * t.shape[2] * t.shape[3]))
                rng = Xoshiro256(seed, INIT_STREAM_BASE + zlib.crc32(name.encode("utf-8")))
                t.data = rng.uniform_array(t.shape, -bound, bound)

    def parameters(self):
        return self.params

    def n_parameters(self):
        return int(sum(t.data.size for t in self.params.values()))

    def state_dict(self):
        return OrderedDict((name, t.data.copy()) for name, t in self.params.items())

    def load_state_dict(self, arrays):
        missing = set(self.params) ^ set(arrays)
        if missing:
            raise ValueError(f"State does not match the model parameters: {sorted(missing)}")
        for name, t in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"Parameter '{name}' has shape {t.shape}, state gives {arr.shape}")
            t.data = arr.copy()

    # ------------------------------------------
    # Building blocks
    # ------------------------------------------
    def _run_resblocks(self, x, blocks):
        for conv1, a, conv2 in blocks:
            x = x + conv2d(prelu(conv2d(x, conv1), a), conv2)
        return x

    def extract_target(self, i_t):
        return prelu(conv2d(i_t, self.feat0), self.feat0_a)

    def neighbor_features(self, i_t, i_k):
        if i_t.shape != i_k.shape:
            raise ValueError(f"Neighbor slice {i_k.shape} differs from target {i_t.shape}")
        diff = absolute(i_t - i_k)
        return prelu(conv2d(concat([i_t, i_k, diff], axis=1), self.featM), self.featM_a)

    def dwtf(self, i_t, neighbors, features, trace=None):
        """
        Difference-weighted fusion. Returns (modulated neighbor features,
        summed context). With fusion disabled the features pass through and
        the context is zero.
        """
        if not self.config.dwtf_enabled:
            zero = Tensor(np.zeros(features[0].shape if features else
                                   (i_t.shape[0], self.config.base_channels) + i_t.shape[2:]))
            return list(features), zero
        if not neighbors:
            raise ValueError("Temporal fusion needs at least one neighbor slice")

        fused, context = [], None
        for i_k, m_k in zip(neighbors, features):
            heat = mean(absolute(i_t - i_k), axis=1, keepdims=True)
            attn = sigmoid(conv2d(heat, self.attn_conv))
            wdiff = attn * heat
            weighted = m_k * wdiff
            fused.append(m_k + weighted)
            context = weighted if context is None else context + weighted
            if trace is not None:
                trace.setdefault("attn", []).append(attn.data)
                trace.setdefault("wdiff", []).append(wdiff.data)
        return fused, context

    def up_project(self, lr, m):
        """NetE: LR features plus neighbor context -> HR state (x scale)."""
        h = prelu(conv_transpose2d(concat([lr, m], axis=1), self.up), self.up_a)
        return self._run_resblocks(h, self.up_res)

    def back_project(self, h):
        """NetD: HR state -> LR features (/ scale)."""
        lr = prelu(conv2d(h, self.down), self.down_a)
        return self._run_resblocks(lr, self.down_res)

    def residual_net(self, e_lr):
        return conv_transpose2d(self._run_resblocks(e_lr, self.res_blocks), self.res_up)

    def refine(self, h, l_ref, n_iters=None):
        """Error feedback: H <- H + res_net(L_ref - NetD(H)), shared weights across iterations."""
        n_iters = self.config.refine_iters if n_iters is None else n_iters
        for _ in range(n_iters):
            e_lr = l_ref - self.back_project(h)
            if e_lr.shape != l_ref.shape:
                raise ValueError(f"Back-projection gave {e_lr.shape}, expected {l_ref.shape}")
            h = h + self.residual_net(e_lr)
        return h

    # ------------------------------------------
    # Forward / inference
    # ------------------------------------------
    def _as_window(self, window):
        data = window.data if isinstance(window, Tensor) else np.asarray(window, dtype=np.float64)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4 or data.shape[1] != self.config.window_length:
            raise ValueError(
                f"Expected a window of {self.config.window_length} slices (b, 2n+1, h, w), got {data.shape}"
            )
        return window if isinstance(window, Tensor) and window.ndim == 4 else Tensor(data)

    def neighbor_order(self):
        """Window indices of the neighbors: t-1 .. t-n, then t+1 .. t+n."""
        n = self.config.context_radius
        return [n - k for k in range(1, n + 1)] + [n + k for k in range(1, n + 1)]

    def forward(self, window, trace=None):
        x = self._as_window(window)
        n = self.config.context_radius
        i_t = x[:, n:n + 1]
        neighbors = [x[:, j:j + 1] for j in self.neighbor_order()]

        l_t = self.extract_target(i_t)
        features = [self.neighbor_features(i_t, i_k) for i_k in neighbors]
        fused, context = self.dwtf(i_t, neighbors, features, trace)

        states = [self.refine(self.up_project(l_t, context), l_t)]
        l_cur = l_t
        for m_k in fused:
            h = self.refine(self.up_project(l_cur, m_k), l_cur)
            states.append(h)
            l_cur = self.back_project(h)

        sr = conv2d(concat(states, axis=1), self.recon)
        if trace is not None:
            trace["states"] = len(states)
            trace["recon_in_channels"] = sum(s.shape[1] for s in states)
        return sr

    def loss(self, sr, hr):
        return prbpn_loss(sr, hr, self.config.beta)

    def predict(self, window):
        """SR slice(s) clamped to [0, 1]; (h, w) input windows give an (8h, 8w) float32 slice."""
        squeeze = np.asarray(window.data if isinstance(window, Tensor) else window).ndim == 3
        sr = np.clip(self.forward(window).data[:, 0], 0.0, 1.0).astype(np.float32)
        return sr[0] if squeeze else sr


# ==========================================
# PERSISTENCE
# ==========================================
def save_model(model, path, extra=None):
    header = {"kind": "prbpn", "config": model.config.to_dict(), "seed": model.seed, "extra": extra or {}}
    return save_bundle(path, model.state_dict(), header, dtype="f32")


def load_model(path):
    header, arrays = load_bundle(path)
    if header.get("kind") not in ("prbpn", "checkpoint"):
        raise ValueError(f"'{path}' does not hold PRBPN weights")
    model = Prbpn(PrbpnConfig.from_dict(header["config"]), seed=header.get("seed", 0), init=False)
    model.load_state_dict({name: arrays[name] for name in model.params})
    return model
