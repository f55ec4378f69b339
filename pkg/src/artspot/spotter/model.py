"""Toy spotter network: conv backbone + FPN, dense control-point head, recognizer.

Forward methods return ``(output, cache)``; the matching backward methods
take that cache plus the output gradient, accumulate parameter gradients
into the ``ParamStore`` and return the input gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from ..nn.ops import AvgOverHeight, Conv2d, InstanceNorm, Linear, ReLU, SelfAttention, UpsampleNearest
from ..nn.tensor import ParamStore
from .config import SpotterConfig

FPN_BASE_STRIDES = (4, 8, 16, 32)


class ConvLayer:
    def __init__(self, name, stride=1, padding=1, act=True, input_grad=True):
        self.name = name
        self.input_grad = input_grad
        self.stride = stride
        self.padding = padding
        self.act = act

    def forward(self, store: ParamStore, x):
        conv = Conv2d(self.stride, self.padding, self.input_grad)
        y = conv.forward(x, store[self.name + ".w"], store[self.name + ".b"])
        relu = None
        if self.act:
            relu = ReLU()
            y = relu.forward(y)
        return y, (conv, relu)

    def backward(self, store: ParamStore, handle, gy):
        conv, relu = handle
        if relu is not None:
            (gy,) = relu.backward(gy)
        gx, gw, gb = conv.backward(gy)
        store.grad(self.name + ".w", gw)
        store.grad(self.name + ".b", gb)
        return gx


@dataclass
class DetectionOut:
    stride: int
    cls: np.ndarray  # (N, 1, h, w) logits
    ctr: np.ndarray  # (N, 1, h, w) logits
    offsets: np.ndarray  # (N, 4 n_rcp, h, w) pixels


def _conv_init(rng, c_out, c_in, k, gain=2.0):
    std = math.sqrt(gain / (c_in * k * k))
    return rng.standard_normal((c_out, c_in, k, k)) * std


def prior_offsets(n_rcp, width, height):
    """Offsets of a straight ``width x height`` box centred on the cell."""
    xs = (np.arange(n_rcp) / (n_rcp - 1) - 0.5) * width
    top = np.stack([xs, np.full(n_rcp, -height / 2)], axis=1)
    bottom = np.stack([xs, np.full(n_rcp, height / 2)], axis=1)
    return np.concatenate([top, bottom]).reshape(-1)


class SpotterModel:
    def __init__(self, config: SpotterConfig, store: ParamStore | None = None, seed: int = 0,
                 dtype=np.float32):
        self.config = config.validate()
        self.fpn_strides = sorted(set(FPN_BASE_STRIDES) | set(config.det_strides))
        self.max_stride = max(self.fpn_strides)
        self.out_strides = sorted(set(config.det_strides) | set(config.arm_strides))
        self._build_layers()
        if store is None:
            store = self._init_params(seed)
        self.store = store.astype(dtype)
        self.dtype = np.dtype(dtype)
        missing = set(self.param_shapes()) - set(self.store.names())
        if missing:
            raise ShapeError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")

    # ----------------------------------------------------------------- layout
    def _build_layers(self):
        cfg = self.config
        c2, c4, c8, c16, c32 = cfg.backbone_channels
        F = cfg.channels
        self.stage_channels = {2: c2, 4: c4, 8: c8, 16: c16, 32: c32}
        for s in self.fpn_strides:
            if s > 32:
                self.stage_channels[s] = c32
        self.stages = {
            2: [ConvLayer("bb.s2.0", 2, input_grad=False)],
            4: [ConvLayer("bb.s4.0", 2), ConvLayer("bb.s4.1")],
            8: [ConvLayer("bb.s8.0", 2), ConvLayer("bb.s8.1")],
            16: [ConvLayer("bb.s16.0", 2), ConvLayer("bb.s16.1")],
            32: [ConvLayer("bb.s32.0", 2), ConvLayer("bb.s32.1"), ConvLayer("bb.s32.2")],
        }
        for s in self.fpn_strides:
            if s > 32:
                self.stages[s] = [ConvLayer(f"bb.s{s}.0", 2)]
        self.lateral = {s: ConvLayer(f"fpn.lat{s}", 1, 0, act=False) for s in self.fpn_strides}
        self.smooth = {s: ConvLayer(f"fpn.out{s}", 1, 1, act=False) for s in self.out_strides}
        self.tower = [ConvLayer("det.t0"), ConvLayer("det.t1")]
        self.cls_head = ConvLayer("det.cls", act=False)
        self.ctr_head = ConvLayer("det.ctr", act=False)
        self.off_head = ConvLayer("det.off", act=False)
        self.rec_convs = [
            ConvLayer("rec.c0"), ConvLayer("rec.c1"), ConvLayer("rec.c2", (2, 1)),
            ConvLayer("rec.c3"), ConvLayer("rec.c4"), ConvLayer("rec.c5", (2, 1)),
        ]

    def param_shapes(self) -> dict:
        cfg = self.config
        F, R, K = cfg.channels, cfg.rec_channels, cfg.num_classes
        shapes = {}

        def conv(name, co, ci, k=3):
            shapes[name + ".w"] = (co, ci, k, k)
            shapes[name + ".b"] = (co,)

        prev = 3
        for s in sorted(self.stages):
            ch = self.stage_channels[s]
            for i, layer in enumerate(self.stages[s]):
                conv(layer.name, ch, prev if i == 0 else ch)
            prev = ch
        for s in self.fpn_strides:
            conv(f"fpn.lat{s}", F, self.stage_channels[s], 1)
        for s in self.out_strides:
            conv(f"fpn.out{s}", F, F)
        conv("det.t0", F, F)
        conv("det.t1", F, F)
        conv("det.cls", 1, F)
        conv("det.ctr", 1, F)
        conv("det.off", 4 * cfg.n_rcp, F)
        conv("rec.c0", R, F)
        for i in range(1, 6):
            conv(f"rec.c{i}", R, R)
        for p in ("wq", "wk", "wv"):
            shapes[f"rec.attn.{p}"] = (R, R)
        shapes["rec.fc.w"] = (R, K)
        shapes["rec.fc.b"] = (K,)
        return shapes

    def _init_params(self, seed) -> ParamStore:
        cfg = self.config
        rng = np.random.default_rng(seed)
        store = ParamStore()
        for name, shape in self.param_shapes().items():
            if name.endswith(".b"):
                arr = np.zeros(shape)
            elif len(shape) == 4:
                gain = 1.0 if name.startswith("fpn.") else 2.0
                arr = _conv_init(rng, shape[0], shape[1], shape[2], gain)
            else:
                arr = rng.standard_normal(shape) * math.sqrt(1.0 / shape[0])
            store.add(name, arr)
        store["det.cls.b"][:] = -math.log((1 - 0.01) / 0.01)
        store["det.off.w"][:] *= 0.1
        pw, ph = cfg.prior_size
        store["det.off.b"][:] = prior_offsets(cfg.n_rcp, pw, ph) / cfg.offset_scale
        store["rec.attn.wq"][:] *= 0.5
        store["rec.attn.wk"][:] *= 0.5
        return store

    # --------------------------------------------------------------- backbone
    def backbone_forward(self, x):
        if x.ndim == 3:
            x = x[None]
        n, c, h, w = x.shape
        if h % self.max_stride or w % self.max_stride:
            raise ShapeError(f"input {h}x{w} not divisible by max stride {self.max_stride}")
        st = self.store
        feats, handles = {}, {}
        cur = x
        for s in sorted(self.stages):
            hs = []
            for layer in self.stages[s]:
                cur, hd = layer.forward(st, cur)
                hs.append(hd)
            feats[s] = cur
            handles[s] = hs
        lat, lat_h, ups = {}, {}, {}
        P = {}
        for s in sorted(self.fpn_strides, reverse=True):
            lat[s], lat_h[s] = self.lateral[s].forward(st, feats[s])
            P[s] = lat[s]
            if 2 * s in P:
                ups[s] = UpsampleNearest(2)
                P[s] = P[s] + ups[s].forward(P[2 * s])
        out, out_h = {}, {}
        for s in self.out_strides:
            out[s], out_h[s] = self.smooth[s].forward(st, P[s])
        return out, (handles, lat_h, ups, out_h)

    def backbone_backward(self, cache, gpyr: dict):
        handles, lat_h, ups, out_h = cache
        st = self.store
        gP = {}
        for s in self.out_strides:
            g = gpyr.get(s)
            if g is None:
                continue
            gP[s] = self.smooth[s].backward(st, out_h[s], g)
        gfeat = {}
        for s in sorted(self.fpn_strides):
            g = gP.get(s)
            if g is None:
                continue
            gfeat[s] = self.lateral[s].backward(st, lat_h[s], g)
            if s in ups:
                (gu,) = ups[s].backward(g)
                gP[2 * s] = gP[2 * s] + gu if 2 * s in gP else gu
        gcur = None
        for s in sorted(self.stages, reverse=True):
            g = gfeat.get(s)
            if gcur is not None:
                g = gcur if g is None else g + gcur
            if g is None:
                gcur = None
                continue
            for layer, hd in reversed(list(zip(self.stages[s], handles[s]))):
                g = layer.backward(st, hd, g)
            gcur = g
        return gcur

    # -------------------------------------------------------------- detection
    def detection_forward(self, pyramid):
        st = self.store
        scale = self.config.offset_scale
        outs, caches = [], []
        for s in self.config.det_strides:
            if s not in pyramid:
                raise ShapeError(f"pyramid lacks stride {s}")
            x = pyramid[s]
            th = []
            for layer in self.tower:
                x, hd = layer.forward(st, x)
                th.append(hd)
            cls, hc = self.cls_head.forward(st, x)
            ctr, hr = self.ctr_head.forward(st, x)
            off, ho = self.off_head.forward(st, x)
            outs.append(DetectionOut(s, cls, ctr, off * scale))
            caches.append((th, hc, hr, ho))
        return outs, caches

    def detection_backward(self, caches, grads):
        """``grads``: per level ``(g_cls, g_ctr, g_offsets)``; returns pyramid grads."""
        st = self.store
        scale = self.config.offset_scale
        gpyr = {}
        for s, (th, hc, hr, ho), (gc, gr, go) in zip(self.config.det_strides, caches, grads):
            gx = self.cls_head.backward(st, hc, gc)
            gx = gx + self.ctr_head.backward(st, hr, gr)
            gx = gx + self.off_head.backward(st, ho, go * scale)
            for layer, hd in reversed(list(zip(self.tower, th))):
                gx = layer.backward(st, hd, gx)
            gpyr[s] = gpyr[s] + gx if s in gpyr else gx
        return gpyr

    # ------------------------------------------------------------ recognition
    def recognition_features(self, crops):
        if crops.shape[2] % 4:
            raise ShapeError("rectified feature height must be divisible by 4")
        st = self.store
        # crops differ mostly in colour and contrast; standardise each channel per crop
        norm = InstanceNorm()
        x = norm.forward(crops)
        hs = []
        for layer in self.rec_convs:
            x, hd = layer.forward(st, x)
            hs.append(hd)
        avg = AvgOverHeight()
        seq = avg.forward(x)  # (m, R, w)
        return seq, (norm, hs, avg)

    def recognition_forward(self, crops):
        """Rectified crops ``(m, C, h, w)`` -> logits ``(m, w, n_classes)``."""
        if crops.shape[3] < self.config.max_len:
            raise ShapeError(f"crop width {crops.shape[3]} < max_len {self.config.max_len}")
        st = self.store
        seq, fcache = self.recognition_features(crops)
        x = seq.transpose(2, 0, 1)  # (w, m, R)
        attn = SelfAttention()
        x = attn.forward(x, st["rec.attn.wq"], st["rec.attn.wk"], st["rec.attn.wv"])
        fc = Linear()
        logits = fc.forward(x, st["rec.fc.w"], st["rec.fc.b"])
        return logits.transpose(1, 0, 2), (fcache, attn, fc)

    def recognition_backward(self, cache, glogits):
        (norm, hs, avg), attn, fc = cache
        st = self.store
        g = glogits.transpose(1, 0, 2)
        g, gw, gb = fc.backward(g)
        st.grad("rec.fc.w", gw)
        st.grad("rec.fc.b", gb)
        g, gq, gk, gv = attn.backward(g)
        st.grad("rec.attn.wq", gq)
        st.grad("rec.attn.wk", gk)
        st.grad("rec.attn.wv", gv)
        (g,) = avg.backward(g.transpose(1, 2, 0))
        for layer, hd in reversed(list(zip(self.rec_convs, hs))):
            g = layer.backward(st, hd, g)
        (g,) = norm.backward(g)
        return g

    # ------------------------------------------------------------------ misc
    def zero_grad(self):
        self.store.zero_grad()

    def astype(self, dtype) -> "SpotterModel":
        return SpotterModel(self.config, self.store, dtype=dtype)

    def state(self):
        return self.store.state()


def preprocess(images) -> np.ndarray:
    """``(N, 3, H, W)`` images in [0, 1] (float or uint8) -> centred network input."""
    x = np.asarray(images)
    if x.dtype == np.uint8:
        x = x.astype(np.float32) / np.float32(255.0)
    return x - x.dtype.type(0.5)
