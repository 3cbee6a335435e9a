"""Small fully-convolutional segmentation net with hand-written backprop.

Architecture (all dims NCHW, float64):

    encoder   3x (conv3x3 stride2 + BN + ReLU)           tag: backbone
    head      parallel 1x1 / 3x3 d1 / 3x3 d2 / 3x3 d4    tag: aggregation_head
              branches, concat, 1x1 fuse conv + BN + ReLU
    decoder   upsample x4, concat with encoder stage-1    tag: decoder
              skip, conv3x3 + BN + ReLU, upsample x2
    classify  1x1 conv to class logits                    tag: classifier

Each BN carries per-channel scale gamma / shift beta and a boolean channel
mask; masked channels are zeroed right after BN so they contribute nothing
downstream.  Gradients are computed layer by layer in reverse; no autodiff
framework is involved, which keeps runs byte-deterministic.
"""

from __future__ import annotations

import json
import struct

import numpy as np

STRIDE_TOTAL = 8
CHECKPOINT_MAGIC = b"SLIMSEG1"


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class ConstructionError(ValueError):
    pass


class Conv2d:
    kind = "conv2d"

    def __init__(self, name, in_ch, out_ch, kernel, stride=1, dilation=1,
                 padding=0, group="backbone"):
        self.name = name
        self.in_ch, self.out_ch = in_ch, out_ch
        self.k, self.stride, self.dilation, self.padding = kernel, stride, dilation, padding
        self.group = group
        self.params = {"w": np.zeros((out_ch, in_ch, kernel, kernel)),
                       "b": np.zeros(out_ch)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cache = None

    def init(self, rng):
        fan_in = self.in_ch * self.k * self.k
        bound = np.sqrt(6.0 / fan_in)
        self.params["w"] = rng.uniform(-bound, bound, self.params["w"].shape)
        self.params["b"][:] = 0.0

    def out_dims(self, h, w):
        span = self.dilation * (self.k - 1) + 1
        ho = (h + 2 * self.padding - span) // self.stride + 1
        wo = (w + 2 * self.padding - span) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"{self.name}: non-positive output dims for input {h}x{w}")
        return ho, wo

    def _im2col(self, xp, ho, wo):
        n, c = xp.shape[:2]
        s, d, k = self.stride, self.dilation, self.k
        cols = np.empty((n, c, ho, wo, k, k))
        for kh in range(k):
            for kw in range(k):
                cols[:, :, :, :, kh, kw] = xp[
                    :, :, d * kh: d * kh + s * ho: s, d * kw: d * kw + s * wo: s]
        return cols

    def forward(self, x, train=True):
        if x.shape[1] != self.in_ch:
            raise ShapeError(f"{self.name}: expected {self.in_ch} channels, got {x.shape[1]}")
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        ho, wo = self.out_dims(x.shape[2], x.shape[3])
        cols = self._im2col(xp, ho, wo)
        n = x.shape[0]
        # flatten patches so the contraction runs as a single matmul
        mat = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)
                                   ).reshape(n * ho * wo, -1)
        w2 = self.params["w"].reshape(self.out_ch, -1)
        out = (mat @ w2.T).reshape(n, ho, wo, self.out_ch).transpose(0, 3, 1, 2)
        out = out + self.params["b"][None, :, None, None]
        if train:
            self._cache = (mat, xp.shape)
        return out

    def backward(self, gout):
        mat, xp_shape = self._cache
        n, _, ho, wo = gout.shape
        g2 = np.ascontiguousarray(gout.transpose(0, 2, 3, 1)).reshape(-1, self.out_ch)
        w2 = self.params["w"].reshape(self.out_ch, -1)
        self.grads["w"] += (g2.T @ mat).reshape(self.params["w"].shape)
        self.grads["b"] += gout.sum(axis=(0, 2, 3))
        gcols = (g2 @ w2).reshape(n, ho, wo, self.in_ch, self.k, self.k
                                  ).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros(xp_shape)
        s, d, k = self.stride, self.dilation, self.k
        ho, wo = gout.shape[2], gout.shape[3]
        for kh in range(k):
            for kw in range(k):
                gxp[:, :, d * kh: d * kh + s * ho: s,
                    d * kw: d * kw + s * wo: s] += gcols[:, :, :, :, kh, kw]
        p = self.padding
        if p:
            gxp = gxp[:, :, p:-p, p:-p]
        return gxp


class BatchNorm2d:
    kind = "batchnorm"

    def __init__(self, name, ch, group="backbone", momentum=0.1, eps=1e-5):
        self.name = name
        self.ch, self.group = ch, group
        self.momentum, self.eps = momentum, eps
        self.params = {"gamma": np.full(ch, 0.5), "beta": np.zeros(ch)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.running_mean = np.zeros(ch)
        self.running_var = np.ones(ch)
        self.mask = np.ones(ch, dtype=bool)
        self._cache = None

    def init(self, rng):
        self.params["gamma"][:] = 0.5
        self.params["beta"][:] = 0.0

    def forward(self, x, train=True):
        m = self.mask[None, :, None, None]
        if train:
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mu
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * var
        else:
            mu, var = self.running_mean, self.running_var
        std = np.sqrt(var + self.eps)
        xhat = (x - mu[None, :, None, None]) / std[None, :, None, None]
        out = (self.params["gamma"][None, :, None, None] * xhat
               + self.params["beta"][None, :, None, None]) * m
        if train:
            self._cache = (xhat, std)
        return out

    def backward(self, gout):
        xhat, std = self._cache
        g = gout * self.mask[None, :, None, None]
        self.grads["beta"] += g.sum(axis=(0, 2, 3))
        self.grads["gamma"] += (g * xhat).sum(axis=(0, 2, 3))
        n = g.shape[0] * g.shape[2] * g.shape[3]
        gxhat = g * self.params["gamma"][None, :, None, None]
        mean_g = gxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        return (gxhat - mean_g - xhat * mean_gx) / std[None, :, None, None]


class ReLU:
    kind = "relu"

    def __init__(self, name):
        self.name = name
        self.params, self.grads = {}, {}
        self._cache = None

    def forward(self, x, train=True):
        if train:
            self._cache = x > 0
        return np.maximum(x, 0.0)

    def backward(self, gout):
        return gout * self._cache


class BilinearUpsample:
    """Fixed-factor bilinear upsampling via 1-D interpolation matrices."""
    kind = "bilinear-upsample"

    def __init__(self, name, factor):
        self.name = name
        self.factor = factor
        self.params, self.grads = {}, {}
        self._mats = {}
        self._cache = None

    def _matrix(self, n_in):
        if n_in not in self._mats:
            n_out = n_in * self.factor
            centers = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
            lo = np.floor(centers).astype(int)
            frac = centers - lo
            hi = np.clip(lo + 1, 0, n_in - 1)
            lo = np.clip(lo, 0, n_in - 1)
            mat = np.zeros((n_out, n_in))
            mat[np.arange(n_out), lo] += 1 - frac
            mat[np.arange(n_out), hi] += frac
            self._mats[n_in] = mat
        return self._mats[n_in]

    def forward(self, x, train=True):
        r = self._matrix(x.shape[2])
        c = self._matrix(x.shape[3])
        out = (r @ x) @ c.T
        if train:
            self._cache = (r, c)
        return out

    def backward(self, gout):
        r, c = self._cache
        return (r.T @ gout) @ c


class SegNet:
    """Toy encoder / multi-scale-head / decoder segmentation network."""

    def __init__(self, num_classes, base_width=16, seed=0,
                 prunable_groups=("aggregation_head", "decoder")):
        if num_classes < 2:
            raise ConstructionError("need at least 2 classes")
        if base_width < 8:
            raise ConstructionError("base_width must be >= 8")
        self.num_classes = num_classes
        self.base_width = base_width
        self.seed = seed
        self.prunable_groups = tuple(prunable_groups)
        w = base_width

        def block(name, cin, cout, stride, dilation, kernel, group):
            pad = dilation * (kernel - 1) // 2
            return [Conv2d(f"{name}.conv", cin, cout, kernel, stride=stride,
                           dilation=dilation, padding=pad, group=group),
                    BatchNorm2d(f"{name}.bn", cout, group=group),
                    ReLU(f"{name}.relu")]

        self.enc1 = block("enc1", 3, w, 2, 1, 3, "backbone")
        self.enc2 = block("enc2", w, 2 * w, 2, 1, 3, "backbone")
        self.enc3 = block("enc3", 2 * w, 4 * w, 2, 1, 3, "backbone")
        self.branches = [
            block("head.b0", 4 * w, w, 1, 1, 1, "aggregation_head"),
            block("head.b1", 4 * w, w, 1, 1, 3, "aggregation_head"),
            block("head.b2", 4 * w, w, 1, 2, 3, "aggregation_head"),
            block("head.b3", 4 * w, w, 1, 4, 3, "aggregation_head"),
        ]
        self.fuse = block("head.fuse", 4 * w, 2 * w, 1, 1, 1, "aggregation_head")
        self.up1 = BilinearUpsample("dec.up1", 4)
        self.dec = block("dec", 2 * w + w, 3 * w, 1, 1, 3, "decoder")
        self.up2 = BilinearUpsample("dec.up2", 2)
        self.classifier = Conv2d("classifier.conv", 3 * w, num_classes, 1,
                                 group="classifier")
        self._init_params()

    # -- plumbing ---------------------------------------------------------

    def modules(self):
        mods = []
        for blk in [self.enc1, self.enc2, self.enc3, *self.branches,
                    self.fuse, self.dec]:
            mods.extend(blk)
        mods.extend([self.up1, self.up2, self.classifier])
        return mods

    def bn_layers(self):
        return [m for m in self.modules() if isinstance(m, BatchNorm2d)]

    def conv_layers(self):
        return [m for m in self.modules() if isinstance(m, Conv2d)]

    def _init_params(self):
        rng = np.random.default_rng(self.seed)
        for m in self.modules():
            if hasattr(m, "init"):
                m.init(rng)

    def parameters(self):
        for m in self.modules():
            for key, val in m.params.items():
                yield f"{m.name}.{key}", val, m.grads[key]

    def parameter_count(self):
        return sum(v.size for _, v, _ in self.parameters())

    def zero_grads(self):
        for m in self.modules():
            for g in m.grads.values():
                g[:] = 0.0

    # -- forward / backward ----------------------------------------------

    @staticmethod
    def _run(block, x, train):
        for m in block:
            x = m.forward(x, train)
        return x

    @staticmethod
    def _run_back(block, g):
        for m in reversed(block):
            g = m.backward(g)
        return g

    def forward(self, x, train=True):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W), got {x.shape}")
        if x.shape[2] % STRIDE_TOTAL or x.shape[3] % STRIDE_TOTAL:
            raise ShapeError(
                f"spatial dims must be divisible by {STRIDE_TOTAL}, got {x.shape[2:]}")
        e1 = self._run(self.enc1, x, train)
        e2 = self._run(self.enc2, e1, train)
        e3 = self._run(self.enc3, e2, train)
        bouts = [self._run(b, e3, train) for b in self.branches]
        cat = np.concatenate(bouts, axis=1)
        fused = self._run(self.fuse, cat, train)
        up = self.up1.forward(fused, train)
        dcat = np.concatenate([up, e1], axis=1)
        d = self._run(self.dec, dcat, train)
        d2 = self.up2.forward(d, train)
        return self.classifier.forward(d2, train)

    # -- loss -------------------------------------------------------------

    def forward_loss_backward(self, x, labels, coeffs, ignore_id=255,
                              train=True, compute_grads=True):
        """Forward + softmax cross-entropy + full backward pass.

        `coeffs[i]` multiplies sample i's mean-pixel cross-entropy in the
        scalar whose gradient is accumulated (the caller folds Eq.-style batch
        weights and normalization into them).  Returns per-sample losses.
        """
        labels = np.asarray(labels)
        logits = self.forward(x, train)
        losses, glogits = softmax_cross_entropy(logits, labels, ignore_id)
        if not compute_grads:
            return losses, logits

        coeffs = np.asarray(coeffs, dtype=np.float64)
        g = glogits * coeffs[:, None, None, None]
        g = self.classifier.backward(g)
        g = self.up2.backward(g)
        g = self._run_back(self.dec, g)
        w2 = self.fuse[0].out_ch
        gup, gskip = g[:, :w2], g[:, w2:]
        g = self.up1.backward(gup)
        g = self._run_back(self.fuse, g)
        w = self.base_width
        ge3 = None
        for i, b in enumerate(self.branches):
            gb = self._run_back(b, g[:, i * w:(i + 1) * w])
            ge3 = gb if ge3 is None else ge3 + gb
        g = self._run_back(self.enc3, ge3)
        g = self._run_back(self.enc2, g)
        self._run_back(self.enc1, g + gskip)
        return losses, logits

    def l1_penalty_and_grad(self, lam):
        """L1 penalty on BN scales of prunable groups (unmasked channels only).

        Subgradient of |gamma| at 0 is taken as 0.
        """
        penalty = 0.0
        for bn in self.bn_layers():
            if bn.group not in self.prunable_groups:
                continue
            gamma = bn.params["gamma"]
            live = bn.mask
            penalty += np.abs(gamma[live]).sum()
            if lam > 0.0:
                bn.grads["gamma"][live] += lam * np.sign(gamma[live])
        return lam * penalty

    # -- shape / cost introspection --------------------------------------

    def live_layer_shapes(self, h, w):
        """Per-layer shape records with mask-adjusted channel counts.

        Yields dicts consumable by cost.layer_flops at input dims (h, w).
        """
        live = {bn.name: int(bn.mask.sum()) for bn in self.bn_layers()}

        def bn_of(conv_name):
            return conv_name.rsplit(".", 1)[0] + ".bn"

        recs = []

        def conv_rec(conv, cin, hin, win):
            ho, wo = conv.out_dims(hin, win)
            cout = live.get(bn_of(conv.name), conv.out_ch)
            recs.append({"name": conv.name, "kind": "conv2d", "in_ch": cin,
                         "out_ch": cout, "kernel": conv.k, "stride": conv.stride,
                         "groups": 1, "group": conv.group,
                         "out_h": ho, "out_w": wo})
            return cout, ho, wo

        def elem_rec(name, kind, ch, hh, ww, group):
            recs.append({"name": name, "kind": kind, "in_ch": ch, "out_ch": ch,
                         "group": group, "out_h": hh, "out_w": ww})

        def block_rec(blk, cin, hin, win):
            conv, bn = blk[0], blk[1]
            cout, ho, wo = conv_rec(conv, cin, hin, win)
            elem_rec(bn.name, "batchnorm", cout, ho, wo, bn.group)
            elem_rec(blk[2].name, "relu", cout, ho, wo, bn.group)
            return cout, ho, wo

        c1, h1, w1 = block_rec(self.enc1, 3, h, w)
        c2, h2, w2_ = block_rec(self.enc2, c1, h1, w1)
        c3, h3, w3 = block_rec(self.enc3, c2, h2, w2_)
        bsum = 0
        for b in self.branches:
            cb, _, _ = block_rec(b, c3, h3, w3)
            bsum += cb
        cf, hf, wf = block_rec(self.fuse, bsum, h3, w3)
        elem_rec(self.up1.name, "bilinear-upsample", cf, hf * 4, wf * 4, "decoder")
        cd, hd, wd = block_rec(self.dec, cf + c1, h1, w1)
        elem_rec(self.up2.name, "bilinear-upsample", cd, hd * 2, wd * 2, "decoder")
        conv_rec(self.classifier, cd, h, w)
        return recs

    # -- channel bookkeeping ---------------------------------------------

    def prunable_bns(self):
        return [bn for bn in self.bn_layers() if bn.group in self.prunable_groups]

    def zero_masked_params(self):
        """Pin parameters of masked channels (conv filter, BN gamma/beta) at 0."""
        convs = {c.name: c for c in self.conv_layers()}
        for bn in self.bn_layers():
            dead = ~bn.mask
            if not dead.any():
                continue
            bn.params["gamma"][dead] = 0.0
            bn.params["beta"][dead] = 0.0
            conv = convs.get(bn.name.rsplit(".", 1)[0] + ".conv")
            if conv is not None:
                conv.params["w"][dead] = 0.0
                conv.params["b"][dead] = 0.0


def softmax_cross_entropy(logits, labels, ignore_id=255):
    """Per-sample mean pixel cross-entropy and its logits gradient.

    Returns (losses[N], glogits) where glogits is d(mean CE of sample i)/d
    logits_i; pixels labeled ignore_id contribute nothing.  Raises
    nn.ShapeError on dims mismatch and a DegenerateBatch-style ValueError when
    no sample has a valid pixel.
    """
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    valid = labels != ignore_id
    counts = valid.sum(axis=(1, 2))
    if not counts.any():
        raise ValueError("batch has zero valid pixels")
    safe_labels = np.where(valid, labels, 0)
    idx_n = np.arange(n)[:, None, None]
    idx_h = np.arange(h)[None, :, None]
    idx_w = np.arange(w)[None, None, :]
    picked = probs[idx_n, safe_labels, idx_h, idx_w]
    logp = np.log(np.maximum(picked, 1e-300))
    losses = np.where(counts > 0,
                      -(logp * valid).sum(axis=(1, 2)) / np.maximum(counts, 1), 0.0)
    # gradient: (probs - onehot) / valid-pixel count, zeroed on ignore pixels
    grad = probs.copy()
    lab_onehot = np.zeros_like(probs)
    lab_onehot[idx_n, safe_labels, idx_h, idx_w] = 1.0
    grad -= lab_onehot
    grad *= valid[:, None, :, :]
    grad /= np.maximum(counts, 1)[:, None, None, None]
    return losses, grad


def sgd_step(net: SegNet, lr: float):
    """Vanilla SGD: theta <- theta - lr * grad, skipping masked channels."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, param, grad in net.parameters():
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"non-finite gradient in {name}")
        param -= lr * grad
    net.zero_masked_params()


def loss_and_grad(net: SegNet, images, labels, weights, lam_l1=1e-4,
                  ignore_id=255):
    """Weighted cross-entropy (Eq.-style weighted mean) + L1 on BN scales.

    Single equal-dims batch entry point; gradients are accumulated into the
    net's grad buffers (zeroed first).  Returns the scalar loss.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ValueError("weights must be non-negative")
    total_w = weights.sum()
    if total_w <= 0:
        raise ValueError("all loss weights are zero")
    net.zero_grads()
    coeffs = weights / total_w
    losses, _ = net.forward_loss_backward(images, labels, coeffs,
                                          ignore_id=ignore_id, train=True)
    data_loss = float((coeffs * losses).sum())
    penalty = net.l1_penalty_and_grad(lam_l1)
    return data_loss + penalty


# -- checkpoint io --------------------------------------------------------

def save_checkpoint(net: SegNet, path):
    tensors = []
    for m in net.modules():
        for key, val in m.params.items():
            tensors.append((f"{m.name}.{key}", val))
        if isinstance(m, BatchNorm2d):
            tensors.append((f"{m.name}.running_mean", m.running_mean))
            tensors.append((f"{m.name}.running_var", m.running_var))
    header = {
        "config": {"num_classes": net.num_classes, "base_width": net.base_width,
                   "seed": net.seed, "prunable_groups": list(net.prunable_groups)},
        "masks": {bn.name: bn.mask.astype(int).tolist() for bn in net.bn_layers()},
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_checkpoint(path) -> SegNet:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(blob_len).decode())
        cfg = header["config"]
        net = SegNet(num_classes=cfg["num_classes"], base_width=cfg["base_width"],
                     seed=cfg["seed"], prunable_groups=tuple(cfg["prunable_groups"]))
        slots = {}
        for m in net.modules():
            for key, val in m.params.items():
                slots[f"{m.name}.{key}"] = val
            if isinstance(m, BatchNorm2d):
                slots[f"{m.name}.running_mean"] = m.running_mean
                slots[f"{m.name}.running_var"] = m.running_var
        for rec in header["tensors"]:
            shape = tuple(rec["shape"])
            data = np.frombuffer(fh.read(8 * int(np.prod(shape))), dtype="<f8")
            slots[rec["name"]][...] = data.reshape(shape)
        for bn in net.bn_layers():
            bn.mask = np.asarray(header["masks"][bn.name], dtype=bool)
    return net
