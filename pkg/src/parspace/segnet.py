"""Miniature promptable segmenter with a SAM-like layout.

Encoder: 4x4 patch embedding, pre-norm transformer blocks, then a 3x3 conv
neck. A box prompt becomes two corner embeddings plus a dense box-coverage
map, both added to the encoder features ahead of a small conv decoder that
upsamples to input resolution.
"""

import copy
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

KINDS = ("transformer", "conv", "decoder", "prompt")
N_FREQ = 8


class ValidationError(ValueError):
    """Malformed model input."""


@dataclass(frozen=True)
class BoxPrompt:
    x0: int
    y0: int
    x1: int
    y1: int

    def validate(self, size):
        if not (0 <= self.x0 < self.x1 <= size and 0 <= self.y0 < self.y1 <= size):
            raise ValidationError(f"box {self} is not ordered inside a {size}x{size} image")

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch: int = 4
    width: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: int = 2
    neck_layers: int = 2
    decoder_width: int = 16
    seed: int = 0

    @property
    def grid(self):
        return self.image_size // self.patch


def box_coverage(box, size, grid):
    """Fraction of each grid cell covered by the half-open pixel box."""
    cell = size / grid
    edges = np.arange(grid + 1) * cell
    lo, hi = edges[:-1], edges[1:]
    cov_x = np.clip(np.minimum(hi, box.x1) - np.maximum(lo, box.x0), 0, None) / cell
    cov_y = np.clip(np.minimum(hi, box.y1) - np.maximum(lo, box.y0), 0, None) / cell
    return np.outer(cov_y, cov_x)


def corner_features(x, y):
    """Sin/cos features of a corner with coordinates normalized to [0, 1]."""
    freqs = (2.0 ** np.arange(N_FREQ)) * math.pi
    return np.concatenate([np.sin(freqs * x), np.cos(freqs * x), np.sin(freqs * y), np.cos(freqs * y)])


class ToySamModel:
    def __init__(self, config=None, **overrides):
        cfg = config or ModelConfig(**overrides)
        if cfg.image_size % cfg.patch:
            raise ValueError("image_size must be a multiple of the patch size")
        self.config = cfg
        self.width = cfg.width
        self.depth = cfg.depth
        self.params = {}
        self.kinds = {}
        self.decomposable = []
        self.reparams = {}
        self.loras = {}
        self.adapters = {}
        self.strategy = None
        self._build(np.random.default_rng([cfg.seed, 0xA11CE]))

    # ------------------------------------------------------------------ build

    def _add(self, name, kind, value, decomposable=False):
        self.params[name] = Tensor(value)
        self.kinds[name] = kind
        if decomposable:
            self.decomposable.append(name)

    def _dense(self, rng, name, kind, n_out, n_in, std=None):
        std = std if std is not None else 1.0 / math.sqrt(n_in)
        self._add(f"{name}.weight", kind, rng.normal(0, std, (n_out, n_in)), decomposable=True)
        self._add(f"{name}.bias", kind, np.zeros(n_out))

    def _conv(self, rng, name, kind, n_out, n_in, ksize, std=None):
        fan_in = n_in * ksize * ksize
        std = std if std is not None else 1.0 / math.sqrt(fan_in)
        self._add(f"{name}.weight", kind, rng.normal(0, std, (n_out, n_in, ksize, ksize)), decomposable=True)
        self._add(f"{name}.bias", kind, np.zeros(n_out))

    def _build(self, rng):
        c = self.config
        D = c.width
        self._conv(rng, "patch_embed", "transformer", D, 1, c.patch)
        self._add("pos_embed", "transformer", rng.normal(0, 0.02, (1, c.grid * c.grid, D)))
        for i in range(c.depth):
            b = f"blocks.{i}"
            self._add(f"{b}.norm1.gain", "transformer", np.ones(D))
            self._add(f"{b}.norm1.bias", "transformer", np.zeros(D))
            for proj in ("q", "k", "v", "o"):
                self._dense(rng, f"{b}.attn.{proj}", "transformer", D, D)
            self._add(f"{b}.norm2.gain", "transformer", np.ones(D))
            self._add(f"{b}.norm2.bias", "transformer", np.zeros(D))
            self._dense(rng, f"{b}.mlp.fc1", "transformer", D * c.mlp_ratio, D)
            self._dense(rng, f"{b}.mlp.fc2", "transformer", D, D * c.mlp_ratio)
        for i in range(c.neck_layers):
            self._conv(rng, f"neck.{i}", "conv", D, D, 3)
        self._dense(rng, "prompt.proj", "prompt", D, 4 * N_FREQ)
        self._add("prompt.corner", "prompt", rng.normal(0, 0.5, (2, D)))
        self._add("prompt.box_embed", "prompt", rng.normal(0, 1.0, D))
        self._conv(rng, "decoder.fuse1", "decoder", D, D, 3)
        self._conv(rng, "decoder.fuse2", "decoder", c.decoder_width, D, 3)
        self._conv(rng, "decoder.head", "decoder", 1, c.decoder_width, 1)

    # --------------------------------------------------------------- registry

    def named_parameters(self):
        """(name, kind, tensor) for every registered parameter, each exactly once."""
        out = []
        for name, t in self.params.items():
            kind = self.kinds[name]
            if name in self.reparams:
                out.extend((f"{name}.{f}", kind, ft) for f, ft in self.reparams[name].factors().items())
            else:
                out.append((name, kind, t))
        for name, lora in self.loras.items():
            out.extend((f"{name}.{f}", self.kinds[name], ft) for f, ft in lora.factors().items())
        for i, ad in self.adapters.items():
            out.extend((f"blocks.{i}.adapter.{f}", "transformer", ft) for f, ft in ad.factors().items())
        return out

    def parameter_dict(self):
        return {name: t for name, _, t in self.named_parameters()}

    def lora_targets(self):
        return [f"blocks.{i}.attn.{p}.weight" for i in range(self.depth) for p in ("q", "k", "v", "o")]

    def weight(self, name):
        if name in self.reparams:
            return self.reparams[name].weight()
        if name in self.loras:
            return self.loras[name].effective_weight()
        return self.params[name]

    def clone(self, strip_strategy=False):
        if strip_strategy and self.strategy is not None:
            raise ValueError("cannot strip an installed strategy; clone the base model instead")
        return copy.deepcopy(self)

    # ---------------------------------------------------------------- forward

    def _linear(self, x, name):
        wname = f"{name}.weight"
        if wname in self.loras:
            from .peft import lora_forward
            out = lora_forward(x, self.loras[wname])
        else:
            out = T.matmul(x, T.transpose(self.weight(wname)))
        return out + self.params[f"{name}.bias"]

    def _conv_layer(self, x, name, stride=1, padding=0):
        return T.conv2d(x, self.weight(f"{name}.weight"), self.params[f"{name}.bias"], stride, padding)

    def _norm(self, x, name):
        return T.layernorm(x, axis=-1) * self.params[f"{name}.gain"] + self.params[f"{name}.bias"]

    def _attention(self, x, i):
        n, L, D = x.shape
        H = self.config.heads
        dh = D // H
        b = f"blocks.{i}.attn"

        def heads(t):
            return T.transpose(T.reshape(t, (n, L, H, dh)), (0, 2, 1, 3))

        q = heads(self._linear(x, f"{b}.q"))
        k = heads(self._linear(x, f"{b}.k"))
        v = heads(self._linear(x, f"{b}.v"))
        att = T.softmax(T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh)), axis=-1)
        ctx = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (n, L, D))
        return self._linear(ctx, f"{b}.o")

    def encode(self, image):
        c = self.config
        n = image.shape[0]
        x = self._conv_layer(image, "patch_embed", stride=c.patch)
        x = T.transpose(T.reshape(x, (n, c.width, c.grid * c.grid)), (0, 2, 1)) + self.params["pos_embed"]
        for i in range(c.depth):
            h = self._attention(self._norm(x, f"blocks.{i}.norm1"), i)
            if i in self.adapters:
                h = self.adapters[i](h)
            x = x + h
            h = T.gelu(self._linear(self._norm(x, f"blocks.{i}.norm2"), f"blocks.{i}.mlp.fc1"))
            x = x + self._linear(h, f"blocks.{i}.mlp.fc2")
        x = T.reshape(T.transpose(x, (0, 2, 1)), (n, c.width, c.grid, c.grid))
        for i in range(c.neck_layers):
            x = T.gelu(self._conv_layer(x, f"neck.{i}", padding=1))
        return x

    def encode_prompts(self, prompts):
        """Sparse (N, D) corner embedding sum and dense (N, D, G, G) box map."""
        c = self.config
        for p in prompts:
            p.validate(c.image_size)
        s = float(c.image_size)
        feats = np.stack([np.stack([corner_features(p.x0 / s, p.y0 / s), corner_features(p.x1 / s, p.y1 / s)])
                          for p in prompts])  # (N, 2, F)
        corners = self._linear(Tensor(feats), "prompt.proj") + self.params["prompt.corner"]
        sparse = T.tsum(corners, axis=1)
        cover = np.stack([box_coverage(p, c.image_size, c.grid) for p in prompts])[:, None]
        dense = Tensor(cover) * T.reshape(self.params["prompt.box_embed"], (1, c.width, 1, 1))
        return sparse, dense

    def __call__(self, image, prompts):
        return forward(self, image, prompts)


def forward(model, image, prompts):
    """Mask logits (N, 1, S, S) for an (N, 1, S, S) image in [0, 1] and one box per sample."""
    c = model.config
    image = T.as_tensor(image)
    if isinstance(prompts, BoxPrompt):
        prompts = [prompts]
    if image.ndim != 4 or image.shape[1] != 1 or image.shape[2:] != (c.image_size, c.image_size):
        raise ValidationError(f"expected (N, 1, {c.image_size}, {c.image_size}) image, got {image.shape}")
    if len(prompts) != image.shape[0]:
        raise ValidationError(f"{len(prompts)} prompts for a batch of {image.shape[0]}")
    if image.data.min() < 0.0 or image.data.max() > 1.0:
        raise ValidationError("image values must lie in [0, 1]")
    feats = model.encode(image)
    sparse, dense = model.encode_prompts(prompts)
    x = feats + T.reshape(sparse, (image.shape[0], c.width, 1, 1)) + dense
    x = T.gelu(model._conv_layer(x, "decoder.fuse1", padding=1))
    x = T.gelu(model._conv_layer(x, "decoder.fuse2", padding=1))
    x = T.upsample_bilinear(x, (c.image_size, c.image_size))
    return model._conv_layer(x, "decoder.head")


def layer_registry(model):
    """(name, kind, shape, trainable) for every registered parameter."""
    return [(name, kind, t.shape, t.requires_grad) for name, kind, t in model.named_parameters()]


# ------------------------------------------------------------- checkpoints

MANIFEST = "manifest.txt"


def _fname(name):
    return name.replace("/", "_") + ".ptns"


def save_checkpoint(model, directory):
    """Directory of PTNS tensors plus a plain-text manifest.

    Manifest lines:
      config key=value ...
      strategy <text|none>
      param <name> <kind> <trainable 0|1> <file>
      reparam <weight-name> <mode> <orig-shape AxBx..> <transposed 0|1> <U-file> <p-file> <V-file>
    """
    os.makedirs(directory, exist_ok=True)
    lines = ["# parspace checkpoint v1",
             "config " + " ".join(f"{k}={v}" for k, v in asdict(model.config).items()),
             f"strategy {model.strategy if model.strategy is not None else 'none'}"]
    factor_names = {f"{n}.{f}" for n in model.reparams for f in ("U", "p", "V")}
    for name, kind, t in model.named_parameters():
        fname = _fname(name)
        T.save_tensor(t, os.path.join(directory, fname))
        if name not in factor_names:
            lines.append(f"param {name} {kind} {int(t.requires_grad)} {fname}")
    for name, rp in model.reparams.items():
        shape = "x".join(str(s) for s in rp.orig_shape)
        files = " ".join(_fname(f"{name}.{f}") for f in ("U", "p", "V"))
        lines.append(f"reparam {name} {rp.mode.value} {shape} {int(rp.matricization.transposed)} {files}")
    with open(os.path.join(directory, MANIFEST), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(directory):
    from .peft import PeftStrategy, apply_strategy
    from .reparam import Matricization, Mode, SvdReparam

    with open(os.path.join(directory, MANIFEST)) as fh:
        rows = [ln.split() for ln in fh if ln.strip() and not ln.startswith("#")]
    cfg = {}
    for row in rows:
        if row[0] == "config":
            cfg = {k: int(v) for k, v in (kv.split("=") for kv in row[1:])}
    model = ToySamModel(ModelConfig(**cfg))
    strategy = next(row[1] for row in rows if row[0] == "strategy")
    if strategy != "none":
        # Builds structure only; every tensor is overwritten below.
        apply_strategy(model, PeftStrategy.parse(strategy))
    params = model.parameter_dict()
    kinds = {n: k for n, k, _ in model.named_parameters()}
    for row in rows:
        if row[0] == "param":
            _, name, kind, trainable, fname = row
            if kinds.get(name) != kind:
                raise ValueError(f"checkpoint entry {name} ({kind}) does not match the model")
            t = params[name]
            t.data = T.load_tensor(os.path.join(directory, fname)).data
            t.requires_grad = bool(int(trainable))
        elif row[0] == "reparam":
            _, name, mode, shape, transposed, fu, fp, fv = row
            mat = Matricization(tuple(int(s) for s in shape.split("x")), bool(int(transposed)))
            U, p, V = (T.load_tensor(os.path.join(directory, f)) for f in (fu, fp, fv))
            model.reparams[name] = SvdReparam(U, p, V, Mode(mode), mat)
    return model

