"""Victim architectures and their defense-modified variants.

All models are desk-scale CNNs described by an ArchitectureDescriptor:
a dict of named stages, each an ordered tuple of layer definitions.
Parameters live in a flat name->Tensor dict so training can update them
in place and serialization is a plain manifest of tensor files.

Layer definitions:
    ("conv", out_channels, kernel, padding)   stride-1 2-D convolution + bias
    ("relu",) ("sigmoid",)                    activations
    ("pool",)                                 2x2/2 max pooling
    ("upsample",)                             nearest-neighbour 2x
    ("flatten",)                              (C,H,W) -> (C*H*W,)
    ("dense", out_features)                   affine layer
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .tensorfile import read_tensor_file, write_tensor_file

KINDS = ("plain-classifier", "segmenter", "denoiser-classifier",
         "rbf-classifier", "rbf-segmenter", "sequential")


@dataclass(frozen=True)
class RbfLayerSpec:
    """Gaussian kernel layer applied to concat(block input, block output)."""

    center_count: int
    gamma: float
    placement: str = "after-each-convolution-block"

    def __post_init__(self):
        if self.center_count < 1:
            raise ValueError(f"center_count must be positive, got {self.center_count}")
        if not (self.gamma > 0.0):
            raise ValueError(f"gamma must be positive, got {self.gamma}")


@dataclass(frozen=True)
class ArchitectureDescriptor:
    kind: str
    input_shape: tuple  # (C, H, W)
    stages: dict
    class_count: Optional[int] = None
    rbf: Optional[RbfLayerSpec] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown architecture kind '{self.kind}'")
        parameter_shapes(self)  # raises on inconsistent layer wiring

    @property
    def layer_spec(self) -> list:
        """Flat (stage, index, layer) listing, for inspection and counting."""
        return [(stage, i, layer) for stage, layers in self.stages.items()
                for i, layer in enumerate(layers)]


def _walk_shape(shape: tuple, layers: Sequence[tuple], stage: str) -> tuple:
    """Propagate a single-sample shape through a stage, validating wiring."""
    for i, layer in enumerate(layers):
        kind = layer[0]
        where = f"{stage}[{i}] ({kind})"
        if kind == "conv":
            _, out_c, k, padding = layer
            if len(shape) != 3:
                raise ShapeError(f"{where}: expects (C,H,W) input, got {shape}")
            c, h, w = shape
            if padding == "same":
                shape = (out_c, h, w)
            elif padding == "valid":
                if h < k or w < k:
                    raise ShapeError(f"{where}: kernel {k} larger than input {h}x{w}")
                shape = (out_c, h - k + 1, w - k + 1)
            else:
                raise ShapeError(f"{where}: unknown padding '{padding}'")
        elif kind == "pool":
            c, h, w = shape
            if h % 2 or w % 2:
                raise ShapeError(f"{where}: odd spatial dims {h}x{w}")
            shape = (c, h // 2, w // 2)
        elif kind == "upsample":
            c, h, w = shape
            shape = (c, 2 * h, 2 * w)
        elif kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif kind == "dense":
            if len(shape) != 1:
                raise ShapeError(f"{where}: expects flat input, got {shape}")
            shape = (layer[1],)
        elif kind in ("relu", "sigmoid"):
            pass
        else:
            raise ShapeError(f"{where}: unknown layer kind")
    return shape


def _stage_param_shapes(shape: tuple, layers: Sequence[tuple], stage: str,
                        out: dict) -> tuple:
    for i, layer in enumerate(layers):
        kind = layer[0]
        if kind == "conv":
            _, out_c, k, _ = layer
            out[f"{stage}.{i}.w"] = (out_c, shape[0], k, k)
            out[f"{stage}.{i}.b"] = (out_c,)
        elif kind == "dense":
            out[f"{stage}.{i}.w"] = (shape[0], layer[1])
            out[f"{stage}.{i}.b"] = (layer[1],)
        shape = _walk_shape(shape, [layer], stage)
    return shape


def _flat(shape: tuple) -> int:
    return int(np.prod(shape))


def parameter_shapes(desc: ArchitectureDescriptor) -> dict:
    """Name -> shape map of every learnable parameter; validates the wiring."""
    shapes: dict = {}
    s_in = tuple(desc.input_shape)
    if desc.kind in ("plain-classifier", "sequential", "segmenter"):
        shape = _stage_param_shapes(s_in, desc.stages.get("trunk", ()), "trunk", shapes)
        if "head" in desc.stages:
            shape = _stage_param_shapes(shape, desc.stages["head"], "head", shapes)
        if desc.kind == "plain-classifier" and shape != (desc.class_count,):
            raise ShapeError(f"head emits {shape}, expected ({desc.class_count},) logits")
    elif desc.kind == "denoiser-classifier":
        rep = _stage_param_shapes(s_in, desc.stages["encoder"], "encoder", shapes)
        recon = _stage_param_shapes(rep, desc.stages["decoder"], "decoder", shapes)
        if recon != s_in:
            raise ShapeError(f"decoder emits {recon}, expected input shape {s_in}")
        logits = _stage_param_shapes(rep, desc.stages["head"], "head", shapes)
        if logits != (desc.class_count,):
            raise ShapeError(f"head emits {logits}, expected ({desc.class_count},) logits")
    elif desc.kind == "rbf-classifier":
        b1_out = _stage_param_shapes(s_in, desc.stages["block1"], "block1", shapes)
        b2_out = _stage_param_shapes(b1_out, desc.stages["block2"], "block2", shapes)
        m = desc.rbf.center_count
        shapes["rbf1.centers"] = (m, _flat(s_in) + _flat(b1_out))
        shapes["rbf1.log_gamma"] = ()
        shapes["rbf2.centers"] = (m, _flat(b1_out) + _flat(b2_out))
        shapes["rbf2.log_gamma"] = ()
        logits = _stage_param_shapes((2 * m,), desc.stages["head"], "head", shapes)
        if logits != (desc.class_count,):
            raise ShapeError(f"head emits {logits}, expected ({desc.class_count},) logits")
    elif desc.kind == "rbf-segmenter":
        b1_out = _stage_param_shapes(s_in, desc.stages["block1"], "block1", shapes)
        b2_out = _stage_param_shapes(b1_out, desc.stages["block2"], "block2", shapes)
        m = desc.rbf.center_count
        shapes["rbf1.centers"] = (m, _flat(s_in) + _flat(b1_out))
        shapes["rbf1.log_gamma"] = ()
        shapes["rbf2.centers"] = (m, _flat(b1_out) + _flat(b2_out))
        shapes["rbf2.log_gamma"] = ()
        dec_in = (b2_out[0] + 2 * m, b2_out[1], b2_out[2])
        recon = _stage_param_shapes(dec_in, desc.stages["decoder"], "decoder", shapes)
        if recon[1:] != s_in[1:]:
            raise ShapeError(f"decoder emits {recon}, expected {s_in[1:]} spatial dims")
    else:
        raise ShapeError(f"unhandled kind {desc.kind}")
    return shapes


def parameter_count(desc: ArchitectureDescriptor) -> int:
    return sum(_flat(s) for s in parameter_shapes(desc).values())


def build_model(desc: ArchitectureDescriptor, seed: int) -> dict:
    """Initialize parameters: Glorot-uniform weights, zero biases.

    Deterministic for a given seed. RBF width is stored as log_gamma so
    gradient updates keep the kernel width positive.
    """
    rng = np.random.default_rng(seed)
    params: dict = {}
    for name, shape in parameter_shapes(desc).items():
        if name.endswith(".b"):
            data = np.zeros(shape)
        elif name.endswith("log_gamma"):
            data = np.log(desc.rbf.gamma)
        elif name.endswith(".w") or name.endswith("centers"):
            if len(shape) == 4:  # conv: (out, in, k, k)
                fan_in = shape[1] * shape[2] * shape[3]
                fan_out = shape[0] * shape[2] * shape[3]
            else:  # dense (in, out) or centers (m, d)
                fan_in, fan_out = (shape[0], shape[1]) if name.endswith(".w") else (shape[1], shape[0])
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape)
        else:
            raise ValueError(f"unknown parameter role for '{name}'")
        params[name] = Tensor(data, requires_grad=True)
    return params


def clone_params(params: dict) -> dict:
    out = {}
    for name, t in params.items():
        c = Tensor(t.data.copy(), requires_grad=True)
        out[name] = c
    return out


def _run_stage(params: dict, stage: str, layers: Sequence[tuple], x: Tensor) -> Tensor:
    for i, layer in enumerate(layers):
        kind = layer[0]
        try:
            if kind == "conv":
                x = ad.bias_add(ad.conv2d(x, params[f"{stage}.{i}.w"], padding=layer[3]),
                                params[f"{stage}.{i}.b"])
            elif kind == "dense":
                x = ad.bias_add(ad.matmul(x, params[f"{stage}.{i}.w"]),
                                params[f"{stage}.{i}.b"])
            elif kind == "relu":
                x = ad.relu(x)
            elif kind == "sigmoid":
                x = ad.sigmoid(x)
            elif kind == "pool":
                x = ad.maxpool2(x)
            elif kind == "upsample":
                x = ad.upsample2(x)
            elif kind == "flatten":
                x = ad.flatten_batch(x)
            else:
                raise ShapeError("unknown layer kind")
        except ShapeError as e:
            raise ShapeError(f"layer {stage}[{i}] ({kind}): {e}") from e
    return x


def _check_input(x: Tensor, desc: ArchitectureDescriptor) -> Tensor:
    expect = tuple(desc.input_shape)
    if x.data.ndim == len(expect):  # single sample: add a batch axis
        x = ad.reshape(x, (1,) + tuple(x.shape))
    if x.data.ndim != len(expect) + 1 or tuple(x.shape[1:]) != expect:
        raise ShapeError(
            f"input shape {x.shape} does not match architecture input {expect}")
    return x


def rbf_kernel(flat_input: Tensor, centers: Tensor, gamma) -> Tensor:
    """exp(-gamma * ||v - c_j||^2) for each center; rows of flat_input are samples."""
    gamma_t = gamma if isinstance(gamma, Tensor) else Tensor(float(gamma))
    vv = ad.tsum(ad.mul(flat_input, flat_input), axis=1, keepdims=True)  # (N,1)
    cc = ad.tsum(ad.mul(centers, centers), axis=1)                        # (M,)
    cross = ad.matmul(flat_input, transpose2d(centers))                   # (N,M)
    dist2 = ad.relu(ad.add(ad.add(vv, ad.mul(Tensor(-2.0), cross)), cc))
    return ad.exp(ad.mul(ad.mul(Tensor(-1.0), gamma_t), dist2))


def transpose2d(t: Tensor) -> Tensor:
    data = t.data.T

    def bwd(g):
        ad._accumulate(t, g.T)

    return ad._make(data, (t,), "transpose", bwd)


def rbf_layer_forward(block_input: Tensor, conv_output: Tensor,
                      spec: RbfLayerSpec, centers: Tensor) -> Tensor:
    """Spec-surface RBF unit: gamma comes from the layer spec as a plain float."""
    if not (spec.gamma > 0.0):
        raise ValueError(f"gamma must be positive, got {spec.gamma}")
    bi = block_input if block_input.data.ndim == 2 else ad.flatten_batch(
        block_input if block_input.data.ndim == 4 else ad.reshape(block_input, (1,) + tuple(block_input.shape)))
    co = conv_output if conv_output.data.ndim == 2 else ad.flatten_batch(
        conv_output if conv_output.data.ndim == 4 else ad.reshape(conv_output, (1,) + tuple(conv_output.shape)))
    v = ad.concat([bi, co], axis=1)
    if centers.shape != (spec.center_count, v.shape[1]):
        raise ShapeError(
            f"centers shape {centers.shape} != ({spec.center_count}, {v.shape[1]})")
    return rbf_kernel(v, centers, spec.gamma)


def _rbf_block(params: dict, desc: ArchitectureDescriptor, which: int,
               block_in: Tensor, block_out: Tensor) -> Tensor:
    v = ad.concat([ad.flatten_batch(block_in), ad.flatten_batch(block_out)], axis=1)
    gamma = ad.exp(params[f"rbf{which}.log_gamma"])
    return rbf_kernel(v, params[f"rbf{which}.centers"], gamma)


def forward_with_hidden(params: dict, x: Tensor,
                        desc: ArchitectureDescriptor) -> tuple[Tensor, Tensor]:
    """Run the model; returns (output, final hidden-layer activations).

    Output is logits (N, classes) for classifiers and a per-pixel score map
    (N, 1, H, W) for segmenters.
    """
    x = _check_input(x, desc)
    if desc.kind in ("plain-classifier", "sequential"):
        h = _run_stage(params, "trunk", desc.stages.get("trunk", ()), x)
        if "head" in desc.stages:
            out = _run_stage(params, "head", desc.stages["head"], h)
        else:
            out = h
        return out, h
    if desc.kind == "segmenter":
        feats = _run_stage(params, "trunk", desc.stages["trunk"], x)
        out = _run_stage(params, "head", desc.stages["head"], feats)
        n, c = feats.shape[0], feats.shape[1]
        hidden = ad.tmean(ad.reshape(feats, (n, c, -1)), axis=2)
        return out, hidden
    if desc.kind == "denoiser-classifier":
        rep = _run_stage(params, "encoder", desc.stages["encoder"], x)
        head = desc.stages["head"]
        h = _run_stage(params, "head", head[:-1], rep)
        out = _run_single(params, "head", len(head) - 1, head[-1], h)
        return out, h
    if desc.kind in ("rbf-classifier", "rbf-segmenter"):
        b1 = _run_stage(params, "block1", desc.stages["block1"], x)
        b2 = _run_stage(params, "block2", desc.stages["block2"], b1)
        r1 = _rbf_block(params, desc, 1, x, b1)
        r2 = _rbf_block(params, desc, 2, b1, b2)
        feats = ad.concat([r1, r2], axis=1)
        if desc.kind == "rbf-classifier":
            head = desc.stages["head"]
            h = _run_stage(params, "head", head[:-1], feats)
            out = _run_single(params, "head", len(head) - 1, head[-1], h)
            return out, h
        # rbf-segmenter: tile the kernel responses over the bottleneck grid
        n, m = feats.shape
        tile = ad.reshape(feats, (n, m, 1, 1))
        while tile.shape[2] < b2.shape[2]:
            tile = ad.upsample2(tile)
        dec_in = ad.concat([b2, tile], axis=1)
        out = _run_stage(params, "decoder", desc.stages["decoder"], dec_in)
        hidden = feats
        return out, hidden
    raise ShapeError(f"unhandled kind {desc.kind}")


def _run_single(params: dict, stage: str, idx: int, layer: tuple, x: Tensor) -> Tensor:
    kind = layer[0]
    try:
        if kind == "dense":
            return ad.bias_add(ad.matmul(x, params[f"{stage}.{idx}.w"]),
                               params[f"{stage}.{idx}.b"])
        if kind == "conv":
            return ad.bias_add(ad.conv2d(x, params[f"{stage}.{idx}.w"], padding=layer[3]),
                               params[f"{stage}.{idx}.b"])
        raise ShapeError("unknown final layer kind")
    except ShapeError as e:
        raise ShapeError(f"layer {stage}[{idx}] ({kind}): {e}") from e


def forward(params: dict, x: Tensor, desc: ArchitectureDescriptor) -> Tensor:
    out, _ = forward_with_hidden(params, x, desc)
    return out


def denoiser_forward(params: dict, x: Tensor,
                     desc: ArchitectureDescriptor) -> tuple[Tensor, Tensor]:
    """Returns (reconstruction, logits) for a denoiser-classifier."""
    if desc.kind != "denoiser-classifier":
        raise ShapeError(f"denoiser_forward needs a denoiser-classifier, got {desc.kind}")
    x = _check_input(x, desc)
    rep = _run_stage(params, "encoder", desc.stages["encoder"], x)
    recon = _run_stage(params, "decoder", desc.stages["decoder"], rep)
    logits = _run_stage(params, "head", desc.stages["head"], rep)
    return recon, logits


def predict_classes(params: dict, desc: ArchitectureDescriptor,
                    images: np.ndarray) -> np.ndarray:
    """Class predictions for a batch of images (no gradient tracking)."""
    logits = forward(params, Tensor(np.asarray(images)), desc)
    return np.argmax(logits.data, axis=1)


# ---------------------------------------------------------------------------
# descriptor factories


def plain_classifier(input_shape=(1, 16, 16), class_count=2, channels=(8, 16),
                     kernel=3, hidden=32) -> ArchitectureDescriptor:
    trunk = []
    for c in channels:
        trunk += [("conv", c, kernel, "same"), ("relu",), ("pool",)]
    trunk += [("flatten",), ("dense", hidden), ("relu",)]
    return ArchitectureDescriptor(
        kind="plain-classifier", input_shape=tuple(input_shape),
        stages={"trunk": tuple(trunk), "head": (("dense", class_count),)},
        class_count=class_count)


def segmenter(input_shape=(1, 32, 32), channels=(8, 16), kernel=3) -> ArchitectureDescriptor:
    c1, c2 = channels
    trunk = (("conv", c1, kernel, "same"), ("relu",), ("pool",),
             ("conv", c2, kernel, "same"), ("relu",), ("pool",),
             ("conv", c2, kernel, "same"), ("relu",), ("upsample",),
             ("conv", c1, kernel, "same"), ("relu",), ("upsample",),
             ("conv", c1, kernel, "same"), ("relu",))
    return ArchitectureDescriptor(
        kind="segmenter", input_shape=tuple(input_shape),
        stages={"trunk": trunk, "head": (("conv", 1, 1, "same"),)})


def denoiser_classifier(input_shape=(1, 16, 16), class_count=2, channels=(8, 16),
                        kernel=3, hidden=32, pooled=True) -> ArchitectureDescriptor:
    c1, c2 = channels
    if pooled:
        encoder = (("conv", c1, kernel, "same"), ("relu",), ("pool",),
                   ("conv", c2, kernel, "same"), ("relu",), ("pool",))
        decoder = (("conv", c2, kernel, "same"), ("relu",), ("upsample",),
                   ("conv", c1, kernel, "same"), ("relu",), ("upsample",),
                   ("conv", input_shape[0], kernel, "same"))
    else:
        encoder = (("conv", c1, kernel, "same"), ("relu",))
        decoder = (("conv", input_shape[0], kernel, "same"),)
    head = (("flatten",), ("dense", hidden), ("relu",), ("dense", class_count))
    return ArchitectureDescriptor(
        kind="denoiser-classifier", input_shape=tuple(input_shape),
        stages={"encoder": encoder, "decoder": decoder, "head": head},
        class_count=class_count)


def rbf_classifier(input_shape=(1, 16, 16), class_count=2, channels=(8, 16),
                   kernel=3, hidden=32, center_count=16,
                   gamma: Optional[float] = None) -> ArchitectureDescriptor:
    c1, c2 = channels
    block1 = (("conv", c1, kernel, "same"), ("relu",), ("pool",))
    block2 = (("conv", c2, kernel, "same"), ("relu",), ("pool",))
    head = (("dense", hidden), ("relu",), ("dense", class_count))
    if gamma is None:
        # width scaled to the concat dimension so fresh kernels start responsive
        c, h, w = input_shape
        gamma = 1.0 / (c * h * w + c1 * (h // 2) * (w // 2))
    return ArchitectureDescriptor(
        kind="rbf-classifier", input_shape=tuple(input_shape),
        stages={"block1": block1, "block2": block2, "head": head},
        class_count=class_count,
        rbf=RbfLayerSpec(center_count=center_count, gamma=gamma))


def rbf_segmenter(input_shape=(1, 32, 32), channels=(8, 16), kernel=3,
                  center_count=16, gamma: Optional[float] = None) -> ArchitectureDescriptor:
    c1, c2 = channels
    block1 = (("conv", c1, kernel, "same"), ("relu",), ("pool",))
    block2 = (("conv", c2, kernel, "same"), ("relu",), ("pool",))
    decoder = (("conv", c2, kernel, "same"), ("relu",), ("upsample",),
               ("conv", c1, kernel, "same"), ("relu",), ("upsample",),
               ("conv", 1, kernel, "same"))
    if gamma is None:
        c, h, w = input_shape
        gamma = 1.0 / (c * h * w + c1 * (h // 2) * (w // 2))
    return ArchitectureDescriptor(
        kind="rbf-segmenter", input_shape=tuple(input_shape),
        stages={"block1": block1, "block2": block2, "decoder": decoder},
        rbf=RbfLayerSpec(center_count=center_count, gamma=gamma))


def sequential(input_shape, layers=(), class_count=None) -> ArchitectureDescriptor:
    """Bare sequential model; an empty layer list is the identity map."""
    return ArchitectureDescriptor(kind="sequential", input_shape=tuple(input_shape),
                                  stages={"trunk": tuple(layers)}, class_count=class_count)


@dataclass
class Model:
    """A descriptor with its (possibly trained) parameter set."""

    desc: ArchitectureDescriptor
    params: dict

    def logits(self, images: np.ndarray) -> np.ndarray:
        return forward(self.params, Tensor(np.asarray(images)), self.desc).data

    def predict(self, images: np.ndarray) -> np.ndarray:
        return predict_classes(self.params, self.desc, images)

    def hidden(self, images: np.ndarray) -> np.ndarray:
        _, h = forward_with_hidden(self.params, Tensor(np.asarray(images)), self.desc)
        return h.data


# ---------------------------------------------------------------------------
# ensembles


@dataclass(frozen=True)
class Ensemble:
    """Mean-of-softmax model committee."""

    members: tuple  # of (descriptor, params) pairs

    def __post_init__(self):
        if len(self.members) < 1:
            raise ValueError("ensemble needs at least one member")
        d0 = self.members[0][0]
        for desc, _ in self.members:
            if tuple(desc.input_shape) != tuple(d0.input_shape):
                raise ValueError("ensemble members disagree on input shape")
            if desc.class_count != d0.class_count:
                raise ValueError("ensemble members disagree on class count")


def ensemble_predict(ensemble: Ensemble, image: np.ndarray) -> tuple[np.ndarray, int]:
    """Mean softmax probabilities over members and the argmax class.

    Ties break toward the lowest class index.
    """
    x = np.asarray(image)
    if x.ndim == 3:
        x = x[None]
    probs = None
    for desc, params in ensemble.members:
        logits = forward(params, Tensor(x), desc)
        p = ad.softmax(logits).data
        probs = p if probs is None else probs + p
    probs = probs / len(ensemble.members)
    return probs[0], int(np.argmax(probs[0]))


# ---------------------------------------------------------------------------
# parameter serialization


def save_params(directory, params: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, tensor in params.items():
        fname = name.replace("/", "_") + ".atns"
        write_tensor_file(directory / fname, tensor.data)
        manifest[name] = fname
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))


def load_params(directory) -> dict:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    return {name: Tensor(read_tensor_file(directory / fname), requires_grad=True)
            for name, fname in sorted(manifest.items())}
