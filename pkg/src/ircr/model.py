"""Tiny two-head encoder-decoder with hand-implemented forward and backward
passes, an Adam optimizer and the EMA teacher update.

Topology (channels 8 -> 16 -> 16 -> 8, float64 throughout):

    enc1: conv3x3 + ReLU + 2x2 avg pool
    enc2: conv3x3 + ReLU + 2x2 avg pool
    dec1: nearest 2x upsample + conv3x3 + ReLU
    dec2: nearest 2x upsample + conv3x3 + ReLU
    NP head: conv1x1 -> 2 channels -> channel softmax
    HV head: conv1x1 -> 2 channels -> tanh

Parameters live in a plain ordered dict of named float64 arrays; student and
teacher share the same key set. Internal ops are batched (B, C, H, W); the
public ``forward``/``backward`` work on single (C, H, W) images.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensorio import load_tensor, save_tensor

ModelParams = dict  # name -> float64 ndarray, fixed key order

_CONV_SPECS = [
    ("enc1", 3),  # (name, kernel); channel plan filled in by init
    ("enc2", 3),
    ("dec1", 3),
    ("dec2", 3),
    ("np", 1),
    ("hv", 1),
]


@dataclass(frozen=True)
class EmaConfig:
    alpha: float = 0.95

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("EMA alpha must be in [0, 1)")


@dataclass
class ForwardOutput:
    np_probs: np.ndarray  # (2, H, W), per-pixel softmax
    hv: np.ndarray  # (2, H, W), tanh range [-1, 1]
    f: np.ndarray  # (4, H, W): [np_bg, np_fg, hv_h, hv_v]
    b: np.ndarray  # (H, W): np_fg channel
    cache: dict | None = None


@dataclass
class BatchForwardOutput:
    np_probs: np.ndarray  # (B, 2, H, W)
    hv: np.ndarray
    cache: dict | None = None

    def item(self, i: int) -> ForwardOutput:
        f = np.concatenate([self.np_probs[i], self.hv[i]])
        return ForwardOutput(
            np_probs=self.np_probs[i], hv=self.hv[i], f=f, b=self.np_probs[i, 1], cache=None
        )


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def init_model_params(seed: int, in_channels: int = 1) -> ModelParams:
    """He-normal conv kernels, zero biases, deterministic for a seed."""
    rng = np.random.default_rng(seed)
    plan = {
        "enc1": (in_channels, 8, 3),
        "enc2": (8, 16, 3),
        "dec1": (16, 16, 3),
        "dec2": (16, 8, 3),
        "np": (8, 2, 1),
        "hv": (8, 2, 1),
    }
    params: ModelParams = {}
    for name, (cin, cout, k) in plan.items():
        fan_in = cin * k * k
        params[f"{name}_w"] = rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / fan_in)
        params[f"{name}_b"] = np.zeros(cout)
    return params


def copy_params(params: ModelParams) -> ModelParams:
    return {name: arr.copy() for name, arr in params.items()}


def _conv3(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 zero-padded convolution on (B, C, H, W); returns (out, patches)."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    patches = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    out = np.tensordot(w, patches, axes=([1, 2, 3], [1, 4, 5]))
    return out.transpose(1, 0, 2, 3) + b[None, :, None, None], patches


def _conv3_backward(
    gout: np.ndarray, patches: np.ndarray, w: np.ndarray, shape: tuple
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    grad_b = gout.sum(axis=(0, 2, 3))
    grad_w = np.tensordot(gout.transpose(1, 0, 2, 3), patches, axes=([1, 2, 3], [0, 2, 3]))
    bsz, cin, h, wd = shape
    gxp = np.zeros((bsz, cin, h + 2, wd + 2))
    for a in range(3):
        for t in range(3):
            gxp[:, :, a : a + h, t : t + wd] += np.einsum(
                "oc,bohw->bchw", w[:, :, a, t], gout, optimize=True
            )
    return gxp[:, :, 1 : h + 1, 1 : wd + 1], grad_w, grad_b


def _conv1(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("oc,bchw->bohw", w[:, :, 0, 0], x, optimize=True) + b[None, :, None, None]


def _conv1_backward(
    gout: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    grad_b = gout.sum(axis=(0, 2, 3))
    grad_w = np.einsum("bohw,bchw->oc", gout, x, optimize=True)[:, :, None, None]
    grad_x = np.einsum("oc,bohw->bchw", w[:, :, 0, 0], gout, optimize=True)
    return grad_x, grad_w, grad_b


def _pool2(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _pool2_backward(g: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0


def _up2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def _up2_backward(g: np.ndarray) -> np.ndarray:
    b, c, h, w = g.shape
    return g.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def _softmax_ch(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def forward_batch(params: ModelParams, images: np.ndarray) -> BatchForwardOutput:
    """Batched forward pass on (B, C, H, W) images; H and W divisible by 4."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ValueError("forward_batch expects (B, C, H, W)")
    h, w = images.shape[2], images.shape[3]
    if h % 4 or w % 4:
        raise ValueError("input size must be divisible by 4")
    cache: dict = {"x": images}
    a1, p1 = _conv3(images, params["enc1_w"], params["enc1_b"])
    r1 = np.maximum(a1, 0.0)
    d1 = _pool2(r1)
    a2, p2 = _conv3(d1, params["enc2_w"], params["enc2_b"])
    r2 = np.maximum(a2, 0.0)
    d2 = _pool2(r2)
    u1 = _up2(d2)
    a3, p3 = _conv3(u1, params["dec1_w"], params["dec1_b"])
    r3 = np.maximum(a3, 0.0)
    u2 = _up2(r3)
    a4, p4 = _conv3(u2, params["dec2_w"], params["dec2_b"])
    r4 = np.maximum(a4, 0.0)
    np_logits = _conv1(r4, params["np_w"], params["np_b"])
    np_probs = _softmax_ch(np_logits)
    hv_pre = _conv1(r4, params["hv_w"], params["hv_b"])
    hv = np.tanh(hv_pre)
    cache.update(
        a1=a1, p1=p1, a2=a2, p2=p2, a3=a3, p3=p3, a4=a4, p4=p4,
        r4=r4, np_probs=np_probs, hv=hv,
    )
    return BatchForwardOutput(np_probs=np_probs, hv=hv, cache=cache)


def forward(params: ModelParams, image: np.ndarray) -> ForwardOutput:
    """Single-image forward: returns NP softmax probabilities, HV maps, the
    stacked consistency feature map F and the boundary map B."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError("forward expects a (C, H, W) image")
    out = forward_batch(params, image[None])
    f = np.concatenate([out.np_probs[0], out.hv[0]])
    return ForwardOutput(
        np_probs=out.np_probs[0], hv=out.hv[0], f=f, b=out.np_probs[0, 1], cache=out.cache
    )


def backward_batch(
    params: ModelParams, output: BatchForwardOutput, grad_np: np.ndarray, grad_hv: np.ndarray
) -> dict:
    """Exact reverse-mode gradients of the forward pass for every parameter,
    given upstream gradients w.r.t. np_probs and hv."""
    cache = output.cache
    if cache is None:
        raise ValueError("forward cache missing; run forward first")
    grads: dict = {}
    probs = cache["np_probs"]
    g_np_logits = probs * (grad_np - (grad_np * probs).sum(axis=1, keepdims=True))
    g_hv_pre = grad_hv * (1.0 - cache["hv"] ** 2)
    g_r4_a, grads["np_w"], grads["np_b"] = _conv1_backward(g_np_logits, cache["r4"], params["np_w"])
    g_r4_b, grads["hv_w"], grads["hv_b"] = _conv1_backward(g_hv_pre, cache["r4"], params["hv_w"])
    g = (g_r4_a + g_r4_b) * (cache["a4"] > 0.0)
    g, grads["dec2_w"], grads["dec2_b"] = _conv3_backward(
        g, cache["p4"], params["dec2_w"], (g.shape[0], params["dec2_w"].shape[1], *g.shape[2:])
    )
    g = _up2_backward(g)
    g = g * (cache["a3"] > 0.0)
    g, grads["dec1_w"], grads["dec1_b"] = _conv3_backward(
        g, cache["p3"], params["dec1_w"], (g.shape[0], params["dec1_w"].shape[1], *g.shape[2:])
    )
    g = _up2_backward(g)
    g = _pool2_backward(g)
    g = g * (cache["a2"] > 0.0)
    g, grads["enc2_w"], grads["enc2_b"] = _conv3_backward(
        g, cache["p2"], params["enc2_w"], (g.shape[0], params["enc2_w"].shape[1], *g.shape[2:])
    )
    g = _pool2_backward(g)
    g = g * (cache["a1"] > 0.0)
    _, grads["enc1_w"], grads["enc1_b"] = _conv3_backward(
        g, cache["p1"], params["enc1_w"], (g.shape[0], params["enc1_w"].shape[1], *g.shape[2:])
    )
    return {name: grads[name] for name in params}


def backward(
    params: ModelParams, output: ForwardOutput, grad_np: np.ndarray, grad_hv: np.ndarray
) -> dict:
    if output.cache is None:
        raise ValueError("forward cache missing; run forward first")
    batch = BatchForwardOutput(
        np_probs=output.np_probs[None], hv=output.hv[None], cache=output.cache
    )
    return backward_batch(params, batch, np.asarray(grad_np)[None], np.asarray(grad_hv)[None])


def adam_step(
    params: ModelParams,
    grads: dict,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    state: AdamState | None = None,
) -> tuple[ModelParams, AdamState]:
    """Textbook Adam with bias correction; returns fresh params and state."""
    b1, b2 = betas
    if state is None:
        state = AdamState()
    if not state.m:
        state = AdamState(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
            t=state.t,
        )
    t = state.t + 1
    new_params: ModelParams = {}
    new_m: dict = {}
    new_v: dict = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v, t=t)


def ema_update(teacher: ModelParams, student: ModelParams, cfg: EmaConfig) -> ModelParams:
    """theta_t <- alpha * theta_t + (1 - alpha) * theta_s, elementwise."""
    if teacher.keys() != student.keys():
        raise ValueError("teacher and student parameter names differ")
    out: ModelParams = {}
    for name in teacher:
        if teacher[name].shape != student[name].shape:
            raise ValueError(f"shape mismatch for {name}")
        out[name] = cfg.alpha * teacher[name] + (1.0 - cfg.alpha) * student[name]
    return out


def save_checkpoint(
    path: str | Path, student: ModelParams, teacher: ModelParams, state: AdamState
) -> None:
    """Checkpoint directory: one IRCR-T file per named tensor plus a manifest
    with names, shapes and the optimizer timestep."""
    import json

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "IRCR-CHECKPOINT v1", "adam_t": state.t, "tensors": {}}
    groups = {"student": student, "teacher": teacher, "adam_m": state.m, "adam_v": state.v}
    for group, tensors in groups.items():
        manifest["tensors"][group] = {name: list(arr.shape) for name, arr in tensors.items()}
        for name, arr in tensors.items():
            save_tensor(path / f"{group}__{name}.irt", arr)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelParams, AdamState]:
    import json

    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format") != "IRCR-CHECKPOINT v1":
        raise ValueError(f"{path}: not an IRCR checkpoint")

    def load_group(group: str) -> dict:
        out = {}
        for name, shape in manifest["tensors"][group].items():
            arr = load_tensor(path / f"{group}__{name}.irt")
            if list(arr.shape) != shape:
                raise ValueError(f"{path}: shape mismatch for {group}/{name}")
            out[name] = arr
        return out

    student = load_group("student")
    teacher = load_group("teacher")
    state = AdamState(m=load_group("adam_m"), v=load_group("adam_v"), t=int(manifest["adam_t"]))
    return student, teacher, state
