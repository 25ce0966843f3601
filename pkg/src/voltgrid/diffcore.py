"""Differentiable-computation contract: named parameters, gradients, Adam, checks.

Reverse-mode gradients come from torch autograd; everything above that
(parameter bookkeeping, the Adam update, finite-difference verification and
checkpoint I/O) lives here so the learner never touches a torch optimizer.
"""
from __future__ import annotations

import io
import json
import math
import zipfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch

CHECKPOINT_FORMAT = 1


class ParamSet:
    """Ordered mapping of names to leaf tensors with a stable flat view."""

    def __init__(self, tensors: Mapping[str, torch.Tensor]):
        self._t = OrderedDict((k, v) for k, v in tensors.items())

    @classmethod
    def from_module(cls, module: torch.nn.Module, prefix: str = "") -> "ParamSet":
        return cls(OrderedDict((prefix + n, p) for n, p in module.named_parameters()))

    @classmethod
    def merge(cls, *sets: "ParamSet") -> "ParamSet":
        out = OrderedDict()
        for s in sets:
            for k, v in s.items():
                if k in out:
                    raise KeyError(f"duplicate parameter name {k}")
                out[k] = v
        return cls(out)

    def __getitem__(self, name):
        return self._t[name]

    def __iter__(self):
        return iter(self._t)

    def __len__(self):
        return len(self._t)

    def items(self):
        return self._t.items()

    def values(self):
        return self._t.values()

    def names(self) -> list[str]:
        return list(self._t)

    def shapes(self) -> dict[str, tuple]:
        return {k: tuple(v.shape) for k, v in self._t.items()}

    def numel(self) -> int:
        return sum(v.numel() for v in self._t.values())

    def flat(self) -> np.ndarray:
        if not self._t:
            return np.zeros(0)
        return np.concatenate([v.detach().cpu().numpy().ravel() for v in self._t.values()])

    def load_flat(self, vec) -> None:
        vec = np.asarray(vec)
        if vec.size != self.numel():
            raise ValueError(f"flat vector has {vec.size} entries, expected {self.numel()}")
        o = 0
        with torch.no_grad():
            for v in self._t.values():
                n = v.numel()
                v.copy_(torch.as_tensor(vec[o:o + n].reshape(v.shape), dtype=v.dtype))
                o += n

    def to_numpy(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self._t.items()}

    def load_numpy(self, arrays: Mapping[str, np.ndarray]) -> None:
        with torch.no_grad():
            for k, v in self._t.items():
                a = arrays[k]
                if tuple(a.shape) != tuple(v.shape):
                    raise ValueError(f"{k}: shape {a.shape} does not match {tuple(v.shape)}")
                v.copy_(torch.as_tensor(a, dtype=v.dtype))

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for v in self._t.values())


def grad(fn: Callable, params: ParamSet, *inputs) -> ParamSet:
    """Gradient of the scalar ``fn(*inputs)`` with respect to every tensor in ``params``.

    Parameters that do not influence the loss receive zero gradients.
    """
    loss = fn(*inputs)
    if not torch.is_tensor(loss) or loss.numel() != 1:
        raise ValueError("loss must be a scalar tensor")
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {float(loss.detach())}")
    tensors = list(params.values())
    gs = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    out = OrderedDict()
    for (k, p), g in zip(params.items(), gs):
        g = torch.zeros_like(p) if g is None else g.detach()
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for {k}")
        out[k] = g
    return ParamSet(out)


def global_norm(grads: ParamSet) -> float:
    return math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))


def clip_by_global_norm(grads: ParamSet, max_norm: float) -> tuple[ParamSet, float]:
    norm = global_norm(grads)
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    s = max_norm / norm
    return ParamSet(OrderedDict((k, g * s) for k, g in grads.items())), norm


@dataclass
class OptimizerState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)  # per-parameter update counts for bias correction

    @classmethod
    def for_params(cls, params: ParamSet, **kw) -> "OptimizerState":
        st = cls(**kw)
        st.m = {k: torch.zeros_like(p.detach()) for k, p in params.items()}
        st.v = {k: torch.zeros_like(p.detach()) for k, p in params.items()}
        return st


def adam_step(params: ParamSet, grads: ParamSet, state: OptimizerState) -> tuple[ParamSet, OptimizerState]:
    """One in-place Adam update (bias-corrected); returns the same objects for chaining."""
    if set(params.names()) != set(grads.names()):
        raise ValueError("gradient names do not match parameter names")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    with torch.no_grad():
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise ValueError(f"{k}: gradient shape {tuple(g.shape)} vs parameter {tuple(p.shape)}")
            n = state.counts[k] = state.counts.get(k, 0) + 1
            c1 = 1.0 - b1**n
            c2 = 1.0 - b2**n
            m = state.m.setdefault(k, torch.zeros_like(p))
            v = state.v.setdefault(k, torch.zeros_like(p))
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(state.lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return params, state


def finite_difference_check(
    fn: Callable[[], torch.Tensor],
    params: ParamSet,
    h: float = 1e-5,
    max_entries: int | None = 64,
    seed: int = 0,
    atol: float = 1e-8,
) -> float:
    """Max relative error between autograd and central differences of ``fn()``.

    ``fn`` takes no arguments and reads the (mutable) parameters; run in float64.
    Relative error is ``max(|a - n| - noise, 0) / max(|a|, |n|, atol)``, where
    ``noise = 100 * eps * max(|f|, 1) / h`` bounds the rounding error of the
    difference quotient. Gaps inside that bound carry no information (e.g. an
    attention key bias, whose exact gradient is 0).

    Each entry is differenced at ``h``, ``h/10`` and ``h/100`` and the best
    agreement counts: peaked softmaxes and nearby ReLU kinks bend on scales
    below ``h``, while a wrong backward disagrees at every step.
    """
    analytic = grad(fn, params)
    with torch.no_grad():
        f0 = float(fn())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, p in params.items():
        flat = p.detach().view(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and idx.size > max_entries:
            idx = rng.choice(idx, size=max_entries, replace=False)
        ga = analytic[k].reshape(-1)
        for i in idx:
            a = float(ga[i])
            best = math.inf
            for step in (h, h / 10, h / 100):
                with torch.no_grad():
                    orig = flat[i].item()
                    flat[i] = orig + step
                    fp = float(fn())
                    flat[i] = orig - step
                    fm = float(fn())
                    flat[i] = orig
                num = (fp - fm) / (2 * step)
                noise = 100 * np.finfo(np.float64).eps * max(abs(f0), 1.0) / step
                best = min(best, max(abs(a - num) - noise, 0.0) / max(abs(a), abs(num), atol))
                if best == 0.0:
                    break
            worst = max(worst, best)
    return worst


def init_linear(layer: torch.nn.Linear, generator: torch.Generator) -> None:
    """Fan-in scaled uniform initialisation U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.uniform_(-bound, bound, generator=generator)
        if layer.bias is not None:
            layer.bias.uniform_(-bound, bound, generator=generator)


def init_module(module: torch.nn.Module, generator: torch.Generator) -> None:
    """Seeded initialisation of every linear map and recurrent cell in ``module``."""
    for m in module.modules():
        if isinstance(m, torch.nn.Linear):
            init_linear(m, generator)
        elif isinstance(m, torch.nn.GRUCell):
            bound = 1.0 / math.sqrt(m.hidden_size)
            with torch.no_grad():
                for p in m.parameters():
                    p.uniform_(-bound, bound, generator=generator)


# ---------------------------------------------------------------- checkpoints
#
# A checkpoint is a zip archive (numpy .npz layout) with one ``<name>.npy``
# entry per tensor plus ``__header__.json`` holding the format version, the
# run-manifest hash, tensor shapes and any extra JSON metadata. Entries are
# written in sorted order with fixed timestamps so identical content yields
# identical bytes.

def save_checkpoint(path, tensors: Mapping[str, np.ndarray], manifest_hash: str = "", meta: dict | None = None) -> Path:
    path = Path(path)
    arrays = {k: np.asarray(v, order="C") for k, v in tensors.items()}
    header = {
        "format_version": CHECKPOINT_FORMAT,
        "manifest_hash": manifest_hash,
        "shapes": {k: list(a.shape) for k, a in sorted(arrays.items())},
        "dtypes": {k: str(a.dtype) for k, a in sorted(arrays.items())},
        "meta": meta or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("__header__.json", date_time=(1980, 1, 1, 0, 0, 0)), json.dumps(header, sort_keys=True))
        for k in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, arrays[k], allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(k + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("__header__.json"))
        if header.get("format_version") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {header.get('format_version')}")
        arrays = {}
        for k in header["shapes"]:
            arrays[k] = np.load(io.BytesIO(zf.read(k + ".npy")), allow_pickle=False)
    return arrays, header


def prefixed(params: ParamSet, prefix: str) -> dict[str, np.ndarray]:
    return {prefix + k: v for k, v in params.to_numpy().items()}


def gather(arrays: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    n = len(prefix)
    return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix)}


def optimizer_arrays(state: OptimizerState) -> dict[str, np.ndarray]:
    out = {"opt_counts/" + k: np.array(n, dtype=np.int64) for k, n in state.counts.items()}
    for k, t in state.m.items():
        out["opt_m/" + k] = t.cpu().numpy().copy()
    for k, t in state.v.items():
        out["opt_v/" + k] = t.cpu().numpy().copy()
    return out


def restore_optimizer(state: OptimizerState, arrays: Mapping[str, np.ndarray], names: Iterable[str]) -> None:
    for k in names:
        state.m[k] = torch.as_tensor(arrays["opt_m/" + k]).clone()
        state.v[k] = torch.as_tensor(arrays["opt_v/" + k]).clone()
        if "opt_counts/" + k in arrays:
            state.counts[k] = int(np.asarray(arrays["opt_counts/" + k]).reshape(()))
