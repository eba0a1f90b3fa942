"""Shared test oracles: central finite differences and a NumPy transformer forward."""

import math

import numpy as np
import torch

# criterion number -> one-line verdict, filled by test_acceptance and echoed at session end
ACCEPTANCE: dict[int, str] = {}


def fd_relative_errors(fn, tensors, h=1e-5):
    """Compare autograd gradients of scalar ``fn()`` with central differences.

    Returns one relative error ``|a - n| / max(|a|, |n|)`` (L2 norms) per tensor.
    """
    for t in tensors:
        t.grad = None
    out = fn()
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    errors = []
    for t, g in zip(tensors, grads):
        analytic = torch.zeros_like(t) if g is None else g.detach()
        numeric = torch.zeros_like(t)
        flat = t.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            plus = fn().item()
            flat[i] = orig - h
            minus = fn().item()
            flat[i] = orig
            numeric.view(-1)[i] = (plus - minus) / (2 * h)
        denom = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
        errors.append((analytic - numeric).norm().item() / denom)
    return errors


def _ln(x, w, b, eps=1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


_erf = np.vectorize(math.erf)


def _gelu(x):
    return 0.5 * x * (1.0 + _erf(x / math.sqrt(2.0)))


def numpy_block(x, p, num_heads, pad=None):
    """Step-by-step forward of one pre-norm block for a single (T, d) sequence.

    ``p`` maps parameter names (as in ``Block.state_dict()``) to arrays.
    """
    t, d = x.shape
    hd = d // num_heads
    h = _ln(x, p["norm1.weight"], p["norm1.bias"])
    qkv = h @ p["attn.qkv.weight"].T + p["attn.qkv.bias"]
    q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
    heads = []
    for i in range(num_heads):
        sl = slice(i * hd, (i + 1) * hd)
        scores = q[:, sl] @ k[:, sl].T / math.sqrt(hd)
        if pad is not None:
            scores = np.where(pad[None, :], -np.inf, scores)
        scores = scores - scores.max(axis=1, keepdims=True)
        w = np.exp(scores)
        w = w / w.sum(axis=1, keepdims=True)
        heads.append(w @ v[:, sl])
    attn = np.concatenate(heads, axis=1) @ p["attn.proj.weight"].T + p["attn.proj.bias"]
    x = x + attn
    h = _ln(x, p["norm2.weight"], p["norm2.bias"])
    h = _gelu(h @ p["fc1.weight"].T + p["fc1.bias"])
    return x + h @ p["fc2.weight"].T + p["fc2.bias"]


def state_numpy(module, prefix=""):
    return {k[len(prefix):]: v.detach().double().numpy()
            for k, v in module.state_dict().items() if k.startswith(prefix)}


def randomize_(module, generator, scale=0.5):
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * scale)
    return module
