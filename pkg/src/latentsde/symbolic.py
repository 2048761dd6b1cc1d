"""Symbolic bottleneck: an interpretable basis library over raw input
windows, a sparse linear head distilled from the neural forecaster, and a
stable textual expression format with a parser.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import AdamState, ContractViolation, adam_step

__all__ = [
    "BasisDescriptor",
    "BasisLibrary",
    "SymbolicHead",
    "build_library",
    "evaluate_library",
    "symbolic_predict",
    "gumbel_softmax",
    "distill_step",
    "extract_expression",
    "parse_expression",
    "tau_schedule",
]

RATIO_GUARD = 1e-8


@dataclass(frozen=True)
class BasisDescriptor:
    """One library element; maps a window[L, dx] to a scalar."""

    kind: str  # last | ma | diff | ratio | var
    channel: int
    window: Optional[int] = None  # only for kind == "ma"

    def label(self) -> str:
        if self.kind == "ma":
            return f"ma(ch={self.channel},w={self.window})"
        return f"{self.kind}(ch={self.channel})"


_DESC_RE = re.compile(r"^(last|ma|diff|ratio|var)\(ch=(\d+)(?:,w=(\d+))?\)$")


def parse_descriptor(text: str) -> BasisDescriptor:
    m = _DESC_RE.match(text.strip())
    if m is None:
        raise ValueError(f"unparseable basis descriptor: {text!r}")
    kind, ch, w = m.group(1), int(m.group(2)), m.group(3)
    if (kind == "ma") != (w is not None):
        raise ValueError(f"window argument mismatch in {text!r}")
    return BasisDescriptor(kind, ch, int(w) if w else None)


@dataclass
class BasisLibrary:
    entries: list  # of BasisDescriptor
    L: int
    dx: int

    @property
    def K(self):
        return len(self.entries)

    def labels(self):
        return [e.label() for e in self.entries]


def build_library(dx, L) -> BasisLibrary:
    """Per channel: last value, moving averages over {5, 10, L} (deduplicated
    and clipped to the window), last first-difference, guarded last/first
    ratio, and sample variance."""
    if L < 2:
        raise ContractViolation("build_library requires L >= 2")
    entries = []
    for ch in range(dx):
        entries.append(BasisDescriptor("last", ch))
        seen = set()
        for w in (5, 10, L):
            w = min(w, L)
            if w not in seen:
                seen.add(w)
                entries.append(BasisDescriptor("ma", ch, w))
        entries.append(BasisDescriptor("diff", ch))
        entries.append(BasisDescriptor("ratio", ch))
        entries.append(BasisDescriptor("var", ch))
    return BasisLibrary(entries=entries, L=L, dx=dx)


def _eval_one(desc: BasisDescriptor, windows):
    """windows: (n, L, dx) -> (n,)."""
    x = windows[:, :, desc.channel]
    if desc.kind == "last":
        return x[:, -1]
    if desc.kind == "ma":
        return x[:, -desc.window :].mean(axis=1)
    if desc.kind == "diff":
        return x[:, -1] - x[:, -2]
    if desc.kind == "ratio":
        first = x[:, 0]
        return np.where(np.abs(first) > RATIO_GUARD, x[:, -1] / np.where(first == 0, 1.0, first), 1.0)
    if desc.kind == "var":
        return x.var(axis=1, ddof=1)
    raise ContractViolation(f"unknown basis kind {desc.kind!r}")


def evaluate_library(lib: BasisLibrary, windows) -> np.ndarray:
    """Feature matrix (n, K) for windows (n, L, dx) or a single (L, dx)."""
    w = np.asarray(windows, dtype=np.float64)
    single = w.ndim == 2
    if single:
        w = w[None]
    if w.shape[1] != lib.L or w.shape[2] != lib.dx:
        raise ContractViolation("window shape does not match the library")
    feats = np.stack([_eval_one(e, w) for e in lib.entries], axis=1)
    return feats[0] if single else feats


@dataclass
class SymbolicHead:
    weights: np.ndarray  # (K,)
    l1_weight: float = 0.0
    selection_logits: Optional[np.ndarray] = None
    temperature: float = 1.0
    opt: AdamState = field(default_factory=lambda: AdamState(lr=0.01))

    def __post_init__(self):
        if self.selection_logits is not None and self.temperature <= 0:
            raise ContractViolation("selection requires temperature > 0")

    @staticmethod
    def init(K, l1_weight=0.0, lr=0.01):
        return SymbolicHead(weights=np.zeros(K), l1_weight=l1_weight,
                            opt=AdamState(lr=lr))


def gumbel_softmax(logits, gumbels, tau):
    """p_k = exp((logits_k + g_k) / tau) / sum_j, computed in log space."""
    if tau <= 0:
        raise ContractViolation("gumbel_softmax requires tau > 0")
    a = (np.asarray(logits, dtype=np.float64) + np.asarray(gumbels, dtype=np.float64)) / tau
    a = a - np.max(a, axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


def symbolic_predict(head: SymbolicHead, lib: BasisLibrary, window, gumbels=None):
    """Sparse linear readout over the library; with selection logits the
    weights are the Gumbel-softmax probabilities instead."""
    feats = evaluate_library(lib, window)
    if head.selection_logits is not None:
        g = np.zeros_like(head.selection_logits) if gumbels is None else gumbels
        w = gumbel_softmax(head.selection_logits, g, head.temperature)
    else:
        w = head.weights
    return feats @ w


def distill_step(head: SymbolicHead, lib: BasisLibrary, batch_windows, teacher_preds):
    """One Adam step on mean((y_symb - y_teacher)^2) + l1_weight * |w|_1.

    The L1 subgradient at zero is taken as 0. Returns the penalized loss
    value before the update. Only head.weights moves.
    """
    feats = evaluate_library(lib, batch_windows)  # (n, K)
    y = np.asarray(teacher_preds, dtype=np.float64)
    resid = feats @ head.weights - y
    loss = float(np.mean(resid**2) + head.l1_weight * np.sum(np.abs(head.weights)))
    grad = 2.0 * feats.T @ resid / len(y) + head.l1_weight * np.sign(head.weights)
    adam_step(head.opt, {"w": head.weights}, {"w": grad})
    return loss


def tau_schedule(epoch, n_epochs, tau_start=1.0, tau_end=0.1):
    """Geometric anneal from tau_start to tau_end across the distill epochs."""
    if n_epochs <= 1:
        return tau_end
    frac = epoch / (n_epochs - 1)
    return float(tau_start * (tau_end / tau_start) ** frac)


def extract_expression(head: SymbolicHead, lib: BasisLibrary, threshold=1e-3) -> str:
    """Deterministic formula listing |w_k| > threshold, largest first,
    weights printed to 6 significant digits."""
    order = np.argsort(-np.abs(head.weights), kind="stable")
    terms = [
        f"{head.weights[k]:#.6g}·{lib.entries[k].label()}"
        for k in order
        if abs(head.weights[k]) > threshold
    ]
    if not terms:
        return "ŷ = 0"
    return "ŷ = " + " + ".join(terms)


def parse_expression(text: str):
    """Inverse of extract_expression: list of (weight, BasisDescriptor)."""
    body = text.strip()
    if not body.startswith("ŷ = "):
        raise ValueError("expression must start with 'ŷ = '")
    body = body[len("ŷ = ") :]
    if body == "0":
        return []
    out = []
    for term in body.split(" + "):
        w_str, _, d_str = term.partition("·")
        if not d_str:
            raise ValueError(f"malformed term {term!r}")
        out.append((float(w_str), parse_descriptor(d_str)))
    return out
