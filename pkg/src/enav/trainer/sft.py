"""Supervised fine-tuning on mixed no-think / think token targets."""
from __future__ import annotations

import logging

import numpy as np
import torch

from ..policy import ContextBatch, PolicyNet
from .data import HybridDataset, SampleSet

log = logging.getLogger(__name__)


def sequence_nll(net: PolicyNet, contexts: ContextBatch, tokens, max_trace_len: int | None = None) -> torch.Tensor:
    """Mean over samples of the summed negative log-likelihood of each target sequence."""
    sb = net.score(contexts, tokens, max_trace_len)
    return -(sb.logp.sum(dim=1)).mean()


def token_accuracy(net: PolicyNet, samples: SampleSet) -> float:
    """Fraction of target tokens that are the argmax of their teacher-forced masked distribution."""
    with torch.no_grad():
        sb = net.score(samples.contexts, samples.tokens)
        pred = sb.logp_all.argmax(dim=-1)
        tok = torch.zeros_like(pred)
        for i, t in enumerate(samples.tokens):
            tok[i, : len(t)] = torch.as_tensor(t)
        hit = (pred == tok) & sb.valid
    return float(hit.sum()) / float(sb.valid.sum())


def hsft_train(
    net: PolicyNet,
    ds: HybridDataset | SampleSet,
    epochs: int = 1,
    batch: int = 256,
    lr: float = 2e-3,
    seed: int = 0,
) -> tuple[PolicyNet, list[float]]:
    """Minimize token NLL over both subsets, shuffled together each epoch.

    Trains ``net`` in place and returns it with the per-epoch mean loss.
    """
    samples = ds.training_set() if isinstance(ds, HybridDataset) else ds
    n = len(samples)
    if n == 0:
        raise ValueError("empty dataset")
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    curve = []
    for ep in range(epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for s in range(0, n, batch):
            idx = order[s : s + batch]
            loss = sequence_nll(net, samples.contexts.select(idx), [samples.tokens[i] for i in idx])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite SFT loss at epoch {ep}, batch starting {s}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        curve.append(total / count)
        log.info("sft epoch %d loss %.4f", ep, curve[-1])
    return net, curve
