"""Shared test utilities: independent oracles and batch generators."""

import math

import numpy as np

from twostage.loss import AlignmentBatch, LossConfig, combined_loss


def straight_line_guided(query_tokens, item_tokens, tau, eps=1e-12):
    """Independent float64 reimplementation of the interaction block."""
    t = np.asarray(query_tokens, dtype=np.float64)
    h = np.asarray(item_tokens, dtype=np.float64)
    s = t @ h.T
    e = np.exp(s / tau - (s / tau).max(axis=1, keepdims=True))
    soft = e / e.sum(axis=1, keepdims=True)
    assignment = soft / np.maximum(soft.sum(axis=0), eps)
    mixed = assignment.T @ t
    pooled = mixed.mean(axis=0)
    return pooled / max(np.linalg.norm(pooled), eps)


def unit_rows(rng, n, d):
    rows = rng.normal(size=(n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def random_batch(rng, n, d):
    return AlignmentBatch(
        text=unit_rows(rng, n, d),
        recall=unit_rows(rng, n, d),
        guided_coarse=unit_rows(rng, n, d),
        guided_fine=unit_rows(rng, n, d),
    )


def well_conditioned_batch(rng, n, d, cfg, min_gap=1e-2, attempts=200):
    """Random batch whose top-M neighbor boundary is not a near-tie.

    Finite differences perturb the recall block; a near-tie at the M-th
    neighbor would let the hard selection flip inside the step.
    """
    m = min(cfg.neighbors, n - 1)
    for _ in range(attempts):
        batch = random_batch(rng, n, d)
        sims = batch.recall @ batch.recall.T
        ok = True
        for i in range(n):
            others = sorted((sims[i, j] for j in range(n) if j != i), reverse=True)
            if m < len(others) and others[m - 1] - others[m] < min_gap:
                ok = False
                break
        if ok:
            return batch
    raise AssertionError("could not draw a well-conditioned batch")


def oracle_loss(batch, cfg):
    """Straight-line double-loop reimplementation of the training objective."""
    n = batch.n
    text, (v1, v2, v3) = batch.text, batch.branches()
    branch_losses = []
    for v in (v1, v2, v3):
        acc = 0.0
        for i in range(n):
            for j in range(n):
                y = 1.0 if i == j else -1.0
                s = float(np.dot(text[i], v[j]))
                acc += math.log1p(math.exp(-y * s / cfg.tau))
        branch_losses.append(acc / (n * n))
    inter = sum(a * b for a, b in zip(cfg.alpha, branch_losses))

    intra_branches = [0.0, 0.0]
    if n >= 2:
        m = min(cfg.neighbors, n - 1)
        for slot, v in enumerate((v2, v3)):
            acc = 0.0
            for i in range(n):
                sims = [(float(np.dot(v1[i], v1[j])), j) for j in range(n) if j != i]
                sims.sort(key=lambda p: (-p[0], p[1]))
                kept = sims[:m]
                raw = [math.exp(a / cfg.sigma) for a, _ in kept]
                z = sum(raw)
                for (a, j), w in zip(kept, raw):
                    acc += (w / z) * (1.0 - float(np.dot(v[i], v[j])))
            intra_branches[slot] = acc / n
    intra = sum(intra_branches)
    return inter + cfg.beta * intra, branch_losses, intra_branches


def finite_difference_gradients(batch, cfg, step=1e-4):
    """Central differences of the total loss, one coordinate at a time."""
    blocks = {
        "text": batch.text,
        "recall": batch.recall,
        "guided_coarse": batch.guided_coarse,
        "guided_fine": batch.guided_fine,
    }

    def total_at(name, index, value):
        arrays = {k: v.copy() for k, v in blocks.items()}
        arrays[name].flat[index] = value
        return combined_loss(AlignmentBatch(**arrays), cfg).total

    grads = {}
    for name, block in blocks.items():
        g = np.zeros_like(block)
        for index in range(block.size):
            base = block.flat[index]
            up = total_at(name, index, base + step)
            down = total_at(name, index, base - step)
            g.flat[index] = (up - down) / (2.0 * step)
        grads[name] = g
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def default_loss_config(**overrides):
    return LossConfig(**overrides)
