"""Independent reference computations shared by unit and acceptance tests.

Each oracle re-derives a quantity the slow, obvious way so it cannot share a
bug with the vectorised library code.
"""

import math

import numpy as np

from csvar.fl import ModelParams, init_model, loss_and_grad
from csvar.shuffler import derive_region_seed, fisher_yates
from csvar.tensor import region_size


def formula_region_size(h, w):
    # direct float evaluation, with the floor of 2
    return max(2, 2 ** math.ceil(math.log2(math.sqrt(max(h, w)))))


def twopass_variance(block):
    block = np.asarray(block, dtype=np.float64).reshape(-1, block.shape[-1])
    per_channel = []
    for c in range(block.shape[1]):
        x = block[:, c]
        mu = sum(x) / len(x)
        per_channel.append(sum((v - mu) ** 2 for v in x) / len(x))
    return sum(per_channel) / len(per_channel)


def oracle_plan(image, s):
    """Block sizes recomputed from scratch: two-pass variances, sorted-list median."""
    h, w, c = image.shape
    rows, cols = h // s, w // s
    var = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            block = image[i * s:(i + 1) * s, j * s:(j + 1) * s].astype(np.float64)
            chans = []
            for ch in range(c):
                x = block[..., ch].ravel()
                chans.append(((x - x.mean()) ** 2).mean())
            var[i, j] = sum(chans) / c
    flat = sorted(var.ravel())
    n = len(flat)
    med = flat[n // 2] if n % 2 else (flat[n // 2 - 1] + flat[n // 2]) / 2
    return np.where(var > med, max(s // 4, 1), max(s // 2, 1)), var


def oracle_shuffle(image, config, image_id):
    """Loop-by-loop reference: one Fisher-Yates draw per region (and channel)."""
    s = region_size(*image.shape[:2])
    plan, _ = oracle_plan(image, s)
    if config.block_size_override:
        plan[:] = config.block_size_override
    out = image.copy()
    h, w, c = image.shape
    for i in range(h // s):
        for j in range(w // s):
            bs = int(plan[i, j])
            g = s // bs
            planes = [list(range(c))] if config.mode == "spatial-only" else [[ch] for ch in range(c)]
            for chans in planes:
                seed = derive_region_seed(config.master_seed, image_id, config.epoch, i, j, chans[0])
                perm = fisher_yates(g * g, seed)
                for p in range(g * g):
                    src = perm[p]
                    dy, dx = i * s + (p // g) * bs, j * s + (p % g) * bs
                    sy, sx = i * s + (src // g) * bs, j * s + (src % g) * bs
                    out[dy:dy + bs, dx:dx + bs, chans] = image[sy:sy + bs, sx:sx + bs, chans]
    return out


def pairwise_auc(member_losses, nonmember_losses):
    """Brute force over every (member, non-member) pair; lower loss wins, ties count half."""
    wins = 0.0
    for m in member_losses:
        for n in nonmember_losses:
            wins += 1.0 if m < n else 0.5 if m == n else 0.0
    return wins / (len(member_losses) * len(nonmember_losses))


def numeric_grad(params, x, y, eps=1e-4):
    """Central finite differences of the mean loss, one parameter at a time."""
    flat = params.flat()
    d, h, c = params.dims
    out = np.zeros_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += eps
        down[i] -= eps
        lu, _ = loss_and_grad(ModelParams.from_flat(up, d, h, c), x, y)
        ld, _ = loss_and_grad(ModelParams.from_flat(down, d, h, c), x, y)
        out[i] = (lu - ld) / (2 * eps)
    return out


def smooth_instance(rng, d, h, c, n, margin=1e-3):
    """Random model and batch whose hidden pre-activations stay ``margin`` away from the ReLU kink.

    A 1e-4 step moves any pre-activation by at most 1e-4 here, so central
    differences never straddle the kink.
    """
    while True:
        params = init_model(d, h, c, int(rng.integers(2**32)))
        params.b1[:] = rng.normal(0, 0.1, h)
        x = rng.uniform(0, 1, (n, d))
        if np.abs(x @ params.W1 + params.b1).min() > margin:
            return params, x, rng.integers(0, c, n)


def relative_grad_error(params, x, y):
    _, grad = loss_and_grad(params, x, y)
    num = numeric_grad(params, x, y)
    return np.linalg.norm(grad.flat() - num) / max(np.linalg.norm(num), 1e-12)
