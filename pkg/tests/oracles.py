"""Independent reference computations used by the tests."""

import itertools

import numpy as np


def partition_inertia(points, labels, k):
    total = 0.0
    for j in range(k):
        members = points[labels == j]
        mean = members.mean(axis=0)
        c = mean / np.linalg.norm(mean)
        total += float(sum(np.dot(p - c, p - c) for p in members))
    return total


def best_partition_inertia(points, k):
    """Minimum chord inertia over every split into k non-empty groups."""
    n = len(points)
    best = np.inf
    for labels in itertools.product(range(k), repeat=n):
        labels = np.array(labels)
        if labels[0] != 0 or len(set(labels.tolist())) != k:
            continue  # each partition once up to relabeling (point 0 in group 0)
        best = min(best, partition_inertia(points, labels, k))
    return best


def random_unit_points(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def central_difference(f, x, idx, h):
    old = x[idx]
    x[idx] = old + h
    up = f()
    x[idx] = old - h
    down = f()
    x[idx] = old
    return (up - down) / (2.0 * h)


def network_param_count(image_px=32, patch_px=4, embed_dim=32, num_blocks=2, mlp_ratio=2,
                        heat_px=32, kernel=3, c1=8, c2=16, n_stars=8, hidden=64, k=12):
    """Hand-derived parameter count of the default (LayerNorm-fused) network."""
    d = embed_dim
    embed = patch_px * patch_px * d + d
    block = (
        2 * (2 * d)  # two norms
        + d * 3 * d + 3 * d  # qkv
        + d * d + d  # output projection
        + d * mlp_ratio * d + mlp_ratio * d  # fc1
        + mlp_ratio * d * d + d  # fc2
    )
    final_norm = 2 * d
    g1 = (heat_px - kernel) // 2 + 1
    g2 = (g1 - kernel) // 2 + 1
    cnn = kernel * kernel * c1 + c1 + kernel * kernel * c1 * c2 + c2
    mlp = 3 * n_stars * hidden + hidden + 2 * (hidden * hidden + hidden)
    fused = d + c2 * g2 * g2 + hidden
    head = 2 * fused + fused * k + k
    return embed + num_blocks * block + final_norm + cnn + mlp + head
