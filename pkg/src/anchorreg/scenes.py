"""Procedural outdoor-like scans used when no real LiDAR data is at hand.

A scene is a gently undulating ground plane populated with boxes, poles and
round shrubs, sampled uniformly by surface area. The sensor sits at the
origin, ``sensor_height`` above the ground.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import PointCloud


def synthetic_scan(
    rng_seed: int = 0,
    n_points: int = 6000,
    extent: float = 20.0,
    n_boxes: int = 14,
    n_poles: int = 10,
    n_shrubs: int = 6,
    sensor_height: float = 1.7,
) -> PointCloud:
    rng = np.random.default_rng(rng_seed)
    bumps = [
        (rng.uniform(-extent, extent, 2), rng.uniform(0.1, 0.4), rng.uniform(2.0, 5.0))
        for _ in range(6)
    ]

    def ground_z(xy: np.ndarray) -> np.ndarray:
        z = np.full(len(xy), -sensor_height)
        for c, amp, width in bumps:
            z += amp * np.exp(-((xy - c) ** 2).sum(1) / (2 * width**2))
        return z

    surfaces = []  # (area, sampler)

    ground_area = (2 * extent) ** 2
    surfaces.append((ground_area, lambda n: _ground(rng, n, extent, ground_z)))

    for _ in range(n_boxes):
        c = rng.uniform(-extent * 0.9, extent * 0.9, 2)
        size = rng.uniform([0.8, 0.8, 0.8], [4.0, 4.0, 4.5])
        yaw = rng.uniform(0, math.pi)
        base = float(ground_z(c[None])[0])
        area = 2 * (size[0] * size[2] + size[1] * size[2]) + size[0] * size[1]
        surfaces.append((area, _box_sampler(rng, c, size, yaw, base)))

    for _ in range(n_poles):
        c = rng.uniform(-extent * 0.9, extent * 0.9, 2)
        radius = rng.uniform(0.1, 0.35)
        height = rng.uniform(2.0, 6.0)
        base = float(ground_z(c[None])[0])
        surfaces.append((2 * math.pi * radius * height, _pole_sampler(rng, c, radius, height, base)))

    for _ in range(n_shrubs):
        c = rng.uniform(-extent * 0.9, extent * 0.9, 2)
        radius = rng.uniform(0.6, 1.6)
        base = float(ground_z(c[None])[0])
        centre = np.array([c[0], c[1], base + 0.6 * radius])
        surfaces.append((4 * math.pi * radius**2 * 0.8, _sphere_sampler(rng, centre, radius, base)))

    areas = np.array([a for a, _ in surfaces])
    counts = np.floor(n_points * areas / areas.sum()).astype(int)
    counts[0] += n_points - counts.sum()
    pts = np.concatenate([sampler(k) for (_, sampler), k in zip(surfaces, counts) if k > 0])
    intensity = rng.uniform(0.0, 1.0, len(pts))
    return PointCloud(pts, intensity)


def _ground(rng, n, extent, ground_z):
    xy = rng.uniform(-extent, extent, size=(n, 2))
    return np.column_stack([xy, ground_z(xy)])


def _box_sampler(rng, c, size, yaw, base):
    sx, sy, sz = size
    R = np.array([[math.cos(yaw), -math.sin(yaw)], [math.sin(yaw), math.cos(yaw)]])
    faces = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy])

    def sample(n):
        which = rng.choice(5, size=n, p=faces / faces.sum())
        a, b = rng.uniform(-0.5, 0.5, size=(2, n))
        local = np.zeros((n, 3))
        for f, (ax, sign) in enumerate([(0, -1), (0, 1), (1, -1), (1, 1), (2, 1)]):
            m = which == f
            if ax == 0:
                local[m] = np.column_stack([np.full(m.sum(), sign * sx / 2), a[m] * sy, (b[m] + 0.5) * sz])
            elif ax == 1:
                local[m] = np.column_stack([a[m] * sx, np.full(m.sum(), sign * sy / 2), (b[m] + 0.5) * sz])
            else:
                local[m] = np.column_stack([a[m] * sx, b[m] * sy, np.full(m.sum(), sz)])
        xy = local[:, :2] @ R.T + c
        return np.column_stack([xy, local[:, 2] + base])

    return sample


def _pole_sampler(rng, c, radius, height, base):
    def sample(n):
        phi = rng.uniform(0, 2 * math.pi, n)
        z = rng.uniform(0, height, n) + base
        return np.column_stack([c[0] + radius * np.cos(phi), c[1] + radius * np.sin(phi), z])

    return sample


def _sphere_sampler(rng, centre, radius, base):
    def sample(n):
        out = []
        while sum(len(o) for o in out) < n:
            v = rng.normal(size=(2 * n, 3))
            v = centre + radius * v / np.linalg.norm(v, axis=1, keepdims=True)
            out.append(v[v[:, 2] >= base])
        return np.concatenate(out)[:n]

    return sample
