"""Axis-aligned box embeddings: construction from latent vectors, geometry,
and hard / temperature-smoothed volumes.

A box is the product of closed intervals [z_i, Z_i].  Construction from a
latent parameter vector theta = (theta_z || theta_Z) uses

    z = theta_z,    Z = z + softplus(theta_Z)

so every constructed box has strictly positive side lengths regardless of
parameter values.  Corners may carry gradients; all geometry here is written
in terms of the autodiff op set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class Box:
    """Lower and upper corners, shape [..., n].  Boxes produced by
    `intersection_corners` may be degenerate (some Z_i <= z_i); boxes from
    `make_box` never are.

    `exact_sides` optionally carries the side lengths as computed at
    construction (the raw softplus output), so that side-only quantities do
    not inherit cancellation noise from the corner sum (z + sides) - z."""

    z: Tensor
    Z: Tensor
    exact_sides: Tensor | None = None

    @property
    def dim(self) -> int:
        return self.z.shape[-1]

    def sides(self) -> Tensor:
        if self.exact_sides is not None:
            return self.exact_sides
        return self.Z - self.z


def make_box(latent) -> Box:
    """Build a box from a latent vector of even length 2n (leading batch
    axes allowed): first half is the lower corner, the second half is passed
    through softplus to give strictly positive side lengths."""
    latent = ad.as_tensor(latent)
    w = latent.shape[-1]
    if w % 2 != 0:
        raise ValueError(f"latent width must be even, got {w}")
    n = w // 2
    z = latent[..., :n]
    sides = ad.softplus(latent[..., n:])
    Z = z + sides
    # softplus is strictly positive, but adding a denormal-scale width to a
    # large corner can round back to the corner itself; round up one ulp so
    # Z > z holds exactly in floats too
    absorbed = Z.data <= z.data
    if np.any(absorbed):
        Z.data = np.where(absorbed, np.nextafter(z.data, np.inf), Z.data)
    return Box(z, Z, exact_sides=sides)


def center_offset(b: Box) -> tuple[Tensor, Tensor]:
    """Center c = (z + Z)/2 and offset o = Z - c (half side lengths)."""
    c = (b.z + b.Z) * 0.5
    return c, b.Z - c


def box_distance(a: Box, b: Box) -> Tensor:
    """Per-dimension distance |c_a - c_b| - o_a - o_b.

    Negative in a dimension iff the interval projections strictly overlap;
    equals -2 * o in every dimension for identical boxes.  Offsets are summed
    before subtracting so the result is bitwise symmetric in its arguments.
    """
    ca, oa = center_offset(a)
    cb, ob = center_offset(b)
    return ad.abs_(ca - cb) - (oa + ob)


def intersection_corners(a: Box, b: Box) -> Box:
    """Corner-wise intersection (max of lower, min of upper).  The result may
    be degenerate; volume functions below handle that case smoothly."""
    return Box(ad.maximum(a.z, b.z), ad.minimum(a.Z, b.Z))


def intersect(a: Box, b: Box) -> Box | None:
    """Hard intersection of two single (unbatched) boxes; None when empty."""
    if a.z.data.ndim != 1:
        raise ValueError("intersect expects single boxes; use intersection_corners for batches")
    cand = intersection_corners(a, b)
    if np.any(cand.Z.data <= cand.z.data):
        return None
    return cand


def hard_volume(b: Box | None) -> Tensor:
    """Product of side lengths, clamped at zero: degenerate or empty boxes
    have volume 0.  Empty marker (None) maps to scalar 0."""
    if b is None:
        return ad.constant(0.0)
    return ad.prod(ad.relu(b.sides()))


def gumbel_volume(b: Box, temp: float) -> Tensor:
    """Smoothed volume prod_i temp * softplus((Z_i - z_i) / temp).

    Finite and differentiable for arbitrary (even degenerate) corners;
    approaches the hard volume as sides grow relative to temp.
    """
    if temp <= 0.0:
        raise ValueError("temperature must be positive")
    per_dim = ad.softplus(b.sides() * (1.0 / temp)) * temp
    return ad.prod(per_dim)


def contains(outer: Box, inner: Box, tol: float = 0.0) -> np.ndarray:
    """Geometric corner comparison: True where inner lies inside outer in
    every dimension (within tol).  Pure data check, no gradients."""
    ok_lo = outer.z.data <= inner.z.data + tol
    ok_hi = inner.Z.data <= outer.Z.data + tol
    return np.logical_and(ok_lo, ok_hi).all(axis=-1)
