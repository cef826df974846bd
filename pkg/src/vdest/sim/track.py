"""Closed synthetic tracks built from curvature profiles.

A track is a sequence of straights, constant-radius arcs and cosine
curvature ramps. Heading is the analytic integral of curvature; position
follows by dense quadrature and is stored as a Hermite spline honouring the
exact tangent. Bank is proportional to signed curvature, tilted toward the
inside of the turn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.integrate import cumulative_simpson

from ..core_math import Centerline

MAX_BANK = math.radians(25.0)


class InvalidGeometry(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    """Curvature goes from k0 to k1 over ``length`` with a cosine blend."""

    length: float
    k0: float
    k1: float

    def curvature(self, u):
        return self.k0 + (self.k1 - self.k0) * 0.5 * (1.0 - np.cos(np.pi * u))

    def curvature_slope(self, u):
        return (self.k1 - self.k0) * 0.5 * np.pi * np.sin(np.pi * u) / self.length

    def heading_change(self, u):
        L = self.length
        return self.k0 * u * L + (self.k1 - self.k0) * 0.5 * L * (u - np.sin(np.pi * u) / np.pi)


def straight(length):
    return Segment(length, 0.0, 0.0)


def arc(length, k):
    return Segment(length, k, k)


def ramp(length, k0, k1):
    return Segment(length, k0, k1)


class CurvatureProfile:
    def __init__(self, segments: list[Segment]):
        if not segments or any(seg.length <= 0 for seg in segments):
            raise InvalidGeometry("segments must have positive length")
        self.segments = segments
        self.starts = np.concatenate([[0.0], np.cumsum([seg.length for seg in segments])])
        self.length = float(self.starts[-1])
        head = [0.0]
        for seg in segments:
            head.append(head[-1] + float(seg.heading_change(1.0)))
        self.head0 = np.array(head)

    def _locate(self, s):
        s = np.mod(np.asarray(s, dtype=float), self.length)
        idx = np.clip(np.searchsorted(self.starts, s, side="right") - 1, 0, len(self.segments) - 1)
        u = (s - self.starts[idx]) / np.array([seg.length for seg in self.segments])[idx]
        return idx, u

    def _eval(self, s, fn):
        idx, u = self._locate(s)
        out = np.empty_like(u)
        for i, seg in enumerate(self.segments):
            m = idx == i
            if np.any(m):
                out[m] = fn(i, seg, u[m])
        return out

    def curvature(self, s):
        return self._eval(s, lambda i, seg, u: seg.curvature(u))

    def curvature_slope(self, s):
        return self._eval(s, lambda i, seg, u: seg.curvature_slope(u))

    def heading(self, s):
        """Unwrapped heading, continuous within one lap."""
        return self._eval(s, lambda i, seg, u: self.head0[i] + seg.heading_change(u))

    @property
    def k_max(self) -> float:
        return max(max(abs(seg.k0), abs(seg.k1)) for seg in self.segments)


class TrackModel:
    """Centerline, bank/slope profiles and the two bounds.

    ``bank(s)`` is the road roll angle seen by a vehicle driving along
    increasing s: negative when the left side is lower (left-hand turns).
    """

    def __init__(self, name: str, profile: CurvatureProfile, bank_max: float, width: float, knot_step: float = 1.0):
        if abs(bank_max) > MAX_BANK + 1e-12:
            raise InvalidGeometry(f"bank {math.degrees(bank_max):.2f} deg exceeds 25 deg")
        if width <= 0:
            raise InvalidGeometry("track width must be positive")
        self.name = name
        self.profile = profile
        self.bank_max = float(bank_max)
        self._width = float(width)
        self.length = profile.length
        # dense quadrature of the analytic heading
        fine = np.linspace(0.0, self.length, int(math.ceil(self.length / 0.05)) + 1)
        chi = np.append(profile.heading(fine[:-1]), profile.head0[-1])
        x = cumulative_simpson(np.cos(chi), x=fine, initial=0.0)
        y = cumulative_simpson(np.sin(chi), x=fine, initial=0.0)
        gap = np.hypot(x[-1], y[-1])
        if gap > 1e-3 * self.length or abs(profile.head0[-1] - 2.0 * math.pi) > 1e-6:
            raise InvalidGeometry(f"profile does not close: gap {gap:.3f} m, heading {profile.head0[-1]:.6f}")
        # remove the residual quadrature gap linearly
        w = fine / self.length
        x -= w * x[-1]
        y -= w * y[-1]
        n_knots = int(round(self.length / knot_step))
        s_knots = np.linspace(0.0, self.length, n_knots + 1)
        xk = np.interp(s_knots, fine, x)
        yk = np.interp(s_knots, fine, y)
        xk[-1], yk[-1] = xk[0], yk[0]
        chi_k = profile.heading(s_knots)
        chi_k[-1] = chi_k[0]
        tangent = np.stack([np.cos(chi_k), np.sin(chi_k)], axis=1)
        self.centerline = Centerline.from_hermite(s_knots, np.stack([xk, yk], axis=1), tangent)
        self.left_bound, self.right_bound = self._bounds(s_knots)

    # profiles -----------------------------------------------------------
    def curvature(self, s):
        return self.profile.curvature(s)

    def heading(self, s):
        return self.profile.heading(s)

    def bank(self, s):
        k = self.profile.curvature(s)
        return -self.bank_max * k / self.profile.k_max if self.bank_max else np.zeros_like(k)

    def bank_rate(self, s):
        """d(bank)/ds."""
        dk = self.profile.curvature_slope(s)
        return -self.bank_max * dk / self.profile.k_max if self.bank_max else np.zeros_like(dk)

    def slope(self, s):
        return np.zeros_like(np.asarray(s, dtype=float))

    def width(self, s):
        return np.full_like(np.asarray(s, dtype=float), self._width)

    def height(self, s):
        return self.centerline.height(s)

    def point3d(self, s) -> NDArray:
        xy = self.centerline.point(s)
        return np.concatenate([xy, np.asarray(self.height(s))[..., None]], axis=-1)

    def _bounds(self, s):
        c = self.point3d(s)
        n = self.centerline.left_normal(s)
        phi = self.bank(s)
        half = 0.5 * self.width(s)
        off = np.concatenate([n * (half * np.cos(phi))[:, None], (half * np.sin(phi))[:, None]], axis=1)
        return c + off, c - off

    def bank_from_bounds(self, s) -> NDArray:
        """Bank obtained by connecting the two bounds at station s."""
        left, right = self._bounds(np.atleast_1d(s))
        dz = left[:, 2] - right[:, 2]
        dh = np.linalg.norm(left[:, :2] - right[:, :2], axis=1)
        return np.arctan2(dz, dh)


def build_oval(
    bank_max: float,
    straight_len: float,
    turn_radius: float,
    width: float,
    transition_len: float = 150.0,
    name: str = "oval",
) -> TrackModel:
    """Counter-clockwise oval with cosine curvature transitions.

    Each half lap is a straight, an entry ramp, a constant arc and an exit
    ramp; the two halves are point-symmetric, which closes the loop.
    """
    if straight_len <= 0 or turn_radius <= 0 or transition_len < 0:
        raise InvalidGeometry("oval dimensions must be positive")
    k = 1.0 / turn_radius
    arc_len = math.pi * turn_radius - transition_len
    if arc_len <= 0:
        raise InvalidGeometry("transitions longer than the half circle")
    half = [straight(straight_len / 2)]
    if transition_len > 0:
        half.append(ramp(transition_len, 0.0, k))
    half.append(arc(arc_len, k))
    if transition_len > 0:
        half.append(ramp(transition_len, k, 0.0))
    half.append(straight(straight_len / 2))
    return TrackModel(name, CurvatureProfile(half + half), bank_max, width)


def build_from_half(name: str, segments: list[dict], bank_max: float, width: float) -> TrackModel:
    """Point-symmetric track from one half lap given as segment dicts.

    Each dict has ``length`` and either ``radius`` (signed, left positive,
    0 for straight) or ``k0``/``k1`` radii for a ramp. The half lap must
    turn by exactly pi.
    """
    segs = [_seg(d) for d in segments]
    prof = CurvatureProfile(segs)
    turn = prof.head0[-1]
    if abs(turn - math.pi) > 1e-6:
        raise InvalidGeometry(f"half lap turns {math.degrees(turn):.4f} deg, expected 180")
    return TrackModel(name, CurvatureProfile(segs + segs), bank_max, width)


def arc_for_turn(angle: float, radius: float, ramp_len: float, k_prev: float = 0.0, k_next: float = 0.0) -> float:
    """Arc length giving a total heading change with ramps on both sides."""
    k = 1.0 / radius
    ramps = 0.5 * ramp_len * (k_prev + k) + 0.5 * ramp_len * (k + k_next)
    return (angle - ramps) / k


def build_track(cfg: dict) -> TrackModel:
    kind = cfg.get("type", "oval")
    bank = math.radians(cfg.get("bank_max_deg", 0.0))
    width = cfg.get("width", 15.0)
    name = cfg.get("name", kind)
    if kind == "oval":
        return build_oval(
            bank, cfg["straight_len"], cfg["turn_radius"], width, cfg.get("transition_len", 150.0), name
        )
    if kind == "half_lap":
        segments = list(cfg["segments"])
        # optional closing arc sized so the half lap turns exactly pi
        for d in segments:
            if d.get("length") == "auto":
                prof = CurvatureProfile([_seg(x) for x in segments if x is not d and x.get("length") != "auto"])
                d["length"] = (math.pi - prof.head0[-1]) * d["radius"]
        return build_from_half(name, segments, bank, width)
    raise InvalidGeometry(f"unknown track type {kind!r}")


def _seg(d):
    if "ramp" in d:
        r0, r1 = d["ramp"]
        return ramp(d["length"], 1.0 / r0 if r0 else 0.0, 1.0 / r1 if r1 else 0.0)
    r = d.get("radius", 0.0)
    return arc(d["length"], 1.0 / r) if r else straight(d["length"])
