//! Arc-length parameterized paths made of straight and circular pieces.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Piece {
    Line {
        start: [f64; 2],
        heading: f64,
        length: f64,
    },
    /// `sweep > 0` turns left (counterclockwise).
    Arc {
        center: [f64; 2],
        radius: f64,
        start_angle: f64,
        sweep: f64,
    },
}

impl Piece {
    pub fn length(&self) -> f64 {
        match *self {
            Piece::Line { length, .. } => length,
            Piece::Arc { radius, sweep, .. } => radius * sweep.abs(),
        }
    }

    /// Point and unit tangent heading at arc length `u` into the piece.
    fn at(&self, u: f64) -> ([f64; 2], f64) {
        match *self {
            Piece::Line { start, heading, .. } => {
                ([start[0] + u * heading.cos(), start[1] + u * heading.sin()], heading)
            }
            Piece::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => {
                let a = start_angle + sweep.signum() * u / radius;
                let p = [center[0] + radius * a.cos(), center[1] + radius * a.sin()];
                (p, a + sweep.signum() * FRAC_PI_2)
            }
        }
    }

    fn end(&self) -> ([f64; 2], f64) {
        self.at(self.length())
    }

    fn curvature(&self) -> f64 {
        match *self {
            Piece::Line { .. } => 0.0,
            Piece::Arc { radius, sweep, .. } => sweep.signum() / radius,
        }
    }

    /// Arc length of the point of `[lo, hi]` closest to `p`.
    fn closest(&self, p: [f64; 2], lo: f64, hi: f64) -> f64 {
        let u = match *self {
            Piece::Line { start, heading, .. } => {
                (p[0] - start[0]) * heading.cos() + (p[1] - start[1]) * heading.sin()
            }
            Piece::Arc {
                center,
                radius,
                start_angle,
                sweep,
            } => {
                let a = (p[1] - center[1]).atan2(p[0] - center[0]);
                let along = (sweep.signum() * (a - start_angle)).rem_euclid(TAU);
                // Angles past the end of the arc may be closer to its start.
                let u = along * radius;
                if u > hi {
                    let back = (TAU - along) * radius + lo;
                    if back < u - hi {
                        lo
                    } else {
                        hi
                    }
                } else {
                    u
                }
            }
        };
        u.clamp(lo, hi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathKind {
    TwoTurn,
    SCurve,
}

impl FromStr for PathKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_turn" => Ok(PathKind::TwoTurn),
            "s_curve" => Ok(PathKind::SCurve),
            _ => Err(Error::Config(format!("unknown path kind {s:?} (known: two_turn, s_curve)"))),
        }
    }
}

impl fmt::Display for PathKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PathKind::TwoTurn => "two_turn",
            PathKind::SCurve => "s_curve",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathSpec {
    pieces: Vec<Piece>,
    /// Arc length at the start of each piece, plus the total at the end.
    offsets: Vec<f64>,
    /// Heading change where piece `i` meets piece `i + 1`.
    corners: Vec<f64>,
    /// Half-width of the window used by [`PathSpec::local_curvature`].
    pub curvature_window: f64,
}

fn wrap(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl PathSpec {
    pub fn new(pieces: Vec<Piece>, curvature_window: f64) -> Result<Self> {
        if pieces.is_empty() || pieces.iter().any(|p| !(p.length() > 0.0)) {
            return Err(Error::Config("a path needs pieces of positive length".into()));
        }
        let mut offsets = vec![0.0];
        for p in &pieces {
            offsets.push(offsets.last().copied().unwrap_or(0.0) + p.length());
        }
        let mut corners = Vec::new();
        for w in pieces.windows(2) {
            let (end, h0) = w[0].end();
            let (start, h1) = w[1].at(0.0);
            if dist(end, start) > 1e-9 {
                return Err(Error::Config("path pieces are not connected".into()));
            }
            corners.push(wrap(h1 - h0));
        }
        Ok(PathSpec {
            pieces,
            offsets,
            corners,
            curvature_window,
        })
    }

    /// A straight segment along +x (tests and baselines).
    pub fn straight(length: f64) -> Result<Self> {
        Self::new(
            vec![Piece::Line {
                start: [0.0, 0.0],
                heading: 0.0,
                length,
            }],
            5.0,
        )
    }

    pub fn length(&self) -> f64 {
        self.offsets[self.pieces.len()]
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let s = s.clamp(0.0, self.length());
        let i = self.offsets[1..].partition_point(|&o| o < s).min(self.pieces.len() - 1);
        (i, s - self.offsets[i])
    }

    /// Point at arc length `s` (clamped to the path).
    pub fn point(&self, s: f64) -> [f64; 2] {
        let (i, u) = self.locate(s);
        self.pieces[i].at(u).0
    }

    pub fn heading(&self, s: f64) -> f64 {
        let (i, u) = self.locate(s);
        self.pieces[i].at(u).1
    }

    /// Signed pointwise curvature; corners between pieces have zero width
    /// and do not show up here.
    pub fn curvature(&self, s: f64) -> f64 {
        let (i, _) = self.locate(s);
        self.pieces[i].curvature()
    }

    /// Mean absolute turning per unit length over
    /// `[s - curvature_window, s + curvature_window]` clipped to the path.
    /// Sharp corners count with their full turning angle.
    pub fn local_curvature(&self, s: f64) -> f64 {
        let lo = (s - self.curvature_window).max(0.0);
        let hi = (s + self.curvature_window).min(self.length());
        if hi <= lo {
            return self.curvature(s).abs();
        }
        let mut turning = 0.0;
        for (i, p) in self.pieces.iter().enumerate() {
            let (a, b) = (self.offsets[i], self.offsets[i + 1]);
            let overlap = (b.min(hi) - a.max(lo)).max(0.0);
            turning += overlap * p.curvature().abs();
            if i + 1 < self.pieces.len() && (lo..=hi).contains(&b) {
                turning += self.corners[i].abs();
            }
        }
        turning / (hi - lo)
    }

    /// Arc length of the closest path point within `[lo, hi]`.
    pub fn project_within(&self, p: [f64; 2], lo: f64, hi: f64) -> f64 {
        let (lo, hi) = (lo.max(0.0), hi.min(self.length()));
        let mut best = (f64::INFINITY, lo);
        for (i, piece) in self.pieces.iter().enumerate() {
            let (a, b) = (self.offsets[i], self.offsets[i + 1]);
            if b < lo || a > hi {
                continue;
            }
            let u = piece.closest(p, lo.max(a) - a, hi.min(b) - a);
            let d = dist(piece.at(u).0, p);
            if d < best.0 {
                best = (d, a + u);
            }
        }
        best.1
    }

    pub fn project(&self, p: [f64; 2]) -> f64 {
        self.project_within(p, 0.0, self.length())
    }

    /// Distance from `p` to the nearest path point.
    pub fn distance(&self, p: [f64; 2]) -> f64 {
        dist(self.point(self.project(p)), p)
    }
}

/// Builds a path: two-turn is three straights of `10 * scale` joined by
/// right-angle corners (left, then right); the S-curve is two opposed
/// half circles of radius `5 * scale`.
pub fn build_path(kind: PathKind, scale: f64) -> Result<PathSpec> {
    if !(scale > 0.0) {
        return Err(Error::Config(format!("path scale must be positive, got {scale}")));
    }
    let leg = 10.0 * scale;
    let r = 5.0 * scale;
    let pieces = match kind {
        PathKind::TwoTurn => vec![
            Piece::Line {
                start: [0.0, 0.0],
                heading: 0.0,
                length: leg,
            },
            Piece::Line {
                start: [leg, 0.0],
                heading: FRAC_PI_2,
                length: leg,
            },
            Piece::Line {
                start: [leg, leg],
                heading: 0.0,
                length: leg,
            },
        ],
        PathKind::SCurve => vec![
            Piece::Arc {
                center: [0.0, r],
                radius: r,
                start_angle: -FRAC_PI_2,
                sweep: PI,
            },
            Piece::Arc {
                center: [0.0, 3.0 * r],
                radius: r,
                start_angle: -FRAC_PI_2,
                sweep: -PI,
            },
        ],
    };
    PathSpec::new(pieces, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_turn_geometry() {
        let p = build_path(PathKind::TwoTurn, 1.0).unwrap();
        assert_eq!(p.length(), 30.0);
        assert_eq!(p.point(30.0), [20.0, 10.0]);
        for s in [0.0, 3.0, 9.9, 10.1, 15.0, 25.0] {
            assert_eq!(p.curvature(s), 0.0);
        }
        assert!((p.local_curvature(10.0) - FRAC_PI_2 / 10.0).abs() < 1e-12);
        assert_eq!(p.local_curvature(5.0 - 1e-9), 0.0);
    }

    #[test]
    fn s_curve_geometry() {
        let p = build_path(PathKind::SCurve, 2.0).unwrap();
        assert!((p.length() - 20.0 * PI).abs() < 1e-12);
        let end = p.point(p.length());
        assert!(dist(end, [0.0, 40.0]) < 1e-9);
        for k in 1..40 {
            let s = p.length() * k as f64 / 40.0;
            if (s - p.length() / 2.0).abs() > 1e-9 {
                assert!((p.curvature(s).abs() - 0.1).abs() < 1e-12);
                assert!((p.local_curvature(s) - 0.1).abs() < 1e-12);
            }
        }
        assert!(p.curvature(1.0) > 0.0 && p.curvature(p.length() - 1.0) < 0.0);
    }

    #[test]
    fn bad_inputs() {
        assert!(build_path(PathKind::TwoTurn, 0.0).is_err());
        assert!("zigzag".parse::<PathKind>().is_err());
        assert_eq!("s_curve".parse::<PathKind>().unwrap(), PathKind::SCurve);
    }

    proptest! {
        #[test]
        fn arc_length_is_continuous_and_monotone(
            curve in any::<bool>(),
            scale in 0.5f64..3.0,
            a in 0.0f64..1.0,
            da in 1e-4f64..1e-2,
        ) {
            let kind = if curve { PathKind::SCurve } else { PathKind::TwoTurn };
            let p = build_path(kind, scale).unwrap();
            let (s0, s1) = (a * p.length(), (a + da).min(1.0) * p.length());
            let gap = dist(p.point(s0), p.point(s1));
            // Unit speed parameterization: chord never exceeds arc.
            prop_assert!(gap <= s1 - s0 + 1e-9);
            prop_assert!(gap >= 0.5 * (s1 - s0));
            let back = p.project(p.point(s0));
            prop_assert!((back - s0).abs() < 1e-6, "{} vs {}", back, s0);
        }
    }
}
