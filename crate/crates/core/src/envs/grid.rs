//! Unit-cell occupancy grids and the damped point-mass shared by every env.

/// Per-step velocity retention.
pub const DAMPING: f64 = 0.85;
/// Velocity gained per unit of action per step.
pub const ACCEL: f64 = 0.075;
/// Terminal per-axis speed under a saturated action.
pub const V_MAX: f64 = ACCEL / (1.0 - DAMPING);
/// Cells per unit of the position features.
pub const POS_SCALE: f64 = 10.0;
/// How far (in cells) the range features can see.
pub const RAY_RANGE: f64 = 8.0;

const SKIN: f64 = 1e-9;

/// Walkable cells on an integer lattice. Cell `(c, r)` covers
/// `[origin.x + c, origin.x + c + 1) x [origin.y + r, origin.y + r + 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub origin: [f64; 2],
    walkable: Vec<bool>,
}

impl Grid {
    pub fn new(width: usize, height: usize, origin: [f64; 2]) -> Self {
        Grid {
            width,
            height,
            origin,
            walkable: vec![false; width * height],
        }
    }

    pub fn set(&mut self, c: usize, r: usize, walkable: bool) {
        self.walkable[r * self.width + c] = walkable;
    }

    pub fn fill_rect(&mut self, cols: std::ops::Range<usize>, rows: std::ops::Range<usize>) {
        for r in rows {
            for c in cols.clone() {
                self.set(c, r, true);
            }
        }
    }

    pub fn cell_of(&self, p: [f64; 2]) -> (i64, i64) {
        (
            (p[0] - self.origin[0]).floor() as i64,
            (p[1] - self.origin[1]).floor() as i64,
        )
    }

    pub fn is_walkable_cell(&self, c: i64, r: i64) -> bool {
        c >= 0
            && r >= 0
            && (c as usize) < self.width
            && (r as usize) < self.height
            && self.walkable[r as usize * self.width + c as usize]
    }

    pub fn is_walkable(&self, p: [f64; 2]) -> bool {
        let (c, r) = self.cell_of(p);
        self.is_walkable_cell(c, r)
    }

    /// Lower corner of cell `(c, r)` in world coordinates.
    pub fn cell_corner(&self, c: usize, r: usize) -> [f64; 2] {
        [self.origin[0] + c as f64, self.origin[1] + r as f64]
    }

    /// Distance from `p` along `dir` (one of the four axis directions) to the
    /// first wall, capped at `RAY_RANGE`.
    pub fn ray(&self, p: [f64; 2], axis: usize, sign: f64) -> f64 {
        let (c, r) = self.cell_of(p);
        let mut cell = [c, r];
        let local = p[axis] - self.origin[axis];
        let mut dist = if sign > 0.0 {
            local.floor() + 1.0 - local
        } else {
            local - local.floor()
        };
        loop {
            if dist >= RAY_RANGE {
                return RAY_RANGE;
            }
            cell[axis] += sign as i64;
            if !self.is_walkable_cell(cell[0], cell[1]) {
                return dist;
            }
            dist += 1.0;
        }
    }
}

/// Position and velocity of the agent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Body {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
}

impl Body {
    pub fn at(pos: [f64; 2]) -> Self {
        Body { pos, vel: [0.0; 2] }
    }

    /// Advances one step; returns whether a wall stopped the motion.
    ///
    /// Each axis moves separately and at most `V_MAX < 1` cells, so the body
    /// can cross at most one cell boundary per axis and never passes through
    /// a wall, including diagonally at corners.
    pub fn step(&mut self, grid: &Grid, action: [f64; 2]) -> bool {
        let mut contact = false;
        for (axis, &a) in action.iter().enumerate() {
            let a = if a.is_nan() { 0.0 } else { a.clamp(-1.0, 1.0) };
            self.vel[axis] = DAMPING * self.vel[axis] + ACCEL * a;
        }
        for axis in 0..2 {
            let v = self.vel[axis];
            if v == 0.0 {
                continue;
            }
            let mut next = self.pos;
            next[axis] += v;
            if grid.is_walkable(next) {
                self.pos = next;
                continue;
            }
            // Stop just inside the current cell's face.
            let local = self.pos[axis] - grid.origin[axis];
            let face = if v > 0.0 {
                local.floor() + 1.0 - SKIN
            } else {
                local.floor() + SKIN
            };
            self.pos[axis] = grid.origin[axis] + face;
            self.vel[axis] = 0.0;
            contact = true;
        }
        contact
    }
}

/// `[x, y, vx, vy, ray+x, ray-x, ray+y, ray-y]`: position from the grid's
/// lower-left corner in units of `POS_SCALE` cells, velocities over `V_MAX`,
/// rays over `RAY_RANGE`. Positions stay non-negative so the sign-blind goal
/// similarity never confuses mirrored places.
pub fn features(grid: &Grid, body: &Body) -> Vec<f64> {
    let ray = |axis, sign| grid.ray(body.pos, axis, sign) / RAY_RANGE;
    vec![
        (body.pos[0] - grid.origin[0]) / POS_SCALE,
        (body.pos[1] - grid.origin[1]) / POS_SCALE,
        body.vel[0] / V_MAX,
        body.vel[1] / V_MAX,
        ray(0, 1.0),
        ray(0, -1.0),
        ray(1, 1.0),
        ray(1, -1.0),
    ]
}
