use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("non-finite input: {0}")]
pub struct NonFinite(pub String);

/// Planar pose of a unicycle robot plus the twist it is executing.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UnicyclePose {
    pub x: f64,
    pub y: f64,
    /// Radians in (-π, π].
    pub theta: f64,
    pub linear_velocity: f64,
    pub angular_velocity: f64,
}

/// Map an angle into (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Advance by `dt` seconds under constant forward speed `v` and yaw rate
/// `w`, integrating the arc in closed form.
pub fn unicycle_step(pose: &UnicyclePose, v: f64, w: f64, dt: f64) -> Result<UnicyclePose, NonFinite> {
    let inputs = [pose.x, pose.y, pose.theta, v, w, dt];
    if inputs.iter().any(|x| !x.is_finite()) {
        return Err(NonFinite(format!("pose {pose:?}, v {v}, w {w}, dt {dt}")));
    }
    let th = pose.theta;
    let th2 = th + w * dt;
    let (x, y) = if w.abs() > 1e-9 {
        let r = v / w;
        (pose.x + r * (th2.sin() - th.sin()), pose.y - r * (th2.cos() - th.cos()))
    } else {
        (pose.x + v * th.cos() * dt, pose.y + v * th.sin() * dt)
    };
    Ok(UnicyclePose { x, y, theta: wrap_angle(th2), linear_velocity: v, angular_velocity: w })
}

/// Goal-seeking controller gains and limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub kv: f64,
    pub kw: f64,
    /// Distance at which the goal counts as reached.
    pub epsilon: f64,
    pub v_max: f64,
    pub w_max: f64,
}

impl Default for Gains {
    fn default() -> Self {
        Gains { kv: 1.0, kw: 2.0, epsilon: 0.05, v_max: 2.0, w_max: 2.0 }
    }
}

/// Proportional steering toward `goal`. Drives forward only while the
/// goal is less than a quarter turn off the heading. Returns `(v, w)`.
pub fn goal_controller(pose: &UnicyclePose, goal: (f64, f64), g: &Gains) -> (f64, f64) {
    let (dx, dy) = (goal.0 - pose.x, goal.1 - pose.y);
    let dist = dx.hypot(dy);
    if dist < g.epsilon {
        return (0.0, 0.0);
    }
    let err = wrap_angle(dy.atan2(dx) - pose.theta);
    let w = (g.kw * err).clamp(-g.w_max, g.w_max);
    let v = if err.abs() < PI / 2.0 { (g.kv * dist).min(g.v_max) } else { 0.0 };
    (v, w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CircleFit {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    /// Largest |distance to center - radius| over the fitted points.
    pub max_deviation: f64,
}

/// Algebraic least-squares circle fit (minimizes the residual of
/// x² + y² + Dx + Ey + F = 0). `None` for fewer than three points or a
/// degenerate (collinear) set.
pub fn fit_circle(points: &[(f64, f64)]) -> Option<CircleFit> {
    if points.len() < 3 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    // Normal equations in centered coordinates.
    let mut a = [[0.0f64; 3]; 3];
    let mut b = [0.0f64; 3];
    for &(px, py) in points {
        let (x, y) = (px - mx, py - my);
        let row = [x, y, 1.0];
        let rhs = -(x * x + y * y);
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] += row[i] * row[j];
            }
            b[i] += row[i] * rhs;
        }
    }
    let [d, e, f] = solve3(a, b)?;
    let (cx, cy) = (-d / 2.0, -e / 2.0);
    let r2 = cx * cx + cy * cy - f;
    if r2.is_nan() || r2 <= 0.0 {
        return None;
    }
    let radius = r2.sqrt();
    let max_deviation = points
        .iter()
        .map(|&(x, y)| ((x - mx - cx).hypot(y - my - cy) - radius).abs())
        .fold(0.0, f64::max);
    Some(CircleFit { cx: cx + mx, cy: cy + my, radius, max_deviation })
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let k = a[row][col] / a[col][col];
            for c in col..3 {
                a[row][c] -= k * a[col][c];
            }
            b[row] -= k * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|c| a[row][c] * x[c]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}
