//! Single-shot depth/width scaling from finite-difference gradients, and a
//! grid-search oracle to check it against.
//!
//! Performance is the negated validation loss, so positive gradients mean
//! that growing the model lowered the loss.

use std::fmt;

use crate::error::{Error, Result};

/// Trunk matrix parameters in units of `e²` for `l` layers of width
/// multiplier `w`: `2·l·(4+2w)`.
pub fn simplified_params(l: f64, w: f64) -> Result<f64> {
    if !(l > 0.0 && w > 0.0) || !l.is_finite() || !w.is_finite() {
        return Err(Error::Invalid(format!("layer count and width must be positive, got ({l}, {w})")));
    }
    Ok(2.0 * l * (4.0 + 2.0 * w))
}

/// Validation loss measured at `(l, w)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub l: f64,
    pub w: f64,
    pub loss: f64,
}

impl EvalPoint {
    pub fn new(l: f64, w: f64, loss: f64) -> Result<Self> {
        if !(l >= 1.0 && w >= 1.0) {
            return Err(Error::Invalid(format!("evaluation point needs l, w >= 1, got ({l}, {w})")));
        }
        if !(loss > 0.0) || !loss.is_finite() {
            return Err(Error::Invalid(format!("validation loss must be positive, got {loss}")));
        }
        Ok(Self { l, w, loss })
    }

    pub fn performance(&self) -> f64 {
        -self.loss
    }
}

const COORD_TOL: f64 = 1e-9;

/// Forward differences of performance along `l` and `w`.
pub fn finite_diff_gradients(base: EvalPoint, probe_l: EvalPoint, probe_w: EvalPoint, eps: f64) -> Result<(f64, f64)> {
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let off = |a: f64, b: f64| (a - b).abs() > COORD_TOL;
    if off(probe_l.l, base.l + eps) || off(probe_l.w, base.w) {
        return Err(Error::Invalid(format!(
            "depth probe ({}, {}) is not base ({}, {}) + ({eps}, 0)",
            probe_l.l, probe_l.w, base.l, base.w
        )));
    }
    if off(probe_w.l, base.l) || off(probe_w.w, base.w + eps) {
        return Err(Error::Invalid(format!(
            "width probe ({}, {}) is not base ({}, {}) + (0, {eps})",
            probe_w.l, probe_w.w, base.l, base.w
        )));
    }
    Ok((
        (probe_l.performance() - base.performance()) / eps,
        (probe_w.performance() - base.performance()) / eps,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub l: f64,
    pub w: f64,
    pub g_l: f64,
    pub g_w: f64,
    pub beta: f64,
    pub alpha: f64,
    pub l_hat: f64,
    pub w_hat: f64,
    pub l_new: usize,
    pub w_new: usize,
    /// `P(l̂, ŵ) / P(l, w)`; equals β up to rounding error.
    pub continuous_ratio: f64,
    /// `P(l_new, w_new) / P(l, w)`.
    pub rounded_ratio: f64,
}

impl ScalingReport {
    pub fn is_unchanged(&self) -> bool {
        self.l_new as f64 == self.l && self.w_new as f64 == self.w
    }

    /// Short description such as `+2 layers, w 4→6`.
    pub fn decision(&self) -> String {
        if self.is_unchanged() {
            return "no change".to_string();
        }
        let dl = self.l_new as i64 - self.l.round() as i64;
        let layers = match dl.abs() {
            1 => "layer",
            _ => "layers",
        };
        let mut parts = Vec::new();
        if dl != 0 {
            parts.push(format!("{dl:+} {layers}"));
        }
        if self.w_new as f64 != self.w {
            parts.push(format!("w {}→{}", self.w, self.w_new));
        }
        parts.join(", ")
    }
}

impl fmt::Display for ScalingReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "gradients: g_l={:.5} g_w={:.5}", self.g_l, self.g_w)?;
        writeln!(f, "step size: alpha={:.4} (beta={})", self.alpha, self.beta)?;
        writeln!(f, "continuous: l={:.4} w={:.4} ratio={:.6}", self.l_hat, self.w_hat, self.continuous_ratio)?;
        writeln!(f, "rounded: l={} w={} ratio={:.4}", self.l_new, self.w_new, self.rounded_ratio)?;
        write!(f, "decision: {}", self.decision())
    }
}

/// Solves `P(l+α·g_l, w+α·g_w) = β·P(l, w)` for the step size α ≥ 0.
///
/// Expanding gives `2·g_l·g_w·α² + (2l·g_w + (4+2w)·g_l)·α + l(4+2w)(1−β) = 0`,
/// which is linear when either gradient is zero.
pub fn solve_step_size(l: f64, w: f64, g_l: f64, g_w: f64, beta: f64) -> Result<ScalingReport> {
    let base = simplified_params(l, w)?;
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Invalid(format!("parameter ratio beta must be positive, got {beta}")));
    }
    if !(g_l >= 0.0 && g_w >= 0.0) || (g_l == 0.0 && g_w == 0.0) || !g_l.is_finite() || !g_w.is_finite() {
        return Err(Error::Invalid(format!(
            "gradients must be non-negative and not both zero, got ({g_l}, {g_w})"
        )));
    }
    let (a_coef, b_base) = (l, 4.0 + 2.0 * w);
    let qa = 2.0 * g_l * g_w;
    let qb = 2.0 * a_coef * g_w + b_base * g_l;
    let qc = a_coef * b_base * (1.0 - beta);
    let alpha = if qa == 0.0 {
        -qc / qb
    } else {
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            return Err(Error::Invalid(format!(
                "no real step size reaches beta={beta} (discriminant {disc:.3e})"
            )));
        }
        // Citardauq form of the larger root, stable when qc is small.
        if qc == 0.0 {
            0.0
        } else {
            -2.0 * qc / (qb + disc.sqrt())
        }
    };
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(Error::Invalid(format!(
            "beta={beta} needs a negative step (alpha={alpha:.4}); ascent cannot shrink the model"
        )));
    }
    let (l_hat, w_hat) = (l + alpha * g_l, w + alpha * g_w);
    let (l_new, w_new) = (round_positive(l_hat), round_positive(w_hat));
    Ok(ScalingReport {
        l,
        w,
        g_l,
        g_w,
        beta,
        alpha,
        l_hat,
        w_hat,
        l_new,
        w_new,
        continuous_ratio: simplified_params(l_hat, w_hat)? / base,
        rounded_ratio: simplified_params(l_new as f64, w_new as f64)? / base,
    })
}

fn round_positive(x: f64) -> usize {
    (x.round() as usize).max(1)
}

/// Best candidate by performance under the budget `P ≤ β·P(base)`; ties go
/// to fewer parameters, then fewer layers.
pub fn grid_search_oracle<E>(candidates: &[(usize, usize)], mut evaluate: E, beta: f64, base: (usize, usize)) -> Result<(usize, usize)>
where
    E: FnMut(usize, usize) -> f64,
{
    if candidates.is_empty() {
        return Err(Error::Invalid("grid search needs at least one candidate".into()));
    }
    let budget = beta * simplified_params(base.0 as f64, base.1 as f64)?;
    let mut best: Option<((usize, usize), f64, f64)> = None;
    for &(l, w) in candidates {
        let p = simplified_params(l as f64, w as f64)?;
        if p > budget * (1.0 + 1e-12) {
            return Err(Error::Invalid(format!(
                "candidate ({l}, {w}) has {p} e² parameters, over the budget of {budget}"
            )));
        }
        let perf = evaluate(l, w);
        let better = match best {
            None => true,
            Some(((bl, _), bperf, bp)) => {
                perf > bperf || (perf == bperf && (p < bp || (p == bp && l < bl)))
            }
        };
        if better {
            best = Some(((l, w), perf, p));
        }
    }
    Ok(best.expect("non-empty candidates").0)
}

/// Every `(l, w)` in the given inclusive ranges within the budget.
pub fn budget_grid(l_range: (usize, usize), w_range: (usize, usize), beta: f64, base: (usize, usize)) -> Result<Vec<(usize, usize)>> {
    let budget = beta * simplified_params(base.0 as f64, base.1 as f64)?;
    let mut out = Vec::new();
    for l in l_range.0.max(1)..=l_range.1 {
        for w in w_range.0.max(1)..=w_range.1 {
            if simplified_params(l as f64, w as f64)? <= budget * (1.0 + 1e-12) {
                out.push((l, w));
            }
        }
    }
    Ok(out)
}

/// Parses `l w loss` lines (blank lines and `#` comments ignored).
pub fn parse_eval_points(text: &str) -> Result<Vec<EvalPoint>> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed: Option<Vec<f64>> = (fields.len() == 3).then(|| fields.iter().map(|f| f.parse().ok()).collect()).flatten();
        let Some(v) = parsed else {
            return Err(Error::Invalid(format!("line {}: expected `l w loss`, got `{raw}`", i + 1)));
        };
        points.push(EvalPoint::new(v[0], v[1], v[2])?);
    }
    Ok(points)
}

/// Picks the base and the two probes from three points measured at
/// `(l, w)`, `(l+ε, w)` and `(l, w+ε)`.
pub fn identify_probes(points: &[EvalPoint], base: (f64, f64), eps: f64) -> Result<(EvalPoint, EvalPoint, EvalPoint)> {
    let find = |l: f64, w: f64| {
        points
            .iter()
            .find(|p| (p.l - l).abs() < COORD_TOL && (p.w - w).abs() < COORD_TOL)
            .copied()
    };
    let (l, w) = base;
    let b = find(l, w).ok_or_else(|| Error::Invalid(format!("no evaluation at the base ({l}, {w})")))?;
    let pl = find(l + eps, w)
        .ok_or_else(|| Error::Invalid(format!("no depth probe at ({}, {w}) for eps={eps}", l + eps)))?;
    let pw = find(l, w + eps)
        .ok_or_else(|| Error::Invalid(format!("no width probe at ({l}, {}) for eps={eps}", w + eps)))?;
    Ok((b, pl, pw))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_values() {
        assert_eq!(simplified_params(7.0, 4.0).unwrap(), 168.0);
        assert_eq!(simplified_params(5.0, 4.0).unwrap(), 120.0);
        assert!(simplified_params(0.0, 4.0).is_err());
    }

    #[test]
    fn unit_ratio_is_fixed_point() {
        let r = solve_step_size(5.0, 4.0, 0.01, 0.02, 1.0).unwrap();
        assert_eq!(r.alpha, 0.0);
        assert!(r.is_unchanged());
        assert_eq!(r.decision(), "no change");
    }

    #[test]
    fn linear_case_doubles_depth() {
        let r = solve_step_size(5.0, 4.0, 0.5, 0.0, 2.0).unwrap();
        assert!((r.alpha * r.g_l - 5.0).abs() < 1e-12);
        assert_eq!((r.l_new, r.w_new), (10, 4));
    }

    #[test]
    fn shrinking_is_rejected() {
        assert!(solve_step_size(5.0, 4.0, 0.01, 0.01, 0.5).is_err());
        assert!(solve_step_size(5.0, 4.0, 0.0, 0.0, 2.0).is_err());
        assert!(solve_step_size(5.0, 4.0, -0.1, 0.1, 2.0).is_err());
    }

    #[test]
    fn probe_parsing() {
        let pts = parse_eval_points("# l w loss\n5 4 5.0\n6 4 4.98937\n5 5 4.98931\n").unwrap();
        let (b, pl, pw) = identify_probes(&pts, (5.0, 4.0), 1.0).unwrap();
        let (gl, gw) = finite_diff_gradients(b, pl, pw, 1.0).unwrap();
        assert!((gl - 0.01063).abs() < 1e-9 && (gw - 0.01069).abs() < 1e-9);
        assert!(identify_probes(&pts, (5.0, 4.0), 2.0).is_err());
        assert!(parse_eval_points("5 4").is_err());
    }
}
