//! SQP loop: linearize the obstacle constraints at the current iterate,
//! solve the QP, damp the step, repeat.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::qp::{solve_with_equalities, QpStatus, SparseRow};
use super::{BoxEdge, ConstraintKind, ConstraintTag, Controller, OcpProblem, OcpSolution, SolveStatus, SqpSettings};
use crate::chance::gamma;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxFace {
    Bottom,
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqpIterate {
    pub iteration: usize,
    pub step_norm: f64,
    pub step_fraction: f64,
    pub violation: f64,
    pub objective: f64,
    pub qp_iterations: usize,
    pub softened: bool,
    /// Constraints that made the hard QP infeasible at this iteration.
    pub blocking: Vec<ConstraintTag>,
}

const CYCLE_MEMORY: usize = 4;
/// Points deeper than this fraction of the boundary radius get the lateral
/// normal; shallower ones keep the radial one.
const LATERAL_DEPTH: f64 = 0.9;

/// Supporting half-plane `nᵀp ≥ b` keeping `p` outside the ellipse with
/// semi-axes `t(u)·semi` around `center`, where `u` is the unit direction in
/// normalized coordinates. Points well inside are pushed laterally toward the open
/// side; points behind the obstacle on the blocked side get the mirrored
/// normal so the plan goes around on the open side.
pub fn linearize_ellipse(
    p: [f64; 2],
    center: [f64; 2],
    semi: [f64; 2],
    scale: &dyn Fn([f64; 2]) -> f64,
    open_up: bool,
) -> ([f64; 2], f64) {
    let d = [(p[0] - center[0]) / semi[0], (p[1] - center[1]) / semi[1]];
    let rho = d[0].hypot(d[1]);
    let side = if open_up { 1.0 } else { -1.0 };
    let radial = if rho > 1e-12 { [d[0] / rho, d[1] / rho] } else { [0.0, side] };
    let u = if rho < LATERAL_DEPTH * scale(radial) {
        [0.0, side]
    } else if radial[0] < 0.0 && radial[1] * side < 0.0 {
        [radial[0], -radial[1]]
    } else {
        radial
    };
    let t = scale(u);
    let n = [u[0] / semi[0], u[1] / semi[1]];
    (n, t + n[0] * center[0] + n[1] * center[1])
}

/// Face of the box region `{x_min ≤ p_x ≤ x_max, p_y > edge}` to keep clear
/// of, chosen from the iterate: the lower edge while the iterate is in the
/// x-range, a side face while it is above the edge but outside the range.
pub fn linearize_box(p: [f64; 2], b: &BoxEdge) -> Option<(BoxFace, [f64; 2], f64)> {
    let in_x = p[0] >= b.x_min && p[0] <= b.x_max;
    let above = p[1] > b.edge;
    let face = if in_x && above {
        let depths =
            [(p[1] - b.edge, BoxFace::Bottom), (p[0] - b.x_min, BoxFace::Left), (b.x_max - p[0], BoxFace::Right)];
        depths.into_iter().min_by(|a, c| a.0.total_cmp(&c.0)).map(|x| x.1)
    } else if in_x {
        Some(BoxFace::Bottom)
    } else if above {
        Some(if p[0] < b.x_min { BoxFace::Left } else { BoxFace::Right })
    } else {
        None
    }?;
    Some(match face {
        BoxFace::Bottom => (face, [0.0, 1.0], b.edge),
        BoxFace::Left => (face, [1.0, 0.0], b.x_min),
        BoxFace::Right => (face, [-1.0, 0.0], -b.x_max),
    })
}

fn box_depth(p: [f64; 2], b: &BoxEdge) -> f64 {
    if p[0] >= b.x_min && p[0] <= b.x_max && p[1] > b.edge {
        (p[1] - b.edge).min(p[0] - b.x_min).min(b.x_max - p[0])
    } else {
        0.0
    }
}

/// Per-slot geometry resolved for one problem instance.
struct SlotGeometry {
    tag: ConstraintTag,
    idx: [usize; 2],
    shape: SlotShape,
}

enum SlotShape {
    Ellipse { center: [f64; 2], semi: [f64; 2], sigma: Option<DMatrix<f64>>, p: f64, open_up: bool },
    Box(BoxEdge),
    Absent,
}

impl SlotGeometry {
    fn scale(&self, u: [f64; 2]) -> f64 {
        match &self.shape {
            SlotShape::Ellipse { semi, sigma: Some(s), p, .. } => {
                let grad = DVector::from_column_slice(&[2.0 * u[0] / semi[0], 2.0 * u[1] / semi[1]]);
                let k = gamma(&grad, s, *p).unwrap_or(0.0);
                0.5 * (k + (k * k + 4.0).sqrt())
            }
            _ => 1.0,
        }
    }

    fn point(&self, w: &DVector<f64>) -> [f64; 2] {
        [w[self.idx[0]], w[self.idx[1]]]
    }

    fn violation(&self, w: &DVector<f64>) -> f64 {
        let p = self.point(w);
        match &self.shape {
            SlotShape::Ellipse { center, semi, .. } => {
                let d = [(p[0] - center[0]) / semi[0], (p[1] - center[1]) / semi[1]];
                let rho = d[0].hypot(d[1]);
                let radial = if rho > 1e-12 { [d[0] / rho, d[1] / rho] } else { [0.0, 1.0] };
                (self.scale(radial) - rho).max(0.0) * semi[0].min(semi[1])
            }
            SlotShape::Box(b) => box_depth(p, b),
            SlotShape::Absent => 0.0,
        }
    }

    fn row(&self, w: &DVector<f64>) -> Option<SparseRow> {
        let p = self.point(w);
        match &self.shape {
            SlotShape::Ellipse { center, semi, open_up, .. } => {
                let (n, b) = linearize_ellipse(p, *center, *semi, &|u| self.scale(u), *open_up);
                Some(SparseRow::new(vec![(self.idx[0], -n[0]), (self.idx[1], -n[1])], -b))
            }
            SlotShape::Box(bx) => {
                linearize_box(p, bx).map(|(_, a, b)| SparseRow::new(vec![(self.idx[0], a[0]), (self.idx[1], a[1])], b))
            }
            SlotShape::Absent => None,
        }
    }
}

fn position_block(s: &DMatrix<f64>) -> DMatrix<f64> {
    if s.nrows() == 2 {
        s.clone()
    } else {
        DMatrix::from_row_slice(2, 2, &[s[(0, 0)], s[(0, 2)], s[(2, 0)], s[(2, 2)]])
    }
}

fn open_up(lane: (f64, f64), center_y: f64, half: f64) -> bool {
    let up = lane.1 - (center_y + half);
    let down = (center_y - half) - lane.0;
    up >= down
}

fn slot_geometry(c: &Controller, problem: &OcpProblem) -> Result<Vec<SlotGeometry>> {
    let l = c.layout();
    let tube = &c.robust.tube;
    let robust_lane = (tube.state_lower(2).unwrap_or(f64::NEG_INFINITY), tube.state_upper(2).unwrap_or(f64::INFINITY));
    let unit = |i: usize| {
        let mut e = DVector::zeros(2);
        e[i] = 1.0;
        e
    };
    let mut out = Vec::with_capacity(c.slots().len());
    for tag in c.slots() {
        let k = tag.step;
        let (idx, shape) = match tag.kind {
            ConstraintKind::RobustEllipse => {
                let semi = c.robust.ellipse.expect("slot implies ellipse");
                let shape = match &problem.obstacle {
                    Some(o) => SlotShape::Ellipse {
                        center: o[k],
                        semi,
                        sigma: None,
                        p: 0.5,
                        open_up: open_up(robust_lane, o[k][1], semi[1]),
                    },
                    None => SlotShape::Absent,
                };
                ([l.xbar(k, 0), l.xbar(k, 2)], shape)
            }
            ConstraintKind::RobustBox => {
                ([l.xbar(k, 0), l.xbar(k, 2)], SlotShape::Box(c.robust.static_box.expect("slot implies box")))
            }
            ConstraintKind::ChanceEllipse | ConstraintKind::ChanceBox => {
                let long = c.long.as_ref().expect("chance slot implies long stage");
                let py = if l.ls == 2 { 1 } else { 2 };
                let idx = [l.s(k, 0), l.s(k, py)];
                let sig = position_block(&long.sigmas[k]);
                let shape = if tag.kind == ConstraintKind::ChanceEllipse {
                    let semi = long.ellipse.expect("slot implies ellipse");
                    match &problem.obstacle {
                        Some(o) => {
                            let gy = gamma(&unit(1), &sig, long.p)?;
                            SlotShape::Ellipse {
                                center: o[k],
                                semi,
                                sigma: Some(sig),
                                p: long.p,
                                open_up: open_up((long.lane[0] + gy, long.lane[1] - gy), o[k][1], semi[1]),
                            }
                        }
                        None => SlotShape::Absent,
                    }
                } else {
                    let b = long.static_box.expect("slot implies box");
                    let gx = gamma(&unit(0), &sig, long.p)?;
                    let gy = gamma(&unit(1), &sig, long.p)?;
                    SlotShape::Box(BoxEdge { x_min: b.x_min - gx, x_max: b.x_max + gx, edge: b.edge - gy })
                };
                (idx, shape)
            }
            _ => unreachable!("only obstacle constraints are nonlinear"),
        };
        out.push(SlotGeometry { tag: *tag, idx, shape });
    }
    Ok(out)
}

fn total_violation(c: &Controller, slots: &[SlotGeometry], eq: &[SparseRow], w: &DVector<f64>) -> f64 {
    let x = w.as_slice();
    let nl = slots.iter().map(|s| s.violation(w)).fold(0.0, f64::max);
    let lin = c.fixed_ineq().iter().map(|r| r.row.residual(x).max(0.0)).fold(0.0, f64::max);
    let eqv = eq.iter().map(|r| r.residual(x).abs()).fold(0.0, f64::max);
    nl.max(lin).max(eqv)
}

pub fn solve_sqp(problem: &OcpProblem, settings: &SqpSettings) -> Result<OcpSolution> {
    settings.validate()?;
    let start = Instant::now();
    let c = problem.controller.as_ref();
    let n = c.layout().n_vars();
    let eq = c.equalities(&problem.x0);
    let slots = slot_geometry(c, problem)?;
    let fixed: Vec<SparseRow> = c.fixed_ineq().iter().map(|r| r.row.clone()).collect();
    let quad = c.quad();
    let soft_f = c.soft_linear();

    let mut w = problem.guess.clone();
    let mut soft = false;
    let mut obj = quad.value(&w);
    // Recent iterates, to catch short cycles between linearizations.
    let mut history: Vec<DVector<f64>> = Vec::new();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=settings.max_iter {
        iterations = it;
        let lin: Vec<(usize, SparseRow)> =
            slots.iter().enumerate().filter_map(|(j, s)| s.row(&w).map(|r| (j, r))).collect();
        let mut qp_iters = 0;
        let mut x_new = None;
        let mut hard_blocking = Vec::new();
        soft = false;
        {
            let mut ineq = fixed.clone();
            ineq.extend(lin.iter().map(|(_, r)| r.clone()));
            let sol = solve_with_equalities(c.factor(false), &quad.f, &eq, &ineq)?;
            qp_iters += sol.iterations;
            if sol.status == QpStatus::Optimal {
                x_new = Some(sol.x);
            } else {
                soft = true;
                if settings.trace {
                    hard_blocking = blocking_tags(c, &eq, &fixed, &lin, &slots, sol.blocking, &sol.active);
                }
            }
        }
        if soft && x_new.is_none() {
            let mut ineq = fixed.clone();
            for (j, r) in &lin {
                let mut r = r.clone();
                r.terms.push((n + j, -1.0));
                ineq.push(r);
            }
            for j in 0..slots.len() {
                ineq.push(SparseRow::new(vec![(n + j, -1.0)], 0.0));
            }
            let sol = solve_with_equalities(c.factor(true), &soft_f, &eq, &ineq)?;
            qp_iters += sol.iterations;
            if sol.status != QpStatus::Optimal {
                let mut out = OcpSolution::from_raw(c, w.clone());
                out.status = SolveStatus::Infeasible;
                out.iterations = it;
                out.softened = true;
                out.violated = blocking_tags(c, &eq, &fixed, &lin, &slots, sol.blocking, &sol.active);
                out.max_violation = total_violation(c, &slots, &eq, &w);
                out.solve_time_ms = start.elapsed().as_secs_f64() * 1e3;
                out.trace = trace;
                return Ok(out);
            }
            x_new = Some(sol.x.rows(0, n).into_owned());
        }
        let x_qp = x_new.expect("a QP solution exists here");

        let v_old = total_violation(c, &slots, &eq, &w);
        let v_new = total_violation(c, &slots, &eq, &x_qp);
        let mut frac = 1.0;
        // Violations of second order in the step come from curved boundaries
        // and are accepted so the linearization can settle onto them.
        let full = (&x_qp - &w).amax();
        let next = if it == 1 || v_new <= (v_old + settings.violation_tol).max(full * full) {
            x_qp
        } else {
            let dir = &x_qp - &w;
            let mut cand = x_qp.clone();
            for _ in 0..settings.damping_steps {
                frac *= settings.damping_factor;
                cand = &w + &dir * frac;
                if total_violation(c, &slots, &eq, &cand) <= v_old + settings.violation_tol {
                    break;
                }
            }
            cand
        };
        let step = (&next - &w).amax();
        let cycle_start = if step >= settings.step_tol {
            history.iter().position(|h| (&next - h).amax() < settings.step_tol)
        } else {
            None
        };
        let cycled = cycle_start.is_some();
        history.push(w.clone());
        if history.len() > CYCLE_MEMORY {
            history.remove(0);
        }
        w = match cycle_start {
            Some(i) => {
                let key =
                    |x: &DVector<f64>| (total_violation(c, &slots, &eq, x).max(settings.violation_tol), quad.value(x));
                history[i..]
                    .iter()
                    .map(|x| (key(x), x))
                    .min_by(|a, b| a.0 .0.total_cmp(&b.0 .0).then(a.0 .1.total_cmp(&b.0 .1)))
                    .map(|(_, x)| x.clone())
                    .expect("cycle has members")
            }
            None => next,
        };
        let obj_new = quad.value(&w);
        let stalled = it > 1
            && (obj - obj_new).abs() <= settings.objective_tol * (1.0 + obj_new.abs())
            && total_violation(c, &slots, &eq, &w) <= settings.violation_tol;
        obj = obj_new;
        if settings.trace {
            trace.push(SqpIterate {
                iteration: it,
                step_norm: step,
                step_fraction: frac,
                violation: total_violation(c, &slots, &eq, &w),
                objective: obj,
                qp_iterations: qp_iters,
                softened: soft,
                blocking: hard_blocking,
            });
        }
        if step < settings.step_tol || stalled || cycled {
            converged = true;
            break;
        }
    }

    let mut out = OcpSolution::from_raw(c, w);
    out.max_violation = total_violation(c, &slots, &eq, &out.raw);
    out.status = if converged { SolveStatus::Converged } else { SolveStatus::MaxIter };
    out.iterations = iterations;
    out.softened = soft;
    out.violated = if soft {
        slots.iter().filter(|s| s.violation(&out.raw) > settings.violation_tol).map(|s| s.tag).collect()
    } else {
        Vec::new()
    };
    out.solve_time_ms = start.elapsed().as_secs_f64() * 1e3;
    out.trace = trace;
    Ok(out)
}

fn blocking_tags(
    c: &Controller,
    eq: &[SparseRow],
    fixed: &[SparseRow],
    lin: &[(usize, SparseRow)],
    slots: &[SlotGeometry],
    blocking: Option<usize>,
    active: &[usize],
) -> Vec<ConstraintTag> {
    let eq_tags = c.equality_tags();
    let tag_of = |idx: usize| -> Option<ConstraintTag> {
        if idx < eq.len() {
            return Some(eq_tags[idx]);
        }
        let i = idx - eq.len();
        if i < fixed.len() {
            return Some(c.fixed_ineq()[i].tag);
        }
        let j = i - fixed.len();
        lin.get(j).map(|(s, _)| slots[*s].tag)
    };
    let mut tags: Vec<ConstraintTag> = blocking.into_iter().chain(active.iter().copied()).filter_map(tag_of).collect();
    tags.sort();
    tags.dedup();
    tags
}
