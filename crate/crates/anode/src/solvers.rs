//! Explicit Runge-Kutta integration with recorded trajectories.
//!
//! All schemes run through one tableau-driven stepper, and the two helpers
//! [`stage_input`] / [`weighted_update`] are the only places state updates
//! happen. The discrete adjoint recomputes stage inputs with the same helpers,
//! which is what makes gradients through replayed checkpoints bit-identical
//! to gradients through stored tapes.
//!
//! Fields are autonomous; reverse flows integrate the negated field.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dynamics::VectorField;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Any state component beyond this magnitude (or any non-finite component)
/// counts as a blow-up.
pub const BLOWUP_ABS: f64 = 1e300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Euler,
    Heun,
    Rk4,
    Rk45,
}

impl std::fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SchemeKind::Euler => "euler",
            SchemeKind::Heun => "heun",
            SchemeKind::Rk4 => "rk4",
            SchemeKind::Rk45 => "rk45",
        };
        f.write_str(s)
    }
}

/// Integration scheme plus its step configuration.
///
/// `Heun` is the explicit trapezoidal two-stage method; `Rk45` is
/// Dormand-Prince 5(4) with a PI step controller (safety 0.9, step-ratio
/// clamp [0.2, 5]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheme {
    Euler { nsteps: usize },
    Heun { nsteps: usize },
    Rk4 { nsteps: usize },
    Rk45 {
        abs_tol: f64,
        rel_tol: f64,
        initial_step: f64,
        max_steps: usize,
    },
}

impl Scheme {
    pub fn kind(&self) -> SchemeKind {
        match self {
            Scheme::Euler { .. } => SchemeKind::Euler,
            Scheme::Heun { .. } => SchemeKind::Heun,
            Scheme::Rk4 { .. } => SchemeKind::Rk4,
            Scheme::Rk45 { .. } => SchemeKind::Rk45,
        }
    }

    pub fn fixed_nsteps(&self) -> Option<usize> {
        match self {
            Scheme::Euler { nsteps } | Scheme::Heun { nsteps } | Scheme::Rk4 { nsteps } => {
                Some(*nsteps)
            }
            Scheme::Rk45 { .. } => None,
        }
    }

    pub fn fixed(kind: SchemeKind, nsteps: usize) -> Result<Scheme> {
        match kind {
            SchemeKind::Euler => Ok(Scheme::Euler { nsteps }),
            SchemeKind::Heun => Ok(Scheme::Heun { nsteps }),
            SchemeKind::Rk4 => Ok(Scheme::Rk4 { nsteps }),
            SchemeKind::Rk45 => Err(Error::InvalidArg(
                "rk45 is adaptive; it has no fixed step count".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Scheme::Euler { nsteps } | Scheme::Heun { nsteps } | Scheme::Rk4 { nsteps } => {
                if *nsteps == 0 {
                    return Err(Error::InvalidArg("fixed-step scheme wants nsteps >= 1".into()));
                }
            }
            Scheme::Rk45 {
                abs_tol,
                rel_tol,
                initial_step,
                max_steps,
            } => {
                if *abs_tol <= 0.0 || *rel_tol <= 0.0 {
                    return Err(Error::InvalidArg("rk45 tolerances must be positive".into()));
                }
                if *initial_step <= 0.0 {
                    return Err(Error::InvalidArg("rk45 initial step must be positive".into()));
                }
                if *max_steps == 0 {
                    return Err(Error::InvalidArg("rk45 wants max_steps >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

/// Arithmetic mode. `Single` rounds every stage value and state through `f32`
/// right after it is computed, emulating single-precision integration while
/// keeping one code path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Double,
    Single,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SolveOptions {
    /// Record per-step stage evaluations (the tape DTO replays).
    pub record_tape: bool,
    pub precision: Precision,
}

impl SolveOptions {
    pub fn tape() -> Self {
        SolveOptions {
            record_tape: true,
            precision: Precision::Double,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepLog {
    pub accepted: usize,
    pub rejected: usize,
}

/// A recorded discrete solution: states at `times`, the step sizes that
/// produced them, and (on request) each step's RK stage values.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Tensor>,
    pub dts: Vec<f64>,
    pub stages: Option<Vec<Vec<Tensor>>>,
    pub step_log: Option<StepLog>,
}

impl Trajectory {
    pub fn nsteps(&self) -> usize {
        self.dts.len()
    }

    pub fn last_state(&self) -> &Tensor {
        self.states.last().expect("trajectory has at least z0")
    }

    /// Columns: `t`, then the flattened state.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.states[0].len();
        write!(w, "t")?;
        for i in 0..n {
            write!(w, ",z{i}")?;
        }
        writeln!(w)?;
        for (t, z) in self.times.iter().zip(&self.states) {
            write!(w, "{t}")?;
            for x in z.data() {
                write!(w, ",{x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Butcher tableau of an explicit scheme. Row `j` of `a` holds the `j`
/// strictly-lower coefficients of stage `j`.
pub struct Tableau {
    pub a: &'static [&'static [f64]],
    pub b: &'static [f64],
    pub c: &'static [f64],
    pub err: Option<&'static [f64]>,
}

impl Tableau {
    pub fn stages(&self) -> usize {
        self.b.len()
    }
}

pub const EULER: Tableau = Tableau {
    a: &[&[]],
    b: &[1.0],
    c: &[0.0],
    err: None,
};

pub const HEUN: Tableau = Tableau {
    a: &[&[], &[1.0]],
    b: &[0.5, 0.5],
    c: &[0.0, 1.0],
    err: None,
};

pub const RK4: Tableau = Tableau {
    a: &[&[], &[0.5], &[0.0, 0.5], &[0.0, 0.0, 1.0]],
    b: &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
    c: &[0.0, 0.5, 0.5, 1.0],
    err: None,
};

pub const DOPRI5: Tableau = Tableau {
    a: &[
        &[],
        &[0.2],
        &[3.0 / 40.0, 9.0 / 40.0],
        &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
        &[
            19372.0 / 6561.0,
            -25360.0 / 2187.0,
            64448.0 / 6561.0,
            -212.0 / 729.0,
        ],
        &[
            9017.0 / 3168.0,
            -355.0 / 33.0,
            46732.0 / 5247.0,
            49.0 / 176.0,
            -5103.0 / 18656.0,
        ],
        &[
            35.0 / 384.0,
            0.0,
            500.0 / 1113.0,
            125.0 / 192.0,
            -2187.0 / 6784.0,
            11.0 / 84.0,
        ],
    ],
    b: &[
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
        0.0,
    ],
    c: &[0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0],
    err: Some(&[
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ]),
};

impl SchemeKind {
    pub fn tableau(&self) -> &'static Tableau {
        match self {
            SchemeKind::Euler => &EULER,
            SchemeKind::Heun => &HEUN,
            SchemeKind::Rk4 => &RK4,
            SchemeKind::Rk45 => &DOPRI5,
        }
    }

    /// z-shaped scratch tensors a step of this scheme keeps alive (the stage
    /// values). Memory accounting reports these separately from stored states.
    pub fn stage_scratch(&self) -> usize {
        self.tableau().stages()
    }
}

/// Input of stage `j`: `z + dt * sum_l a[j][l] k_l`, zero coefficients
/// skipped. Shared by the forward stepper and the discrete adjoint so both
/// see bitwise-identical values.
pub(crate) fn stage_input(z: &Tensor, dt: f64, a_row: &[f64], ks: &[Tensor]) -> Result<Tensor> {
    let mut y = z.clone();
    for (l, &a) in a_row.iter().enumerate() {
        if a != 0.0 {
            y.add_scaled_assign(dt * a, &ks[l])?;
        }
    }
    Ok(y)
}

/// `z + dt * sum_j b[j] k_j`, zero coefficients skipped.
pub(crate) fn weighted_update(z: &Tensor, dt: f64, b: &[f64], ks: &[Tensor]) -> Result<Tensor> {
    let mut out = z.clone();
    for (j, &bj) in b.iter().enumerate() {
        if bj != 0.0 {
            out.add_scaled_assign(dt * bj, &ks[j])?;
        }
    }
    Ok(out)
}

fn maybe_round(t: &mut Tensor, precision: Precision) {
    if precision == Precision::Single {
        t.round_f32();
    }
}

/// One explicit RK step; returns the new state and all stage values.
pub(crate) fn rk_step<F>(
    rhs: &F,
    z: &Tensor,
    dt: f64,
    tab: &Tableau,
    precision: Precision,
) -> Result<(Tensor, Vec<Tensor>)>
where
    F: Fn(&Tensor) -> Result<Tensor> + ?Sized,
{
    let s = tab.stages();
    let mut ks: Vec<Tensor> = Vec::with_capacity(s);
    for j in 0..s {
        let y = if j == 0 {
            z.clone()
        } else {
            stage_input(z, dt, tab.a[j], &ks)?
        };
        let mut k = rhs(&y)?;
        maybe_round(&mut k, precision);
        ks.push(k);
    }
    let mut z_next = weighted_update(z, dt, tab.b, &ks)?;
    maybe_round(&mut z_next, precision);
    Ok((z_next, ks))
}

fn check_state(z: &Tensor, t: f64, step: usize, prev: &Tensor) -> Result<()> {
    if !z.is_finite() || z.max_abs() > BLOWUP_ABS {
        return Err(Error::BlowUp {
            t,
            step,
            last_state: Some(Box::new(prev.clone())),
        });
    }
    Ok(())
}

fn integrate_fixed<F>(
    rhs: &F,
    z0: &Tensor,
    horizon: f64,
    kind: SchemeKind,
    nsteps: usize,
    opts: SolveOptions,
) -> Result<Trajectory>
where
    F: Fn(&Tensor) -> Result<Tensor> + ?Sized,
{
    let tab = kind.tableau();
    let dt = horizon / nsteps as f64;
    let mut z = z0.clone();
    maybe_round(&mut z, opts.precision);
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![z.clone()],
        dts: Vec::with_capacity(nsteps),
        stages: if opts.record_tape { Some(Vec::with_capacity(nsteps)) } else { None },
        step_log: None,
    };
    for i in 0..nsteps {
        let (z_next, ks) = rk_step(rhs, &z, dt, tab, opts.precision)?;
        let t_next = (i + 1) as f64 * dt;
        check_state(&z_next, t_next, i, &z)?;
        if let Some(stages) = traj.stages.as_mut() {
            stages.push(ks);
        }
        traj.dts.push(dt);
        traj.times.push(t_next);
        traj.states.push(z_next.clone());
        z = z_next;
    }
    Ok(traj)
}

/// Integrates with an explicitly given step sequence (used to replay an
/// adaptive run's accepted steps, and by finite-difference oracles that must
/// hold the grid fixed).
pub fn integrate_with_steps<F>(
    rhs: &F,
    z0: &Tensor,
    dts: &[f64],
    kind: SchemeKind,
    opts: SolveOptions,
) -> Result<Trajectory>
where
    F: Fn(&Tensor) -> Result<Tensor> + ?Sized,
{
    let tab = kind.tableau();
    let mut z = z0.clone();
    maybe_round(&mut z, opts.precision);
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![z.clone()],
        dts: Vec::with_capacity(dts.len()),
        stages: if opts.record_tape { Some(Vec::new()) } else { None },
        step_log: None,
    };
    let mut t = 0.0;
    for (i, &dt) in dts.iter().enumerate() {
        let (z_next, ks) = rk_step(rhs, &z, dt, tab, opts.precision)?;
        t += dt;
        check_state(&z_next, t, i, &z)?;
        if let Some(stages) = traj.stages.as_mut() {
            stages.push(ks);
        }
        traj.dts.push(dt);
        traj.times.push(t);
        traj.states.push(z_next.clone());
        z = z_next;
    }
    Ok(traj)
}

fn integrate_adaptive<F>(
    rhs: &F,
    z0: &Tensor,
    horizon: f64,
    abs_tol: f64,
    rel_tol: f64,
    initial_step: f64,
    max_steps: usize,
    opts: SolveOptions,
) -> Result<Trajectory>
where
    F: Fn(&Tensor) -> Result<Tensor> + ?Sized,
{
    let tab = &DOPRI5;
    let err_w = tab.err.expect("dopri5 has embedded error weights");
    let mut z = z0.clone();
    maybe_round(&mut z, opts.precision);
    let mut traj = Trajectory {
        times: vec![0.0],
        states: vec![z.clone()],
        dts: Vec::new(),
        stages: if opts.record_tape { Some(Vec::new()) } else { None },
        step_log: Some(StepLog::default()),
    };

    let mut t = 0.0;
    let mut h = initial_step.min(horizon);
    let h_floor = horizon * 1e-14;
    let mut facold: f64 = 1e-4;
    let mut attempts = 0usize;

    while t < horizon * (1.0 - 1e-12) {
        attempts += 1;
        if attempts > max_steps {
            return Err(Error::StepBudgetExhausted { t, max_steps });
        }
        h = h.min(horizon - t);

        let step_result = rk_step(rhs, &z, h, tab, opts.precision);
        let (z_new, ks) = match step_result {
            Ok(v) => v,
            Err(e) => return Err(e),
        };

        // scaled RMS of the embedded 5th-vs-4th order difference
        let mut err_acc = 0.0;
        let n = z.len();
        let mut e = Tensor::zeros(z.shape())?;
        for (j, &w) in err_w.iter().enumerate() {
            if w != 0.0 {
                e.add_scaled_assign(h * w, &ks[j])?;
            }
        }
        for i in 0..n {
            let sk = abs_tol + rel_tol * z.data()[i].abs().max(z_new.data()[i].abs());
            let r = e.data()[i] / sk;
            err_acc += r * r;
        }
        let err = (err_acc / n as f64).sqrt();

        if !err.is_finite() {
            // stage arithmetic overflowed: shrink hard and retry
            let log = traj.step_log.as_mut().unwrap();
            log.rejected += 1;
            h *= 0.2;
            if h < h_floor {
                return Err(Error::BlowUp {
                    t,
                    step: traj.dts.len(),
                    last_state: Some(Box::new(z.clone())),
                });
            }
            continue;
        }

        if err <= 1.0 {
            check_state(&z_new, t + h, traj.dts.len(), &z)?;
            let log = traj.step_log.as_mut().unwrap();
            log.accepted += 1;
            t += h;
            traj.dts.push(h);
            traj.times.push(t);
            traj.states.push(z_new.clone());
            if let Some(stages) = traj.stages.as_mut() {
                stages.push(ks);
            }
            z = z_new;

            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2) * facold.powf(0.04)).clamp(0.2, 5.0)
            };
            facold = err.max(1e-4);
            h *= factor;
        } else {
            let log = traj.step_log.as_mut().unwrap();
            log.rejected += 1;
            let factor = (0.9 * err.powf(-0.2)).clamp(0.2, 1.0);
            h *= factor;
            if h < h_floor {
                return Err(Error::BlowUp {
                    t,
                    step: traj.dts.len(),
                    last_state: Some(Box::new(z.clone())),
                });
            }
        }
    }
    Ok(traj)
}

fn integrate<F>(
    rhs: &F,
    z0: &Tensor,
    horizon: f64,
    scheme: &Scheme,
    opts: SolveOptions,
) -> Result<Trajectory>
where
    F: Fn(&Tensor) -> Result<Tensor> + ?Sized,
{
    if horizon <= 0.0 {
        return Err(Error::InvalidArg(format!("horizon {horizon} must be positive")));
    }
    scheme.validate()?;
    match scheme {
        Scheme::Euler { nsteps } => integrate_fixed(rhs, z0, horizon, SchemeKind::Euler, *nsteps, opts),
        Scheme::Heun { nsteps } => integrate_fixed(rhs, z0, horizon, SchemeKind::Heun, *nsteps, opts),
        Scheme::Rk4 { nsteps } => integrate_fixed(rhs, z0, horizon, SchemeKind::Rk4, *nsteps, opts),
        Scheme::Rk45 {
            abs_tol,
            rel_tol,
            initial_step,
            max_steps,
        } => integrate_adaptive(
            rhs, z0, horizon, *abs_tol, *rel_tol, *initial_step, *max_steps, opts,
        ),
    }
}

/// Flow map `phi(z0, horizon)` with the trajectory recorded.
pub fn flow_forward(
    field: &VectorField,
    theta: &Tensor,
    z0: &Tensor,
    horizon: f64,
    scheme: &Scheme,
    opts: SolveOptions,
) -> Result<Trajectory> {
    field.validate(z0, theta)?;
    let rhs = |y: &Tensor| field.evaluate(y, theta);
    integrate(&rhs, z0, horizon, scheme, opts)
}

/// Reverse flow: integrates `dz/ds = -f(z)` from `zT` over the same horizon.
/// This reconstructs earlier states only to the extent the dynamics allow;
/// blow-ups are reported as errors carrying the last finite state.
pub fn flow_reverse(
    field: &VectorField,
    theta: &Tensor,
    z_terminal: &Tensor,
    horizon: f64,
    scheme: &Scheme,
    opts: SolveOptions,
) -> Result<Trajectory> {
    field.validate(z_terminal, theta)?;
    let rhs = |y: &Tensor| Ok(field.evaluate(y, theta)?.scale(-1.0));
    integrate(&rhs, z_terminal, horizon, scheme, opts)
}

/// Forward flow over an explicit step sequence (adaptive replays).
pub fn flow_forward_frozen(
    field: &VectorField,
    theta: &Tensor,
    z0: &Tensor,
    dts: &[f64],
    kind: SchemeKind,
    opts: SolveOptions,
) -> Result<Trajectory> {
    field.validate(z0, theta)?;
    let rhs = |y: &Tensor| field.evaluate(y, theta);
    integrate_with_steps(&rhs, z0, dts, kind, opts)
}

/// Least-squares slope of `log(error)` against `log(dt)` for a fixed-step
/// scheme against a reference solution at the horizon. Needs at least three
/// step counts.
pub fn convergence_order(
    field: &VectorField,
    theta: &Tensor,
    z0: &Tensor,
    horizon: f64,
    kind: SchemeKind,
    step_counts: &[usize],
    reference: &Tensor,
) -> Result<f64> {
    if step_counts.len() < 3 {
        return Err(Error::InvalidArg(
            "convergence_order wants at least 3 step counts".into(),
        ));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &n in step_counts {
        let scheme = Scheme::fixed(kind, n)?;
        let traj = flow_forward(field, theta, z0, horizon, &scheme, SolveOptions::default())?;
        let e = crate::tensor::relative_error(traj.last_state(), reference)?;
        if e > 0.0 {
            xs.push((horizon / n as f64).ln());
            ys.push(e.ln());
        }
    }
    if xs.len() < 3 {
        return Err(Error::InvalidArg(
            "too few nonzero errors to fit a convergence order".into(),
        ));
    }
    Ok(least_squares_slope(&xs, &ys))
}

/// Slope of the best-fit line through `(x, y)` pairs.
pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Activation;
    use crate::rng::{gaussian_tensor, Rng};
    use crate::tensor::relative_error;

    fn zero_field(dim: usize) -> (VectorField, Tensor) {
        let f = VectorField::Constant { dim };
        let th = Tensor::zeros(&[dim]).unwrap();
        (f, th)
    }

    #[test]
    fn zero_field_keeps_state_fixed() {
        let (f, th) = zero_field(3);
        let z0 = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        for scheme in [
            Scheme::Euler { nsteps: 7 },
            Scheme::Heun { nsteps: 7 },
            Scheme::Rk4 { nsteps: 7 },
        ] {
            let t = flow_forward(&f, &th, &z0, 1.0, &scheme, SolveOptions::default()).unwrap();
            for s in &t.states {
                assert_eq!(s.data(), z0.data());
            }
        }
    }

    #[test]
    fn linear_flow_matches_closed_form() {
        let f = VectorField::ScalarLinear;
        let th = Tensor::from_vec(vec![-100.0]);
        let z0 = Tensor::scalar(1.0);
        let exact = (-100.0f64).exp();
        // local error ~ (|lambda| dt)^5 / 120 per step, so ~9e-5 at N=1000
        // and ~3e-7 at N=4000
        let t = flow_forward(
            &f,
            &th,
            &z0,
            1.0,
            &Scheme::Rk4 { nsteps: 1000 },
            SolveOptions::default(),
        )
        .unwrap();
        let rel = (t.last_state().data()[0] - exact).abs() / exact;
        assert!(rel <= 2e-4, "N=1000 rel={rel}");
        let t = flow_forward(
            &f,
            &th,
            &z0,
            1.0,
            &Scheme::Rk4 { nsteps: 4000 },
            SolveOptions::default(),
        )
        .unwrap();
        let rel = (t.last_state().data()[0] - exact).abs() / exact;
        assert!(rel <= 1e-6, "N=4000 rel={rel}");
    }

    #[test]
    fn scalar_relu_flow_matches_linear_branch() {
        // z stays positive, so -max(0, 10 z) acts as -10 z and z(1) = e^{-10}
        let f = VectorField::ScalarRelu;
        let th = Tensor::from_vec(vec![-1.0, 10.0]);
        let z0 = Tensor::scalar(1.0);
        let t = flow_forward(
            &f,
            &th,
            &z0,
            1.0,
            &Scheme::Rk4 { nsteps: 1000 },
            SolveOptions::default(),
        )
        .unwrap();
        let exact = 4.5399929762484854e-5;
        let rel = (t.last_state().data()[0] - exact).abs() / exact;
        assert!(rel <= 1e-8, "rel={rel}");
    }

    #[test]
    fn reverse_of_constant_field_is_exact() {
        let f = VectorField::Constant { dim: 2 };
        let th = Tensor::from_vec(vec![0.7, -0.3]);
        let z0 = Tensor::from_vec(vec![1.0, 2.0]);
        for scheme in [
            Scheme::Euler { nsteps: 13 },
            Scheme::Heun { nsteps: 13 },
            Scheme::Rk4 { nsteps: 13 },
        ] {
            let fwd = flow_forward(&f, &th, &z0, 1.0, &scheme, SolveOptions::default()).unwrap();
            let back = flow_reverse(
                &f,
                &th,
                fwd.last_state(),
                1.0,
                &scheme,
                SolveOptions::default(),
            )
            .unwrap();
            let err = relative_error(back.last_state(), &z0).unwrap();
            assert!(err < 1e-14, "{scheme:?}: err={err}");
        }
    }

    #[test]
    fn reversal_error_grows_with_stiffness() {
        let f = VectorField::ScalarLinear;
        let z0 = Tensor::scalar(1.0);
        let mut prev = 0.0;
        for lam in [-5.0, -20.0, -80.0] {
            let th = Tensor::from_vec(vec![lam]);
            let scheme = Scheme::Euler { nsteps: 200 };
            let fwd = flow_forward(&f, &th, &z0, 1.0, &scheme, SolveOptions::default()).unwrap();
            let back = flow_reverse(
                &f,
                &th,
                fwd.last_state(),
                1.0,
                &scheme,
                SolveOptions::default(),
            )
            .unwrap();
            let err = relative_error(back.last_state(), &z0).unwrap();
            assert!(err > prev, "lambda={lam}: err={err} prev={prev}");
            prev = err;
        }
    }

    #[test]
    fn semigroup_property_bitwise_for_fixed_steps() {
        let mut rng = Rng::new(5);
        let field = VectorField::Matrix {
            dim: 3,
            activation: Activation::Softplus,
        };
        let theta = field.random_params(&mut rng, 0.5).unwrap();
        let z0 = gaussian_tensor(&mut rng, &[3], 0.0, 1.0).unwrap();

        // 8 steps over [0, 1]  ==  5 steps over [0, 0.625] then 3 over
        // [0, 0.375]; the split horizons divide to exactly dt = 0.125, so the
        // composed run replays the identical dt stream
        let full = flow_forward(
            &field,
            &theta,
            &z0,
            1.0,
            &Scheme::Rk4 { nsteps: 8 },
            SolveOptions::default(),
        )
        .unwrap();
        let first = flow_forward(
            &field,
            &theta,
            &z0,
            0.625,
            &Scheme::Rk4 { nsteps: 5 },
            SolveOptions::default(),
        )
        .unwrap();
        let second = flow_forward(
            &field,
            &theta,
            first.last_state(),
            0.375,
            &Scheme::Rk4 { nsteps: 3 },
            SolveOptions::default(),
        )
        .unwrap();
        // identical dt stream => identical floating-point state sequence
        assert_eq!(full.last_state().data(), second.last_state().data());
    }

    #[test]
    fn euler_recursion_residual_is_bitwise_zero() {
        let mut rng = Rng::new(9);
        let field = VectorField::Linear {
            dim: 4,
            activation: Activation::Relu,
        };
        let theta = field.random_params(&mut rng, 0.7).unwrap();
        let z0 = gaussian_tensor(&mut rng, &[4], 0.0, 1.0).unwrap();
        let traj = flow_forward(
            &field,
            &theta,
            &z0,
            1.0,
            &Scheme::Euler { nsteps: 16 },
            SolveOptions::default(),
        )
        .unwrap();
        for i in 0..traj.nsteps() {
            let mut recomputed = traj.states[i].clone();
            recomputed
                .add_scaled_assign(traj.dts[i], &field.evaluate(&traj.states[i], &theta).unwrap())
                .unwrap();
            assert_eq!(recomputed.data(), traj.states[i + 1].data(), "step {i}");
        }
    }

    #[test]
    fn convergence_orders_on_linear_flow() {
        let f = VectorField::ScalarLinear;
        let th = Tensor::from_vec(vec![-1.0]);
        let z0 = Tensor::scalar(1.0);
        let reference = Tensor::scalar((-1.0f64).exp());
        let counts = [8, 16, 32, 64, 128];

        let p = convergence_order(&f, &th, &z0, 1.0, SchemeKind::Euler, &counts, &reference).unwrap();
        assert!((p - 1.0).abs() <= 0.1, "euler order {p}");
        let p = convergence_order(&f, &th, &z0, 1.0, SchemeKind::Heun, &counts, &reference).unwrap();
        assert!((p - 2.0).abs() <= 0.2, "heun order {p}");
        let p = convergence_order(&f, &th, &z0, 1.0, SchemeKind::Rk4, &counts, &reference).unwrap();
        assert!((p - 4.0).abs() <= 0.4, "rk4 order {p}");
    }

    #[test]
    fn convergence_order_needs_three_counts() {
        let f = VectorField::ScalarLinear;
        let th = Tensor::from_vec(vec![-1.0]);
        let z0 = Tensor::scalar(1.0);
        let r = Tensor::scalar(0.3);
        assert!(convergence_order(&f, &th, &z0, 1.0, SchemeKind::Euler, &[4, 8], &r).is_err());
    }

    #[test]
    fn dopri5_matches_rk4_fine_grid() {
        let mut rng = Rng::new(4);
        let field = VectorField::Matrix {
            dim: 3,
            activation: Activation::Softplus,
        };
        let theta = field.random_params(&mut rng, 0.6).unwrap();
        let z0 = gaussian_tensor(&mut rng, &[3], 0.0, 1.0).unwrap();

        let adaptive = flow_forward(
            &field,
            &theta,
            &z0,
            1.0,
            &Scheme::Rk45 {
                abs_tol: 1e-10,
                rel_tol: 1e-10,
                initial_step: 0.1,
                max_steps: 100_000,
            },
            SolveOptions::default(),
        )
        .unwrap();
        let reference = flow_forward(
            &field,
            &theta,
            &z0,
            1.0,
            &Scheme::Rk4 { nsteps: 20_000 },
            SolveOptions::default(),
        )
        .unwrap();
        let err = relative_error(adaptive.last_state(), reference.last_state()).unwrap();
        assert!(err <= 1e-8, "err={err}");
        let log = adaptive.step_log.unwrap();
        assert!(log.accepted > 0);
    }

    #[test]
    fn adaptive_blow_up_is_reported_not_panicked() {
        // reverse of a strongly contracting linear flow explodes
        let f = VectorField::ScalarLinear;
        let th = Tensor::from_vec(vec![-2000.0]);
        let z0 = Tensor::scalar(1.0);
        let r = flow_reverse(
            &f,
            &th,
            &z0,
            1.0,
            &Scheme::Rk45 {
                abs_tol: 1e-6,
                rel_tol: 1e-6,
                initial_step: 1e-3,
                max_steps: 1_000_000,
            },
            SolveOptions::default(),
        );
        match r {
            Err(Error::BlowUp { t, .. }) => assert!(t < 1.0),
            Err(Error::StepBudgetExhausted { .. }) => {}
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn step_budget_error() {
        let f = VectorField::ScalarLinear;
        let th = Tensor::from_vec(vec![-1.0]);
        let z0 = Tensor::scalar(1.0);
        let r = flow_forward(
            &f,
            &th,
            &z0,
            1.0,
            &Scheme::Rk45 {
                abs_tol: 1e-13,
                rel_tol: 1e-13,
                initial_step: 1e-6,
                max_steps: 10,
            },
            SolveOptions::default(),
        );
        assert!(matches!(r, Err(Error::StepBudgetExhausted { .. })));
    }

    #[test]
    fn single_precision_mode_rounds_states() {
        let f = VectorField::ScalarLinear;
        let th = Tensor::from_vec(vec![-1.0]);
        let z0 = Tensor::scalar(1.0);
        let opts = SolveOptions {
            record_tape: false,
            precision: Precision::Single,
        };
        let t = flow_forward(&f, &th, &z0, 1.0, &Scheme::Rk4 { nsteps: 10 }, opts).unwrap();
        for s in &t.states {
            let x = s.data()[0];
            assert_eq!(x, x as f32 as f64, "state not f32-representable: {x}");
        }
    }
}
