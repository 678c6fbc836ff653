//! Snap-limited point-to-point scan profiles.
//!
//! The planner builds a symmetric piecewise-constant snap train: a seven
//! segment acceleration phase, a constant-velocity cruise and the mirrored
//! deceleration. Kinematic states are propagated exactly across segments, so
//! sampling does not accumulate integration error.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("infeasible profile: {0}")]
    InfeasibleProfile(String),
    #[error("time {t} s outside profile range [0, {duration}] s")]
    OutOfRange { t: f64, duration: f64 },
}

/// In-plane axis a scan is executed along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScanAxis {
    X,
    #[default]
    Y,
}

impl ScanAxis {
    pub fn index(self) -> usize {
        match self {
            ScanAxis::X => 0,
            ScanAxis::Y => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileParams {
    pub stroke: f64,
    pub v_max: f64,
    pub a_max: f64,
    pub j_max: f64,
    pub s_max: f64,
    pub dt: f64,
    pub axis: ScanAxis,
}

impl Default for ProfileParams {
    fn default() -> Self {
        Self {
            stroke: 0.05,
            v_max: 0.1,
            a_max: 5.0,
            j_max: 1000.0,
            s_max: 5.0e5,
            dt: 1e-4,
            axis: ScanAxis::Y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Kinematics {
    pub p: f64,
    pub v: f64,
    pub a: f64,
    pub j: f64,
    pub s: f64,
}

impl Kinematics {
    /// Exact propagation over `tau` seconds at constant snap `s`.
    fn advance(&self, s: f64, tau: f64) -> Self {
        let (t2, t3, t4) = (tau * tau, tau * tau * tau, tau * tau * tau * tau);
        Self {
            p: self.p + self.v * tau + self.a * t2 / 2.0 + self.j * t3 / 6.0 + s * t4 / 24.0,
            v: self.v + self.a * tau + self.j * t2 / 2.0 + s * t3 / 6.0,
            a: self.a + self.j * tau + s * t2 / 2.0,
            j: self.j + s * tau,
            s,
        }
    }
}

/// One constant-snap piece of the plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub duration: f64,
    pub snap: f64,
    /// State at `start`.
    pub initial: Kinematics,
}

/// Phase durations of the acceleration half of the plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseTimes {
    /// Snap pulse length.
    pub snap: f64,
    /// Constant-jerk length.
    pub jerk: f64,
    /// Constant-acceleration length.
    pub accel: f64,
    /// Constant-velocity length.
    pub cruise: f64,
    pub peak_jerk: f64,
    pub peak_accel: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub params: ProfileParams,
    pub phases: PhaseTimes,
    pub segments: Vec<Segment>,
    pub duration: f64,
    /// Constant-velocity window `[t1, t2]`.
    pub cruise: (f64, f64),
    pub time: Vec<f64>,
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub acceleration: Vec<f64>,
    pub jerk: Vec<f64>,
    pub snap: Vec<f64>,
}

fn check_positive(name: &str, v: f64) -> Result<(), ProfileError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ProfileError::InfeasibleProfile(format!("{name} must be > 0, got {v}")))
    }
}

fn phase_times(p: &ProfileParams) -> Result<PhaseTimes, ProfileError> {
    check_positive("stroke", p.stroke)?;
    check_positive("v_max", p.v_max)?;
    check_positive("a_max", p.a_max)?;
    check_positive("j_max", p.j_max)?;
    check_positive("s_max", p.s_max)?;
    check_positive("dt", p.dt)?;
    let s = p.s_max;
    // jerk peak and snap pulse reachable for an acceleration peak `a`
    let shape = |a: f64| {
        let j = p.j_max.min((a * s).sqrt());
        let ts = j / s;
        (j, ts, a / j - ts)
    };
    // velocity gained by one full ramp-up/ramp-down pair at peak `a`
    let ramp_velocity = |a: f64| {
        let (j, ts, _) = shape(a);
        a * (ts + a / j)
    };
    let mut a = p.a_max;
    if ramp_velocity(a) > p.v_max {
        let j = p.j_max;
        // jerk limit active: a²/j + a·j/s = v
        let cand = 0.5 * j * (-(j / s) + ((j / s).powi(2) + 4.0 * p.v_max / j).sqrt());
        a = if cand >= j * j / s { cand } else { (p.v_max * s.sqrt() / 2.0).powf(2.0 / 3.0) };
    }
    let (j, ts, tj) = shape(a);
    let tj = tj.max(0.0);
    let ramp = 2.0 * ts + tj;
    let ta = (p.v_max / a - ramp).max(0.0);
    let accel_total = 2.0 * ramp + ta;
    let cruise_len = p.stroke - p.v_max * accel_total;
    if cruise_len <= 0.0 {
        return Err(ProfileError::InfeasibleProfile(format!(
            "stroke {} m too short to reach {} m/s (acceleration needs {} m)",
            p.stroke,
            p.v_max,
            p.v_max * accel_total
        )));
    }
    Ok(PhaseTimes {
        snap: ts,
        jerk: tj,
        accel: ta,
        cruise: cruise_len / p.v_max,
        peak_jerk: j,
        peak_accel: a,
    })
}

/// Plans a symmetric fourth-order profile from rest at 0 to rest at `stroke`.
pub fn plan_fourth_order(params: &ProfileParams) -> Result<Profile, ProfileError> {
    let ph = phase_times(params)?;
    let s = ph.peak_jerk / ph.snap;
    let accel_half = [
        (ph.snap, s),
        (ph.jerk, 0.0),
        (ph.snap, -s),
        (ph.accel, 0.0),
        (ph.snap, -s),
        (ph.jerk, 0.0),
        (ph.snap, s),
    ];
    let mut pieces: Vec<(f64, f64)> = accel_half.to_vec();
    pieces.push((ph.cruise, 0.0));
    pieces.extend(accel_half.iter().map(|&(d, sn)| (d, -sn)));

    let mut segments = Vec::with_capacity(pieces.len());
    let mut state = Kinematics::default();
    let mut t = 0.0;
    let mut cruise = (0.0, 0.0);
    for (i, &(duration, snap)) in pieces.iter().enumerate() {
        if i == 7 {
            cruise = (t, t + duration);
        }
        if duration <= 0.0 {
            continue;
        }
        segments.push(Segment { start: t, duration, snap, initial: state });
        state = state.advance(snap, duration);
        t += duration;
    }
    let duration = t;

    let n = (duration / params.dt).ceil() as usize;
    let mut profile = Profile {
        params: *params,
        phases: ph,
        segments,
        duration,
        cruise,
        time: Vec::with_capacity(n + 1),
        position: Vec::with_capacity(n + 1),
        velocity: Vec::with_capacity(n + 1),
        acceleration: Vec::with_capacity(n + 1),
        jerk: Vec::with_capacity(n + 1),
        snap: Vec::with_capacity(n + 1),
    };
    for k in 0..=n {
        let tk = k as f64 * params.dt;
        let st = profile.exact(tk);
        profile.time.push(tk);
        profile.position.push(st.p);
        profile.velocity.push(st.v);
        profile.acceleration.push(st.a);
        profile.jerk.push(st.j);
        profile.snap.push(st.s);
    }
    Ok(profile)
}

impl Profile {
    /// Exact kinematic state at `t`; held at the end state past `duration`
    /// and at rest before 0.
    pub fn exact(&self, t: f64) -> Kinematics {
        if t <= 0.0 {
            return Kinematics::default();
        }
        let idx = self.segments.partition_point(|seg| seg.start <= t);
        match idx.checked_sub(1).map(|i| &self.segments[i]) {
            Some(seg) if t < seg.start + seg.duration => seg.initial.advance(seg.snap, t - seg.start),
            _ => self.end_state(),
        }
    }

    /// Resting state at the end of the move.
    pub fn end_state(&self) -> Kinematics {
        match self.segments.last() {
            Some(seg) => {
                let mut k = seg.initial.advance(seg.snap, seg.duration);
                k.s = 0.0;
                k
            }
            None => Kinematics::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.time.len()
    }

    pub fn is_empty(&self) -> bool {
        self.time.is_empty()
    }

    /// Linear interpolation of the sampled position, velocity and
    /// acceleration at `t`.
    pub fn profile_at(&self, t: f64) -> Result<(f64, f64, f64), ProfileError> {
        if !(0.0..=self.duration).contains(&t) {
            return Err(ProfileError::OutOfRange { t, duration: self.duration });
        }
        let x = t / self.params.dt;
        let k = (x.floor() as usize).min(self.len() - 1);
        if k + 1 >= self.len() {
            return Ok((self.position[k], self.velocity[k], self.acceleration[k]));
        }
        let w = x - k as f64;
        let lerp = |v: &[f64]| v[k] + w * (v[k + 1] - v[k]);
        Ok((lerp(&self.position), lerp(&self.velocity), lerp(&self.acceleration)))
    }

    /// Writes the sampled profile as CSV with columns `t,r,v,a,j,s`.
    pub fn write_csv<W: Write>(&self, out: W, header_line: Option<&str>) -> csv::Result<()> {
        let mut out = out;
        if let Some(h) = header_line {
            writeln!(out, "# {h}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t_s", "r_m", "v_m_per_s", "a_m_per_s2", "j_m_per_s3", "s_m_per_s4"])?;
        for k in 0..self.len() {
            w.write_record(
                [
                    self.time[k],
                    self.position[k],
                    self.velocity[k],
                    self.acceleration[k],
                    self.jerk[k],
                    self.snap[k],
                ]
                .map(|v| v.to_string()),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}
