//! Uniformly sampled state/control trajectories and their CSV format.
//!
//! CSV layout: a header `t,q0,…,q{n-1},qd0,…,qd{n-1},u0,…,u{m-1}` and one
//! row per knot. Controls are defined on knots `0…N−1`; the final row leaves
//! the control columns empty.

use std::io::{Read, Write};

use nalgebra::DVector;

use crate::dynamics::Plant;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// Knot spacing (s).
    pub dt: f64,
    /// `N+1` states `[q, q̇]`.
    pub states: Vec<DVector<f64>>,
    /// `N` controls; `controls[k]` is held over `[t_k, t_{k+1})`.
    pub controls: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(dt: f64, states: Vec<DVector<f64>>, controls: Vec<DVector<f64>>) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Input(format!("knot spacing must be positive, got {dt}")));
        }
        if states.len() < 2 {
            return Err(Error::Input("trajectory needs at least two knots".into()));
        }
        if controls.len() + 1 != states.len() {
            return Err(Error::Input(format!(
                "expected {} controls for {} knots, got {}",
                states.len() - 1,
                states.len(),
                controls.len()
            )));
        }
        let nx = states[0].len();
        let nu = controls[0].len();
        if nx == 0 || !nx.is_multiple_of(2) {
            return Err(Error::Input(format!("state dimension {nx} must be even and positive")));
        }
        if states.iter().any(|x| x.len() != nx) || controls.iter().any(|u| u.len() != nu) {
            return Err(Error::Input("ragged trajectory knots".into()));
        }
        Ok(Self {
            dt,
            states,
            controls,
        })
    }

    /// Number of knots (`N+1`).
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Number of intervals (`N`).
    pub fn intervals(&self) -> usize {
        self.states.len() - 1
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn input_dim(&self) -> usize {
        self.controls[0].len()
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.intervals() as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.dt * k as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.time(k)).collect()
    }

    /// Control at knot `k`; zero at the final knot.
    pub fn control(&self, k: usize) -> DVector<f64> {
        self.controls
            .get(k)
            .cloned()
            .unwrap_or_else(|| DVector::zeros(self.input_dim()))
    }

    /// Largest forward-Euler defect `‖x_{k+1} − x_k − Δt·f(x_k, u_k)‖_∞`.
    pub fn max_euler_defect<P: Plant + ?Sized>(&self, plant: &P) -> f64 {
        (0..self.intervals())
            .map(|k| {
                let f = plant.state_derivative(&self.states[k], &self.controls[k]);
                (&self.states[k + 1] - &self.states[k] - f * self.dt).amax()
            })
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let n = self.state_dim() / 2;
        let m = self.input_dim();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("q{i}")));
        header.extend((0..n).map(|i| format!("qd{i}")));
        header.extend((0..m).map(|i| format!("u{i}")));
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![format!("{:?}", self.time(k))];
            row.extend(self.states[k].iter().map(|v| format!("{v:?}")));
            match self.controls.get(k) {
                Some(u) => row.extend(u.iter().map(|v| format!("{v:?}"))),
                None => row.extend(std::iter::repeat_n(String::new(), m)),
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let count = |prefix: &str| {
            header
                .iter()
                .filter(|h| {
                    h.strip_prefix(prefix)
                        .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|c| c.is_ascii_digit()))
                })
                .count()
        };
        let n = count("q");
        let nd = count("qd");
        let m = count("u");
        if header.get(0) != Some("t") || n == 0 || n != nd || m == 0 || header.len() != 1 + 2 * n + m {
            return Err(Error::Input(format!("unrecognised trajectory header: {header:?}")));
        }
        let mut times = Vec::new();
        let mut states = Vec::new();
        let mut controls = Vec::new();
        let mut saw_blank = false;
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = line + 2;
            if saw_blank {
                return Err(Error::Input(format!("row {row}: data after the final (control-less) row")));
            }
            let parse = |s: &str, col: usize| -> Result<f64> {
                s.trim().parse::<f64>().map_err(|_| {
                    Error::Input(format!("row {row}, column {}: cannot parse {s:?}", col + 1))
                })
            };
            times.push(parse(&rec[0], 0)?);
            let x: Vec<f64> = (1..=2 * n).map(|c| parse(&rec[c], c)).collect::<Result<_>>()?;
            states.push(DVector::from_vec(x));
            let ucols: Vec<&str> = (1 + 2 * n..1 + 2 * n + m).map(|c| &rec[c]).collect();
            if ucols.iter().all(|s| s.trim().is_empty()) {
                saw_blank = true;
            } else {
                let u: Vec<f64> = ucols
                    .iter()
                    .enumerate()
                    .map(|(i, s)| parse(s, 1 + 2 * n + i))
                    .collect::<Result<_>>()?;
                controls.push(DVector::from_vec(u));
            }
        }
        if !saw_blank {
            return Err(Error::Input("final row must leave the control columns empty".into()));
        }
        if times.len() < 2 {
            return Err(Error::Input("trajectory needs at least two knots".into()));
        }
        let dt = times[1] - times[0];
        for (k, t) in times.iter().enumerate() {
            if (t - dt * k as f64).abs() > 1e-9 * (1.0 + t.abs()) {
                return Err(Error::Input(format!("row {}: knots are not uniformly spaced", k + 2)));
            }
        }
        Self::new(dt, states, controls)
    }
}
