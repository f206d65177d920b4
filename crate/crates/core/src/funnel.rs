//! Funnels: per-knot ellipsoids `{x | (x − x*_k)ᵀ S_k (x − x*_k) < ρ_k}`.

use std::fmt::Write as _;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{quad_form, symmetrize};
use crate::tvlqr::TvlqrPolicy;

pub const FUNNEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Funnel {
    pub knot_times: Vec<f64>,
    pub s: Vec<DMatrix<f64>>,
    /// Thresholds in `(0, ∞]`.
    pub rho: Vec<f64>,
    /// Nominal state at each knot.
    pub centers: Vec<DVector<f64>>,
    pub trajectory_id: String,
}

/// 2-D slice of a funnel ellipsoid: `{p | (p − c)ᵀ P (p − c) < ρ}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center: Vector2<f64>,
    pub shape: Matrix2<f64>,
    pub rho: f64,
}

impl Ellipse {
    pub fn contains(&self, p: Vector2<f64>) -> bool {
        let d = p - self.center;
        d.dot(&(self.shape * d)) < self.rho
    }

    /// Semi-axis lengths and the unit direction of each, largest first.
    pub fn axes(&self) -> [(f64, Vector2<f64>); 2] {
        let eig = self.shape.symmetric_eigen();
        let mut out = [0, 1].map(|i| {
            let lam = eig.eigenvalues[i];
            let len = if lam > 0.0 { (self.rho / lam).sqrt() } else { f64::INFINITY };
            (len, eig.eigenvectors.column(i).into_owned())
        });
        if out[0].0 < out[1].0 {
            out.swap(0, 1);
        }
        out
    }

    /// `n` points on the boundary.
    pub fn boundary(&self, n: usize) -> Vec<Vector2<f64>> {
        let [(a, ea), (b, eb)] = self.axes();
        (0..n)
            .map(|i| {
                let th = std::f64::consts::TAU * i as f64 / n as f64;
                self.center + ea * (a * th.cos()) + eb * (b * th.sin())
            })
            .collect()
    }
}

/// Outcome of [`composable`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Composability {
    /// The upstream outlet lies inside the downstream inlet. `margin ≥ 0` is
    /// the relative slack in the scaled-radius bound.
    Contained { margin: f64 },
    /// Concentric ellipsoids and the exact test fails.
    NotContained { margin: f64 },
    /// Offset centres and the sufficient test fails; containment is not ruled out.
    Inconclusive { margin: f64 },
    /// One of the thresholds is infinite.
    Indeterminate,
}

impl Composability {
    pub fn is_contained(&self) -> bool {
        matches!(self, Composability::Contained { .. })
    }
}

impl Funnel {
    pub fn new(
        knot_times: Vec<f64>,
        s: Vec<DMatrix<f64>>,
        rho: Vec<f64>,
        centers: Vec<DVector<f64>>,
        trajectory_id: String,
    ) -> Result<Self> {
        let n = knot_times.len();
        if n == 0 || s.len() != n || rho.len() != n || centers.len() != n {
            return Err(Error::Input(format!(
                "funnel arrays disagree: {n} times, {} S, {} ρ, {} centres",
                s.len(),
                rho.len(),
                centers.len()
            )));
        }
        let nx = centers[0].len();
        for (k, sk) in s.iter().enumerate() {
            if sk.shape() != (nx, nx) || centers[k].len() != nx {
                return Err(Error::Input(format!("knot {k}: shape matrix or centre has the wrong size")));
            }
            if (sk - sk.transpose()).amax() > 1e-9 * (1.0 + sk.amax()) {
                return Err(Error::Input(format!("knot {k}: shape matrix is not symmetric")));
            }
        }
        if let Some(k) = rho.iter().position(|r| !(*r > 0.0)) {
            return Err(Error::Input(format!("knot {k}: ρ must be positive or inf, got {}", rho[k])));
        }
        Ok(Self {
            knot_times,
            s,
            rho,
            centers,
            trajectory_id,
        })
    }

    /// Funnel over the policy's knots with the given thresholds.
    pub fn from_policy(policy: &TvlqrPolicy, rho: Vec<f64>, trajectory_id: impl Into<String>) -> Result<Self> {
        Self::new(
            policy.trajectory.times(),
            policy.s.clone(),
            rho,
            policy.trajectory.states.clone(),
            trajectory_id.into(),
        )
    }

    pub fn knots(&self) -> usize {
        self.rho.len()
    }

    pub fn state_dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn inlet_rho(&self) -> f64 {
        self.rho[0]
    }

    pub fn outlet_rho(&self) -> f64 {
        self.rho[self.knots() - 1]
    }

    fn check_knot(&self, k: usize) -> Result<()> {
        if k >= self.knots() {
            return Err(Error::Input(format!("knot {k} out of range (funnel has {})", self.knots())));
        }
        Ok(())
    }

    /// `x̄ᵀ S_k x̄` at knot `k`.
    pub fn level(&self, k: usize, x: &DVector<f64>) -> Result<f64> {
        self.check_knot(k)?;
        if x.len() != self.state_dim() {
            return Err(Error::Dimension {
                context: "funnel query",
                expected: self.state_dim(),
                actual: x.len(),
            });
        }
        Ok(quad_form(&self.s[k], &(x - &self.centers[k])))
    }

    pub fn contains(&self, k: usize, x: &DVector<f64>) -> Result<bool> {
        let v = self.level(k, x)?;
        Ok(v < self.rho[k])
    }

    /// Slice through knot `k` on the state axes `(i, j)`, all other
    /// coordinates held at their nominal values.
    pub fn project(&self, k: usize, axes: (usize, usize)) -> Result<Ellipse> {
        self.check_knot(k)?;
        let (i, j) = axes;
        let nx = self.state_dim();
        if i >= nx || j >= nx || i == j {
            return Err(Error::Input(format!("invalid projection axes ({i}, {j}) for dimension {nx}")));
        }
        if self.rho[k].is_infinite() {
            return Err(Error::Input(format!(
                "knot {k} has ρ = inf (never shrunk); skip it when projecting"
            )));
        }
        let s = &self.s[k];
        Ok(Ellipse {
            center: Vector2::new(self.centers[k][i], self.centers[k][j]),
            shape: Matrix2::new(s[(i, i)], s[(i, j)], s[(j, i)], s[(j, j)]),
            rho: self.rho[k],
        })
    }

    pub fn write_json<W: Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer_pretty(writer, &FunnelFile::from(self))?;
        Ok(())
    }

    pub fn read_json<R: Read>(reader: R) -> Result<Self> {
        let file: FunnelFile = serde_json::from_reader(reader)?;
        file.into_funnel()
    }
}

/// Relative slack on containment tests.
const CONTAINMENT_RTOL: f64 = 1e-10;

/// Largest generalized eigenvalue of `S_b v = λ S_a v` (`S_a` positive definite).
fn max_generalized_eigenvalue(s_a: &DMatrix<f64>, s_b: &DMatrix<f64>) -> Result<f64> {
    let chol = s_a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Input("upstream outlet shape must be positive definite".into()))?;
    let l_inv = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(s_a.nrows(), s_a.nrows()))
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let mut m = &l_inv * s_b * l_inv.transpose();
    symmetrize(&mut m);
    Ok(m.symmetric_eigen().eigenvalues.max())
}

/// Whether `upstream`'s outlet ellipsoid lies inside `downstream`'s inlet.
///
/// Concentric ellipsoids use the exact test `λ_max(S_a⁻¹S_b) ≤ ρ_b/ρ_a`.
/// With offset centres the test is the sufficient bound
/// `√(ρ_a λ_max) + ‖d‖_{S_b} ≤ √ρ_b`, which follows from the triangle
/// inequality in the `S_b` norm.
pub fn composable(upstream: &Funnel, downstream: &Funnel) -> Result<Composability> {
    if upstream.state_dim() != downstream.state_dim() {
        return Err(Error::Dimension {
            context: "funnel composition",
            expected: upstream.state_dim(),
            actual: downstream.state_dim(),
        });
    }
    let a = upstream.knots() - 1;
    let (s_a, rho_a, c_a) = (&upstream.s[a], upstream.rho[a], &upstream.centers[a]);
    let (s_b, rho_b, c_b) = (&downstream.s[0], downstream.rho[0], &downstream.centers[0]);
    if rho_a.is_infinite() || rho_b.is_infinite() {
        return Ok(Composability::Indeterminate);
    }
    let lam = max_generalized_eigenvalue(s_a, s_b)?;
    let d = c_a - c_b;
    let scale = c_a.amax().max(c_b.amax()).max(1.0);
    if d.amax() <= 1e-12 * scale {
        let margin = 1.0 - (rho_a * lam / rho_b).sqrt();
        // identical ellipsoids give λ = 1 up to rounding
        return Ok(if lam * rho_a <= rho_b * (1.0 + CONTAINMENT_RTOL) {
            Composability::Contained { margin }
        } else {
            Composability::NotContained { margin }
        });
    }
    let bound = (rho_a * lam).sqrt() + quad_form(s_b, &d).max(0.0).sqrt();
    let margin = 1.0 - bound / rho_b.sqrt();
    Ok(if margin >= -CONTAINMENT_RTOL {
        Composability::Contained { margin }
    } else {
        Composability::Inconclusive { margin }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Rho(f64);

impl Serialize for Rho {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            ser.serialize_str("inf")
        } else {
            ser.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Rho {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(de)? {
            Raw::Num(v) => Ok(Rho(v)),
            Raw::Str(s) if s == "inf" => Ok(Rho(f64::INFINITY)),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("expected a number or \"inf\", got {s:?}"))),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct FunnelFile {
    version: u32,
    knot_times: Vec<f64>,
    rho: Vec<Rho>,
    /// Row-major `S_k`, one array per knot.
    #[serde(rename = "S")]
    s: Vec<Vec<f64>>,
    centers: Vec<Vec<f64>>,
    trajectory_id: String,
}

impl From<&Funnel> for FunnelFile {
    fn from(f: &Funnel) -> Self {
        Self {
            version: FUNNEL_VERSION,
            knot_times: f.knot_times.clone(),
            rho: f.rho.iter().map(|r| Rho(*r)).collect(),
            s: f.s.iter().map(|m| m.transpose().as_slice().to_vec()).collect(),
            centers: f.centers.iter().map(|c| c.as_slice().to_vec()).collect(),
            trajectory_id: f.trajectory_id.clone(),
        }
    }
}

impl FunnelFile {
    fn into_funnel(self) -> Result<Funnel> {
        if self.version != FUNNEL_VERSION {
            return Err(Error::Input(format!("unsupported funnel version {}", self.version)));
        }
        let nx = self.centers.first().map_or(0, Vec::len);
        let s = self
            .s
            .iter()
            .enumerate()
            .map(|(k, d)| {
                if d.len() != nx * nx {
                    return Err(Error::Input(format!("S[{k}] must have {} entries", nx * nx)));
                }
                Ok(DMatrix::from_row_slice(nx, nx, d))
            })
            .collect::<Result<Vec<_>>>()?;
        Funnel::new(
            self.knot_times,
            s,
            self.rho.into_iter().map(|r| r.0).collect(),
            self.centers.into_iter().map(DVector::from_vec).collect(),
            self.trajectory_id,
        )
    }
}

/// Minimal SVG canvas in data coordinates.
#[derive(Debug, Clone, Default)]
pub struct SvgPlot {
    title: String,
    items: Vec<(Vec<[f64; 2]>, bool, String, bool)>,
    markers: Vec<([f64; 2], String)>,
}

impl SvgPlot {
    pub fn new(title: impl Into<String>) -> Self {
        Self {
            title: title.into(),
            ..Default::default()
        }
    }

    /// Polyline; `closed` joins the ends, `dashed` draws it dashed.
    pub fn line(&mut self, points: Vec<[f64; 2]>, color: &str, closed: bool, dashed: bool) {
        self.items.push((points, closed, color.to_string(), dashed));
    }

    pub fn ellipse(&mut self, e: &Ellipse, color: &str, dashed: bool) {
        let pts = e.boundary(96).into_iter().map(|p| [p.x, p.y]).collect();
        self.line(pts, color, true, dashed);
    }

    pub fn marker(&mut self, p: [f64; 2], color: &str) {
        self.markers.push((p, color.to_string()));
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty() && self.markers.is_empty()
    }

    pub fn render(&self) -> String {
        let (w, h, pad) = (640.0, 480.0, 40.0);
        let all = self
            .items
            .iter()
            .flat_map(|(p, ..)| p.iter().copied())
            .chain(self.markers.iter().map(|m| m.0))
            .filter(|p| p[0].is_finite() && p[1].is_finite());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in all {
            x0 = x0.min(p[0]);
            x1 = x1.max(p[0]);
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
        if x0 > x1 {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        let sx = (w - 2.0 * pad) / (x1 - x0).max(1e-12);
        let sy = (h - 2.0 * pad) / (y1 - y0).max(1e-12);
        let map = |p: [f64; 2]| (pad + (p[0] - x0) * sx, h - pad - (p[1] - y0) * sy);
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{pad}" y="20" font-family="sans-serif" font-size="14">{}</text>"#,
            escape(&self.title)
        );
        let _ = writeln!(
            out,
            r#"<text x="{pad}" y="{}" font-family="sans-serif" font-size="10">x: [{x0:.4}, {x1:.4}]  y: [{y0:.4}, {y1:.4}]</text>"#,
            h - 10.0
        );
        for (pts, closed, color, dashed) in &self.items {
            let coords: Vec<String> = pts
                .iter()
                .filter(|p| p[0].is_finite() && p[1].is_finite())
                .map(|p| {
                    let (x, y) = map(*p);
                    format!("{x:.2},{y:.2}")
                })
                .collect();
            let tag = if *closed { "polygon" } else { "polyline" };
            let dash = if *dashed { r#" stroke-dasharray="6,4""# } else { "" };
            let _ = writeln!(
                out,
                r#"<{tag} points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
                coords.join(" ")
            );
        }
        for (p, color) in &self.markers {
            let (x, y) = map(*p);
            let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
        }
        out.push_str("</svg>\n");
        out
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Slice plot of a funnel on `axes`: inlet solid, outlet dashed, shrunk
/// intermediate knots in grey, nominal path in black. Knots with `ρ = inf`
/// are skipped; `None` when nothing is drawable.
pub fn slice_plot(funnel: &Funnel, axes: (usize, usize)) -> Result<Option<SvgPlot>> {
    let nx = funnel.state_dim();
    if axes.0 >= nx || axes.1 >= nx || axes.0 == axes.1 {
        return Err(Error::Input(format!("invalid axes {axes:?} for dimension {nx}")));
    }
    let mut plot = SvgPlot::new(format!(
        "funnel {} slice on axes ({}, {})",
        funnel.trajectory_id, axes.0, axes.1
    ));
    let last = funnel.knots() - 1;
    for k in 1..last {
        if funnel.rho[k].is_finite() {
            plot.ellipse(&funnel.project(k, axes)?, "#b0b0b0", false);
        }
    }
    if funnel.rho[0].is_finite() {
        plot.ellipse(&funnel.project(0, axes)?, "#1f77b4", false);
    }
    if funnel.rho[last].is_finite() {
        plot.ellipse(&funnel.project(last, axes)?, "#d62728", true);
    }
    if plot.is_empty() {
        return Ok(None);
    }
    let path = funnel.centers.iter().map(|c| [c[axes.0], c[axes.1]]).collect();
    plot.line(path, "black", false, false);
    Ok(Some(plot))
}

/// `log10 ρ` against knot index for several traces; infinite entries are
/// left out.
pub fn rho_plot(series: &[(&str, &[f64])]) -> SvgPlot {
    const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
    let names: Vec<&str> = series.iter().map(|s| s.0).collect();
    let mut plot = SvgPlot::new(format!("log10 rho vs knot: {}", names.join(", ")));
    for (i, (_, rho)) in series.iter().enumerate() {
        let pts: Vec<[f64; 2]> = rho
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_finite() && **r > 0.0)
            .map(|(k, r)| [k as f64, r.log10()])
            .collect();
        if !pts.is_empty() {
            plot.line(pts, COLORS[i % COLORS.len()], false, false);
        }
    }
    plot
}
