//! Backstepping gain kernels on the triangle `0 ≤ ξ ≤ x ≤ L`.
//!
//! ```text
//! λ2 Kʷ_x − λ1 Kʷ_ξ = c Kᵛ
//! λ2 Kᵛ_x + λ2 Kᵛ_ξ = 0
//! Kʷ(x,x) = −c(x)/(λ1+λ2)
//! Kᵛ(x,0) = −Kʷ(x,0)
//! ```
//!
//! `Kᵛ` is constant along `x − ξ = const`, so `Kᵛ(x,ξ) = −g(x − ξ)` with
//! `g(s) = Kʷ(s,0)`. Every `Kʷ` characteristic runs from the diagonal with
//! slope `dξ/dx = −λ1/λ2`, and parametrised by `s = x − ξ` along it, the
//! source term only needs `g` at grid nodes `s = x_k`. Marching in `x`
//! first solves the Volterra equation for `g` on the `ξ = 0` edge, then
//! fills the interior, both with trapezoidal quadrature.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fd::Equilibrium;

/// Where the in-domain coupling coefficient is evaluated in the `Kʷ`
/// equation: `c(ξ) Kᵛ(x,ξ)` (what the change of variables produces) or
/// `c(x) Kᵛ(x,ξ)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingArgument {
    #[default]
    Xi,
    X,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriangularGrid {
    /// Nodes per edge.
    pub n: usize,
    pub length: f64,
}

impl TriangularGrid {
    pub fn new(n: usize, length: f64) -> Result<Self> {
        if n < 3 {
            return Err(Error::invalid(format!("triangular grid needs n >= 3, got {n}")));
        }
        if !(length > 0.0) {
            return Err(Error::invalid(format!("kernel domain length must be positive, got {length}")));
        }
        Ok(Self { n, length })
    }

    pub fn h(&self) -> f64 {
        self.length / (self.n - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.length
        } else {
            i as f64 * self.h()
        }
    }

    pub fn node_count(&self) -> usize {
        self.n * (self.n + 1) / 2
    }

    /// Packed index of node `(x_i, ξ_j)`, `j ≤ i`.
    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i < self.n);
        i * (i + 1) / 2 + j
    }

    /// All nodes `(x, ξ)` in packed order.
    pub fn nodes(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.node_count());
        for i in 0..self.n {
            for j in 0..=i {
                out.push((self.coord(i), self.coord(j)));
            }
        }
        out
    }
}

/// Coefficients entering the kernel equations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub length: f64,
    #[serde(default)]
    pub coupling: CouplingArgument,
}

impl KernelParams {
    pub fn new(eq: &Equilibrium, tau: f64, length: f64) -> Self {
        Self { lambda1: eq.lambda1, lambda2: eq.lambda2, tau, length, coupling: CouplingArgument::default() }
    }

    pub fn with_coupling(mut self, coupling: CouplingArgument) -> Self {
        self.coupling = coupling;
        self
    }

    /// `c(x) = −exp(−x/(τ v⋆))/τ` with `v⋆ = λ1`.
    #[inline]
    pub fn c(&self, x: f64) -> f64 {
        -(-x / (self.tau * self.lambda1)).exp() / self.tau
    }

    /// Diagonal value `−c(x)/(λ1+λ2)`.
    pub fn diagonal(&self, x: f64) -> f64 {
        -self.c(x) / (self.lambda1 + self.lambda2)
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0 && self.lambda2 > 0.0 && self.tau > 0.0) {
            return Err(Error::invalid(format!(
                "kernel equations need lambda1, lambda2, tau > 0 (got {}, {}, {})",
                self.lambda1, self.lambda2, self.tau
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelField {
    pub grid: TriangularGrid,
    pub params: KernelParams,
    /// `Kʷ` at packed nodes [1/m].
    pub kw: Vec<f64>,
    /// `Kᵛ` at packed nodes [1/m].
    pub kv: Vec<f64>,
}

/// Kernel traces on the actuated edge `x = L`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeKernels {
    pub xi: Vec<f64>,
    pub kw: Vec<f64>,
    pub kv: Vec<f64>,
}

impl EdgeKernels {
    /// Linear interpolation of both traces at `xi`.
    pub fn at(&self, xi: f64) -> (f64, f64) {
        let n = self.xi.len();
        let h = self.xi[n - 1] / (n - 1) as f64;
        let s = (xi / h).clamp(0.0, (n - 1) as f64);
        let k = (s.floor() as usize).min(n - 2);
        let w = s - k as f64;
        (
            self.kw[k] * (1.0 - w) + self.kw[k + 1] * w,
            self.kv[k] * (1.0 - w) + self.kv[k + 1] * w,
        )
    }
}

impl KernelField {
    pub fn kw_at(&self, i: usize, j: usize) -> f64 {
        self.kw[self.grid.idx(i, j)]
    }

    pub fn kv_at(&self, i: usize, j: usize) -> f64 {
        self.kv[self.grid.idx(i, j)]
    }

    pub fn edge(&self) -> EdgeKernels {
        let i = self.grid.n - 1;
        EdgeKernels {
            xi: (0..=i).map(|j| self.grid.coord(j)).collect(),
            kw: (0..=i).map(|j| self.kw_at(i, j)).collect(),
            kv: (0..=i).map(|j| self.kv_at(i, j)).collect(),
        }
    }

    /// Bilinear interpolation on the triangle, for probes off the nodes.
    pub fn probe(&self, x: f64, xi: f64) -> (f64, f64) {
        let h = self.grid.h();
        let n = self.grid.n;
        let sx = (x / h).clamp(0.0, (n - 1) as f64);
        let i = (sx.floor() as usize).min(n - 2);
        let wx = sx - i as f64;
        let row = |i: usize, xi: f64| {
            let sj = (xi / h).clamp(0.0, i as f64);
            if i == 0 {
                return (self.kw_at(0, 0), self.kv_at(0, 0));
            }
            let j = (sj.floor() as usize).min(i - 1);
            let w = sj - j as f64;
            (
                self.kw_at(i, j) * (1.0 - w) + self.kw_at(i, j + 1) * w,
                self.kv_at(i, j) * (1.0 - w) + self.kv_at(i, j + 1) * w,
            )
        };
        let (a, b) = (row(i, xi), row(i + 1, xi));
        (a.0 * (1.0 - wx) + b.0 * wx, a.1 * (1.0 - wx) + b.1 * wx)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv_to(&mut out)?;
        out.flush()?;
        Ok(())
    }

    /// `x,xi,kw,kv` in SI units, one row per node.
    pub fn write_csv_to<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "x,xi,kw,kv")?;
        for ((x, xi), (kw, kv)) in self.grid.nodes().into_iter().zip(self.kw.iter().zip(&self.kv)) {
            writeln!(out, "{x},{xi},{kw},{kv}")?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path, params: KernelParams) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let parse_err = |line: usize, reason: String| Error::Parse { path: path.to_path_buf(), line, reason };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "x,xi,kw,kv" => {}
            _ => return Err(parse_err(1, "expected header `x,xi,kw,kv`".into())),
        }
        let (mut kw, mut kv) = (Vec::new(), Vec::new());
        for (ln, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| parse_err(ln + 1, e.to_string()))?;
            if vals.len() != 4 {
                return Err(parse_err(ln + 1, format!("expected 4 columns, found {}", vals.len())));
            }
            kw.push(vals[2]);
            kv.push(vals[3]);
        }
        // node count n(n+1)/2 determines n
        let n = (((8 * kw.len() + 1) as f64).sqrt() as usize - 1) / 2;
        if n * (n + 1) / 2 != kw.len() {
            return Err(parse_err(0, format!("{} rows is not a triangular node count", kw.len())));
        }
        let grid = TriangularGrid::new(n, params.length)?;
        Ok(Self { grid, params, kw, kv })
    }
}

/// Solves the kernel equations by characteristics on `grid`.
pub fn solve_kernels(eq: &Equilibrium, tau: f64, grid: &TriangularGrid) -> Result<KernelField> {
    solve_with(&KernelParams::new(eq, tau, grid.length), grid)
}

pub fn solve_with(params: &KernelParams, grid: &TriangularGrid) -> Result<KernelField> {
    params.validate()?;
    if (params.length - grid.length).abs() > 1e-9 * grid.length {
        return Err(Error::GridMismatch(format!(
            "kernel parameters for L = {} on a grid of length {}",
            params.length, grid.length
        )));
    }
    let n = grid.n;
    let h = grid.h();
    let (l1, l2) = (params.lambda1, params.lambda2);
    let sum = l1 + l2;
    let xs: Vec<f64> = (0..n).map(|i| grid.coord(i)).collect();

    // Coupling coefficient at the point reached after advancing s = x − ξ
    // along the characteristic that leaves the diagonal at (x0, x0).
    let coupling_at = |x0: f64, s: f64| match params.coupling {
        CouplingArgument::Xi => params.c(x0 - s * l1 / sum),
        CouplingArgument::X => params.c(x0 + s * l2 / sum),
    };
    // ∫_0^{x_m} c(P(s)) g(s) ds by the trapezoidal rule, excluding the
    // endpoint term at s = x_m (weight h/2) which the caller supplies.
    let partial = |g: &[f64], x0: f64, m: usize| -> f64 {
        if m == 0 {
            return 0.0;
        }
        let mut acc = 0.5 * coupling_at(x0, 0.0) * g[0];
        for k in 1..m {
            acc += coupling_at(x0, xs[k]) * g[k];
        }
        acc * h
    };

    // edge ξ = 0: g(x_i) = −c(x0)/S − (1/S) ∫_0^{x_i} c(P(s)) g(s) ds
    let mut g = vec![0.0; n];
    for i in 0..n {
        let x0 = xs[i] * l1 / sum;
        let rhs = params.diagonal(x0) - partial(&g, x0, i) / sum;
        g[i] = if i == 0 {
            rhs
        } else {
            rhs / (1.0 + 0.5 * h * coupling_at(x0, xs[i]) / sum)
        };
    }

    let mut kw = vec![0.0; grid.node_count()];
    let mut kv = vec![0.0; grid.node_count()];
    for i in 0..n {
        for j in 0..=i {
            let m = i - j;
            let idx = grid.idx(i, j);
            kv[idx] = -g[m];
            if j == 0 {
                kw[idx] = g[i];
                continue;
            }
            let x0 = (l1 * xs[i] + l2 * xs[j]) / sum;
            let end = if m == 0 { 0.0 } else { 0.5 * h * coupling_at(x0, xs[m]) * g[m] };
            kw[idx] = params.diagonal(x0) - (partial(&g, x0, m) + end) / sum;
        }
    }
    // diagonal nodes hit x0 = x_i exactly; pin them to the boundary data
    for i in 0..n {
        kw[grid.idx(i, i)] = params.diagonal(xs[i]);
    }
    kv[0] = -kw[0];
    Ok(KernelField { grid: *grid, params: *params, kw, kv })
}

/// Sign used for the `ξ` derivative in the `Kᵛ` transport residual.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportSign {
    /// `λ2 Kᵛ_x + λ2 Kᵛ_ξ`, constant along `x − ξ = const`.
    #[default]
    Plus,
    /// `λ2 Kᵛ_x − λ2 Kᵛ_ξ`.
    Minus,
}

impl TransportSign {
    pub fn factor(self) -> f64 {
        match self {
            TransportSign::Plus => 1.0,
            TransportSign::Minus => -1.0,
        }
    }
}

/// Kernel-equation residuals. `kappa1`/`kappa2` live on interior nodes
/// (packed order of [`TriangularGrid::nodes`], zero elsewhere);
/// `kappa3` is indexed by diagonal node, `kappa4` by edge node.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelResiduals {
    pub kappa1: Vec<f64>,
    pub kappa2: Vec<f64>,
    pub kappa3: Vec<f64>,
    pub kappa4: Vec<f64>,
    pub interior: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualSummary {
    pub max: f64,
    pub mean: f64,
}

fn summarize<'a>(values: impl Iterator<Item = &'a f64>) -> ResidualSummary {
    let (mut max, mut sum, mut count) = (0.0f64, 0.0, 0usize);
    for v in values {
        max = max.max(v.abs());
        sum += v.abs();
        count += 1;
    }
    ResidualSummary { max, mean: if count == 0 { 0.0 } else { sum / count as f64 } }
}

impl KernelResiduals {
    /// Max/mean of `|κ1|` and `|κ2|` over interior nodes.
    pub fn interior_summary(&self) -> (ResidualSummary, ResidualSummary) {
        let pick = |k: &'_ [f64]| -> Vec<f64> {
            k.iter().zip(&self.interior).filter(|(_, &i)| i).map(|(v, _)| *v).collect()
        };
        (summarize(pick(&self.kappa1).iter()), summarize(pick(&self.kappa2).iter()))
    }

    pub fn max_interior(&self) -> f64 {
        let (a, b) = self.interior_summary();
        a.max.max(b.max)
    }

    pub fn boundary_summary(&self) -> (ResidualSummary, ResidualSummary) {
        (summarize(self.kappa3.iter()), summarize(self.kappa4.iter()))
    }
}

/// Evaluates the four residuals; interior derivatives by central
/// differences.
pub fn kernel_residuals(kf: &KernelField) -> KernelResiduals {
    kernel_residuals_with(kf, TransportSign::Plus)
}

pub fn kernel_residuals_with(kf: &KernelField, sign: TransportSign) -> KernelResiduals {
    let g = &kf.grid;
    let p = &kf.params;
    let n = g.n;
    let h = g.h();
    let mut kappa1 = vec![0.0; g.node_count()];
    let mut kappa2 = vec![0.0; g.node_count()];
    let mut interior = vec![false; g.node_count()];
    for i in 1..n.saturating_sub(1) {
        for j in 1..i {
            let idx = g.idx(i, j);
            let (x, xi) = (g.coord(i), g.coord(j));
            let kw_x = (kf.kw_at(i + 1, j) - kf.kw_at(i - 1, j)) / (2.0 * h);
            let kw_xi = (kf.kw_at(i, j + 1) - kf.kw_at(i, j - 1)) / (2.0 * h);
            let kv_x = (kf.kv_at(i + 1, j) - kf.kv_at(i - 1, j)) / (2.0 * h);
            let kv_xi = (kf.kv_at(i, j + 1) - kf.kv_at(i, j - 1)) / (2.0 * h);
            let c = match p.coupling {
                CouplingArgument::Xi => p.c(xi),
                CouplingArgument::X => p.c(x),
            };
            kappa1[idx] = p.lambda2 * kw_x - p.lambda1 * kw_xi - c * kf.kv[idx];
            kappa2[idx] = p.lambda2 * kv_x + sign.factor() * p.lambda2 * kv_xi;
            interior[idx] = true;
        }
    }
    let kappa3 = (0..n).map(|i| kf.kw_at(i, i) - p.diagonal(g.coord(i))).collect();
    let kappa4 = (0..n).map(|i| kf.kv_at(i, 0) + kf.kw_at(i, 0)).collect();
    KernelResiduals { kappa1, kappa2, kappa3, kappa4, interior }
}

/// Eq-(7)-style gains: weights on `q − q⋆` and `v − v⋆` sampled at the
/// simulation cell centers, plus the boundary coefficients on the outlet
/// trace.
#[derive(Debug, Clone, PartialEq)]
pub struct OriginalGains {
    pub xi: Vec<f64>,
    pub g_q: Vec<f64>,
    pub g_v: Vec<f64>,
    /// Coefficient of `ρ(L)v(L) − q⋆`, always −1.
    pub boundary_q: f64,
    /// Coefficient of `v(L) − v⋆`, `ρ⋆ + v⋆/V'(ρ⋆)`.
    pub boundary_v: f64,
    pub dx: f64,
}

pub fn control_gains_original(edge: &EdgeKernels, eq: &Equilibrium, tau: f64, centers: &[f64], dx: f64) -> OriginalGains {
    let sw = eq.speed_weight();
    let a = eq.v_star / eq.v_prime;
    let (g_q, g_v) = centers
        .iter()
        .map(|&xi| {
            let (kw, kv) = edge.at(xi);
            let e = (xi / (tau * eq.v_star)).exp();
            (e * kw, -(a * kv + sw * e * kw))
        })
        .unzip();
    OriginalGains { xi: centers.to_vec(), g_q, g_v, boundary_q: -1.0, boundary_v: sw, dx }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::{FundamentalDiagram, GreenshieldsFD};
    use crate::units::*;

    fn reference_eq() -> Equilibrium {
        let fd: FundamentalDiagram = GreenshieldsFD::new(kmh_to_ms(144.0), per_km_to_per_m(160.0), 1.0).unwrap().into();
        fd.equilibrium(per_km_to_per_m(120.0)).unwrap()
    }

    #[test]
    fn corner_value() {
        let eq = reference_eq();
        let kf = solve_kernels(&eq, 60.0, &TriangularGrid::new(101, 500.0).unwrap()).unwrap();
        let expected = (1.0 / 60.0) / 30.0;
        assert!((kf.kw_at(0, 0) - expected).abs() < 1e-15);
        assert!((expected - 5.556e-4).abs() < 1e-7);
    }

    #[test]
    fn boundary_conditions_exact_at_nodes() {
        let eq = reference_eq();
        for coupling in [CouplingArgument::Xi, CouplingArgument::X] {
            let params = KernelParams::new(&eq, 60.0, 500.0).with_coupling(coupling);
            let kf = solve_with(&params, &TriangularGrid::new(41, 500.0).unwrap()).unwrap();
            let r = kernel_residuals(&kf);
            let (k3, k4) = r.boundary_summary();
            assert_eq!(k3.max, 0.0);
            assert_eq!(k4.max, 0.0);
        }
    }

    #[test]
    fn kv_constant_along_diagonals() {
        let eq = reference_eq();
        let kf = solve_kernels(&eq, 60.0, &TriangularGrid::new(51, 500.0).unwrap()).unwrap();
        for i in 0..50 {
            for j in 0..=i {
                let d = kf.kv_at(i, j) - kf.kv_at(i + 1, j + 1);
                assert!(d.abs() <= 1e-12 * kf.kv_at(i, j).abs().max(1e-12));
            }
        }
    }

    #[test]
    fn zero_field_fails_diagonal_condition() {
        let eq = reference_eq();
        let grid = TriangularGrid::new(11, 500.0).unwrap();
        let params = KernelParams::new(&eq, 60.0, 500.0);
        let kf = KernelField { grid, params, kw: vec![0.0; grid.node_count()], kv: vec![0.0; grid.node_count()] };
        let r = kernel_residuals(&kf);
        for i in 0..11 {
            let x = grid.coord(i);
            assert!((r.kappa3[i] - params.c(x) / (eq.lambda1 + eq.lambda2)).abs() < 1e-18);
            assert!(r.kappa3[i] != 0.0);
        }
    }

    #[test]
    fn residual_decreases_under_refinement() {
        let eq = reference_eq();
        let res: Vec<f64> = [26usize, 51, 101]
            .iter()
            .map(|&n| {
                let kf = solve_kernels(&eq, 60.0, &TriangularGrid::new(n, 500.0).unwrap()).unwrap();
                kernel_residuals(&kf).max_interior()
            })
            .collect();
        assert!(res[0] / res[1] >= 2.0, "{res:?}");
        assert!(res[1] / res[2] >= 2.0, "{res:?}");
    }

    #[test]
    fn original_gain_coefficients() {
        let eq = reference_eq();
        assert!((eq.kappa(500.0, 60.0) - 0.4346).abs() < 1e-4);
        assert!((eq.r() - 2.0).abs() < 1e-12);
        let kf = solve_kernels(&eq, 60.0, &TriangularGrid::new(101, 500.0).unwrap()).unwrap();
        let centers: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) * 5.0).collect();
        let gains = control_gains_original(&kf.edge(), &eq, 60.0, &centers, 5.0);
        assert_eq!(gains.boundary_q, -1.0);
        assert!((gains.boundary_v - (eq.rho_star + eq.v_star / eq.v_prime)).abs() < 1e-15);
        assert_eq!(gains.g_q.len(), 100);
    }

    #[test]
    fn csv_round_trip() {
        let eq = reference_eq();
        let kf = solve_kernels(&eq, 60.0, &TriangularGrid::new(9, 500.0).unwrap()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.csv");
        kf.write_csv(&path).unwrap();
        let back = KernelField::read_csv(&path, kf.params).unwrap();
        assert_eq!(back, kf);
    }

    #[test]
    fn rejects_free_flow_speeds() {
        let grid = TriangularGrid::new(11, 500.0).unwrap();
        let mut p = KernelParams::new(&reference_eq(), 60.0, 500.0);
        p.lambda2 = -1.0;
        assert!(solve_with(&p, &grid).is_err());
        assert!(TriangularGrid::new(2, 500.0).is_err());
    }
}
