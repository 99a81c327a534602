//! Branch/trunk operator networks, the single-instance kernel
//! surrogate, and the model file container.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fd::{Equilibrium, FundamentalDiagram};
use crate::kernel::{CouplingArgument, EdgeKernels, KernelField, KernelParams, TriangularGrid};
use crate::nn::{Dense, Parameters};

/// `G(u)(y) = Σ_k branch_k(u) · trunk_k(y)`, one `p`-slice per head.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepONet {
    pub branch: Dense,
    pub trunk: Dense,
    pub p: usize,
    pub heads: usize,
}

/// Intermediate values kept for the backward pass.
pub struct DeepONetCache {
    branch: crate::nn::DenseCache,
    trunk: crate::nn::DenseCache,
}

impl DeepONet {
    pub fn new<R: Rng>(branch_hidden: &[usize], trunk_in: usize, trunk_hidden: &[usize], p: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if p == 0 || heads == 0 {
            return Err(Error::invalid("basis dimension and head count must be positive"));
        }
        let widths = |input: usize, hidden: &[usize]| {
            let mut w = vec![input];
            w.extend_from_slice(hidden);
            w.push(p * heads);
            w
        };
        let branch = Dense::new(&widths(1, branch_hidden), rng)?;
        let trunk = Dense::new(&widths(trunk_in, trunk_hidden), rng)?;
        Ok(Self { branch, trunk, p, heads })
    }

    pub fn from_parts(branch: Dense, trunk: Dense, p: usize, heads: usize) -> Result<Self> {
        if branch.output_dim() != p * heads || trunk.output_dim() != p * heads || branch.input_dim() != 1 {
            return Err(Error::Model(format!(
                "branch {:?} / trunk {:?} incompatible with p = {p}, heads = {heads}",
                branch.widths, trunk.widths
            )));
        }
        Ok(Self { branch, trunk, p, heads })
    }

    fn combine(&self, b: &Array2<f64>, t: &Array2<f64>) -> Vec<Array2<f64>> {
        (0..self.heads)
            .map(|h| {
                let r = h * self.p..(h + 1) * self.p;
                b.slice(s![.., r.clone()]).dot(&t.slice(s![.., r]).t())
            })
            .collect()
    }

    /// Outputs per head, each `[B, N]` for `B` branch rows and `N` trunk rows.
    pub fn forward(&self, branch_in: ArrayView2<f64>, trunk_in: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let b = self.branch.forward(branch_in);
        let t = self.trunk.forward(trunk_in);
        self.combine(&b, &t)
    }

    /// Outputs for precomputed trunk features (see [`TrunkBasis`]).
    pub fn forward_with_trunk(&self, branch_in: ArrayView2<f64>, trunk_features: &Array2<f64>) -> Vec<Array2<f64>> {
        self.combine(&self.branch.forward(branch_in), trunk_features)
    }

    pub fn forward_cached(&self, branch_in: ArrayView2<f64>, trunk_in: ArrayView2<f64>) -> (Vec<Array2<f64>>, DeepONetCache) {
        let branch = self.branch.forward_cached(branch_in);
        let trunk = self.trunk.forward_cached(trunk_in);
        let out = self.combine(branch.output(), trunk.output());
        (out, DeepONetCache { branch, trunk })
    }

    /// Accumulates parameter gradients given `∂L/∂out` per head.
    pub fn backward(&self, cache: &DeepONetCache, dout: &[Array2<f64>], grads: &mut DeepONet) {
        let b = cache.branch.output();
        let t = cache.trunk.output();
        let mut db = Array2::zeros(b.raw_dim());
        let mut dt = Array2::zeros(t.raw_dim());
        for (h, d) in dout.iter().enumerate() {
            let r = h * self.p..(h + 1) * self.p;
            db.slice_mut(s![.., r.clone()]).assign(&d.dot(&t.slice(s![.., r.clone()])));
            dt.slice_mut(s![.., r.clone()]).assign(&d.t().dot(&b.slice(s![.., r])));
        }
        self.branch.backward(&cache.branch, db, &mut grads.branch);
        self.trunk.backward(&cache.trunk, dt, &mut grads.trunk);
    }

    pub fn zeros_like(&self) -> Self {
        Self { branch: self.branch.zeros_like(), trunk: self.trunk.zeros_like(), p: self.p, heads: self.heads }
    }

    /// Grows the basis to `new_p` with zero-initialised extra terms in
    /// both networks; outputs are unchanged.
    pub fn widen_basis(&mut self, new_p: usize) {
        assert!(new_p >= self.p);
        for net in [&mut self.branch, &mut self.trunk] {
            let l = net.layers.last_mut().unwrap();
            let rows = l.w.nrows();
            let mut w = Array2::zeros((rows, new_p * self.heads));
            let mut b = ndarray::Array1::zeros(new_p * self.heads);
            for h in 0..self.heads {
                let (src, dst) = (h * self.p..(h + 1) * self.p, h * new_p..h * new_p + self.p);
                w.slice_mut(s![.., dst.clone()]).assign(&l.w.slice(s![.., src.clone()]));
                b.slice_mut(s![dst]).assign(&l.b.slice(s![src]));
            }
            l.w = w;
            l.b = b;
            *net.widths.last_mut().unwrap() = new_p * self.heads;
        }
        self.p = new_p;
    }
}

impl Parameters for DeepONet {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.branch.slices();
        v.extend(self.trunk.slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.branch.slices_mut();
        v.extend(self.trunk.slices_mut());
        v
    }
}

/// Learned mapping: `λ2 → (Kʷ, Kᵛ)` or `λ2 → U(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Kernels,
    ControlLaw,
}

/// Affine input maps and output standardisation, all in SI units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// Training interval of `λ2` [m/s], mapped to [−1, 1].
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    /// `L` [m] for kernels, the horizon [s] for control laws; trunk
    /// coordinates are mapped `y ↦ 2y/scale − 1`.
    pub coord_scale: f64,
    pub out_mean: Vec<f64>,
    pub out_std: Vec<f64>,
}

/// Normalised `λ2` beyond this magnitude is treated as a caller bug
/// (e.g. km/h passed where m/s is expected) rather than extrapolation.
pub const MAX_NORMALIZED_INPUT: f64 = 4.0;

impl Normalization {
    pub fn lambda(&self, lambda2: f64) -> Result<(f64, Option<String>)> {
        let z = 2.0 * (lambda2 - self.lambda_lo) / (self.lambda_hi - self.lambda_lo) - 1.0;
        if !z.is_finite() || z.abs() > MAX_NORMALIZED_INPUT {
            return Err(Error::InputRange(format!(
                "lambda2 = {lambda2} m/s normalises to {z:.3}; training interval is [{}, {}] m/s",
                self.lambda_lo, self.lambda_hi
            )));
        }
        let warn = (z.abs() > 1.0 + 1e-12).then(|| {
            format!(
                "extrapolation: lambda2 = {:.3} km/h outside training interval [{:.3}, {:.3}] km/h",
                lambda2 * 3.6,
                self.lambda_lo * 3.6,
                self.lambda_hi * 3.6
            )
        });
        Ok((z, warn))
    }

    pub fn coord(&self, y: f64) -> f64 {
        2.0 * y / self.coord_scale - 1.0
    }

    pub fn denorm(&self, head: usize, o: f64) -> f64 {
        self.out_mean[head] + self.out_std[head] * o
    }

    pub fn standardize(&self, head: usize, k: f64) -> f64 {
        (k - self.out_mean[head]) / self.out_std[head]
    }
}

/// The parameter family a model was trained on: everything besides `λ2`
/// that enters the kernels or the closed loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub fd: FundamentalDiagram,
    pub tau: f64,
    pub length: f64,
    #[serde(default)]
    pub coupling: CouplingArgument,
}

impl Family {
    /// Kernel-equation coefficients for `λ2` inside this family.
    pub fn kernel_params(&self, lambda2: f64) -> Result<KernelParams> {
        let eq = self.fd.equilibrium_for_lambda2(lambda2)?;
        Ok(KernelParams::new(&eq, self.tau, self.length).with_coupling(self.coupling))
    }

    pub fn equilibrium(&self, lambda2: f64) -> Result<Equilibrium> {
        self.fd.equilibrium_for_lambda2(lambda2)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub final_train_loss: f64,
    pub final_test_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub seed: u64,
    pub config_hash: String,
    pub family: Family,
    /// Control-law models: closed-loop horizon and initial-condition tag.
    pub horizon: Option<f64>,
    pub ic: Option<String>,
    pub train: TrainSummary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorModel {
    pub target: Target,
    pub net: DeepONet,
    pub norm: Normalization,
    pub meta: ModelMeta,
}

/// Trunk-network output at a fixed set of query points.
#[derive(Debug, Clone, PartialEq)]
pub struct TrunkBasis {
    pub points: Vec<Vec<f64>>,
    features: Array2<f64>,
}

/// Values per head at the requested points, physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub heads: Vec<Vec<f64>>,
    pub warning: Option<String>,
}

impl OperatorModel {
    pub fn trunk_inputs(&self, points: &[Vec<f64>]) -> Array2<f64> {
        let d = self.net.trunk.input_dim();
        Array2::from_shape_fn((points.len(), d), |(i, j)| self.norm.coord(points[i][j]))
    }

    /// Trunk features at fixed query points (raw SI coordinates). Any
    /// later `λ2` then costs one branch pass and a dot product.
    pub fn trunk_basis(&self, points: &[Vec<f64>]) -> TrunkBasis {
        TrunkBasis { points: points.to_vec(), features: self.net.trunk.forward(self.trunk_inputs(points).view()) }
    }

    /// Evaluates the operator at `λ2` on raw (SI) trunk coordinates.
    pub fn predict(&self, lambda2: f64, points: &[Vec<f64>]) -> Result<Prediction> {
        self.predict_with(lambda2, &self.trunk_basis(points))
    }

    pub fn predict_with(&self, lambda2: f64, basis: &TrunkBasis) -> Result<Prediction> {
        let (z, warning) = self.norm.lambda(lambda2)?;
        let b = Array2::from_elem((1, 1), z);
        let out = self.net.forward_with_trunk(b.view(), &basis.features);
        let heads = out
            .iter()
            .enumerate()
            .map(|(h, o)| o.row(0).iter().map(|&v| self.norm.denorm(h, v)).collect())
            .collect();
        Ok(Prediction { heads, warning })
    }

    fn require(&self, target: Target) -> Result<()> {
        if self.target != target {
            return Err(Error::Model(format!("model maps to {:?}, {target:?} requested", self.target)));
        }
        Ok(())
    }

    /// Trunk basis of the `x = L` edge at `n` equispaced `ξ`.
    pub fn edge_basis(&self, n: usize) -> Result<TrunkBasis> {
        self.require(Target::Kernels)?;
        let l = self.meta.family.length;
        let grid = TriangularGrid::new(n, l)?;
        let pts: Vec<Vec<f64>> = (0..n).map(|j| vec![l, grid.coord(j)]).collect();
        Ok(self.trunk_basis(&pts))
    }

    /// Kernel traces on `x = L` at `n` equispaced `ξ`.
    pub fn edge_kernels(&self, lambda2: f64, n: usize) -> Result<(EdgeKernels, Option<String>)> {
        self.edge_kernels_with(lambda2, &self.edge_basis(n)?)
    }

    pub fn edge_kernels_with(&self, lambda2: f64, basis: &TrunkBasis) -> Result<(EdgeKernels, Option<String>)> {
        self.require(Target::Kernels)?;
        let xi: Vec<f64> = basis.points.iter().map(|p| p[1]).collect();
        let mut p = self.predict_with(lambda2, basis)?;
        let kv = p.heads.pop().unwrap();
        let kw = p.heads.pop().unwrap();
        Ok((EdgeKernels { xi, kw, kv }, p.warning))
    }

    /// The full predicted field on `grid`, for residual and error checks.
    pub fn kernel_field(&self, lambda2: f64, grid: &TriangularGrid) -> Result<KernelField> {
        self.require(Target::Kernels)?;
        let pts: Vec<Vec<f64>> = grid.nodes().into_iter().map(|(x, xi)| vec![x, xi]).collect();
        let mut p = self.predict(lambda2, &pts)?;
        let kv = p.heads.pop().unwrap();
        let kw = p.heads.pop().unwrap();
        let params = self.meta.family.kernel_params(lambda2)?;
        Ok(KernelField { grid: *grid, params, kw, kv })
    }

    /// `Û(t)` at the given times [s], clamped to the training horizon.
    pub fn control(&self, lambda2: f64, times: &[f64]) -> Result<(Vec<f64>, Vec<String>)> {
        self.require(Target::ControlLaw)?;
        let mut warnings = Vec::new();
        let horizon = self.norm.coord_scale;
        let pts: Vec<Vec<f64>> = times
            .iter()
            .map(|&t| {
                if t > horizon + 1e-9 {
                    vec![horizon]
                } else {
                    vec![t.max(0.0)]
                }
            })
            .collect();
        if times.iter().any(|&t| t > horizon + 1e-9) {
            warnings.push(format!("time beyond the training horizon {horizon} s clamped"));
        }
        let p = self.predict(lambda2, &pts)?;
        warnings.extend(p.warning);
        Ok((p.heads.into_iter().next().unwrap(), warnings))
    }
}

/// Single-instance kernel surrogate: one network per kernel on `(x, ξ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PinnModel {
    pub kw: Dense,
    pub kv: Dense,
    pub params: KernelParams,
    pub out_mean: [f64; 2],
    pub out_std: [f64; 2],
    pub meta: ModelMeta,
}

impl Parameters for PinnModel {
    fn param_slices(&self) -> Vec<&[f64]> {
        let mut v = self.kw.slices();
        v.extend(self.kv.slices());
        v
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.kw.slices_mut();
        v.extend(self.kv.slices_mut());
        v
    }
}

impl PinnModel {
    pub fn inputs(&self, points: &[(f64, f64)]) -> Array2<f64> {
        let l = self.params.length;
        Array2::from_shape_fn((points.len(), 2), |(i, j)| {
            let v = if j == 0 { points[i].0 } else { points[i].1 };
            2.0 * v / l - 1.0
        })
    }

    /// Errors unless `lambda2` is the instance the networks were fit to.
    pub fn check_instance(&self, lambda2: f64) -> Result<()> {
        if (lambda2 - self.params.lambda2).abs() > 1e-9 * self.params.lambda2.abs().max(1.0) {
            return Err(Error::InstanceMismatch { trained: self.params.lambda2, requested: lambda2 });
        }
        Ok(())
    }

    pub fn predict(&self, lambda2: f64, points: &[(f64, f64)]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_instance(lambda2)?;
        let x = self.inputs(points);
        let kw = self.kw.forward(x.view());
        let kv = self.kv.forward(x.view());
        Ok((
            kw.column(0).iter().map(|&o| self.out_mean[0] + self.out_std[0] * o).collect(),
            kv.column(0).iter().map(|&o| self.out_mean[1] + self.out_std[1] * o).collect(),
        ))
    }

    pub fn edge_kernels(&self, lambda2: f64, n: usize) -> Result<EdgeKernels> {
        let l = self.params.length;
        let grid = TriangularGrid::new(n, l)?;
        let xi: Vec<f64> = (0..n).map(|j| grid.coord(j)).collect();
        let pts: Vec<(f64, f64)> = xi.iter().map(|&x| (l, x)).collect();
        let (kw, kv) = self.predict(lambda2, &pts)?;
        Ok(EdgeKernels { xi, kw, kv })
    }

    pub fn kernel_field(&self, grid: &TriangularGrid) -> Result<KernelField> {
        let (kw, kv) = self.predict(self.params.lambda2, &grid.nodes())?;
        Ok(KernelField { grid: *grid, params: self.params, kw, kv })
    }
}

const MAGIC: &[u8; 8] = b"ARZNOPM\n";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Header {
    Deeponet {
        target: Target,
        branch_widths: Vec<usize>,
        trunk_widths: Vec<usize>,
        p: usize,
        heads: usize,
        norm: Normalization,
        meta: ModelMeta,
    },
    Pinn {
        kw_widths: Vec<usize>,
        kv_widths: Vec<usize>,
        params: KernelParams,
        out_mean: [f64; 2],
        out_std: [f64; 2],
        meta: ModelMeta,
    },
}

/// Either kind of stored model.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredModel {
    Operator(OperatorModel),
    Pinn(PinnModel),
}

fn write_container<W: Write>(out: &mut W, header: &Header, params: &[f64]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    out.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        out.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

impl StoredModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        match self {
            StoredModel::Operator(m) => {
                let header = Header::Deeponet {
                    target: m.target,
                    branch_widths: m.net.branch.widths.clone(),
                    trunk_widths: m.net.trunk.widths.clone(),
                    p: m.net.p,
                    heads: m.net.heads,
                    norm: m.norm.clone(),
                    meta: m.meta.clone(),
                };
                write_container(&mut buf, &header, &m.net.flat_params())?;
            }
            StoredModel::Pinn(m) => {
                let header = Header::Pinn {
                    kw_widths: m.kw.widths.clone(),
                    kv_widths: m.kv.widths.clone(),
                    params: m.params,
                    out_mean: m.out_mean,
                    out_std: m.out_std,
                    meta: m.meta.clone(),
                };
                write_container(&mut buf, &header, &m.flat_params())?;
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::ModelFile { path: path.to_path_buf(), reason };
        let mut r = bytes;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if r.len() < n {
                return Err(bad(format!("truncated while reading {what}")));
            }
            let (a, b) = r.split_at(n);
            r = b;
            Ok(a)
        };
        if take(8, "magic")? != MAGIC {
            return Err(bad("not a model file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(4, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
        }
        let hlen = u64::from_le_bytes(take(8, "header length")?.try_into().unwrap()) as usize;
        let header: Header = serde_json::from_slice(take(hlen, "header")?).map_err(|e| bad(format!("header: {e}")))?;
        let count = u64::from_le_bytes(take(8, "parameter count")?.try_into().unwrap()) as usize;
        let raw = take(count.checked_mul(8).ok_or_else(|| bad("parameter count overflow".into()))?, "parameters")?;
        let params: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if !r.is_empty() {
            return Err(bad(format!("{} trailing bytes", r.len())));
        }
        let check = |expected: usize| {
            if expected != count {
                Err(bad(format!("header implies {expected} parameters, file has {count}")))
            } else {
                Ok(())
            }
        };
        match header {
            Header::Deeponet { target, branch_widths, trunk_widths, p, heads, norm, meta } => {
                let net = DeepONet::from_parts(Dense::zeros(&branch_widths), Dense::zeros(&trunk_widths), p, heads)
                    .map_err(|e| bad(e.to_string()))?;
                let mut net = net;
                check(net.branch.param_count() + net.trunk.param_count())?;
                net.set_flat_params(&params);
                if norm.out_mean.len() != heads || norm.out_std.len() != heads {
                    return Err(bad("normalisation does not match head count".into()));
                }
                Ok(StoredModel::Operator(OperatorModel { target, net, norm, meta }))
            }
            Header::Pinn { kw_widths, kv_widths, params: kp, out_mean, out_std, meta } => {
                let mut m = PinnModel { kw: Dense::zeros(&kw_widths), kv: Dense::zeros(&kv_widths), params: kp, out_mean, out_std, meta };
                check(m.kw.param_count() + m.kv.param_count())?;
                m.set_flat_params(&params);
                Ok(StoredModel::Pinn(m))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::ModelFile { path: path.to_path_buf(), reason: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::ModelFile { path: path.to_path_buf(), reason: e.to_string() })?;
        Self::from_bytes(&bytes, path)
    }

    pub fn into_operator(self) -> Result<OperatorModel> {
        match self {
            StoredModel::Operator(m) => Ok(m),
            StoredModel::Pinn(_) => Err(Error::Model("expected an operator model, found a single-instance surrogate".into())),
        }
    }

    pub fn into_pinn(self) -> Result<PinnModel> {
        match self {
            StoredModel::Pinn(m) => Ok(m),
            StoredModel::Operator(_) => Err(Error::Model("expected a single-instance surrogate, found an operator model".into())),
        }
    }
}
