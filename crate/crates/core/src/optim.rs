//! Flat parameter vectors with named layouts, the log-Cholesky constraint for
//! covariance parameters, first-order optimizers (ascent convention) and JSON
//! checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamKind {
    Scalar,
    Vector {
        len: usize,
    },
    Matrix {
        rows: usize,
        cols: usize,
    },
    /// Unconstrained log-Cholesky coordinates of a `dim × dim` SPD matrix.
    SpdLogCholesky {
        dim: usize,
    },
}

impl ParamKind {
    pub fn len(&self) -> usize {
        match *self {
            ParamKind::Scalar => 1,
            ParamKind::Vector { len } => len,
            ParamKind::Matrix { rows, cols } => rows * cols,
            ParamKind::SpdLogCholesky { dim } => dim * (dim + 1) / 2,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    #[serde(flatten)]
    pub kind: ParamKind,
}

/// Named slices over one flat array.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Vec<ParamEntry>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, name: &str, kind: ParamKind, vals: &[f64]) -> Result<()> {
        if self.layout.iter().any(|e| e.name == name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name {name}"
            )));
        }
        debug_assert_eq!(kind.len(), vals.len());
        self.layout.push(ParamEntry {
            name: name.to_string(),
            offset: self.values.len(),
            kind,
        });
        self.values.extend_from_slice(vals);
        Ok(())
    }

    pub fn push_scalar(&mut self, name: &str, v: f64) -> Result<()> {
        self.push(name, ParamKind::Scalar, &[v])
    }

    pub fn push_vector(&mut self, name: &str, v: &[f64]) -> Result<()> {
        self.push(name, ParamKind::Vector { len: v.len() }, v)
    }

    pub fn push_matrix(&mut self, name: &str, m: &Matrix) -> Result<()> {
        self.push(
            name,
            ParamKind::Matrix {
                rows: m.rows(),
                cols: m.cols(),
            },
            m.as_slice(),
        )
    }

    /// Stores an SPD matrix through its log-Cholesky coordinates.
    pub fn push_spd(&mut self, name: &str, m: &Matrix) -> Result<()> {
        let coords = unconstrain_spd(m)?;
        self.push(name, ParamKind::SpdLogCholesky { dim: m.rows() }, &coords)
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry> {
        self.layout
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    /// Checks that the layout tiles the array exactly.
    pub fn validate(&self) -> Result<()> {
        let mut entries: Vec<&ParamEntry> = self.layout.iter().collect();
        entries.sort_by_key(|e| e.offset);
        let mut next = 0;
        for e in entries {
            if e.offset != next {
                return Err(Error::InvalidArgument(format!(
                    "layout gap or overlap at parameter {}",
                    e.name
                )));
            }
            next += e.kind.len();
        }
        if next != self.values.len() {
            return Err(Error::LengthMismatch(format!(
                "layout covers {next} values, array holds {}",
                self.values.len()
            )));
        }
        Ok(())
    }

    /// Typed view of the named slice of `vars` (a copy of `values`, possibly lifted).
    pub fn slice<'a, T>(&self, vars: &'a [T], name: &str) -> Result<&'a [T]> {
        let e = self.entry(name)?;
        if vars.len() != self.values.len() {
            return Err(Error::LengthMismatch(
                "parameter array does not match layout".into(),
            ));
        }
        Ok(&vars[e.offset..e.offset + e.kind.len()])
    }

    pub fn scalar<T: Real>(&self, vars: &[T], name: &str) -> Result<T> {
        Ok(self.slice(vars, name)?[0])
    }

    pub fn vector<T: Real>(&self, vars: &[T], name: &str) -> Result<Vec<T>> {
        Ok(self.slice(vars, name)?.to_vec())
    }

    pub fn matrix<T: Real>(&self, vars: &[T], name: &str) -> Result<Matrix<T>> {
        let e = self.entry(name)?;
        match e.kind {
            ParamKind::Matrix { rows, cols } => {
                Matrix::from_vec(rows, cols, self.slice(vars, name)?.to_vec())
            }
            ParamKind::SpdLogCholesky { dim } => constrain_spd(self.slice(vars, name)?, dim),
            _ => Err(Error::InvalidArgument(format!(
                "parameter {name} is not a matrix"
            ))),
        }
    }
}

/// Lower-triangular fill (row-major over `j ≤ i`) with `exp` on the diagonal,
/// returned as `L·Lᵀ`.
pub fn constrain_spd<T: Real>(coords: &[T], dim: usize) -> Result<Matrix<T>> {
    if coords.len() != dim * (dim + 1) / 2 {
        return Err(Error::LengthMismatch(format!(
            "{} log-Cholesky coordinates for dimension {dim}",
            coords.len()
        )));
    }
    let l = lower_factor(coords, dim);
    Ok(l.matmul(&l.transpose()).symmetrize())
}

/// The factor `L` built by [`constrain_spd`].
pub fn lower_factor<T: Real>(coords: &[T], dim: usize) -> Matrix<T> {
    let mut l = Matrix::zeros(dim, dim);
    let mut idx = 0;
    for i in 0..dim {
        for j in 0..=i {
            l[(i, j)] = if i == j {
                coords[idx].exp()
            } else {
                coords[idx]
            };
            idx += 1;
        }
    }
    l
}

/// Inverse of [`constrain_spd`].
pub fn unconstrain_spd(m: &Matrix) -> Result<Vec<f64>> {
    let l = m.cholesky()?.into_l();
    let d = m.rows();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for i in 0..d {
        for j in 0..=i {
            out.push(if i == j { l[(i, j)].ln() } else { l[(i, j)] });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub method: Method,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub hyper: Hyper,
}

impl OptimizerState {
    pub fn adam(n: usize, lr: f64) -> Self {
        OptimizerState {
            method: Method::Adam,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            hyper: Hyper {
                lr,
                ..Hyper::default()
            },
        }
    }

    pub fn sgd(n: usize, lr: f64) -> Self {
        OptimizerState {
            method: Method::Sgd,
            ..Self::adam(n, lr)
        }
    }

    /// One ascent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        match self.method {
            Method::Adam => adam_step(self, params, grad),
            Method::Sgd => sgd_step(self, params, grad),
        }
    }
}

fn check_step_inputs(state: &OptimizerState, params: &[f64], grad: &[f64]) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(Error::LengthMismatch(format!(
            "optimizer state of length {} with {} parameters and {} gradients",
            state.m.len(),
            params.len(),
            grad.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteValue(format!("gradient coordinate {i}")));
    }
    Ok(())
}

/// Bias-corrected Adam, maximizing.
pub fn adam_step(state: &mut OptimizerState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    check_step_inputs(state, params, grad)?;
    let h = state.hyper;
    state.step += 1;
    let bc1 = 1.0 - h.beta1.powi(state.step as i32);
    let bc2 = 1.0 - h.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * grad[i];
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * grad[i] * grad[i];
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] += h.lr * mhat / (vhat.sqrt() + h.eps);
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFiniteValue("parameters after Adam step".into()));
    }
    Ok(())
}

/// Plain gradient ascent.
pub fn sgd_step(state: &mut OptimizerState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    check_step_inputs(state, params, grad)?;
    state.step += 1;
    for (p, g) in params.iter_mut().zip(grad) {
        *p += state.hyper.lr * g;
    }
    Ok(())
}

/// Rescales `grad` in place so its Euclidean norm is at most `max_norm`.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Parameters plus optimizer state, as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub layout: Vec<ParamEntry>,
    pub values: Vec<f64>,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    pub fn new(params: &ParamVector, optimizer: &OptimizerState) -> Self {
        Checkpoint {
            layout: params.layout.clone(),
            values: params.values.clone(),
            optimizer: optimizer.clone(),
        }
    }

    pub fn params(&self) -> Result<ParamVector> {
        let p = ParamVector {
            values: self.values.clone(),
            layout: self.layout.clone(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        ck.params()?;
        if ck.optimizer.m.len() != ck.values.len() || ck.optimizer.v.len() != ck.values.len() {
            return Err(Error::LengthMismatch(
                "optimizer moments do not match parameters".into(),
            ));
        }
        Ok(ck)
    }
}
