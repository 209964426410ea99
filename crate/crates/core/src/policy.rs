//! The stable mixture policy
//!
//! ```text
//! ẋ_c = Σᵢ wᵢ(x) · Aᵢ · (x_c* − x_c),   Aᵢ = LᵢLᵢᵀ + Cᵢ − Cᵢᵀ
//! ```
//!
//! `Lᵢ` is lower triangular with diagonal `softplus(raw) + ε`, so the
//! symmetric part of every `Aᵢ` is `LᵢLᵢᵀ ≻ 0` for any raw parameter values.
//! The weights come from a softmax head and are therefore positive. Together
//! these make `V = ‖x_c* − x_c‖²` a strict Lyapunov function, independent of
//! what the optimizer does to the raw parameters.

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels::softplus, softplus_inv, NodeId, Tape, Tensor};
use crate::error::{ensure_finite, Error, Result};
use crate::linalg::{dot, Matrix};
use crate::state::StateVector;
use crate::weightnet::{WeightHead, WeightNetParams};

pub const DEFAULT_DIAG_FLOOR: f64 = 1e-6;

/// One elementary linear system, stored as unconstrained raw parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ElementaryDs {
    l_raw: Matrix,
    c: Matrix,
    bypass: Option<Matrix>,
}

impl ElementaryDs {
    pub fn new(l_raw: Matrix, c: Matrix) -> Result<Self> {
        let d = l_raw.rows();
        if !l_raw.is_square() || d == 0 {
            return Err(Error::InvalidParameter(format!(
                "L_raw must be square and non-empty, got {}x{}",
                l_raw.rows(),
                l_raw.cols()
            )));
        }
        if c.rows() != d || c.cols() != d {
            return Err(Error::InvalidParameter(format!(
                "C must be {d}x{d} to match L_raw, got {}x{}",
                c.rows(),
                c.cols()
            )));
        }
        ensure_finite(l_raw.as_slice(), "L_raw")?;
        ensure_finite(c.as_slice(), "C")?;
        for i in 0..d {
            for j in (i + 1)..d {
                if l_raw[(i, j)] != 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "L_raw has a non-zero entry above the diagonal at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self {
            l_raw,
            c,
            bypass: None,
        })
    }

    /// Raw values for which the reconstructed `L` is the identity and `C = 0`,
    /// i.e. `A = I`.
    pub fn identity(d: usize, eps: f64) -> Self {
        let mut l_raw = Matrix::zeros(d, d);
        let diag = softplus_inv(1.0 - eps);
        for i in 0..d {
            l_raw[(i, i)] = diag;
        }
        Self {
            l_raw,
            c: Matrix::zeros(d, d),
            bypass: None,
        }
    }

    /// Test hook: a system whose `A` is taken verbatim, skipping the
    /// reparameterization. Used to exercise certificate failures.
    #[doc(hidden)]
    pub fn unconstrained(a: Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::InvalidParameter("bypass matrix must be square".into()));
        }
        ensure_finite(a.as_slice(), "bypass A")?;
        let d = a.rows();
        Ok(Self {
            l_raw: Matrix::zeros(d, d),
            c: Matrix::zeros(d, d),
            bypass: Some(a),
        })
    }

    pub(crate) fn with_bypass(mut self, a: Matrix) -> Result<Self> {
        if a.rows() != self.dim() || a.cols() != self.dim() {
            return Err(Error::InvalidParameter("bypass matrix must match the system dimension".into()));
        }
        ensure_finite(a.as_slice(), "bypass A")?;
        self.bypass = Some(a);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.l_raw.rows()
    }

    pub fn l_raw(&self) -> &Matrix {
        &self.l_raw
    }

    pub fn c(&self) -> &Matrix {
        &self.c
    }

    pub fn bypass(&self) -> Option<&Matrix> {
        self.bypass.as_ref()
    }

    pub fn with_c(&self, c: Matrix) -> Result<Self> {
        let mut s = Self::new(self.l_raw.clone(), c)?;
        s.bypass = self.bypass.clone();
        Ok(s)
    }
}

/// Lower-triangular factor with diagonal `softplus(raw) + eps`.
pub fn reconstruct_l(raw: &Matrix, eps: f64) -> Result<Matrix> {
    if !raw.is_square() {
        return Err(Error::InvalidParameter("L_raw must be square".into()));
    }
    ensure_finite(raw.as_slice(), "L_raw")?;
    let d = raw.rows();
    let mut l = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..i {
            l[(i, j)] = raw[(i, j)];
        }
        l[(i, i)] = softplus(raw[(i, i)]) + eps;
    }
    Ok(l)
}

/// `A = LLᵀ + C − Cᵀ`.
pub fn reconstruct_a(sys: &ElementaryDs, eps: f64) -> Result<Matrix> {
    if let Some(a) = &sys.bypass {
        return Ok(a.clone());
    }
    if sys.c.rows() != sys.l_raw.rows() || sys.c.cols() != sys.l_raw.cols() {
        return Err(Error::InvalidParameter("L_raw and C dimensions differ".into()));
    }
    ensure_finite(sys.c.as_slice(), "C")?;
    let l = reconstruct_l(&sys.l_raw, eps)?;
    let b = l.matmul(&l.transpose());
    Ok(b.add(&sys.c.sub(&sys.c.transpose())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    systems: Vec<ElementaryDs>,
    weight_net: WeightNetParams,
    attractor: Vec<f64>,
    diag_floor: f64,
}

impl PolicyParams {
    pub fn new(
        systems: Vec<ElementaryDs>,
        weight_net: WeightNetParams,
        attractor: Vec<f64>,
        diag_floor: f64,
    ) -> Result<Self> {
        if systems.is_empty() {
            return Err(Error::InvalidParameter("policy needs N >= 1 systems".into()));
        }
        if !(diag_floor > 0.0 && diag_floor.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "diagonal floor must be positive, got {diag_floor}"
            )));
        }
        ensure_finite(&attractor, "attractor")?;
        let d = attractor.len();
        if d == 0 {
            return Err(Error::InvalidParameter("attractor must have d_c >= 1".into()));
        }
        for s in &systems {
            if s.dim() != d {
                return Err(Error::DimensionMismatch {
                    context: "elementary system vs attractor",
                    expected: d,
                    found: s.dim(),
                });
            }
        }
        let cfg = weight_net.config();
        if cfg.d_c != d {
            return Err(Error::DimensionMismatch {
                context: "weight network d_c vs attractor",
                expected: d,
                found: cfg.d_c,
            });
        }
        if cfg.output_dim != systems.len() {
            return Err(Error::DimensionMismatch {
                context: "weight network outputs vs number of systems",
                expected: systems.len(),
                found: cfg.output_dim,
            });
        }
        Ok(Self {
            systems,
            weight_net,
            attractor,
            diag_floor,
        })
    }

    pub fn d_c(&self) -> usize {
        self.attractor.len()
    }

    pub fn n_systems(&self) -> usize {
        self.systems.len()
    }

    pub fn systems(&self) -> &[ElementaryDs] {
        &self.systems
    }

    pub fn weight_net(&self) -> &WeightNetParams {
        &self.weight_net
    }

    pub fn attractor(&self) -> &[f64] {
        &self.attractor
    }

    pub fn diag_floor(&self) -> f64 {
        self.diag_floor
    }

    pub fn with_systems(&self, systems: Vec<ElementaryDs>) -> Result<Self> {
        Self::new(systems, self.weight_net.clone(), self.attractor.clone(), self.diag_floor)
    }

    pub fn with_weight_net(&self, net: WeightNetParams) -> Result<Self> {
        Self::new(self.systems.clone(), net, self.attractor.clone(), self.diag_floor)
    }

    /// All `Aᵢ`, reconstructed from the raw parameters.
    pub fn matrices(&self) -> Result<Vec<Matrix>> {
        self.systems
            .iter()
            .map(|s| reconstruct_a(s, self.diag_floor))
            .collect()
    }

    fn check_dims(&self, x_c: &[f64]) -> Result<()> {
        if x_c.len() != self.d_c() {
            return Err(Error::DimensionMismatch {
                context: "controllable state",
                expected: self.d_c(),
                found: x_c.len(),
            });
        }
        Ok(())
    }

    /// Shapes of the trainable blocks in flattening order: `(L_raw, C)` per
    /// system, then the weight network.
    pub fn block_shapes(&self) -> Vec<Vec<usize>> {
        let d = self.d_c();
        let mut shapes = Vec::new();
        for _ in &self.systems {
            shapes.push(vec![d, d]);
            shapes.push(vec![d, d]);
        }
        shapes.extend(
            self.weight_net
                .config()
                .block_shapes()
                .expect("validated at construction"),
        );
        shapes
    }

    pub fn num_parameters(&self) -> usize {
        self.block_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// Concatenation of all trainable blocks.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for s in &self.systems {
            out.extend_from_slice(s.l_raw.as_slice());
            out.extend_from_slice(s.c.as_slice());
        }
        for b in self.weight_net.blocks() {
            out.extend_from_slice(b);
        }
        out
    }

    /// Inverse of [`Self::flatten`], keeping structure, attractor and floor.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_parameters() {
            return Err(Error::DimensionMismatch {
                context: "flat parameter vector",
                expected: self.num_parameters(),
                found: flat.len(),
            });
        }
        let d = self.d_c();
        let mut off = 0;
        let mut take = |n: usize| {
            let s = &flat[off..off + n];
            off += n;
            s.to_vec()
        };
        let mut systems = Vec::with_capacity(self.systems.len());
        for old in &self.systems {
            let l_raw = Matrix::from_row_major(d, d, take(d * d))?;
            let c = Matrix::from_row_major(d, d, take(d * d))?;
            let mut s = ElementaryDs::new(l_raw, c)?;
            s.bypass = old.bypass.clone();
            systems.push(s);
        }
        let mut net = self.weight_net.clone();
        for b in net.blocks_mut() {
            let n = b.len();
            *b = take(n);
            ensure_finite(b, "weight network parameter")?;
        }
        Self::new(systems, net, self.attractor.clone(), self.diag_floor)
    }

    /// Puts every trainable block on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<NodeId> {
        let flat = self.flatten();
        let mut off = 0;
        self.block_shapes()
            .into_iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let t = Tensor::new(shape, flat[off..off + n].to_vec()).expect("sized by shape");
                off += n;
                tape.leaf(t)
            })
            .collect()
    }

    /// Views a single flat leaf (as laid out by [`Self::flatten`]) as the
    /// trainable blocks.
    pub fn bind_flat(&self, tape: &mut Tape, flat: NodeId) -> Vec<NodeId> {
        let mut off = 0;
        self.block_shapes()
            .into_iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let id = tape.slice(flat, off, shape);
                off += n;
                id
            })
            .collect()
    }

    /// Taped `B × d_c` velocities for a batch; `blocks` come from
    /// [`Self::bind`] or [`Self::bind_flat`].
    pub fn velocity_graph(
        &self,
        tape: &mut Tape,
        blocks: &[NodeId],
        states: &[&StateVector],
    ) -> Result<NodeId> {
        let d = self.d_c();
        let n = self.n_systems();
        let batch = states.len();
        if batch == 0 {
            return Err(Error::Validation("empty batch".into()));
        }
        let mut err = Vec::with_capacity(batch * d);
        for s in states {
            self.check_dims(&s.controllable)?;
            err.extend(self.attractor.iter().zip(&s.controllable).map(|(a, x)| a - x));
        }
        let e = tape.constant(Tensor::matrix(batch, d, err));

        let mut identity = vec![0.0; d * d];
        let mut strict_lower = vec![0.0; d * d];
        for i in 0..d {
            identity[i * d + i] = 1.0;
            for j in 0..i {
                strict_lower[i * d + j] = 1.0;
            }
        }
        let identity = tape.constant(Tensor::matrix(d, d, identity));
        let strict_lower = tape.constant(Tensor::matrix(d, d, strict_lower));

        let mut per_system = Vec::with_capacity(n);
        for (i, sys) in self.systems.iter().enumerate() {
            let a = match &sys.bypass {
                Some(a) => tape.constant(Tensor::matrix(d, d, a.as_slice().to_vec())),
                None => {
                    let (raw, c) = (blocks[2 * i], blocks[2 * i + 1]);
                    let off_diag = tape.mul(strict_lower, raw);
                    let sp = tape.softplus(raw);
                    let sp = tape.offset(sp, self.diag_floor);
                    let diag = tape.mul(identity, sp);
                    let l = tape.add(off_diag, diag);
                    let lt = tape.transpose(l);
                    let b = tape.matmul(l, lt);
                    let ct = tape.transpose(c);
                    let skew = tape.sub(c, ct);
                    tape.add(b, skew)
                }
            };
            let at = tape.transpose(a);
            per_system.push(tape.matmul(e, at));
        }
        let z = tape.concat_cols(&per_system);

        let w = self
            .weight_net
            .graph(tape, &blocks[2 * n..], states)?;
        // Repeat each weight column d times, then fold the N blocks of d
        // columns back into one.
        let mut expand = vec![0.0; n * n * d];
        let mut fold = vec![0.0; n * d * d];
        for i in 0..n {
            for k in 0..d {
                expand[i * (n * d) + i * d + k] = 1.0;
                fold[(i * d + k) * d + k] = 1.0;
            }
        }
        let expand = tape.constant(Tensor::matrix(n, n * d, expand));
        let fold = tape.constant(Tensor::matrix(n * d, d, fold));
        let w_exp = tape.matmul(w, expand);
        let weighted = tape.mul(w_exp, z);
        Ok(tape.matmul(weighted, fold))
    }
}

/// Mixture weights `w(x)`.
pub fn weight_forward(params: &PolicyParams, state: &StateVector) -> Result<Vec<f64>> {
    params.weight_net.forward(state)
}

/// Commanded velocity `Σᵢ wᵢ(x) Aᵢ (x_c* − x_c)`.
pub fn policy_eval(params: &PolicyParams, state: &StateVector) -> Result<Vec<f64>> {
    CompiledPolicy::new(params)?.velocity(state)
}

/// `V = ‖x_c* − x_c‖²`.
pub fn lyapunov_value(params: &PolicyParams, x_c: &[f64]) -> Result<f64> {
    params.check_dims(x_c)?;
    Ok(params
        .attractor
        .iter()
        .zip(x_c)
        .map(|(a, x)| (a - x) * (a - x))
        .sum())
}

/// `V̇ = −2 eᵀ (Σᵢ wᵢ Aᵢ) e` with `e = x_c* − x_c`.
pub fn lyapunov_rate(params: &PolicyParams, state: &StateVector) -> Result<f64> {
    CompiledPolicy::new(params)?.lyapunov_rate(state)
}

/// A policy with every `Aᵢ` materialized once, for repeated evaluation at
/// fixed parameters (rollouts, grids, sweeps).
#[derive(Clone, Debug)]
pub struct CompiledPolicy {
    params: PolicyParams,
    matrices: Vec<Matrix>,
}

impl CompiledPolicy {
    pub fn new(params: &PolicyParams) -> Result<Self> {
        Ok(Self {
            matrices: params.matrices()?,
            params: params.clone(),
        })
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn matrices(&self) -> &[Matrix] {
        &self.matrices
    }

    pub fn d_c(&self) -> usize {
        self.params.d_c()
    }

    pub fn attractor(&self) -> &[f64] {
        &self.params.attractor
    }

    pub fn embed(&self, obs: &crate::state::Observation) -> Result<Vec<f64>> {
        self.params.weight_net.embed(obs)
    }

    pub fn error(&self, x_c: &[f64]) -> Vec<f64> {
        self.params.attractor.iter().zip(x_c).map(|(a, x)| a - x).collect()
    }

    /// Velocity from `x_c` and precomputed observation features.
    pub fn velocity_from_features(&self, x_c: &[f64], features: &[f64]) -> Vec<f64> {
        let w = self.params.weight_net.weights_from_features(x_c, features);
        self.mix(&w, x_c)
    }

    /// `Σᵢ wᵢ Aᵢ e` for given weights.
    pub fn mix(&self, w: &[f64], x_c: &[f64]) -> Vec<f64> {
        let e = self.error(x_c);
        let d = e.len();
        let mut out = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        for (wi, a) in w.iter().zip(&self.matrices) {
            a.mul_vec_into(&e, &mut tmp);
            for (o, t) in out.iter_mut().zip(&tmp) {
                *o += wi * t;
            }
        }
        out
    }

    pub fn velocity(&self, state: &StateVector) -> Result<Vec<f64>> {
        self.params.check_dims(&state.controllable)?;
        let features = self.embed(&state.observation)?;
        Ok(self.velocity_from_features(&state.controllable, &features))
    }

    /// `Σᵢ wᵢ Aᵢ` at a state.
    pub fn mixture_matrix(&self, state: &StateVector) -> Result<Matrix> {
        let w = self.params.weight_net.forward(state)?;
        let d = self.d_c();
        let mut m = Matrix::zeros(d, d);
        for (wi, a) in w.iter().zip(&self.matrices) {
            m = m.add(&a.scale(*wi));
        }
        Ok(m)
    }

    pub fn lyapunov_rate(&self, state: &StateVector) -> Result<f64> {
        self.params.check_dims(&state.controllable)?;
        let features = self.embed(&state.observation)?;
        Ok(self.lyapunov_rate_from_features(&state.controllable, &features))
    }

    pub fn lyapunov_rate_from_features(&self, x_c: &[f64], features: &[f64]) -> f64 {
        let e = self.error(x_c);
        let v = self.velocity_from_features(x_c, features);
        // ė = −ẋ_c, so V̇ = 2eᵀė = −2eᵀẋ_c.
        -2.0 * dot(&e, &v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    /// Minimum eigenvalue of `(Aᵢ + Aᵢᵀ)/2` for each system.
    pub per_system_min_eig: Vec<f64>,
    pub weight_head_kind: WeightHead,
    pub verdict: bool,
}

impl StabilityCertificate {
    /// Certificate for explicit system matrices and head kind.
    pub fn from_matrices(matrices: &[Matrix], head: WeightHead) -> Result<Self> {
        let per_system_min_eig = matrices
            .iter()
            .enumerate()
            .map(|(i, a)| {
                a.symmetric_part()
                    .symmetric_eigenvalues()
                    .map(|e| e[0])
                    .map_err(|err| match err {
                        Error::NumericalFailure { message, .. } => Error::NumericalFailure {
                            system: Some(i),
                            message,
                        },
                        other => other,
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let verdict = head.is_positive() && per_system_min_eig.iter().all(|&m| m > 0.0);
        Ok(Self {
            per_system_min_eig,
            weight_head_kind: head,
            verdict,
        })
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.per_system_min_eig
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Checks both stability conditions: positive definite symmetric part of
/// every `Aᵢ` and a positivity-preserving weight head.
pub fn verify_certificate(params: &PolicyParams) -> Result<StabilityCertificate> {
    StabilityCertificate::from_matrices(&params.matrices()?, params.weight_net.config().head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weightnet::{default_hidden, WeightNetConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net(d: usize, n: usize, rng: &mut ChaCha8Rng) -> WeightNetParams {
        WeightNetParams::init(WeightNetConfig::vector(d, 0, default_hidden(), n), rng).unwrap()
    }

    fn uniform_net(d: usize, n: usize) -> WeightNetParams {
        let cfg = WeightNetConfig::vector(d, 0, vec![], n);
        let blocks = vec![vec![0.0; d * n], vec![0.0; n]];
        WeightNetParams::from_blocks(cfg, blocks).unwrap()
    }

    #[test]
    fn reconstruct_l_zero_diag() {
        let raw = Matrix::zeros(2, 2);
        let l = reconstruct_l(&raw, 1e-6).unwrap();
        assert!((l[(0, 0)] - (std::f64::consts::LN_2 + 1e-6)).abs() < 1e-15);
        assert!((l[(0, 0)] - 0.693148).abs() < 1e-6);
        let l0 = reconstruct_l(&raw, 0.0).unwrap();
        assert_eq!(l0, Matrix::identity(2).scale(std::f64::consts::LN_2));
    }

    #[test]
    fn reconstruct_l_passes_strict_lower_through() {
        let raw = Matrix::from_rows(&[&[0.0, 0.0], &[5.0, 0.0]]);
        assert_eq!(reconstruct_l(&raw, 1e-6).unwrap()[(1, 0)], 5.0);
    }

    #[test]
    fn reconstruct_l_rejects_non_finite() {
        let raw = Matrix::from_rows(&[&[f64::NAN, 0.0], &[0.0, 0.0]]);
        assert!(matches!(reconstruct_l(&raw, 1e-6), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn reconstruct_a_worked_example() {
        // Choose raw so the reconstructed L is [[1,0],[2,3]] with eps = 0.
        let raw = Matrix::from_rows(&[&[softplus_inv(1.0), 0.0], &[2.0, softplus_inv(3.0)]]);
        let c = Matrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]);
        let sys = ElementaryDs::new(raw, c).unwrap();
        let a = reconstruct_a(&sys, 0.0).unwrap();
        let expected = [1.0, 3.0, 1.0, 13.0];
        for (x, y) in a.as_slice().iter().zip(expected) {
            assert!((x - y).abs() < 1e-12, "{a:?}");
        }
    }

    #[test]
    fn identity_system_reconstructs_identity() {
        let eps = DEFAULT_DIAG_FLOOR;
        let a = reconstruct_a(&ElementaryDs::identity(3, eps), eps).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((a[(i, j)] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_c_rejected() {
        let r = ElementaryDs::new(Matrix::zeros(2, 2), Matrix::zeros(3, 3));
        assert!(matches!(r, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn upper_triangle_must_be_zero() {
        let raw = Matrix::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]);
        assert!(ElementaryDs::new(raw, Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn two_system_mixture_example() {
        // A₁ = I, A₂ = 2I, w = (½, ½), x* = 0, x_c = (1, 1) → (−1.5, −1.5)
        let a1 = ElementaryDs::unconstrained(Matrix::identity(2)).unwrap();
        let a2 = ElementaryDs::unconstrained(Matrix::identity(2).scale(2.0)).unwrap();
        let p = PolicyParams::new(vec![a1, a2], uniform_net(2, 2), vec![0.0, 0.0], 1e-6).unwrap();
        let v = policy_eval(&p, &StateVector::controllable_only(vec![1.0, 1.0]).unwrap()).unwrap();
        assert!((v[0] + 1.5).abs() < 1e-15 && (v[1] + 1.5).abs() < 1e-15);
    }

    #[test]
    fn single_identity_system() {
        let p = PolicyParams::new(
            vec![ElementaryDs::unconstrained(Matrix::identity(2)).unwrap()],
            uniform_net(2, 1),
            vec![0.0, 0.0],
            1e-6,
        )
        .unwrap();
        let s = StateVector::controllable_only(vec![1.0, 0.0]).unwrap();
        assert_eq!(policy_eval(&p, &s).unwrap(), vec![-1.0, 0.0]);
        assert_eq!(lyapunov_rate(&p, &s).unwrap(), -2.0);
        assert_eq!(lyapunov_value(&p, &[3.0, 4.0]).unwrap(), 25.0);
    }

    #[test]
    fn equilibrium_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let systems = (0..3)
            .map(|_| random_system(2, &mut rng))
            .collect();
        let p = PolicyParams::new(systems, net(2, 3, &mut rng), vec![0.4, -0.2], 1e-6).unwrap();
        let s = StateVector::controllable_only(vec![0.4, -0.2]).unwrap();
        assert_eq!(policy_eval(&p, &s).unwrap(), vec![0.0, 0.0]);
        assert_eq!(lyapunov_rate(&p, &s).unwrap(), 0.0);
        assert_eq!(lyapunov_value(&p, &[0.4, -0.2]).unwrap(), 0.0);
    }

    fn random_system(d: usize, rng: &mut ChaCha8Rng) -> ElementaryDs {
        let mut raw = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..=i {
                raw[(i, j)] = rng.random_range(-2.0..2.0);
            }
        }
        let c = Matrix::from_row_major(d, d, (0..d * d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .unwrap();
        ElementaryDs::new(raw, c).unwrap()
    }

    #[test]
    fn certificate_for_identity_l_and_arbitrary_c() {
        let mut sys = ElementaryDs::identity(2, 0.0);
        sys = sys.with_c(Matrix::from_rows(&[&[3.0, -7.0], &[0.5, 2.0]])).unwrap();
        let p = PolicyParams::new(vec![sys], uniform_net(2, 1), vec![0.0; 2], 1e-12).unwrap();
        let cert = verify_certificate(&p).unwrap();
        assert!((cert.per_system_min_eig[0] - 1.0).abs() < 1e-9);
        assert!(cert.verdict);
    }

    #[test]
    fn negative_definite_bypass_fails_certificate() {
        let bad = ElementaryDs::unconstrained(Matrix::identity(2).scale(-1.0)).unwrap();
        let p = PolicyParams::new(vec![bad], uniform_net(2, 1), vec![0.0; 2], 1e-6).unwrap();
        let cert = verify_certificate(&p).unwrap();
        assert!(!cert.verdict);
        assert!((cert.per_system_min_eig[0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn skew_part_does_not_change_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let d = rng.random_range(1..5);
            let systems: Vec<_> = (0..3).map(|_| random_system(d, &mut rng)).collect();
            let p = PolicyParams::new(systems.clone(), net(d, 3, &mut rng), vec![0.0; d], 1e-6)
                .unwrap();
            let no_c: Vec<_> = systems
                .iter()
                .map(|s| s.with_c(Matrix::zeros(d, d)).unwrap())
                .collect();
            let q = p.with_systems(no_c).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let s = StateVector::controllable_only(x).unwrap();
            let (a, b) = (lyapunov_rate(&p, &s).unwrap(), lyapunov_rate(&q, &s).unwrap());
            assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let systems = (0..2).map(|_| random_system(3, &mut rng)).collect();
        let p = PolicyParams::new(systems, net(3, 2, &mut rng), vec![1.0, 2.0, 3.0], 1e-6).unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.num_parameters());
        assert_eq!(p.unflatten(&flat).unwrap(), p);
        assert!(p.unflatten(&flat[1..]).is_err());
    }

    #[test]
    fn taped_velocity_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let systems = (0..4).map(|_| random_system(2, &mut rng)).collect();
        let p = PolicyParams::new(systems, net(2, 4, &mut rng), vec![0.3, 0.1], 1e-6).unwrap();
        let states: Vec<StateVector> = (0..7)
            .map(|i| StateVector::controllable_only(vec![i as f64 * 0.3 - 1.0, 0.5]).unwrap())
            .collect();
        let refs: Vec<&StateVector> = states.iter().collect();
        let mut tape = Tape::new();
        let blocks = p.bind(&mut tape);
        let v = p.velocity_graph(&mut tape, &blocks, &refs).unwrap();
        let taped = tape.value(v).data().to_vec();
        for (i, s) in states.iter().enumerate() {
            let plain = policy_eval(&p, s).unwrap();
            for k in 0..2 {
                assert!((plain[k] - taped[i * 2 + k]).abs() < 1e-12);
            }
        }
    }
}
