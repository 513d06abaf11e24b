//! Generalized-attention transformer with the block-structured value matrix
//! `V = [[A, 0], [0, r]]`.
//!
//! A layer maps `Z = [X; Y]` to
//!
//! ```text
//! X' = X + A X M ĥ(B X, C X)
//! Y' = Y + r Y M ĥ(B X, C X)
//! ```
//!
//! where `M = diag(1, …, 1, 0)` removes the query column from the mixing, so
//! the query never attends to itself. The prediction for the query label at
//! layer ℓ is `−[Z_ℓ]_{d+1, n+1}`.

mod activation;
pub mod checkpoint;

pub use activation::{activation_apply, Activation, EXP_GUARD};

use crate::error::{contract, Result};
use crate::linalg::{Mat, Rng};

/// Top-left block of the value matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum ABlock {
    Zero,
    Full(Mat),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub a: ABlock,
    pub r: f64,
    pub b: Mat,
    pub c: Mat,
}

impl LayerParams {
    pub fn zeros(d: usize, full_a: bool) -> Self {
        LayerParams {
            a: if full_a { ABlock::Full(Mat::zeros(d, d)) } else { ABlock::Zero },
            r: 0.0,
            b: Mat::zeros(d, d),
            c: Mat::zeros(d, d),
        }
    }

    pub fn a_matrix(&self) -> Option<&Mat> {
        match &self.a {
            ABlock::Zero => None,
            ABlock::Full(a) => Some(a),
        }
    }

    /// `BᵀC`, the only combination of query and key weights the output depends on.
    pub fn bt_c(&self) -> Mat {
        self.b.t_matmul(&self.c).expect("validated shapes")
    }
}

/// Parameters for layers `0 … k`.
#[derive(Clone, Debug, PartialEq)]
pub struct TfParams {
    pub layers: Vec<LayerParams>,
}

impl TfParams {
    pub fn zeros(d: usize, num_layers: usize, full_a: bool) -> Self {
        TfParams { layers: (0..num_layers).map(|_| LayerParams::zeros(d, full_a)).collect() }
    }

    /// Entrywise i.i.d. `N(0, scale²)` initialization; `r` included.
    pub fn gaussian(d: usize, num_layers: usize, full_a: bool, scale: f64, rng: &mut Rng) -> Self {
        let mat = |rng: &mut Rng| Mat::from_fn(d, d, |_, _| scale * rng.normal());
        let layers = (0..num_layers)
            .map(|_| {
                let a = if full_a { ABlock::Full(mat(rng)) } else { ABlock::Zero };
                let r = scale * rng.normal();
                LayerParams { a, r, b: mat(rng), c: mat(rng) }
            })
            .collect();
        TfParams { layers }
    }

    pub fn d(&self) -> usize {
        self.layers.first().map_or(0, |l| l.b.rows())
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn has_full_a(&self) -> bool {
        self.layers.iter().any(|l| matches!(l.a, ABlock::Full(_)))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        if self.layers.is_empty() || d == 0 {
            return Err(contract("transformer needs at least one layer with d >= 1"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let square = |m: &Mat| m.shape() == (d, d) && m.is_finite();
            if !square(&l.b) || !square(&l.c) || l.a_matrix().is_some_and(|a| !square(a)) || !l.r.is_finite() {
                return Err(contract(format!("layer {i} parameters are not finite {d}x{d} blocks")));
            }
        }
        Ok(())
    }

    /// Flat view of every free parameter, layer by layer in the order
    /// `A (if full), r, B, C`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Some(a) = l.a_matrix() {
                out.extend_from_slice(a.as_slice());
            }
            out.push(l.r);
            out.extend_from_slice(l.b.as_slice());
            out.extend_from_slice(l.c.as_slice());
        }
        out
    }

    /// Inverse of [`TfParams::to_flat`] for parameters of the same structure.
    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        let mut fill = |m: &mut Mat| m.as_mut_slice().iter_mut().for_each(|v| *v = it.next().unwrap());
        for l in &mut self.layers {
            if let ABlock::Full(a) = &mut l.a {
                fill(a);
            }
            let mut r = Mat::zeros(1, 1);
            fill(&mut r);
            l.r = r[(0, 0)];
            fill(&mut l.b);
            fill(&mut l.c);
        }
    }
}

/// Every intermediate `Z_0 … Z_{k+1}` of a forward pass.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub zs: Vec<Mat>,
}

impl Trajectory {
    pub fn d(&self) -> usize {
        self.zs[0].rows() - 1
    }

    pub fn x(&self, layer: usize) -> Mat {
        let z = &self.zs[layer];
        Mat::from_fn(z.rows() - 1, z.cols(), |i, j| z[(i, j)])
    }

    pub fn y(&self, layer: usize) -> &[f64] {
        let z = &self.zs[layer];
        z.row(z.rows() - 1)
    }

    /// `[Z_ℓ]_{d+1, n+1}`, the raw query-label entry.
    pub fn query_entry(&self, layer: usize) -> f64 {
        *self.y(layer).last().unwrap()
    }
}

/// Predicted query label at `layer`: `−[Z_ℓ]_{d+1, n+1}`.
pub fn predict_at_layer(traj: &Trajectory, layer: usize) -> Result<f64> {
    if layer >= traj.zs.len() {
        return Err(contract(format!(
            "layer {layer} out of range 0..={}",
            traj.zs.len() - 1
        )));
    }
    Ok(-traj.query_entry(layer))
}

/// One layer applied to `z`.
pub fn layer_step(layer: &LayerParams, act: Activation, z: &Mat) -> Result<Mat> {
    let d = z.rows() - 1;
    let cols = z.cols();
    let x = Mat::from_fn(d, cols, |i, j| z[(i, j)]);
    let bx = layer.b.matmul(&x)?;
    let cx = layer.c.matmul(&x)?;
    let h = activation_apply(act, &bx, &cx)?;
    let n = cols - 1;

    // W = X M h and u = Y M h: only the first n rows of h contribute.
    let mix = |row: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; cols];
        for (i, &v) in row.iter().take(n).enumerate() {
            if v == 0.0 {
                continue;
            }
            for (o, &hij) in out.iter_mut().zip(h.row(i)) {
                *o += v * hij;
            }
        }
        out
    };

    let mut next = z.clone();
    let y_mix = mix(z.row(d));
    for (o, m) in next.row_mut(d).iter_mut().zip(&y_mix) {
        *o += layer.r * m;
    }
    if let Some(a) = layer.a_matrix() {
        let x_mix = Mat::from_vec(d, cols, (0..d).flat_map(|i| mix(x.row(i))).collect())?;
        let update = a.matmul(&x_mix)?;
        for i in 0..d {
            for (o, &u) in next.row_mut(i).iter_mut().zip(update.row(i)) {
                *o += u;
            }
        }
    }
    Ok(next)
}

/// Runs all layers from `z0`, keeping every intermediate state.
pub fn forward(params: &TfParams, act: Activation, z0: &Mat) -> Result<Trajectory> {
    params.validate()?;
    let d = params.d();
    if z0.rows() != d + 1 || z0.cols() < 2 {
        return Err(contract(format!(
            "input is {:?}, expected {} rows and at least 2 columns",
            z0.shape(),
            d + 1
        )));
    }
    let mut zs = Vec::with_capacity(params.num_layers() + 1);
    zs.push(z0.clone());
    for layer in &params.layers {
        let next = layer_step(layer, act, zs.last().unwrap())?;
        zs.push(next);
    }
    Ok(Trajectory { zs })
}

/// Forward pass on `[x; y_full]` with the query label left in place.
pub fn forward_unmasked(params: &TfParams, act: Activation, x: &Mat, y_full: &[f64]) -> Result<Trajectory> {
    if y_full.len() != x.cols() {
        return Err(contract(format!("{} labels for {} columns", y_full.len(), x.cols())));
    }
    let (d, cols) = x.shape();
    let mut z = Mat::zeros(d + 1, cols);
    for i in 0..d {
        z.row_mut(i).copy_from_slice(x.row(i));
    }
    z.row_mut(d).copy_from_slice(y_full);
    forward(params, act, &z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::assemble_prompt;

    fn one_demo_prompt() -> crate::data::Prompt {
        // d = 2, n = 1: demo e1 with label 2, query e1.
        let x = Mat::from_rows(&[&[1.0, 1.0], &[0.0, 0.0]]);
        assemble_prompt(x, vec![2.0, 5.0]).unwrap()
    }

    fn fgd_layer(d: usize, rate: f64) -> LayerParams {
        LayerParams { a: ABlock::Zero, r: -rate, b: Mat::identity(d), c: Mat::identity(d) }
    }

    #[test]
    fn zero_params_are_identity_map() {
        let p = one_demo_prompt();
        for full in [false, true] {
            let params = TfParams::zeros(2, 3, full);
            let traj = forward(&params, Activation::ExpDot, &p.z0).unwrap();
            assert_eq!(traj.zs.len(), 4);
            for z in &traj.zs {
                assert_eq!(z, &p.z0);
            }
            for l in 0..4 {
                assert_eq!(predict_at_layer(&traj, l).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn one_gradient_step_by_hand() {
        // Y₁ query entry = 0 + r · y⁽¹⁾ · K(e1, e1) = −0.5 · 2 · 1.
        let p = one_demo_prompt();
        let params = TfParams { layers: vec![fgd_layer(2, 0.5)] };
        let traj = forward(&params, Activation::LinearDot, &p.z0).unwrap();
        assert_eq!(traj.query_entry(1), -1.0);
        assert_eq!(predict_at_layer(&traj, 0).unwrap(), 0.0);
        assert_eq!(predict_at_layer(&traj, 1).unwrap(), 1.0);
        assert!(predict_at_layer(&traj, 2).is_err());

        let unmasked = forward_unmasked(&params, Activation::LinearDot, &p.x, &p.y).unwrap();
        assert_eq!(unmasked.query_entry(1), traj.query_entry(1) + 5.0);
    }

    #[test]
    fn zero_a_keeps_covariates_fixed() {
        let mut rng = Rng::new(3);
        let params = TfParams::gaussian(3, 4, false, 0.5, &mut rng);
        let x = Mat::from_fn(3, 6, |_, _| rng.normal());
        let y = rng.normals(6);
        let traj = forward_unmasked(&params, Activation::MaskedSoftmax, &x, &y).unwrap();
        for l in 0..traj.zs.len() {
            assert_eq!(traj.x(l), x);
        }
    }

    #[test]
    fn softmax_step_rescales_exp_step() {
        // With B = C = I, the softmax update of column j equals the exp update
        // divided by that column's normalizer over the demonstrations.
        let mut rng = Rng::new(4);
        let (d, n) = (3, 5);
        let x = Mat::from_fn(d, n + 1, |_, _| rng.normal() * 0.5);
        let y = rng.normals(n + 1);
        let p = assemble_prompt(x.clone(), y).unwrap();
        let params = TfParams { layers: vec![fgd_layer(d, 0.3)] };
        let exp = forward(&params, Activation::ExpDot, &p.z0).unwrap();
        let soft = forward(&params, Activation::MaskedSoftmax, &p.z0).unwrap();
        let h = activation_apply(Activation::ExpDot, &x, &x).unwrap();
        for j in 0..=n {
            let tau: f64 = (0..n).map(|i| h[(i, j)]).sum();
            let du_exp = exp.y(1)[j] - exp.y(0)[j];
            let du_soft = soft.y(1)[j] - soft.y(0)[j];
            assert!((du_exp / tau - du_soft).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = Rng::new(5);
        let params = TfParams::gaussian(2, 2, true, 1.0, &mut rng);
        let flat = params.to_flat();
        assert_eq!(flat.len(), 2 * (4 + 1 + 4 + 4));
        let mut other = TfParams::zeros(2, 2, true);
        other.set_flat(&flat);
        assert_eq!(other, params);
    }

    #[test]
    fn rejects_bad_shapes() {
        let params = TfParams::zeros(2, 1, false);
        assert!(forward(&params, Activation::LinearDot, &Mat::zeros(4, 3)).is_err());
        let mut bad = params.clone();
        bad.layers[0].c = Mat::zeros(3, 3);
        assert!(forward(&bad, Activation::LinearDot, &Mat::zeros(3, 3)).is_err());
    }
}
