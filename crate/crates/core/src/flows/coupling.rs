//! Affine coupling layers and stacks of them.
//!
//! One layer splits the coordinates by a binary mask, leaves the masked part
//! untouched, and rewrites the rest as `z_b * exp(s(z_a)) + t(z_a)`. The
//! log-scale `s` is the output of a tanh-headed network times `scale_cap`, so
//! it is bounded and the map stays numerically invertible. Stacking layers
//! with alternating masks lets every coordinate be transformed.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::neural::{
    GradientTape, HiddenActivation, Mlp, OutputActivation, Scratch,
};

/// One Real-NVP-style affine coupling layer.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    dim: usize,
    mask: Vec<bool>,
    pass_idx: Vec<usize>,
    change_idx: Vec<usize>,
    scale_net: Mlp,
    translate_net: Mlp,
    scale_cap: f64,
}

/// Reusable buffers for coupling forward/inverse passes.
#[derive(Debug, Default, Clone)]
pub struct CouplingScratch {
    za: Vec<f64>,
    s: Vec<f64>,
    t: Vec<f64>,
    mlp: Scratch,
}

/// Gradients for one coupling layer's two subnetworks.
#[derive(Debug, Clone)]
pub struct CouplingTape {
    pub scale: GradientTape,
    pub translate: GradientTape,
}

impl CouplingLayer {
    /// Seeded layer; subnet output layers start at zero so the layer is the
    /// identity map until trained.
    pub fn new(
        dim: usize,
        mask: Vec<bool>,
        subnet_hidden: &[usize],
        scale_cap: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if dim < 2 || mask.len() != dim {
            return Err(Error::InvalidParameter(format!(
                "coupling layer needs dim >= 2 and a mask of that length (dim {dim})"
            )));
        }
        let pass: usize = mask.iter().filter(|&&b| b).count();
        let change = dim - pass;
        if pass == 0 || change == 0 {
            return Err(Error::InvalidParameter(
                "coupling mask must keep and change at least one coordinate".into(),
            ));
        }
        if !(scale_cap > 0.0) {
            return Err(Error::InvalidParameter("scale_cap must be positive".into()));
        }
        let mut sizes = Vec::with_capacity(subnet_hidden.len() + 2);
        sizes.push(pass);
        sizes.extend_from_slice(subnet_hidden);
        sizes.push(change);
        let mut scale_net = Mlp::new(
            &sizes,
            HiddenActivation::LeakyRelu,
            OutputActivation::Tanh,
            rng,
        )?;
        let mut translate_net = Mlp::new(
            &sizes,
            HiddenActivation::LeakyRelu,
            OutputActivation::Identity,
            rng,
        )?;
        scale_net.zero_output_layer();
        translate_net.zero_output_layer();
        let pass_idx = (0..dim).filter(|&i| mask[i]).collect();
        let change_idx = (0..dim).filter(|&i| !mask[i]).collect();
        Ok(CouplingLayer {
            dim,
            mask,
            pass_idx,
            change_idx,
            scale_net,
            translate_net,
            scale_cap,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn scale_cap(&self) -> f64 {
        self.scale_cap
    }

    pub fn scale_net(&self) -> &Mlp {
        &self.scale_net
    }

    pub fn translate_net(&self) -> &Mlp {
        &self.translate_net
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: z.len(),
                context: "coupling layer input",
            });
        }
        Ok(())
    }

    fn subnets(&self, scratch: &mut CouplingScratch, z: &[f64]) -> Result<()> {
        let pass = self.pass_idx.len();
        let change = self.change_idx.len();
        scratch.za.resize(pass, 0.0);
        scratch.s.resize(change, 0.0);
        scratch.t.resize(change, 0.0);
        for (k, &i) in self.pass_idx.iter().enumerate() {
            scratch.za[k] = z[i];
        }
        self.scale_net
            .forward_into(&scratch.za, &mut scratch.mlp, &mut scratch.s)?;
        for v in scratch.s.iter_mut() {
            *v *= self.scale_cap;
        }
        self.translate_net
            .forward_into(&scratch.za, &mut scratch.mlp, &mut scratch.t)?;
        Ok(())
    }

    /// In-place forward transform.
    pub fn forward_in_place(&self, z: &mut [f64], scratch: &mut CouplingScratch) -> Result<()> {
        self.check_dim(z)?;
        self.subnets(scratch, z)?;
        for (k, &i) in self.change_idx.iter().enumerate() {
            z[i] = z[i] * scratch.s[k].exp() + scratch.t[k];
        }
        Ok(())
    }

    /// In-place exact algebraic inverse.
    pub fn inverse_in_place(&self, z: &mut [f64], scratch: &mut CouplingScratch) -> Result<()> {
        self.check_dim(z)?;
        // The pass-through part is unchanged by forward, so the subnets see
        // the same inputs in both directions.
        self.subnets(scratch, z)?;
        for (k, &i) in self.change_idx.iter().enumerate() {
            z[i] = (z[i] - scratch.t[k]) * (-scratch.s[k]).exp();
        }
        Ok(())
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut out = z.to_vec();
        let mut scratch = CouplingScratch::default();
        self.forward_in_place(&mut out, &mut scratch)?;
        Ok(out)
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut out = z.to_vec();
        let mut scratch = CouplingScratch::default();
        self.inverse_in_place(&mut out, &mut scratch)?;
        Ok(out)
    }

    pub fn zero_tape(&self) -> CouplingTape {
        CouplingTape {
            scale: GradientTape::zeros_like(&self.scale_net),
            translate: GradientTape::zeros_like(&self.translate_net),
        }
    }

    /// Backward pass through the coupling algebra and both subnetworks.
    /// Accumulates parameter gradients into `tape` and returns the gradient
    /// with respect to the layer input.
    pub fn backward_accumulate(
        &self,
        input: &[f64],
        upstream: &[f64],
        tape: &mut CouplingTape,
    ) -> Result<Vec<f64>> {
        self.check_dim(input)?;
        if upstream.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: upstream.len(),
                context: "coupling upstream gradient",
            });
        }
        let pass = self.pass_idx.len();
        let change = self.change_idx.len();
        let mut za = vec![0.0; pass];
        for (k, &i) in self.pass_idx.iter().enumerate() {
            za[k] = input[i];
        }
        let s_cache = self.scale_net.forward_cached(&za)?;
        let t_cache = self.translate_net.forward_cached(&za)?;

        let mut input_grad = vec![0.0; self.dim];
        let mut ds = vec![0.0; change];
        let mut dt = vec![0.0; change];
        for (k, &i) in self.change_idx.iter().enumerate() {
            let s = self.scale_cap * s_cache.output()[k];
            let es = s.exp();
            let g = upstream[i];
            dt[k] = g;
            ds[k] = g * input[i] * es * self.scale_cap;
            input_grad[i] = g * es;
        }
        let mut s_tape = GradientTape::zeros_like(&self.scale_net);
        self.scale_net
            .backward_cached_into(&za, &s_cache, &ds, &mut s_tape)?;
        let mut t_tape = GradientTape::zeros_like(&self.translate_net);
        self.translate_net
            .backward_cached_into(&za, &t_cache, &dt, &mut t_tape)?;
        for (k, &i) in self.pass_idx.iter().enumerate() {
            input_grad[i] = upstream[i] + s_tape.input_grad[k] + t_tape.input_grad[k];
        }
        accumulate(&mut tape.scale, &s_tape);
        accumulate(&mut tape.translate, &t_tape);
        Ok(input_grad)
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut out = self.scale_net.flat_params();
        out.extend(self.translate_net.flat_params());
        out
    }

    fn param_count(&self) -> usize {
        self.scale_net.param_count() + self.translate_net.param_count()
    }

    fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let ns = self.scale_net.param_count();
        self.scale_net.set_flat_params(&flat[..ns])?;
        self.translate_net.set_flat_params(&flat[ns..])
    }
}

fn accumulate(into: &mut GradientTape, from: &GradientTape) {
    for (a, b) in into.weight_grads.iter_mut().zip(&from.weight_grads) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
    for (a, b) in into.bias_grads.iter_mut().zip(&from.bias_grads) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

/// A stack of coupling layers with alternating masks.
#[derive(Debug, Clone)]
pub struct FlowStack {
    dim: usize,
    layers: Vec<CouplingLayer>,
}

/// Parameter gradients for a whole stack.
#[derive(Debug, Clone)]
pub struct StackTape {
    pub layers: Vec<CouplingTape>,
}

impl StackTape {
    pub fn scale(&mut self, factor: f64) {
        for layer in self.layers.iter_mut() {
            layer.scale.scale(factor);
            layer.translate.scale(factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.scale.is_finite() && l.translate.is_finite())
    }

    /// Flat gradients in the same order as [`FlowStack::flat_params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.scale.flat());
            out.extend(layer.translate.flat());
        }
        out
    }
}

impl FlowStack {
    /// `n_layers` coupling layers over `dim` coordinates, masks alternating
    /// between even and odd positions.
    pub fn new(
        dim: usize,
        n_layers: usize,
        subnet_hidden: &[usize],
        scale_cap: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidParameter(format!(
                "flow stack needs dim >= 2, got {dim}"
            )));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let mask: Vec<bool> = (0..dim).map(|j| j % 2 == l % 2).collect();
            layers.push(CouplingLayer::new(
                dim,
                mask,
                subnet_hidden,
                scale_cap,
                rng,
            )?);
        }
        Ok(FlowStack { dim, layers })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidParameter(format!(
                "flow stack needs dim >= 2, got {dim}"
            )));
        }
        Ok(FlowStack {
            dim,
            layers: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn forward_in_place(&self, z: &mut [f64], scratch: &mut CouplingScratch) -> Result<()> {
        for layer in &self.layers {
            layer.forward_in_place(z, scratch)?;
        }
        Ok(())
    }

    pub fn inverse_in_place(&self, z: &mut [f64], scratch: &mut CouplingScratch) -> Result<()> {
        for layer in self.layers.iter().rev() {
            layer.inverse_in_place(z, scratch)?;
        }
        Ok(())
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut out = z.to_vec();
        let mut scratch = CouplingScratch::default();
        self.forward_in_place(&mut out, &mut scratch)?;
        Ok(out)
    }

    pub fn inverse(&self, z: &[f64]) -> Result<Vec<f64>> {
        let mut out = z.to_vec();
        let mut scratch = CouplingScratch::default();
        self.inverse_in_place(&mut out, &mut scratch)?;
        Ok(out)
    }

    /// Transforms many rows at once, layer-outer so each layer's weights stay
    /// cache-resident across the whole batch.
    pub fn forward_rows(&self, rows: &mut [f64]) -> Result<()> {
        self.rows_pass(rows, false)
    }

    pub fn inverse_rows(&self, rows: &mut [f64]) -> Result<()> {
        self.rows_pass(rows, true)
    }

    fn rows_pass(&self, rows: &mut [f64], inverse: bool) -> Result<()> {
        if rows.len() % self.dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: rows.len(),
                context: "row buffer not divisible by flow dim",
            });
        }
        let mut scratch = CouplingScratch::default();
        if inverse {
            for layer in self.layers.iter().rev() {
                for row in rows.chunks_mut(self.dim) {
                    layer.inverse_in_place(row, &mut scratch)?;
                }
            }
        } else {
            for layer in &self.layers {
                for row in rows.chunks_mut(self.dim) {
                    layer.forward_in_place(row, &mut scratch)?;
                }
            }
        }
        Ok(())
    }

    pub fn zero_tape(&self) -> StackTape {
        StackTape {
            layers: self.layers.iter().map(|l| l.zero_tape()).collect(),
        }
    }

    /// Chain rule through the whole stack. Accumulates parameter gradients
    /// into `tape`; returns the gradient with respect to the stack input.
    pub fn backward_accumulate(
        &self,
        input: &[f64],
        upstream: &[f64],
        tape: &mut StackTape,
    ) -> Result<Vec<f64>> {
        if input.len() != self.dim || upstream.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: input.len(),
                context: "stack backward input",
            });
        }
        // Re-run forward, keeping each layer's input.
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut cur = input.to_vec();
        let mut scratch = CouplingScratch::default();
        for layer in &self.layers {
            layer_inputs.push(cur.clone());
            layer.forward_in_place(&mut cur, &mut scratch)?;
        }
        let mut grad = upstream.to_vec();
        for (layer, layer_input, layer_tape) in self
            .layers
            .iter()
            .zip(layer_inputs.iter())
            .zip(tape.layers.iter_mut())
            .map(|((l, i), t)| (l, i, t))
            .rev()
        {
            grad = layer.backward_accumulate(layer_input, &grad, layer_tape)?;
        }
        Ok(grad)
    }

    /// Flat parameters over all layers, `[scale, translate]` per layer.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend(layer.flat_params());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: flat.len(),
                context: "stack flat parameters",
            });
        }
        let mut idx = 0;
        for layer in self.layers.iter_mut() {
            let n = layer.param_count();
            layer.set_flat_params(&flat[idx..idx + n])?;
            idx += n;
        }
        Ok(())
    }
}
