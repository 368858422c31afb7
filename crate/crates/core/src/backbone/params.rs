use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::{seeded_rng, Error, Real, Result};

/// Anything that exposes an ordered list of named parameter tensors.
pub trait ParamSet<F: Real> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)>;

    /// Mutable views in the same order as [`ParamSet::tensors`].
    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter().map(|v| v.f64() * v.f64()).collect::<Vec<_>>())
            .sum()
    }

    fn scale(&mut self, factor: F) {
        for mut t in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    /// Name of the first tensor holding a NaN or infinity.
    fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Conditioning columns per frame (semantic + mel state + prosody).
    pub input_dim: usize,
    /// Mel dimension of the predicted vector field.
    pub output_dim: usize,
    pub width: usize,
    /// Columns reserved for the projected time embedding.
    pub time_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl BackboneConfig {
    /// Desk-scale default: two attention blocks of width 64.
    pub fn desk(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            width: 64,
            time_dim: 16,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("backbone config: {m}")));
        if self.input_dim == 0 || self.output_dim == 0 {
            return bad("input and output dims must be positive");
        }
        if self.layers == 0 {
            return bad("need at least one layer");
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return bad("time_dim must be even and positive");
        }
        if self.width <= self.time_dim || !(self.width - self.time_dim).is_multiple_of(2) {
            return bad("width must exceed time_dim by an even amount");
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad("width must be divisible by heads");
        }
        if self.ffn_dim == 0 {
            return bad("ffn_dim must be positive");
        }
        Ok(())
    }

    /// Width of the projected frame features before the time columns.
    pub fn proj_dim(&self) -> usize {
        self.width - self.time_dim
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<F> {
    pub ln1_gamma: Array1<F>,
    pub ln1_beta: Array1<F>,
    pub qkv_w: Array2<F>,
    pub qkv_b: Array1<F>,
    pub attn_out_w: Array2<F>,
    pub attn_out_b: Array1<F>,
    pub ln2_gamma: Array1<F>,
    pub ln2_beta: Array1<F>,
    pub ff1_w: Array2<F>,
    pub ff1_b: Array1<F>,
    pub ff2_w: Array2<F>,
    pub ff2_b: Array1<F>,
}

/// Weights of the vector-field network. The same struct doubles as the
/// gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<F> {
    pub config: BackboneConfig,
    pub in_w: Array2<F>,
    pub in_b: Array1<F>,
    pub time_w: Array2<F>,
    pub time_b: Array1<F>,
    pub blocks: Vec<BlockParams<F>>,
    pub lnf_gamma: Array1<F>,
    pub lnf_beta: Array1<F>,
    pub out_w: Array2<F>,
    pub out_b: Array1<F>,
}

fn uniform<F: Real>(rng: &mut crate::Rng, rows: usize, cols: usize) -> Array2<F> {
    let bound = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || F::of(rng.random_range(-bound..bound)))
}

impl<F: Real> NetworkParams<F> {
    /// Fan-in scaled uniform weights, unit LayerNorm gains, zero biases and a
    /// zero output projection (the initial vector field is identically zero).
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let w = config.width;
        let ones = || Array1::from_elem(w, F::one());
        let zeros = |n| Array1::zeros(n);
        let blocks = (0..config.layers)
            .map(|_| BlockParams {
                ln1_gamma: ones(),
                ln1_beta: zeros(w),
                qkv_w: uniform(&mut rng, w, 3 * w),
                qkv_b: zeros(3 * w),
                attn_out_w: uniform(&mut rng, w, w),
                attn_out_b: zeros(w),
                ln2_gamma: ones(),
                ln2_beta: zeros(w),
                ff1_w: uniform(&mut rng, w, config.ffn_dim),
                ff1_b: zeros(config.ffn_dim),
                ff2_w: uniform(&mut rng, config.ffn_dim, w),
                ff2_b: zeros(w),
            })
            .collect();
        Ok(Self {
            in_w: uniform(&mut rng, config.input_dim, config.proj_dim()),
            in_b: zeros(config.proj_dim()),
            time_w: uniform(&mut rng, config.time_dim, config.time_dim),
            time_b: zeros(config.time_dim),
            blocks,
            lnf_gamma: ones(),
            lnf_beta: zeros(w),
            out_w: Array2::zeros((w, config.output_dim)),
            out_b: zeros(config.output_dim),
            config,
        })
    }

    /// All-zero tensors with this network's shapes.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for mut t in z.tensors_mut() {
            t.fill(F::zero());
        }
        z
    }

    /// Overwrites the output projection with fan-in uniform weights; used by
    /// gradient checks, where the zero init would hide every inner gradient.
    pub fn randomize_output(&mut self, seed: u64) {
        let mut rng = seeded_rng(seed);
        self.out_w = uniform(&mut rng, self.config.width, self.config.output_dim);
        self.out_b = Array1::from_shape_simple_fn(self.config.output_dim, || {
            F::of(rng.random_range(-0.1..0.1))
        });
    }
}

impl<F: Real> ParamSet<F> for NetworkParams<F> {
    fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        let mut v: Vec<(String, ArrayViewD<'_, F>)> = vec![
            ("in.weight".into(), self.in_w.view().into_dyn()),
            ("in.bias".into(), self.in_b.view().into_dyn()),
            ("time.weight".into(), self.time_w.view().into_dyn()),
            ("time.bias".into(), self.time_b.view().into_dyn()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            v.push((p("ln1.gamma"), b.ln1_gamma.view().into_dyn()));
            v.push((p("ln1.beta"), b.ln1_beta.view().into_dyn()));
            v.push((p("attn.qkv.weight"), b.qkv_w.view().into_dyn()));
            v.push((p("attn.qkv.bias"), b.qkv_b.view().into_dyn()));
            v.push((p("attn.out.weight"), b.attn_out_w.view().into_dyn()));
            v.push((p("attn.out.bias"), b.attn_out_b.view().into_dyn()));
            v.push((p("ln2.gamma"), b.ln2_gamma.view().into_dyn()));
            v.push((p("ln2.beta"), b.ln2_beta.view().into_dyn()));
            v.push((p("ff1.weight"), b.ff1_w.view().into_dyn()));
            v.push((p("ff1.bias"), b.ff1_b.view().into_dyn()));
            v.push((p("ff2.weight"), b.ff2_w.view().into_dyn()));
            v.push((p("ff2.bias"), b.ff2_b.view().into_dyn()));
        }
        v.push(("final_ln.gamma".into(), self.lnf_gamma.view().into_dyn()));
        v.push(("final_ln.beta".into(), self.lnf_beta.view().into_dyn()));
        v.push(("out.weight".into(), self.out_w.view().into_dyn()));
        v.push(("out.bias".into(), self.out_b.view().into_dyn()));
        v
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, F>> {
        let mut v = vec![
            self.in_w.view_mut().into_dyn(),
            self.in_b.view_mut().into_dyn(),
            self.time_w.view_mut().into_dyn(),
            self.time_b.view_mut().into_dyn(),
        ];
        for b in &mut self.blocks {
            v.push(b.ln1_gamma.view_mut().into_dyn());
            v.push(b.ln1_beta.view_mut().into_dyn());
            v.push(b.qkv_w.view_mut().into_dyn());
            v.push(b.qkv_b.view_mut().into_dyn());
            v.push(b.attn_out_w.view_mut().into_dyn());
            v.push(b.attn_out_b.view_mut().into_dyn());
            v.push(b.ln2_gamma.view_mut().into_dyn());
            v.push(b.ln2_beta.view_mut().into_dyn());
            v.push(b.ff1_w.view_mut().into_dyn());
            v.push(b.ff1_b.view_mut().into_dyn());
            v.push(b.ff2_w.view_mut().into_dyn());
            v.push(b.ff2_b.view_mut().into_dyn());
        }
        v.push(self.lnf_gamma.view_mut().into_dyn());
        v.push(self.lnf_beta.view_mut().into_dyn());
        v.push(self.out_w.view_mut().into_dyn());
        v.push(self.out_b.view_mut().into_dyn());
        v
    }
}
