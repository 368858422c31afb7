//! Transformer vector field `v_t(x; theta)` with hand-written backprop.
//!
//! Frames are projected to `width - time_dim` columns, frame position
//! sinusoids are added, then the projected time embedding is concatenated and
//! broadcast to every frame. Pre-LN blocks with bidirectional multi-head
//! self-attention and a GELU feed-forward follow, then a final LayerNorm and
//! the (zero-initialized) output projection.
//!
//! Several independent sequences can be evaluated in one call: rows are
//! stacked and a [`Layout`] records each segment's rows and flow time.
//! Attention never crosses segment boundaries.

mod embed;
mod ops;
mod params;

pub use embed::{frame_positions, sinusoidal_time_embed, time_frequencies, TimeEmbedding};
pub use params::{BackboneConfig, BlockParams, NetworkParams, ParamSet};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Axis};

use crate::{real::all_finite, Error, Real, Result};
use ops::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_rows_backward, softmax_rows_inplace,
    LnCache,
};

/// Rows `start..start + len` of a stacked batch, evaluated at flow time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    segments: Vec<Segment>,
    rows: usize,
}

impl Layout {
    pub fn single(rows: usize, t: f64) -> Self {
        Self {
            segments: vec![Segment {
                start: 0,
                len: rows,
                t,
            }],
            rows,
        }
    }

    pub fn new(lengths: &[usize], times: &[f64]) -> Result<Self> {
        if lengths.len() != times.len() || lengths.is_empty() {
            return Err(Error::invalid("layout needs one time per segment"));
        }
        let mut start = 0;
        let mut segments = Vec::with_capacity(lengths.len());
        for (&len, &t) in lengths.iter().zip(times) {
            if len == 0 {
                return Err(Error::invalid("empty segment in layout"));
            }
            segments.push(Segment { start, len, t });
            start += len;
        }
        Ok(Self {
            segments,
            rows: start,
        })
    }

    /// Same segmentation, every segment at time `t`.
    pub fn at_time(&self, t: f64) -> Self {
        Self {
            segments: self.segments.iter().map(|s| Segment { t, ..*s }).collect(),
            rows: self.rows,
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.len).collect()
    }
}

struct BlockTape<F> {
    h_in: Array2<F>,
    ln1: LnCache<F>,
    a: Array2<F>,
    qkv: Array2<F>,
    probs: Vec<Array2<F>>,
    attn: Array2<F>,
    ln2: LnCache<F>,
    c: Array2<F>,
    z: Array2<F>,
    g: Array2<F>,
}

/// Activations saved by a forward pass for the matching backward pass.
pub struct ForwardTape<F> {
    input: Array2<F>,
    layout: Layout,
    time_sin: Vec<Array1<F>>,
    blocks: Vec<BlockTape<F>>,
    lnf: LnCache<F>,
    y: Array2<F>,
}

impl<F: Real> NetworkParams<F> {
    fn check(&self, input: &Array2<F>, layout: &Layout) -> Result<()> {
        if input.ncols() != self.config.input_dim {
            return Err(Error::shape(
                "backbone input columns",
                self.config.input_dim,
                input.ncols(),
            ));
        }
        if input.nrows() != layout.rows() || input.nrows() == 0 {
            return Err(Error::shape(
                "backbone input rows",
                layout.rows(),
                input.nrows(),
            ));
        }
        if let Some(s) = layout.segments.iter().find(|s| !(0.0..=1.0).contains(&s.t)) {
            return Err(Error::invalid(format!("flow time {} outside [0, 1]", s.t)));
        }
        if !all_finite(input) {
            return Err(Error::NonFinite("backbone input".into()));
        }
        Ok(())
    }

    fn embed_input(
        &self,
        input: &Array2<F>,
        layout: &Layout,
    ) -> Result<(Array2<F>, Vec<Array1<F>>)> {
        let cfg = &self.config;
        let pd = cfg.proj_dim();
        let mut h = Array2::zeros((input.nrows(), cfg.width));
        let mut xp = input.dot(&self.in_w);
        xp += &self.in_b;
        let max_len = layout.segments.iter().map(|s| s.len).max().unwrap_or(0);
        let pos = frame_positions(max_len, pd).mapv(F::of);
        let mut time_sin = Vec::with_capacity(layout.segments.len());
        for seg in &layout.segments {
            let rows = seg.start..seg.start + seg.len;
            let mut hp = h.slice_mut(s![rows.clone(), ..pd]);
            hp.assign(&xp.slice(s![rows.clone(), ..]));
            hp += &pos.slice(s![..seg.len, ..]);
            let sin: Array1<F> = sinusoidal_time_embed(seg.t, cfg.time_dim)?
                .embedding
                .into_iter()
                .map(F::of)
                .collect();
            let e = sin.dot(&self.time_w) + &self.time_b;
            h.slice_mut(s![rows, pd..]).assign(&e);
            time_sin.push(sin);
        }
        Ok((h, time_sin))
    }

    fn run(
        &self,
        input: &Array2<F>,
        layout: &Layout,
        keep: bool,
    ) -> Result<(Array2<F>, Option<ForwardTape<F>>)> {
        self.check(input, layout)?;
        let cfg = &self.config;
        let (w, dh) = (cfg.width, cfg.head_dim());
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let (mut h, time_sin) = self.embed_input(input, layout)?;
        let mut tapes = Vec::new();

        for blk in &self.blocks {
            let (a, ln1) = layer_norm(&h, &blk.ln1_gamma, &blk.ln1_beta);
            let mut qkv = a.dot(&blk.qkv_w);
            qkv += &blk.qkv_b;
            let mut attn = Array2::zeros((h.nrows(), w));
            let mut probs = Vec::new();
            for seg in &layout.segments {
                let r = seg.start..seg.start + seg.len;
                for hd in 0..cfg.heads {
                    let c = hd * dh..(hd + 1) * dh;
                    let v = qkv.slice(s![r.clone(), 2 * w + c.start..2 * w + c.end]);
                    let mut o = attn.slice_mut(s![r.clone(), c.clone()]);
                    if seg.len == 1 {
                        o.assign(&v);
                        if keep {
                            probs.push(Array2::ones((1, 1)));
                        }
                        continue;
                    }
                    let q = qkv.slice(s![r.clone(), c.clone()]);
                    let k = qkv.slice(s![r.clone(), w + c.start..w + c.end]);
                    let mut p = Array2::zeros((seg.len, seg.len));
                    general_mat_mul(scale, &q, &k.t(), F::zero(), &mut p);
                    softmax_rows_inplace(&mut p.view_mut());
                    general_mat_mul(F::one(), &p, &v, F::zero(), &mut o);
                    if keep {
                        probs.push(p);
                    }
                }
            }
            let mut h_mid = attn.dot(&blk.attn_out_w);
            h_mid += &blk.attn_out_b;
            h_mid += &h;

            let (c, ln2) = layer_norm(&h_mid, &blk.ln2_gamma, &blk.ln2_beta);
            let mut z = c.dot(&blk.ff1_w);
            z += &blk.ff1_b;
            let g = z.mapv(gelu);
            let mut h_out = g.dot(&blk.ff2_w);
            h_out += &blk.ff2_b;
            h_out += &h_mid;

            if keep {
                tapes.push(BlockTape {
                    h_in: h,
                    ln1,
                    a,
                    qkv,
                    probs,
                    attn,
                    ln2,
                    c,
                    z,
                    g,
                });
            }
            h = h_out;
        }

        let (y, lnf) = layer_norm(&h, &self.lnf_gamma, &self.lnf_beta);
        let mut out = y.dot(&self.out_w);
        out += &self.out_b;
        let tape = keep.then(|| ForwardTape {
            input: input.clone(),
            layout: layout.clone(),
            time_sin,
            blocks: tapes,
            lnf,
            y,
        });
        Ok((out, tape))
    }

    /// Evaluates the field on a stacked batch. Output rows equal input rows.
    pub fn forward_layout(&self, input: &Array2<F>, layout: &Layout) -> Result<Array2<F>> {
        Ok(self.run(input, layout, false)?.0)
    }

    /// Forward pass that also records the activations needed by
    /// [`NetworkParams::backward_tape`].
    pub fn forward_taped(
        &self,
        input: &Array2<F>,
        layout: &Layout,
    ) -> Result<(Array2<F>, ForwardTape<F>)> {
        let (out, tape) = self.run(input, layout, true)?;
        Ok((out, tape.expect("tape requested")))
    }

    /// Pulls `output_grad` back through a recorded pass. Returns parameter
    /// gradients and the gradient with respect to the input.
    pub fn backward_tape(
        &self,
        tape: ForwardTape<F>,
        output_grad: &Array2<F>,
    ) -> Result<(NetworkParams<F>, Array2<F>)> {
        let cfg = &self.config;
        if output_grad.dim() != (tape.input.nrows(), cfg.output_dim) {
            return Err(Error::shape(
                "backbone output gradient",
                format!("{}x{}", tape.input.nrows(), cfg.output_dim),
                format!("{}x{}", output_grad.nrows(), output_grad.ncols()),
            ));
        }
        let (w, dh, pd) = (cfg.width, cfg.head_dim(), cfg.proj_dim());
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut grads = self.zeros_like();

        grads.out_w = tape.y.t().dot(output_grad);
        grads.out_b = output_grad.sum_axis(Axis(0));
        let dy = output_grad.dot(&self.out_w.t());
        let (mut dh_cur, dg, db) = layer_norm_backward(&dy, &self.lnf_gamma, &tape.lnf);
        grads.lnf_gamma = dg;
        grads.lnf_beta = db;

        for (i, bt) in tape.blocks.into_iter().enumerate().rev() {
            let blk = &self.blocks[i];
            let gb = &mut grads.blocks[i];

            // feed-forward branch; dh_cur is d(h_out) and also d(h_mid) via the residual
            gb.ff2_w = bt.g.t().dot(&dh_cur);
            gb.ff2_b = dh_cur.sum_axis(Axis(0));
            let mut dz = dh_cur.dot(&blk.ff2_w.t());
            ndarray::Zip::from(&mut dz)
                .and(&bt.z)
                .for_each(|d, &z| *d *= gelu_grad(z));
            gb.ff1_w = bt.c.t().dot(&dz);
            gb.ff1_b = dz.sum_axis(Axis(0));
            let dc = dz.dot(&blk.ff1_w.t());
            let (dmid, g2, b2) = layer_norm_backward(&dc, &blk.ln2_gamma, &bt.ln2);
            gb.ln2_gamma = g2;
            gb.ln2_beta = b2;
            let dh_mid = dh_cur + dmid;

            // attention branch
            gb.attn_out_w = bt.attn.t().dot(&dh_mid);
            gb.attn_out_b = dh_mid.sum_axis(Axis(0));
            let dattn = dh_mid.dot(&blk.attn_out_w.t());
            let mut dqkv = Array2::<F>::zeros(bt.qkv.dim());
            let mut pi = 0;
            for seg in tape.layout.segments() {
                let r = seg.start..seg.start + seg.len;
                for hd in 0..cfg.heads {
                    let c = hd * dh..(hd + 1) * dh;
                    let vc = 2 * w + c.start..2 * w + c.end;
                    let p = &bt.probs[pi];
                    pi += 1;
                    let dout = dattn.slice(s![r.clone(), c.clone()]);
                    let mut dv = dqkv.slice_mut(s![r.clone(), vc.clone()]);
                    general_mat_mul(F::one(), &p.t(), &dout, F::zero(), &mut dv);
                    if seg.len == 1 {
                        continue;
                    }
                    let v = bt.qkv.slice(s![r.clone(), vc]);
                    let q = bt.qkv.slice(s![r.clone(), c.clone()]);
                    let k = bt.qkv.slice(s![r.clone(), w + c.start..w + c.end]);
                    let mut ds = dout.dot(&v.t());
                    softmax_rows_backward(&p.view(), &mut ds);
                    let mut dq = dqkv.slice_mut(s![r.clone(), c.clone()]);
                    general_mat_mul(scale, &ds, &k, F::zero(), &mut dq);
                    let mut dk = dqkv.slice_mut(s![r.clone(), w + c.start..w + c.end]);
                    general_mat_mul(scale, &ds.t(), &q, F::zero(), &mut dk);
                }
            }
            gb.qkv_w = bt.a.t().dot(&dqkv);
            gb.qkv_b = dqkv.sum_axis(Axis(0));
            let da = dqkv.dot(&blk.qkv_w.t());
            let (din, g1, b1) = layer_norm_backward(&da, &blk.ln1_gamma, &bt.ln1);
            gb.ln1_gamma = g1;
            gb.ln1_beta = b1;
            drop(bt.h_in);
            dh_cur = dh_mid + din;
        }

        // split into projected-frame and time columns
        let dxp = dh_cur.slice(s![.., ..pd]).to_owned();
        for (seg, sin) in tape.layout.segments().iter().zip(&tape.time_sin) {
            let de = dh_cur
                .slice(s![seg.start..seg.start + seg.len, pd..])
                .sum_axis(Axis(0));
            let outer = sin
                .view()
                .insert_axis(Axis(1))
                .dot(&de.view().insert_axis(Axis(0)));
            grads.time_w += &outer;
            grads.time_b += &de;
        }
        grads.in_w = tape.input.t().dot(&dxp);
        grads.in_b = dxp.sum_axis(Axis(0));
        let dinput = dxp.dot(&self.in_w.t());

        if let Some(name) = grads.first_non_finite() {
            return Err(Error::GradientDiverged(name));
        }
        Ok((grads, dinput))
    }
}

/// Evaluates the network on one sequence at flow time `t`.
pub fn forward<F: Real>(params: &NetworkParams<F>, input: &Array2<F>, t: f64) -> Result<Array2<F>> {
    params.forward_layout(input, &Layout::single(input.nrows(), t))
}

/// Parameter gradients of `sum(output * output_grad)` for one sequence.
pub fn backward<F: Real>(
    params: &NetworkParams<F>,
    input: &Array2<F>,
    t: f64,
    output_grad: &Array2<F>,
) -> Result<NetworkParams<F>> {
    let (_, tape) = params.forward_taped(input, &Layout::single(input.nrows(), t))?;
    Ok(params.backward_tape(tape, output_grad)?.0)
}

#[cfg(test)]
mod tests;
