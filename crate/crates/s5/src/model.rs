//! Two-branch network: tokens and volume images are processed separately,
//! projected along the sequence axis to a common length, concatenated on
//! the feature axis, mixed by joint blocks, mean-pooled and mapped to
//! vocabulary logits.
//!
//! Every residual block computes `x + a * sigmoid(W a + b)` with
//! `a = gelu(s5(layer_norm(x)))`.

use std::ops::Range;

use lobgen_core::tokenizer::{HID, MSK, TOKENS_PER_MESSAGE, VOCAB_SIZE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scalar::{gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, log_softmax, sigmoid, Scalar};
use crate::ssm::{self, discretize_zoh, Discretized, SsmDims, SsmTape};

/// Examples per gradient chunk. Chunks are reduced in order, so the summed
/// gradient does not depend on the number of worker threads.
pub const EXAMPLES_PER_CHUNK: usize = 4;

pub const BLOCK_DESCRIPTION: &str = "x + a * sigmoid(W a + b), a = gelu(s5(layer_norm(x)))";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_messages: usize,
    pub vocab_size: usize,
    /// Hidden width of each branch; the joint blocks run at `2 h`.
    pub h: usize,
    /// State size of every S5 layer.
    pub m: usize,
    pub layers_msg: usize,
    /// The first book layer reads the raw `P + 1` features; any further
    /// ones are residual blocks at width `h`.
    pub layers_book: usize,
    pub layers_joint: usize,
    /// Common sequence length of both branches after projection.
    pub l: usize,
    /// Volume image width `P`.
    pub p: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default desk-scale configuration.
    pub fn desk() -> Self {
        ModelConfig {
            n_messages: 32,
            vocab_size: VOCAB_SIZE,
            h: 64,
            m: 64,
            layers_msg: 2,
            layers_book: 1,
            layers_joint: 3,
            l: 32,
            p: 200,
            seed: 0,
        }
    }

    /// Long-context preset with six S5 layers.
    pub fn large() -> Self {
        ModelConfig {
            n_messages: 500,
            h: 128,
            m: 128,
            l: 64,
            ..Self::desk()
        }
    }

    /// Smallest configuration, used for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            n_messages: 2,
            vocab_size: VOCAB_SIZE,
            h: 4,
            m: 4,
            layers_msg: 1,
            layers_book: 2,
            layers_joint: 1,
            l: 2,
            p: 6,
            seed: 0,
        }
    }

    pub fn seq_len(&self) -> usize {
        TOKENS_PER_MESSAGE * self.n_messages
    }

    pub fn book_features(&self) -> usize {
        self.p + 1
    }

    pub fn joint_width(&self) -> usize {
        2 * self.h
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
pub struct BlockLayout {
    pub width: usize,
    pub dims: SsmDims,
    pub ln_g: Range<usize>,
    pub ln_b: Range<usize>,
    pub ssm: Range<usize>,
    pub w: Range<usize>,
    pub b: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorInfo>,
    pub embed: Range<usize>,
    pub msg: Vec<BlockLayout>,
    pub book_dims: SsmDims,
    pub book_ssm: Range<usize>,
    pub book_w: Range<usize>,
    pub book_b: Range<usize>,
    pub book_blocks: Vec<BlockLayout>,
    pub proj_msg: Range<usize>,
    pub proj_book: Range<usize>,
    pub joint: Vec<BlockLayout>,
    pub final_g: Range<usize>,
    pub final_b: Range<usize>,
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
    /// Every `lambda_re` range, clamped after optimizer steps.
    pub lambda_re: Vec<Range<usize>>,
    pub total: usize,
}

struct Builder {
    tensors: Vec<TensorInfo>,
    total: usize,
    lambda_re: Vec<Range<usize>>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>) -> Range<usize> {
        let info = TensorInfo {
            name,
            shape,
            offset: self.total,
        };
        let r = info.range();
        self.total = r.end;
        self.tensors.push(info);
        r
    }

    fn ssm(&mut self, prefix: &str, dims: SsmDims) -> Range<usize> {
        let start = self.total;
        for (name, len) in dims.segments() {
            let r = self.add(format!("{prefix}.{name}"), vec![len]);
            if name == "lambda_re" {
                self.lambda_re.push(r);
            }
        }
        start..self.total
    }

    fn block(&mut self, prefix: &str, width: usize, m: usize) -> BlockLayout {
        let dims = SsmDims { h_in: width, h_out: width, m };
        BlockLayout {
            width,
            dims,
            ln_g: self.add(format!("{prefix}.ln_gain"), vec![width]),
            ln_b: self.add(format!("{prefix}.ln_bias"), vec![width]),
            ssm: self.ssm(&format!("{prefix}.s5"), dims),
            w: self.add(format!("{prefix}.gate_w"), vec![width, width]),
            b: self.add(format!("{prefix}.gate_b"), vec![width]),
        }
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut b = Builder {
            tensors: Vec::new(),
            total: 0,
            lambda_re: Vec::new(),
        };
        let (h, m, f) = (cfg.h, cfg.m, cfg.book_features());
        let embed = b.add("embed".into(), vec![cfg.vocab_size, h]);
        let msg = (0..cfg.layers_msg).map(|i| b.block(&format!("msg.{i}"), h, m)).collect();
        let book_dims = SsmDims { h_in: f, h_out: f, m };
        let book_ssm = b.ssm("book.s5", book_dims);
        let book_w = b.add("book.proj_w".into(), vec![h, f]);
        let book_b = b.add("book.proj_b".into(), vec![h]);
        let book_blocks = (1..cfg.layers_book.max(1))
            .map(|i| b.block(&format!("book.{i}"), h, m))
            .collect();
        let proj_msg = b.add("seq_proj.msg".into(), vec![cfg.l, cfg.seq_len()]);
        let proj_book = b.add("seq_proj.book".into(), vec![cfg.l, cfg.n_messages]);
        let jw = cfg.joint_width();
        let joint = (0..cfg.layers_joint).map(|i| b.block(&format!("joint.{i}"), jw, m)).collect();
        let final_g = b.add("final.ln_gain".into(), vec![jw]);
        let final_b = b.add("final.ln_bias".into(), vec![jw]);
        let head_w = b.add("head.w".into(), vec![cfg.vocab_size, jw]);
        let head_b = b.add("head.b".into(), vec![cfg.vocab_size]);
        Layout {
            tensors: b.tensors,
            embed,
            msg,
            book_dims,
            book_ssm,
            book_w,
            book_b,
            book_blocks,
            proj_msg,
            proj_book,
            joint,
            final_g,
            final_b,
            head_w,
            head_b,
            lambda_re: b.lambda_re,
            total: b.total,
        }
    }
}

/// One training or evaluation window.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// `22 n` tokens; the last message holds one `MSK` and trailing `HID`s.
    pub tokens: Vec<u32>,
    /// `n x (P + 1)` volume-image features.
    pub books: Vec<f32>,
    pub target: u32,
    /// Masked position within the last message.
    pub position: usize,
}

/// Discretized coefficients of every S5 layer for one parameter state.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    msg: Vec<Discretized<T>>,
    book: Discretized<T>,
    book_blocks: Vec<Discretized<T>>,
    joint: Vec<Discretized<T>>,
}

struct BlockTape<T> {
    x: Vec<T>,
    z: Vec<T>,
    stats: Vec<(T, T)>,
    ssm: SsmTape<T>,
    s: Vec<T>,
    a: Vec<T>,
    gate: Vec<T>,
}

struct Tape<T> {
    tokens: Vec<u32>,
    msg: Vec<BlockTape<T>>,
    x_msg: Vec<T>,
    feats: Vec<T>,
    book_ssm: SsmTape<T>,
    book_s: Vec<T>,
    book_a: Vec<T>,
    book_blocks: Vec<BlockTape<T>>,
    y_book: Vec<T>,
    joint: Vec<BlockTape<T>>,
    j_out: Vec<T>,
    final_stats: Vec<(T, T)>,
    pooled: Vec<T>,
}

/// Cached evaluation of everything that depends only on the first `n - 1`
/// messages and the book states.
#[derive(Debug, Clone)]
pub struct PrefixCache<T> {
    q_msg: Vec<T>,
    q_book: Vec<T>,
    states: Vec<(Vec<T>, Vec<T>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct S5Model<T> {
    pub cfg: ModelConfig,
    pub params: Vec<T>,
    layout_total: usize,
}

fn normal<T: Scalar>(rng: &mut ChaCha8Rng, scale: f64) -> T {
    T::c(scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
}

impl<T: Scalar> S5Model<T> {
    pub fn layout(&self) -> Layout {
        Layout::new(&self.cfg)
    }

    pub fn from_params(cfg: ModelConfig, params: Vec<T>) -> Self {
        let total = Layout::new(&cfg).total;
        assert_eq!(params.len(), total, "parameter count does not match config");
        S5Model {
            cfg,
            params,
            layout_total: total,
        }
    }

    pub fn init(cfg: ModelConfig) -> Self {
        let layout = Layout::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = vec![T::zero(); layout.total];
        let fill = |p: &mut [T], rng: &mut ChaCha8Rng, r: &Range<usize>, scale: f64| {
            for x in &mut p[r.clone()] {
                *x = normal(rng, scale);
            }
        };
        fill(&mut p, &mut rng, &layout.embed, 1.0);
        let blocks = layout.msg.iter().chain(&layout.book_blocks).chain(&layout.joint);
        for bl in blocks {
            p[bl.ln_g.clone()].fill(T::one());
            ssm::init_layer(bl.dims, &mut p[bl.ssm.clone()], &mut rng);
            fill(&mut p, &mut rng, &bl.w, (1.0 / bl.width as f64).sqrt());
        }
        ssm::init_layer(layout.book_dims, &mut p[layout.book_ssm.clone()], &mut rng);
        fill(&mut p, &mut rng, &layout.book_w, (1.0 / cfg.book_features() as f64).sqrt());
        fill(&mut p, &mut rng, &layout.proj_msg, (1.0 / cfg.seq_len() as f64).sqrt());
        fill(&mut p, &mut rng, &layout.proj_book, (1.0 / cfg.n_messages as f64).sqrt());
        p[layout.final_g.clone()].fill(T::one());
        // small head so the initial prediction is close to uniform
        fill(&mut p, &mut rng, &layout.head_w, 0.01 / (cfg.joint_width() as f64).sqrt());
        S5Model {
            cfg,
            params: p,
            layout_total: layout.total,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout_total
    }

    pub fn prepare(&self) -> Prepared<T> {
        let layout = self.layout();
        let disc = |r: &Range<usize>, dims: SsmDims| {
            let v = ssm::split(dims, &self.params[r.clone()]);
            discretize_zoh(v.lam_re, v.lam_im, v.log_dt)
        };
        Prepared {
            msg: layout.msg.iter().map(|b| disc(&b.ssm, b.dims)).collect(),
            book: disc(&layout.book_ssm, layout.book_dims),
            book_blocks: layout.book_blocks.iter().map(|b| disc(&b.ssm, b.dims)).collect(),
            joint: layout.joint.iter().map(|b| disc(&b.ssm, b.dims)).collect(),
        }
    }

    fn block_forward(
        &self,
        bl: &BlockLayout,
        disc: &Discretized<T>,
        x: Vec<T>,
        x0: Option<(&[T], &[T])>,
    ) -> (Vec<T>, BlockTape<T>) {
        let p = &self.params;
        let w = bl.width;
        let steps = x.len() / w;
        let mut z = vec![T::zero(); x.len()];
        let mut stats = vec![(T::zero(), T::zero()); steps];
        layer_norm(&x, w, &p[bl.ln_g.clone()], &p[bl.ln_b.clone()], &mut z, &mut stats);
        let mut s = vec![T::zero(); x.len()];
        let view = ssm::split(bl.dims, &p[bl.ssm.clone()]);
        let tape = ssm::ssm_forward(bl.dims, &view, disc, &z, x0, &mut s);
        let a: Vec<T> = s.iter().map(|&v| gelu(v)).collect();
        let mut gate = vec![T::zero(); x.len()];
        gemm(false, true, steps, w, w, T::one(), &a, &p[bl.w.clone()], T::zero(), &mut gate);
        let bias = &p[bl.b.clone()];
        for row in gate.chunks_exact_mut(w) {
            for (g, &b) in row.iter_mut().zip(bias) {
                *g = sigmoid(*g + b);
            }
        }
        let out: Vec<T> = x.iter().zip(&a).zip(&gate).map(|((&x, &a), &g)| x + a * g).collect();
        (
            out,
            BlockTape {
                x,
                z,
                stats,
                ssm: tape,
                s,
                a,
                gate,
            },
        )
    }

    /// Returns the gradient with respect to the block input.
    fn block_backward(&self, bl: &BlockLayout, disc: &Discretized<T>, t: &BlockTape<T>, dout: &[T], grad: &mut [T]) -> Vec<T> {
        let p = &self.params;
        let w = bl.width;
        let steps = dout.len() / w;
        let mut dx = dout.to_vec();
        let mut da = vec![T::zero(); dout.len()];
        let mut dpre = vec![T::zero(); dout.len()];
        for i in 0..dout.len() {
            let g = t.gate[i];
            da[i] = dout[i] * g;
            dpre[i] = dout[i] * t.a[i] * g * (T::one() - g);
        }
        gemm(true, false, w, w, steps, T::one(), &dpre, &t.a, T::one(), &mut grad[bl.w.clone()]);
        {
            let db = &mut grad[bl.b.clone()];
            for row in dpre.chunks_exact(w) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        gemm(false, false, steps, w, w, T::one(), &dpre, &p[bl.w.clone()], T::one(), &mut da);
        let ds: Vec<T> = da.iter().zip(&t.s).map(|(&d, &s)| d * gelu_grad(s)).collect();
        let mut dz = vec![T::zero(); dout.len()];
        {
            let view = ssm::split(bl.dims, &p[bl.ssm.clone()]);
            let mut gv = ssm::split_mut(bl.dims, &mut grad[bl.ssm.clone()]);
            ssm::ssm_backward(bl.dims, &view, disc, &t.ssm, &t.z, None, &ds, &mut gv, &mut dz);
        }
        let (lo, hi) = (bl.ln_g.start, bl.ln_b.end);
        let (dg, db) = grad[lo..hi].split_at_mut(w);
        layer_norm_backward(&t.x, w, &p[bl.ln_g.clone()], &t.stats, &dz, &mut dx, dg, db);
        dx
    }

    fn embed(&self, layout: &Layout, tokens: &[u32]) -> Vec<T> {
        let h = self.cfg.h;
        let e = &self.params[layout.embed.clone()];
        let mut x = Vec::with_capacity(tokens.len() * h);
        for &t in tokens {
            let t = t as usize;
            x.extend_from_slice(&e[t * h..(t + 1) * h]);
        }
        x
    }

    fn book_branch(&self, layout: &Layout, prep: &Prepared<T>, feats: Vec<T>) -> (Vec<T>, Tape<T>) {
        let (h, f, n) = (self.cfg.h, self.cfg.book_features(), self.cfg.n_messages);
        let p = &self.params;
        let mut s = vec![T::zero(); n * f];
        let view = ssm::split(layout.book_dims, &p[layout.book_ssm.clone()]);
        let book_ssm = ssm::ssm_forward(layout.book_dims, &view, &prep.book, &feats, None, &mut s);
        let a: Vec<T> = s.iter().map(|&v| gelu(v)).collect();
        let mut y = vec![T::zero(); n * h];
        gemm(false, true, n, h, f, T::one(), &a, &p[layout.book_w.clone()], T::zero(), &mut y);
        for row in y.chunks_exact_mut(h) {
            for (v, &b) in row.iter_mut().zip(&p[layout.book_b.clone()]) {
                *v += b;
            }
        }
        let mut blocks = Vec::new();
        for (bl, disc) in layout.book_blocks.iter().zip(&prep.book_blocks) {
            let (out, t) = self.block_forward(bl, disc, y, None);
            y = out;
            blocks.push(t);
        }
        let mut q = vec![T::zero(); self.cfg.l * h];
        gemm(false, false, self.cfg.l, h, n, T::one(), &p[layout.proj_book.clone()], &y, T::zero(), &mut q);
        let tape = Tape {
            tokens: Vec::new(),
            msg: Vec::new(),
            x_msg: Vec::new(),
            feats,
            book_ssm,
            book_s: s,
            book_a: a,
            book_blocks: blocks,
            y_book: y,
            joint: Vec::new(),
            j_out: Vec::new(),
            final_stats: Vec::new(),
            pooled: Vec::new(),
        };
        (q, tape)
    }

    /// Joint blocks, pooling and head on the projected branches.
    fn head(&self, layout: &Layout, prep: &Prepared<T>, q_msg: &[T], q_book: &[T], tape: Option<&mut Tape<T>>) -> Vec<T> {
        let (h, l, jw, v) = (self.cfg.h, self.cfg.l, self.cfg.joint_width(), self.cfg.vocab_size);
        let p = &self.params;
        let mut j = vec![T::zero(); l * jw];
        for r in 0..l {
            j[r * jw..r * jw + h].copy_from_slice(&q_msg[r * h..(r + 1) * h]);
            j[r * jw + h..(r + 1) * jw].copy_from_slice(&q_book[r * h..(r + 1) * h]);
        }
        let mut joint_tapes = Vec::new();
        for (bl, disc) in layout.joint.iter().zip(&prep.joint) {
            let (out, t) = self.block_forward(bl, disc, j, None);
            j = out;
            joint_tapes.push(t);
        }
        let mut z = vec![T::zero(); l * jw];
        let mut stats = vec![(T::zero(), T::zero()); l];
        layer_norm(&j, jw, &p[layout.final_g.clone()], &p[layout.final_b.clone()], &mut z, &mut stats);
        let inv_l = T::one() / T::from_usize(l).unwrap();
        let mut pooled = vec![T::zero(); jw];
        for row in z.chunks_exact(jw) {
            for (a, &b) in pooled.iter_mut().zip(row) {
                *a += b * inv_l;
            }
        }
        let mut logits = p[layout.head_b.clone()].to_vec();
        gemm(false, false, v, 1, jw, T::one(), &p[layout.head_w.clone()], &pooled, T::one(), &mut logits);
        if let Some(t) = tape {
            t.joint = joint_tapes;
            t.j_out = j;
            t.final_stats = stats;
            t.pooled = pooled;
        }
        logits
    }

    fn forward_tape(&self, layout: &Layout, prep: &Prepared<T>, ex: &Example) -> (Vec<T>, Tape<T>) {
        let cfg = &self.cfg;
        assert_eq!(ex.tokens.len(), cfg.seq_len(), "token window length");
        assert_eq!(ex.books.len(), cfg.n_messages * cfg.book_features(), "book window shape");
        let feats: Vec<T> = ex.books.iter().map(|&v| T::c(v as f64)).collect();
        let (q_book, mut tape) = self.book_branch(layout, prep, feats);
        let mut x = self.embed(layout, &ex.tokens);
        for (bl, disc) in layout.msg.iter().zip(&prep.msg) {
            let (out, t) = self.block_forward(bl, disc, x, None);
            x = out;
            tape.msg.push(t);
        }
        let mut q_msg = vec![T::zero(); cfg.l * cfg.h];
        gemm(false, false, cfg.l, cfg.h, cfg.seq_len(), T::one(), &self.params[layout.proj_msg.clone()], &x, T::zero(), &mut q_msg);
        tape.x_msg = x;
        tape.tokens = ex.tokens.clone();
        let logits = self.head(layout, prep, &q_msg, &q_book, Some(&mut tape));
        (logits, tape)
    }

    /// Logits for one window.
    pub fn forward(&self, prep: &Prepared<T>, ex: &Example) -> Vec<T> {
        self.forward_tape(&self.layout(), prep, ex).0
    }

    fn backward(&self, layout: &Layout, prep: &Prepared<T>, tape: &Tape<T>, dlogits: &[T], grad: &mut [T]) {
        let cfg = &self.cfg;
        let (h, l, jw, v, n, f) = (cfg.h, cfg.l, cfg.joint_width(), cfg.vocab_size, cfg.n_messages, cfg.book_features());
        let p = &self.params;
        gemm(false, false, v, jw, 1, T::one(), dlogits, &tape.pooled, T::one(), &mut grad[layout.head_w.clone()]);
        for (g, &d) in grad[layout.head_b.clone()].iter_mut().zip(dlogits) {
            *g += d;
        }
        let mut dpooled = vec![T::zero(); jw];
        gemm(true, false, jw, 1, v, T::one(), &p[layout.head_w.clone()], dlogits, T::zero(), &mut dpooled);
        let inv_l = T::one() / T::from_usize(l).unwrap();
        let dz: Vec<T> = (0..l * jw).map(|i| dpooled[i % jw] * inv_l).collect();
        let mut dj = vec![T::zero(); l * jw];
        {
            let (dg, db) = grad[layout.final_g.start..layout.final_b.end].split_at_mut(jw);
            layer_norm_backward(&tape.j_out, jw, &p[layout.final_g.clone()], &tape.final_stats, &dz, &mut dj, dg, db);
        }
        for ((bl, disc), t) in layout.joint.iter().zip(&prep.joint).zip(&tape.joint).rev() {
            dj = self.block_backward(bl, disc, t, &dj, grad);
        }
        let mut dq_msg = vec![T::zero(); l * h];
        let mut dq_book = vec![T::zero(); l * h];
        for r in 0..l {
            dq_msg[r * h..(r + 1) * h].copy_from_slice(&dj[r * jw..r * jw + h]);
            dq_book[r * h..(r + 1) * h].copy_from_slice(&dj[r * jw + h..(r + 1) * jw]);
        }

        // book branch
        let t_len = cfg.seq_len();
        gemm(false, true, l, n, h, T::one(), &dq_book, &tape.y_book, T::one(), &mut grad[layout.proj_book.clone()]);
        let mut dy = vec![T::zero(); n * h];
        gemm(true, false, n, h, l, T::one(), &p[layout.proj_book.clone()], &dq_book, T::zero(), &mut dy);
        for ((bl, disc), t) in layout.book_blocks.iter().zip(&prep.book_blocks).zip(&tape.book_blocks).rev() {
            dy = self.block_backward(bl, disc, t, &dy, grad);
        }
        gemm(true, false, h, f, n, T::one(), &dy, &tape.book_a, T::one(), &mut grad[layout.book_w.clone()]);
        for row in dy.chunks_exact(h) {
            for (g, &d) in grad[layout.book_b.clone()].iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut da = vec![T::zero(); n * f];
        gemm(false, false, n, f, h, T::one(), &dy, &p[layout.book_w.clone()], T::zero(), &mut da);
        let ds: Vec<T> = da.iter().zip(&tape.book_s).map(|(&d, &s)| d * gelu_grad(s)).collect();
        {
            let view = ssm::split(layout.book_dims, &p[layout.book_ssm.clone()]);
            let mut gv = ssm::split_mut(layout.book_dims, &mut grad[layout.book_ssm.clone()]);
            let mut dfeat = vec![T::zero(); n * f];
            ssm::ssm_backward(layout.book_dims, &view, &prep.book, &tape.book_ssm, &tape.feats, None, &ds, &mut gv, &mut dfeat);
        }

        // message branch
        gemm(false, true, l, t_len, h, T::one(), &dq_msg, &tape.x_msg, T::one(), &mut grad[layout.proj_msg.clone()]);
        let mut dx = vec![T::zero(); t_len * h];
        gemm(true, false, t_len, h, l, T::one(), &p[layout.proj_msg.clone()], &dq_msg, T::zero(), &mut dx);
        for ((bl, disc), t) in layout.msg.iter().zip(&prep.msg).zip(&tape.msg).rev() {
            dx = self.block_backward(bl, disc, t, &dx, grad);
        }
        let ge = &mut grad[layout.embed.clone()];
        for (k, &tok) in tape.tokens.iter().enumerate() {
            let row = &mut ge[tok as usize * h..(tok as usize + 1) * h];
            for (g, &d) in row.iter_mut().zip(&dx[k * h..(k + 1) * h]) {
                *g += d;
            }
        }
    }

    /// Cross-entropy of one window and its gradient, accumulated into
    /// `grad`.
    fn example_loss_grad(&self, layout: &Layout, prep: &Prepared<T>, ex: &Example, grad: &mut [T]) -> T {
        let (logits, tape) = self.forward_tape(layout, prep, ex);
        let mut logp = vec![T::zero(); logits.len()];
        log_softmax(&logits, &mut logp);
        let target = ex.target as usize;
        let mut d: Vec<T> = logp.iter().map(|&lp| lp.exp()).collect();
        d[target] -= T::one();
        self.backward(layout, prep, &tape, &d, grad);
        -logp[target]
    }

    /// Mean cross-entropy over `batch` and its gradient.
    pub fn loss_and_grad(&self, batch: &[Example]) -> (T, Vec<T>) {
        let layout = self.layout();
        let prep = self.prepare();
        let parts: Vec<(T, Vec<T>)> = batch
            .par_chunks(EXAMPLES_PER_CHUNK)
            .map(|chunk| {
                let mut g = vec![T::zero(); layout.total];
                let mut loss = T::zero();
                for ex in chunk {
                    loss += self.example_loss_grad(&layout, &prep, ex, &mut g);
                }
                (loss, g)
            })
            .collect();
        let mut loss = T::zero();
        let mut grad = vec![T::zero(); layout.total];
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        let scale = T::one() / T::from_usize(batch.len().max(1)).unwrap();
        for g in grad.iter_mut() {
            *g *= scale;
        }
        (loss * scale, grad)
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, batch: &[Example]) -> T {
        let layout = self.layout();
        let prep = self.prepare();
        let losses: Vec<T> = batch
            .par_iter()
            .map(|ex| {
                let (logits, _) = self.forward_tape(&layout, &prep, ex);
                let mut logp = vec![T::zero(); logits.len()];
                log_softmax(&logits, &mut logp);
                -logp[ex.target as usize]
            })
            .collect();
        let total: T = losses.into_iter().sum();
        total / T::from_usize(batch.len().max(1)).unwrap()
    }

    /// Runs everything that does not depend on the last message.
    /// `prefix_tokens` holds `22 (n - 1)` tokens, `books` `n x (P + 1)`.
    pub fn prefix_cache(&self, prep: &Prepared<T>, prefix_tokens: &[u32], books: &[f32]) -> PrefixCache<T> {
        let layout = self.layout();
        let cfg = &self.cfg;
        let t0 = cfg.seq_len() - TOKENS_PER_MESSAGE;
        assert_eq!(prefix_tokens.len(), t0, "prefix length");
        let feats: Vec<T> = books.iter().map(|&v| T::c(v as f64)).collect();
        let (q_book, _) = self.book_branch(&layout, prep, feats);
        let mut x = self.embed(&layout, prefix_tokens);
        let mut states = Vec::with_capacity(layout.msg.len());
        let m = cfg.m;
        for (bl, disc) in layout.msg.iter().zip(&prep.msg) {
            let (out, t) = self.block_forward(bl, disc, x, None);
            let last = t0.saturating_sub(1) * m;
            if t0 == 0 {
                states.push((vec![T::zero(); m], vec![T::zero(); m]));
            } else {
                states.push((t.ssm.x_re[last..last + m].to_vec(), t.ssm.x_im[last..last + m].to_vec()));
            }
            x = out;
        }
        let mut q_msg = vec![T::zero(); cfg.l * cfg.h];
        // first t0 columns of the row-major l x seq_len projection
        let proj = &self.params[layout.proj_msg.clone()];
        for r in 0..cfg.l {
            let row = &proj[r * cfg.seq_len()..r * cfg.seq_len() + t0];
            gemm(false, false, 1, cfg.h, t0, T::one(), row, &x, T::zero(), &mut q_msg[r * cfg.h..(r + 1) * cfg.h]);
        }
        PrefixCache { q_msg, q_book, states }
    }

    /// Logits for a window whose first `n - 1` messages were cached.
    pub fn logits_with_prefix(&self, prep: &Prepared<T>, cache: &PrefixCache<T>, last: &[u32]) -> Vec<T> {
        let layout = self.layout();
        let cfg = &self.cfg;
        let t0 = cfg.seq_len() - TOKENS_PER_MESSAGE;
        let mut x = self.embed(&layout, last);
        for ((bl, disc), (sr, si)) in layout.msg.iter().zip(&prep.msg).zip(&cache.states) {
            let (out, _) = self.block_forward(bl, disc, x, Some((sr, si)));
            x = out;
        }
        let mut q_msg = cache.q_msg.clone();
        let proj = &self.params[layout.proj_msg.clone()];
        for r in 0..cfg.l {
            let row = &proj[r * cfg.seq_len() + t0..(r + 1) * cfg.seq_len()];
            gemm(false, false, 1, cfg.h, TOKENS_PER_MESSAGE, T::one(), row, &x, T::one(), &mut q_msg[r * cfg.h..(r + 1) * cfg.h]);
        }
        self.head(&layout, prep, &q_msg, &cache.q_book, None)
    }

    /// Keeps every continuous-time eigenvalue strictly in the left half
    /// plane.
    pub fn clamp_stability(&mut self, max_re: T) {
        for r in self.layout().lambda_re {
            for v in &mut self.params[r] {
                if *v > max_re {
                    *v = max_re;
                }
            }
        }
    }
}

/// Window of uniformly random tokens and book features with a random
/// masked position, for calibration and gradient checks.
pub fn random_example(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Example {
    let mut tokens: Vec<u32> = (0..cfg.seq_len()).map(|_| rng.random_range(3..cfg.vocab_size as u32)).collect();
    let position = rng.random_range(0..TOKENS_PER_MESSAGE);
    let base = cfg.seq_len() - TOKENS_PER_MESSAGE;
    let target = tokens[base + position];
    tokens[base + position] = MSK;
    for t in &mut tokens[base + position + 1..] {
        *t = HID;
    }
    Example {
        tokens,
        books: (0..cfg.n_messages * cfg.book_features()).map(|_| rng.random_range(-3.0..3.0)).collect(),
        target,
        position,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_contiguous() {
        let cfg = ModelConfig::desk();
        let layout = Layout::new(&cfg);
        let mut end = 0;
        for t in &layout.tensors {
            assert_eq!(t.offset, end);
            end += t.len();
        }
        assert_eq!(end, layout.total);
        assert_eq!(layout.lambda_re.len(), 2 + 1 + 3);
    }

    #[test]
    fn logits_normalize_and_batch_order_is_irrelevant() {
        let cfg = ModelConfig { seed: 1, ..ModelConfig::tiny() };
        let model = S5Model::<f64>::init(cfg.clone());
        let prep = model.prepare();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_example(&cfg, &mut rng);
        let b = random_example(&cfg, &mut rng);
        let la = model.forward(&prep, &a);
        assert_eq!(la.len(), 12011);
        let mut lp = vec![0.0; la.len()];
        log_softmax(&la, &mut lp);
        assert!((lp.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-9);
        let (l1, g1) = model.loss_and_grad(&[a.clone(), b.clone()]);
        let (l2, g2) = model.loss_and_grad(&[b, a]);
        assert!((l1 - l2).abs() < 1e-12);
        assert!(g1.iter().zip(&g2).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn prefix_cache_matches_full_forward() {
        let cfg = ModelConfig {
            n_messages: 4,
            h: 8,
            m: 6,
            layers_msg: 2,
            layers_book: 2,
            layers_joint: 2,
            l: 3,
            p: 10,
            ..ModelConfig::tiny()
        };
        let model = S5Model::<f64>::init(cfg.clone());
        let prep = model.prepare();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ex = random_example(&cfg, &mut rng);
        let full = model.forward(&prep, &ex);
        let t0 = cfg.seq_len() - TOKENS_PER_MESSAGE;
        let cache = model.prefix_cache(&prep, &ex.tokens[..t0], &ex.books);
        let fast = model.logits_with_prefix(&prep, &cache, &ex.tokens[t0..]);
        let diff = full.iter().zip(&fast).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
    }
}
