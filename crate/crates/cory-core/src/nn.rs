//! A minimal trainable causal sequence model.
//!
//! Embedding -> trunk (gated recurrent, 1-2 layers, or single-head causal
//! attention) -> token logits head and scalar value head off the same last
//! hidden state. Parameters live in one flat vector with named slices;
//! gradients accumulate into a flat vector of the same shape. Backward is
//! written by hand per layer and checked against central finite differences
//! in the test suite.

use std::collections::HashMap;
use std::io::{Read as _, Write as _};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::mdp::{TokenId, TokenSeq};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("cotangent shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite gradient at parameter {index} ({slice})")]
    NonFiniteGradient { index: usize, slice: String },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Trunk selection. The recurrent trunk supports one or two layers; the
/// attention trunk is a single causal self-attention layer with learned
/// positional embeddings up to `max_seq`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrunkKind {
    Gru { layers: usize },
    Attn { max_seq: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelArch {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub trunk: TrunkKind,
}

impl ModelArch {
    pub fn gru(vocab_size: usize, embed_dim: usize, hidden_dim: usize, layers: usize) -> Self {
        assert!(
            layers == 1 || layers == 2,
            "gru trunk supports 1 or 2 layers"
        );
        Self {
            vocab_size,
            embed_dim,
            hidden_dim,
            trunk: TrunkKind::Gru { layers },
        }
    }

    pub fn attn(vocab_size: usize, embed_dim: usize, hidden_dim: usize, max_seq: usize) -> Self {
        Self {
            vocab_size,
            embed_dim,
            hidden_dim,
            trunk: TrunkKind::Attn { max_seq },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Slice {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Named partition of the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Layout {
    slices: Vec<Slice>,
    by_name: HashMap<String, usize>,
    total: usize,
}

impl Layout {
    fn build(arch: &ModelArch) -> Self {
        let (v, d, h) = (arch.vocab_size, arch.embed_dim, arch.hidden_dim);
        let mut slices = Vec::new();
        let mut off = 0usize;
        let push = |name: String, len: usize, off: &mut usize, slices: &mut Vec<Slice>| {
            slices.push(Slice {
                name,
                offset: *off,
                len,
            });
            *off += len;
        };
        push("embed".into(), v * d, &mut off, &mut slices);
        match arch.trunk {
            TrunkKind::Gru { layers } => {
                for l in 0..layers {
                    let input = if l == 0 { d } else { h };
                    for gate in ["z", "r", "n"] {
                        push(format!("gru{l}.w{gate}"), h * input, &mut off, &mut slices);
                        push(format!("gru{l}.u{gate}"), h * h, &mut off, &mut slices);
                        push(format!("gru{l}.b{gate}"), h, &mut off, &mut slices);
                    }
                }
            }
            TrunkKind::Attn { max_seq } => {
                push("attn.pos".into(), max_seq * d, &mut off, &mut slices);
                push("attn.wq".into(), h * d, &mut off, &mut slices);
                push("attn.wk".into(), h * d, &mut off, &mut slices);
                push("attn.wv".into(), h * d, &mut off, &mut slices);
                push("attn.wo".into(), h * h, &mut off, &mut slices);
                push("attn.bo".into(), h, &mut off, &mut slices);
            }
        }
        push("logits.w".into(), v * h, &mut off, &mut slices);
        push("logits.b".into(), v, &mut off, &mut slices);
        push("value.w".into(), h, &mut off, &mut slices);
        push("value.b".into(), 1, &mut off, &mut slices);
        let by_name = slices
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
        Self {
            slices,
            by_name,
            total: off,
        }
    }

    pub fn slices(&self) -> &[Slice] {
        &self.slices
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn range(&self, name: &str) -> Range<usize> {
        let s = &self.slices[self.by_name[name]];
        s.offset..s.offset + s.len
    }

    fn name_at(&self, index: usize) -> &str {
        self.slices
            .iter()
            .find(|s| index >= s.offset && index < s.offset + s.len)
            .map(|s| s.name.as_str())
            .unwrap_or("?")
    }
}

// Offsets resolved once so the inner loops avoid name lookups.
#[derive(Debug, Clone)]
struct GruOffsets {
    wz: usize,
    uz: usize,
    bz: usize,
    wr: usize,
    ur: usize,
    br: usize,
    wn: usize,
    un: usize,
    bn: usize,
    input: usize,
}

#[derive(Debug, Clone)]
struct AttnOffsets {
    pos: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
    max_seq: usize,
}

#[derive(Debug, Clone)]
enum TrunkOffsets {
    Gru(Vec<GruOffsets>),
    Attn(AttnOffsets),
}

#[derive(Debug, Clone)]
struct Offsets {
    embed: usize,
    trunk: TrunkOffsets,
    lw: usize,
    lb: usize,
    vw: usize,
    vb: usize,
}

impl Offsets {
    fn build(arch: &ModelArch, layout: &Layout) -> Self {
        let at = |name: &str| layout.range(name).start;
        let trunk = match arch.trunk {
            TrunkKind::Gru { layers } => TrunkOffsets::Gru(
                (0..layers)
                    .map(|l| GruOffsets {
                        wz: at(&format!("gru{l}.wz")),
                        uz: at(&format!("gru{l}.uz")),
                        bz: at(&format!("gru{l}.bz")),
                        wr: at(&format!("gru{l}.wr")),
                        ur: at(&format!("gru{l}.ur")),
                        br: at(&format!("gru{l}.br")),
                        wn: at(&format!("gru{l}.wn")),
                        un: at(&format!("gru{l}.un")),
                        bn: at(&format!("gru{l}.bn")),
                        input: if l == 0 {
                            arch.embed_dim
                        } else {
                            arch.hidden_dim
                        },
                    })
                    .collect(),
            ),
            TrunkKind::Attn { max_seq } => TrunkOffsets::Attn(AttnOffsets {
                pos: at("attn.pos"),
                wq: at("attn.wq"),
                wk: at("attn.wk"),
                wv: at("attn.wv"),
                wo: at("attn.wo"),
                bo: at("attn.bo"),
                max_seq,
            }),
        };
        Self {
            embed: at("embed"),
            trunk,
            lw: at("logits.w"),
            lb: at("logits.b"),
            vw: at("value.w"),
            vb: at("value.b"),
        }
    }
}

/// Flat trainable parameters plus an accumulation buffer for gradients.
#[derive(Debug, Clone)]
pub struct ParamStore {
    arch: ModelArch,
    layout: Layout,
    offsets: Offsets,
    params: Vec<f64>,
    grad: Vec<f64>,
}

/// Scale of the uniform init used for embedding and trunk weights.
pub const INIT_SCALE: f64 = 0.08;

impl ParamStore {
    pub fn new(arch: ModelArch) -> Self {
        let layout = Layout::build(&arch);
        let offsets = Offsets::build(&arch, &layout);
        let n = layout.total();
        Self {
            arch,
            layout,
            offsets,
            params: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    /// Small uniform init for embedding and trunk, zeros for both heads. A
    /// zero logits head makes the initial token policy exactly uniform.
    pub fn init_default(&mut self, rng: &mut impl Rng) {
        let slices: Vec<Slice> = self.layout.slices.clone();
        for s in slices {
            let head = s.name.starts_with("logits.") || s.name.starts_with("value.");
            for i in s.offset..s.offset + s.len {
                self.params[i] = if head {
                    0.0
                } else {
                    rng.gen_range(-INIT_SCALE..INIT_SCALE)
                };
            }
        }
    }

    /// Uniform init over every slice, heads included (used by gradient checks).
    pub fn init_uniform_all(&mut self, rng: &mut impl Rng, scale: f64) {
        for p in &mut self.params {
            *p = rng.gen_range(-scale..scale);
        }
    }

    pub fn arch(&self) -> &ModelArch {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn slice(&self, name: &str) -> &[f64] {
        &self.params[self.layout.range(name)]
    }

    pub fn slice_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self.layout.range(name);
        &mut self.params[r]
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn scale_grad(&mut self, s: f64) {
        self.grad.iter_mut().for_each(|g| *g *= s);
    }

    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    fn check_grad_finite(&self) -> Result<(), NnError> {
        if let Some(index) = self.grad.iter().position(|g| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient {
                index,
                slice: self.layout.name_at(index).to_string(),
            });
        }
        Ok(())
    }

    /// One plain gradient-ascent step; clears the gradient. Leaves the
    /// parameters untouched when the gradient is non-finite.
    pub fn sgd_step(&mut self, lr: f64) -> Result<(), NnError> {
        self.check_grad_finite()?;
        for (p, g) in self.params.iter_mut().zip(&self.grad) {
            *p += lr * g;
        }
        self.zero_grad();
        Ok(())
    }

    // ---- forward -----------------------------------------------------

    fn embed_token(&self, w: TokenId) -> Vec<f64> {
        let d = self.arch.embed_dim;
        let base = self.offsets.embed + w * d;
        self.params[base..base + d].to_vec()
    }

    fn gru_cell(&self, g: &GruOffsets, x: &[f64], h_prev: &[f64]) -> GruCell {
        let h = self.arch.hidden_dim;
        let p = &self.params;
        let mut z = vec![0.0; h];
        let mut r = vec![0.0; h];
        matvec(&p[g.wz..], h, g.input, x, &mut z);
        matvec_add(&p[g.uz..], h, h, h_prev, &mut z);
        add_bias(&p[g.bz..], &mut z);
        z.iter_mut().for_each(|a| *a = sigmoid(*a));
        matvec(&p[g.wr..], h, g.input, x, &mut r);
        matvec_add(&p[g.ur..], h, h, h_prev, &mut r);
        add_bias(&p[g.br..], &mut r);
        r.iter_mut().for_each(|a| *a = sigmoid(*a));
        let rh: Vec<f64> = r.iter().zip(h_prev).map(|(ri, hi)| ri * hi).collect();
        let mut n = vec![0.0; h];
        matvec(&p[g.wn..], h, g.input, x, &mut n);
        matvec_add(&p[g.un..], h, h, &rh, &mut n);
        add_bias(&p[g.bn..], &mut n);
        n.iter_mut().for_each(|a| *a = a.tanh());
        let hidden: Vec<f64> = (0..h)
            .map(|i| (1.0 - z[i]) * n[i] + z[i] * h_prev[i])
            .collect();
        GruCell {
            z,
            r,
            rh,
            n,
            h: hidden,
        }
    }

    fn attn_position(&self, a: &AttnOffsets, x: &[f64], prev: &[AttnPos]) -> AttnPos {
        let h = self.arch.hidden_dim;
        let d = self.arch.embed_dim;
        let p = &self.params;
        let mut q = vec![0.0; h];
        let mut k = vec![0.0; h];
        let mut v = vec![0.0; h];
        matvec(&p[a.wq..], h, d, x, &mut q);
        matvec(&p[a.wk..], h, d, x, &mut k);
        matvec(&p[a.wv..], h, d, x, &mut v);
        let scale = 1.0 / (h as f64).sqrt();
        let mut scores: Vec<f64> = prev.iter().map(|pi| dot(&q, &pi.k) * scale).collect();
        scores.push(dot(&q, &k) * scale);
        let alpha = crate::policy::softmax(&scores);
        let mut c = vec![0.0; h];
        for (i, ai) in alpha.iter().enumerate() {
            let vi = if i < prev.len() { &prev[i].v } else { &v };
            for (cj, vj) in c.iter_mut().zip(vi) {
                *cj += ai * vj;
            }
        }
        let mut u = vec![0.0; h];
        matvec(&p[a.wo..], h, h, &c, &mut u);
        add_bias(&p[a.bo..], &mut u);
        let hidden: Vec<f64> = u.iter().map(|ui| ui.tanh()).collect();
        AttnPos {
            q,
            k,
            v,
            alpha,
            c,
            h: hidden,
        }
    }

    fn heads(&self, hidden: &[f64]) -> (Vec<f64>, f64) {
        let (v, h) = (self.arch.vocab_size, self.arch.hidden_dim);
        let p = &self.params;
        let mut logits = vec![0.0; v];
        matvec(&p[self.offsets.lw..], v, h, hidden, &mut logits);
        add_bias(&p[self.offsets.lb..], &mut logits);
        let value = dot(&p[self.offsets.vw..self.offsets.vw + h], hidden) + p[self.offsets.vb];
        (logits, value)
    }

    /// Runs the model over the real tokens of `context`, producing one logits
    /// row and one value per position plus the activations backward needs.
    /// Pure in the parameters: identical inputs give bit-identical traces.
    pub fn forward(&self, context: &TokenSeq) -> ForwardTrace {
        assert!(context.real_len() >= 1, "forward needs at least one token");
        let tokens = context.real_tokens().to_vec();
        let mut decoder = Decoder::new(self);
        let mut logits = Vec::with_capacity(tokens.len());
        let mut values = Vec::with_capacity(tokens.len());
        for &w in &tokens {
            let (l, v) = decoder.step(w);
            logits.push(l);
            values.push(v);
        }
        ForwardTrace {
            tokens,
            logits,
            values,
            cache: decoder.into_cache(),
        }
    }

    // ---- backward ----------------------------------------------------

    /// Accumulates `d(sum upstream . outputs)/d params` into the gradient
    /// buffer. Never touches the parameters.
    pub fn backward(&mut self, trace: &ForwardTrace, upstream: &Upstream) -> Result<(), NnError> {
        let len = trace.tokens.len();
        if upstream.dlogits.len() != len {
            return Err(NnError::ShapeMismatch {
                expected: len,
                got: upstream.dlogits.len(),
            });
        }
        if upstream.dvalues.len() != len {
            return Err(NnError::ShapeMismatch {
                expected: len,
                got: upstream.dvalues.len(),
            });
        }
        for row in &upstream.dlogits {
            if row.len() != self.arch.vocab_size {
                return Err(NnError::ShapeMismatch {
                    expected: self.arch.vocab_size,
                    got: row.len(),
                });
            }
        }
        let (v, h) = (self.arch.vocab_size, self.arch.hidden_dim);
        let o = self.offsets.clone();

        // Heads first: collect d(hidden) per position.
        let mut dhidden: Vec<Vec<f64>> = vec![vec![0.0; h]; len];
        {
            for t in 0..len {
                let hid: &[f64] = match &trace.cache {
                    TraceCache::Gru(layers) => &layers.last().unwrap().cells[t].h,
                    TraceCache::Attn(cache) => &cache.positions[t].h,
                };
                let hid = hid.to_vec();
                let dl = &upstream.dlogits[t];
                let dv = upstream.dvalues[t];
                for row in 0..v {
                    let dlr = dl[row];
                    if dlr == 0.0 {
                        continue;
                    }
                    let wrow = o.lw + row * h;
                    for j in 0..h {
                        self.grad[wrow + j] += dlr * hid[j];
                        dhidden[t][j] += dlr * self.params[wrow + j];
                    }
                    self.grad[o.lb + row] += dlr;
                }
                if dv != 0.0 {
                    for j in 0..h {
                        self.grad[o.vw + j] += dv * hid[j];
                        dhidden[t][j] += dv * self.params[o.vw + j];
                    }
                    self.grad[o.vb] += dv;
                }
            }
        }

        // Trunk backward, producing d(embedded input) per position.
        let dx = match (&o.trunk, &trace.cache) {
            (TrunkOffsets::Gru(gs), TraceCache::Gru(layers)) => {
                let mut dinput = dhidden;
                for (g_off, cache) in gs.iter().zip(layers).rev() {
                    dinput = self.gru_backward(g_off, cache, dinput);
                }
                dinput
            }
            (TrunkOffsets::Attn(a), TraceCache::Attn(cache)) => {
                self.attn_backward(a, cache, dhidden)
            }
            _ => unreachable!("trace cache kind matches arch by construction"),
        };

        // Embedding (and positional) gradients.
        let d = self.arch.embed_dim;
        for (t, (&w, dxt)) in trace.tokens.iter().zip(&dx).enumerate() {
            let base = o.embed + w * d;
            for j in 0..d {
                self.grad[base + j] += dxt[j];
            }
            if let TrunkOffsets::Attn(a) = &o.trunk {
                let pbase = a.pos + t * d;
                for j in 0..d {
                    self.grad[pbase + j] += dxt[j];
                }
            }
        }
        Ok(())
    }

    fn gru_backward(
        &mut self,
        g: &GruOffsets,
        cache: &GruLayerCache,
        dh_out: Vec<Vec<f64>>,
    ) -> Vec<Vec<f64>> {
        let h = self.arch.hidden_dim;
        let len = cache.cells.len();
        let mut dx = vec![vec![0.0; g.input]; len];
        let mut carry = vec![0.0; h];
        let zero_h = vec![0.0; h];
        for t in (0..len).rev() {
            let cell = &cache.cells[t];
            let x = &cache.xs[t];
            let h_prev = if t == 0 {
                &zero_h
            } else {
                &cache.cells[t - 1].h
            };
            let mut dh = dh_out[t].clone();
            add_into(&mut dh, &carry);
            let mut dh_prev = vec![0.0; h];
            let mut dan = vec![0.0; h];
            let mut daz = vec![0.0; h];
            for i in 0..h {
                let dz = dh[i] * (h_prev[i] - cell.n[i]);
                let dn = dh[i] * (1.0 - cell.z[i]);
                dh_prev[i] = dh[i] * cell.z[i];
                dan[i] = dn * (1.0 - cell.n[i] * cell.n[i]);
                daz[i] = dz * cell.z[i] * (1.0 - cell.z[i]);
            }
            let mut drh = vec![0.0; h];
            matvec_t_add(&self.params[g.un..], h, h, &dan, &mut drh);
            outer_add(&mut self.grad[g.wn..], &dan, x, g.input);
            outer_add(&mut self.grad[g.un..], &dan, &cell.rh, h);
            add_into(&mut self.grad[g.bn..g.bn + h], &dan);
            let mut dar = vec![0.0; h];
            for i in 0..h {
                let dr = drh[i] * h_prev[i];
                dh_prev[i] += drh[i] * cell.r[i];
                dar[i] = dr * cell.r[i] * (1.0 - cell.r[i]);
            }
            outer_add(&mut self.grad[g.wz..], &daz, x, g.input);
            outer_add(&mut self.grad[g.uz..], &daz, h_prev, h);
            add_into(&mut self.grad[g.bz..g.bz + h], &daz);
            outer_add(&mut self.grad[g.wr..], &dar, x, g.input);
            outer_add(&mut self.grad[g.ur..], &dar, h_prev, h);
            add_into(&mut self.grad[g.br..g.br + h], &dar);
            matvec_t_add(&self.params[g.uz..], h, h, &daz, &mut dh_prev);
            matvec_t_add(&self.params[g.ur..], h, h, &dar, &mut dh_prev);
            matvec_t_add(&self.params[g.wz..], h, g.input, &daz, &mut dx[t]);
            matvec_t_add(&self.params[g.wr..], h, g.input, &dar, &mut dx[t]);
            matvec_t_add(&self.params[g.wn..], h, g.input, &dan, &mut dx[t]);
            carry = dh_prev;
        }
        dx
    }

    fn attn_backward(
        &mut self,
        a: &AttnOffsets,
        cache: &AttnLayerCache,
        dh_out: Vec<Vec<f64>>,
    ) -> Vec<Vec<f64>> {
        let h = self.arch.hidden_dim;
        let d = self.arch.embed_dim;
        let len = cache.xs.len();
        let scale = 1.0 / (h as f64).sqrt();
        let mut dq = vec![vec![0.0; h]; len];
        let mut dk = vec![vec![0.0; h]; len];
        let mut dv = vec![vec![0.0; h]; len];
        for t in (0..len).rev() {
            let pos = &cache.positions[t];
            let mut du = vec![0.0; h];
            for i in 0..h {
                du[i] = dh_out[t][i] * (1.0 - pos.h[i] * pos.h[i]);
            }
            let mut dc = vec![0.0; h];
            matvec_t_add(&self.params[a.wo..], h, h, &du, &mut dc);
            outer_add(&mut self.grad[a.wo..], &du, &pos.c, h);
            add_into(&mut self.grad[a.bo..a.bo + h], &du);
            let mut dalpha = vec![0.0; t + 1];
            for i in 0..=t {
                dalpha[i] = dot(&dc, &cache.positions[i].v);
                for j in 0..h {
                    dv[i][j] += pos.alpha[i] * dc[j];
                }
            }
            let dot_ad: f64 = pos.alpha.iter().zip(&dalpha).map(|(x, y)| x * y).sum();
            for i in 0..=t {
                let ds = pos.alpha[i] * (dalpha[i] - dot_ad) * scale;
                for j in 0..h {
                    dq[t][j] += ds * cache.positions[i].k[j];
                    dk[i][j] += ds * pos.q[j];
                }
            }
        }
        let mut dx = vec![vec![0.0; d]; len];
        for t in 0..len {
            let x = &cache.xs[t];
            outer_add(&mut self.grad[a.wq..], &dq[t], x, d);
            outer_add(&mut self.grad[a.wk..], &dk[t], x, d);
            outer_add(&mut self.grad[a.wv..], &dv[t], x, d);
            matvec_t_add(&self.params[a.wq..], h, d, &dq[t], &mut dx[t]);
            matvec_t_add(&self.params[a.wk..], h, d, &dk[t], &mut dx[t]);
            matvec_t_add(&self.params[a.wv..], h, d, &dv[t], &mut dx[t]);
        }
        dx
    }

    // ---- checkpoint io -------------------------------------------------

    /// Writes a checkpoint: text header (format version, dims, layout), then
    /// the flat parameters as little-endian 64-bit floats. Round trips are
    /// bit-exact.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), NnError> {
        let mut header = String::new();
        header.push_str("format cory-checkpoint 1\n");
        header.push_str(&format!("vocab_size {}\n", self.arch.vocab_size));
        header.push_str(&format!("embed_dim {}\n", self.arch.embed_dim));
        header.push_str(&format!("hidden_dim {}\n", self.arch.hidden_dim));
        match self.arch.trunk {
            TrunkKind::Gru { layers } => header.push_str(&format!("trunk gru {layers}\n")),
            TrunkKind::Attn { max_seq } => header.push_str(&format!("trunk attn {max_seq}\n")),
        }
        for s in self.layout.slices() {
            header.push_str(&format!("slice {} {} {}\n", s.name, s.offset, s.len));
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(b"CORYCKPT")?;
        f.write_all(&(header.len() as u32).to_le_bytes())?;
        f.write_all(header.as_bytes())?;
        f.write_all(&(self.params.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.params.len() * 8);
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, NnError> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != b"CORYCKPT" {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let mut len4 = [0u8; 4];
        f.read_exact(&mut len4)?;
        let hlen = u32::from_le_bytes(len4) as usize;
        let mut hbuf = vec![0u8; hlen];
        f.read_exact(&mut hbuf)?;
        let header = String::from_utf8(hbuf).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let mut vocab_size = None;
        let mut embed_dim = None;
        let mut hidden_dim = None;
        let mut trunk = None;
        for line in header.lines() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                ["format", "cory-checkpoint", "1"] => {}
                ["format", ..] => return Err(NnError::Checkpoint(format!("unsupported: {line}"))),
                ["vocab_size", n] => vocab_size = n.parse().ok(),
                ["embed_dim", n] => embed_dim = n.parse().ok(),
                ["hidden_dim", n] => hidden_dim = n.parse().ok(),
                ["trunk", "gru", l] => {
                    trunk = l.parse().ok().map(|layers| TrunkKind::Gru { layers })
                }
                ["trunk", "attn", m] => {
                    trunk = m.parse().ok().map(|max_seq| TrunkKind::Attn { max_seq })
                }
                ["slice", ..] => {}
                _ => return Err(NnError::Checkpoint(format!("bad header line: {line}"))),
            }
        }
        let arch = ModelArch {
            vocab_size: vocab_size
                .ok_or_else(|| NnError::Checkpoint("missing vocab_size".into()))?,
            embed_dim: embed_dim.ok_or_else(|| NnError::Checkpoint("missing embed_dim".into()))?,
            hidden_dim: hidden_dim
                .ok_or_else(|| NnError::Checkpoint("missing hidden_dim".into()))?,
            trunk: trunk.ok_or_else(|| NnError::Checkpoint("missing trunk".into()))?,
        };
        let mut store = ParamStore::new(arch);
        let mut len8 = [0u8; 8];
        f.read_exact(&mut len8)?;
        let count = u64::from_le_bytes(len8) as usize;
        if count != store.param_count() {
            return Err(NnError::Checkpoint(format!(
                "parameter count {count} does not match layout total {}",
                store.param_count()
            )));
        }
        let mut buf = vec![0u8; count * 8];
        f.read_exact(&mut buf)?;
        for (i, chunk) in buf.chunks_exact(8).enumerate() {
            store.params[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(store)
    }
}

struct GruCell {
    z: Vec<f64>,
    r: Vec<f64>,
    rh: Vec<f64>,
    n: Vec<f64>,
    h: Vec<f64>,
}

struct GruLayerCache {
    xs: Vec<Vec<f64>>,
    cells: Vec<GruCell>,
}

struct AttnPos {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    alpha: Vec<f64>,
    c: Vec<f64>,
    h: Vec<f64>,
}

struct AttnLayerCache {
    xs: Vec<Vec<f64>>,
    positions: Vec<AttnPos>,
}

enum TraceCache {
    Gru(Vec<GruLayerCache>),
    Attn(AttnLayerCache),
}

/// Cached activations and outputs of one forward pass.
pub struct ForwardTrace {
    tokens: Vec<TokenId>,
    pub logits: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    cache: TraceCache,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }
}

/// Cotangents for the declared outputs of a trace: one row per logits row and
/// one scalar per value.
pub struct Upstream {
    pub dlogits: Vec<Vec<f64>>,
    pub dvalues: Vec<f64>,
}

impl Upstream {
    pub fn zeros(len: usize, vocab: usize) -> Self {
        Self {
            dlogits: vec![vec![0.0; vocab]; len],
            dvalues: vec![0.0; len],
        }
    }
}

/// Incremental decoder: feeds tokens one at a time, returning the logits row
/// and value at each new position. Produces bit-identical outputs to
/// [`ParamStore::forward`] because both run the same cell code.
pub struct Decoder<'m> {
    model: &'m ParamStore,
    gru_layers: Vec<GruLayerCache>,
    attn: Option<AttnLayerCache>,
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m ParamStore) -> Self {
        match &model.offsets.trunk {
            TrunkOffsets::Gru(gs) => Self {
                model,
                gru_layers: gs
                    .iter()
                    .map(|_| GruLayerCache {
                        xs: Vec::new(),
                        cells: Vec::new(),
                    })
                    .collect(),
                attn: None,
            },
            TrunkOffsets::Attn(_) => Self {
                model,
                gru_layers: Vec::new(),
                attn: Some(AttnLayerCache {
                    xs: Vec::new(),
                    positions: Vec::new(),
                }),
            },
        }
    }

    pub fn len(&self) -> usize {
        match &self.attn {
            Some(a) => a.xs.len(),
            None => self.gru_layers[0].xs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Advances one position and returns (logits, value) there.
    pub fn step(&mut self, token: TokenId) -> (Vec<f64>, f64) {
        let m = self.model;
        let hidden = match &m.offsets.trunk {
            TrunkOffsets::Gru(gs) => {
                let mut x = m.embed_token(token);
                let h_dim = m.arch.hidden_dim;
                for (g, layer) in gs.iter().zip(&mut self.gru_layers) {
                    let h_prev = match layer.cells.last() {
                        Some(c) => c.h.clone(),
                        None => vec![0.0; h_dim],
                    };
                    let cell = m.gru_cell(g, &x, &h_prev);
                    let h_out = cell.h.clone();
                    layer.xs.push(x);
                    layer.cells.push(cell);
                    x = h_out;
                }
                x
            }
            TrunkOffsets::Attn(a) => {
                let cache = self.attn.as_mut().unwrap();
                let t = cache.xs.len();
                assert!(
                    t < a.max_seq,
                    "context exceeds positional table ({})",
                    a.max_seq
                );
                let d = m.arch.embed_dim;
                let mut x = m.embed_token(token);
                let pbase = a.pos + t * d;
                for (j, xj) in x.iter_mut().enumerate() {
                    *xj += m.params[pbase + j];
                }
                let pos = m.attn_position(a, &x, &cache.positions);
                let h_out = pos.h.clone();
                cache.xs.push(x);
                cache.positions.push(pos);
                h_out
            }
        };
        m.heads(&hidden)
    }

    fn into_cache(self) -> TraceCache {
        match self.attn {
            Some(a) => TraceCache::Attn(a),
            None => TraceCache::Gru(self.gru_layers),
        }
    }
}

/// Optimizer state. Plain gradient ascent by default; adaptive moments as a
/// configurable alternative. Either way the step direction is ascent and the
/// gradient buffer is cleared afterwards.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam {
        m: Vec<f64>,
        v: Vec<f64>,
        t: u64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Optimizer {
    pub fn sgd() -> Self {
        Optimizer::Sgd
    }

    pub fn adam(param_count: usize) -> Self {
        Optimizer::Adam {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<(), NnError> {
        match self {
            Optimizer::Sgd => store.sgd_step(lr),
            Optimizer::Adam {
                m,
                v,
                t,
                beta1,
                beta2,
                eps,
            } => {
                store.check_grad_finite()?;
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                for i in 0..store.params.len() {
                    let g = store.grad[i];
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g;
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    store.params[i] += lr * mhat / (vhat.sqrt() + *eps);
                }
                store.zero_grad();
                Ok(())
            }
        }
    }
}

// ---- small dense kernels ------------------------------------------------

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        out[r] = dot(&w[r * cols..r * cols + cols], x);
    }
}

fn matvec_add(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        out[r] += dot(&w[r * cols..r * cols + cols], x);
    }
}

// out[c] += sum_r w[r,c] * y[r]
fn matvec_t_add(w: &[f64], rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let yr = y[r];
        if yr == 0.0 {
            continue;
        }
        let row = &w[r * cols..r * cols + cols];
        for (o, wq) in out.iter_mut().zip(row) {
            *o += yr * wq;
        }
    }
}

// dw[r,c] += y[r] * x[c]
fn outer_add(dw: &mut [f64], y: &[f64], x: &[f64], cols: usize) {
    for (r, yr) in y.iter().enumerate() {
        if *yr == 0.0 {
            continue;
        }
        let row = &mut dw[r * cols..r * cols + cols];
        for (d, xc) in row.iter_mut().zip(x) {
            *d += yr * xc;
        }
    }
}

fn add_bias(b: &[f64], out: &mut [f64]) {
    for (o, bi) in out.iter_mut().zip(b) {
        *o += bi;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
