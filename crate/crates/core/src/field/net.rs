//! Free-form backbones `F` with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat `Vec<f64>`; layers address it through
//! offsets, which keeps optimizer state, EMA and hashing trivial. Two
//! backbones exist: a small U-Net for real training and a per-pixel
//! two-unit network used to check gradients against finite differences.
//!
//! Every backbone sees two input channels, the scaled state `c_in * x` and
//! the condition image `y`, plus the scalar noise embedding `c_noise`.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::Rng;

/// Inputs of a single forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NetInput<'a> {
    pub n: usize,
    /// Preconditioned state `c_in * x_sigma`.
    pub x: &'a [f64],
    /// Condition image.
    pub y: &'a [f64],
    pub c_noise: f64,
}

/// Inverted dropout applied inside residual blocks during training.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut Rng,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub base_width: usize,
    /// Channel multiplier per resolution; one entry per level.
    pub mults: Vec<usize>,
    pub emb_dim: usize,
    /// Number of sinusoid frequencies in the noise embedding.
    pub freqs: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            mults: vec![1, 2],
            emb_dim: 32,
            freqs: 4,
        }
    }
}

/// Network architecture descriptor, stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    UNet(UNetConfig),
    /// `F = sum_j v_j tanh(a_j x + b_j y + c_j c_noise + d_j)` per pixel.
    Pixel { hidden: usize },
}

/// Saved activations needed by the backward pass.
pub enum Tape {
    UNet(Box<UNetTape>),
    Pixel(PixelTape),
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        match self {
            Arch::UNet(c) => {
                if c.base_width == 0 || c.emb_dim == 0 || c.mults.is_empty() || c.mults.contains(&0) {
                    return Err(invalid("U-Net widths and level count must be positive"));
                }
                Ok(())
            }
            Arch::Pixel { hidden } if *hidden == 0 => Err(invalid("pixel network needs hidden units")),
            Arch::Pixel { .. } => Ok(()),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Arch::UNet(c) => UNetLayout::new(c).total,
            Arch::Pixel { hidden } => 5 * hidden,
        }
    }

    /// Smallest image side the architecture can process.
    pub fn min_side(&self) -> usize {
        match self {
            Arch::UNet(c) => 1 << (c.mults.len() - 1),
            Arch::Pixel { .. } => 1,
        }
    }

    pub fn init(&self, rng: &mut Rng) -> Vec<f64> {
        match self {
            Arch::UNet(c) => UNetLayout::new(c).init(rng),
            Arch::Pixel { hidden } => {
                let normal = Normal::new(0.0, 0.5).unwrap();
                (0..5 * hidden).map(|_| normal.sample(rng)).collect()
            }
        }
    }

    /// Runs `F` and returns its output (one channel, `n * n` values).
    pub fn forward(&self, params: &[f64], input: &NetInput, dropout: Option<Dropout>) -> (Vec<f64>, Tape) {
        match self {
            Arch::UNet(c) => {
                let (out, tape) = UNetLayout::new(c).forward(params, input, dropout);
                (out, Tape::UNet(Box::new(tape)))
            }
            Arch::Pixel { hidden } => {
                let (out, tape) = pixel_forward(*hidden, params, input);
                (out, Tape::Pixel(tape))
            }
        }
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d F`.
    pub fn backward(&self, params: &[f64], tape: &Tape, grad_out: &[f64], grad: &mut [f64]) {
        match (self, tape) {
            (Arch::UNet(c), Tape::UNet(t)) => UNetLayout::new(c).backward(params, t, grad_out, grad),
            (Arch::Pixel { hidden }, Tape::Pixel(t)) => pixel_backward(*hidden, params, t, grad_out, grad),
            _ => panic!("tape does not belong to this architecture"),
        }
    }
}

// ---------------------------------------------------------------------------
// Pixel network

pub struct PixelTape {
    x: Vec<f64>,
    y: Vec<f64>,
    c_noise: f64,
    act: Vec<f64>,
}

fn pixel_forward(hidden: usize, p: &[f64], input: &NetInput) -> (Vec<f64>, PixelTape) {
    let len = input.x.len();
    let mut act = vec![0.0; hidden * len];
    let mut out = vec![0.0; len];
    for j in 0..hidden {
        let (a, b, c, d, v) = (p[j], p[hidden + j], p[2 * hidden + j], p[3 * hidden + j], p[4 * hidden + j]);
        for k in 0..len {
            let t = (a * input.x[k] + b * input.y[k] + c * input.c_noise + d).tanh();
            act[j * len + k] = t;
            out[k] += v * t;
        }
    }
    let tape = PixelTape {
        x: input.x.to_vec(),
        y: input.y.to_vec(),
        c_noise: input.c_noise,
        act,
    };
    (out, tape)
}

fn pixel_backward(hidden: usize, p: &[f64], t: &PixelTape, g: &[f64], grad: &mut [f64]) {
    let len = t.x.len();
    for j in 0..hidden {
        let v = p[4 * hidden + j];
        let (mut ga, mut gb, mut gc, mut gd, mut gv) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for k in 0..len {
            let a = t.act[j * len + k];
            gv += g[k] * a;
            let pre = g[k] * v * (1.0 - a * a);
            ga += pre * t.x[k];
            gb += pre * t.y[k];
            gc += pre * t.c_noise;
            gd += pre;
        }
        grad[j] += ga;
        grad[hidden + j] += gb;
        grad[2 * hidden + j] += gc;
        grad[3 * hidden + j] += gd;
        grad[4 * hidden + j] += gv;
    }
}

// ---------------------------------------------------------------------------
// Primitive layers

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn silu_grad(v: f64) -> f64 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe matrices that lie entirely inside the
    // given slices; every caller passes row-major buffers of matching size.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Square convolution with zero padding that preserves the spatial size.
#[derive(Clone, Copy, Debug)]
struct Conv {
    cin: usize,
    cout: usize,
    k: usize,
    w: usize,
    b: usize,
}

impl Conv {
    fn size(&self) -> usize {
        self.cout * self.cin * self.k * self.k + self.cout
    }

    fn at(offset: &mut usize, cin: usize, cout: usize, k: usize) -> Self {
        let conv = Conv {
            cin,
            cout,
            k,
            w: *offset,
            b: *offset + cout * cin * k * k,
        };
        *offset += conv.size();
        conv
    }

    fn cols(&self, input: &[f64], n: usize) -> Vec<f64> {
        let p = n * n;
        if self.k == 1 {
            return input.to_vec();
        }
        let pad = (self.k / 2) as isize;
        let kk = self.k * self.k;
        let mut cols = vec![0.0; self.cin * kk * p];
        for ci in 0..self.cin {
            let plane = &input[ci * p..(ci + 1) * p];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = &mut cols[(ci * kk + ky * self.k + kx) * p..][..p];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for r in 0..n {
                        let sr = r as isize + dy;
                        if sr < 0 || sr >= n as isize {
                            continue;
                        }
                        let src = &plane[sr as usize * n..(sr as usize + 1) * n];
                        let dst = &mut row[r * n..(r + 1) * n];
                        let c0 = (-dx).max(0) as usize;
                        let c1 = (n as isize - dx).min(n as isize) as usize;
                        for c in c0..c1 {
                            dst[c] = src[(c as isize + dx) as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn forward(&self, params: &[f64], input: &[f64], n: usize) -> Vec<f64> {
        let p = n * n;
        let kdim = self.cin * self.k * self.k;
        let cols = self.cols(input, n);
        let mut out = vec![0.0; self.cout * p];
        for co in 0..self.cout {
            out[co * p..(co + 1) * p].fill(params[self.b + co]);
        }
        gemm(
            self.cout,
            kdim,
            p,
            &params[self.w..self.w + self.cout * kdim],
            (kdim, 1),
            &cols,
            (p, 1),
            1.0,
            &mut out,
        );
        out
    }

    /// Accumulates weight gradients; returns the input gradient when asked.
    fn backward(
        &self,
        params: &[f64],
        input: &[f64],
        grad_out: &[f64],
        n: usize,
        grad: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let p = n * n;
        let kdim = self.cin * self.k * self.k;
        let cols = self.cols(input, n);
        gemm(
            self.cout,
            p,
            kdim,
            grad_out,
            (p, 1),
            &cols,
            (1, p),
            1.0,
            &mut grad[self.w..self.w + self.cout * kdim],
        );
        for co in 0..self.cout {
            grad[self.b + co] += grad_out[co * p..(co + 1) * p].iter().sum::<f64>();
        }
        if !want_input {
            return None;
        }
        let mut gcols = vec![0.0; kdim * p];
        gemm(
            kdim,
            self.cout,
            p,
            &params[self.w..self.w + self.cout * kdim],
            (1, kdim),
            grad_out,
            (p, 1),
            0.0,
            &mut gcols,
        );
        if self.k == 1 {
            return Some(gcols);
        }
        let pad = (self.k / 2) as isize;
        let kk = self.k * self.k;
        let mut gin = vec![0.0; self.cin * p];
        for ci in 0..self.cin {
            let plane = &mut gin[ci * p..(ci + 1) * p];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = &gcols[(ci * kk + ky * self.k + kx) * p..][..p];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for r in 0..n {
                        let sr = r as isize + dy;
                        if sr < 0 || sr >= n as isize {
                            continue;
                        }
                        let c0 = (-dx).max(0) as usize;
                        let c1 = (n as isize - dx).min(n as isize) as usize;
                        for c in c0..c1 {
                            plane[sr as usize * n + (c as isize + dx) as usize] += row[r * n + c];
                        }
                    }
                }
            }
        }
        Some(gin)
    }

    fn init(&self, params: &mut [f64], rng: &mut Rng, zero: bool) {
        let fan_in = (self.cin * self.k * self.k) as f64;
        let normal = Normal::new(0.0, (1.0 / fan_in).sqrt()).unwrap();
        for w in &mut params[self.w..self.b] {
            *w = if zero { 0.0 } else { normal.sample(rng) };
        }
        params[self.b..self.b + self.cout].fill(0.0);
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    fin: usize,
    fout: usize,
    w: usize,
    b: usize,
}

impl Linear {
    fn at(offset: &mut usize, fin: usize, fout: usize) -> Self {
        let l = Linear {
            fin,
            fout,
            w: *offset,
            b: *offset + fin * fout,
        };
        *offset += fin * fout + fout;
        l
    }

    fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.fout)
            .map(|o| {
                let row = &params[self.w + o * self.fin..self.w + (o + 1) * self.fin];
                params[self.b + o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    fn backward(&self, params: &[f64], x: &[f64], g: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let mut gx = vec![0.0; self.fin];
        for o in 0..self.fout {
            grad[self.b + o] += g[o];
            for i in 0..self.fin {
                grad[self.w + o * self.fin + i] += g[o] * x[i];
                gx[i] += g[o] * params[self.w + o * self.fin + i];
            }
        }
        gx
    }

    fn init(&self, params: &mut [f64], rng: &mut Rng) {
        let normal = Normal::new(0.0, (1.0 / self.fin as f64).sqrt()).unwrap();
        for w in &mut params[self.w..self.b] {
            *w = normal.sample(rng);
        }
        params[self.b..self.b + self.fout].fill(0.0);
    }
}

fn avg_pool(x: &[f64], c: usize, n: usize) -> Vec<f64> {
    let h = n / 2;
    let mut out = vec![0.0; c * h * h];
    for ch in 0..c {
        for r in 0..h {
            for col in 0..h {
                let base = ch * n * n;
                let s = x[base + 2 * r * n + 2 * col]
                    + x[base + 2 * r * n + 2 * col + 1]
                    + x[base + (2 * r + 1) * n + 2 * col]
                    + x[base + (2 * r + 1) * n + 2 * col + 1];
                out[ch * h * h + r * h + col] = 0.25 * s;
            }
        }
    }
    out
}

fn avg_pool_backward(g: &[f64], c: usize, n: usize) -> Vec<f64> {
    let h = n / 2;
    let mut out = vec![0.0; c * n * n];
    for ch in 0..c {
        for r in 0..n {
            for col in 0..n {
                out[ch * n * n + r * n + col] = 0.25 * g[ch * h * h + (r / 2) * h + col / 2];
            }
        }
    }
    out
}

/// Nearest-neighbour upsampling from side `h` to `2h`.
fn upsample(x: &[f64], c: usize, h: usize) -> Vec<f64> {
    let n = 2 * h;
    let mut out = vec![0.0; c * n * n];
    for ch in 0..c {
        for r in 0..n {
            for col in 0..n {
                out[ch * n * n + r * n + col] = x[ch * h * h + (r / 2) * h + col / 2];
            }
        }
    }
    out
}

fn upsample_backward(g: &[f64], c: usize, h: usize) -> Vec<f64> {
    let n = 2 * h;
    let mut out = vec![0.0; c * h * h];
    for ch in 0..c {
        for r in 0..n {
            for col in 0..n {
                out[ch * h * h + (r / 2) * h + col / 2] += g[ch * n * n + r * n + col];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// U-Net

/// Residual block: `h + conv2(drop(silu(mod(conv1(silu(h)), emb))))`, where
/// `mod` is a per-channel scale and shift predicted from the noise
/// embedding. A 1x1 convolution maps the skip path when widths differ.
#[derive(Clone, Copy, Debug)]
struct Block {
    cin: usize,
    cout: usize,
    conv1: Conv,
    emb: Linear,
    conv2: Conv,
    skip: Option<Conv>,
}

impl Block {
    fn at(offset: &mut usize, cin: usize, cout: usize, emb_dim: usize) -> Self {
        let conv1 = Conv::at(offset, cin, cout, 3);
        let emb = Linear::at(offset, emb_dim, 2 * cout);
        let conv2 = Conv::at(offset, cout, cout, 3);
        let skip = (cin != cout).then(|| Conv::at(offset, cin, cout, 1));
        Block {
            cin,
            cout,
            conv1,
            emb,
            conv2,
            skip,
        }
    }
}

struct BlockTape {
    h_in: Vec<f64>,
    a0: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    mask: Option<Vec<f64>>,
    a4: Vec<f64>,
    scale_shift: Vec<f64>,
    n: usize,
}

impl Block {
    fn forward(
        &self,
        params: &[f64],
        h_in: Vec<f64>,
        emb: &[f64],
        n: usize,
        dropout: &mut Option<Dropout>,
    ) -> (Vec<f64>, BlockTape) {
        let p = n * n;
        let a0: Vec<f64> = h_in.iter().map(|&v| silu(v)).collect();
        let a1 = self.conv1.forward(params, &a0, n);
        let scale_shift = self.emb.forward(params, emb);
        let mut a2 = a1.clone();
        for c in 0..self.cout {
            let (s, t) = (1.0 + scale_shift[c], scale_shift[self.cout + c]);
            for v in &mut a2[c * p..(c + 1) * p] {
                *v = *v * s + t;
            }
        }
        let mut a4: Vec<f64> = a2.iter().map(|&v| silu(v)).collect();
        let mask = match dropout {
            Some(d) if d.rate > 0.0 => {
                let keep = 1.0 / (1.0 - d.rate);
                let m: Vec<f64> = (0..a4.len())
                    .map(|_| if d.rng.random::<f64>() < d.rate { 0.0 } else { keep })
                    .collect();
                for (v, k) in a4.iter_mut().zip(&m) {
                    *v *= k;
                }
                Some(m)
            }
            _ => None,
        };
        let a5 = self.conv2.forward(params, &a4, n);
        let mut out = match &self.skip {
            Some(s) => s.forward(params, &h_in, n),
            None => h_in.clone(),
        };
        for (o, v) in out.iter_mut().zip(&a5) {
            *o += v;
        }
        let tape = BlockTape {
            h_in,
            a0,
            a1,
            a2,
            mask,
            a4,
            scale_shift,
            n,
        };
        (out, tape)
    }

    /// Returns the gradient w.r.t. the block input; embedding gradients are
    /// accumulated into `g_emb`.
    fn backward(
        &self,
        params: &[f64],
        t: &BlockTape,
        g_out: &[f64],
        emb: &[f64],
        g_emb: &mut [f64],
        grad: &mut [f64],
    ) -> Vec<f64> {
        let n = t.n;
        let p = n * n;
        let mut g_a4 = self.conv2.backward(params, &t.a4, g_out, n, grad, true).unwrap();
        if let Some(m) = &t.mask {
            for (g, k) in g_a4.iter_mut().zip(m) {
                *g *= k;
            }
        }
        let mut g_ss = vec![0.0; 2 * self.cout];
        let mut g_a1 = vec![0.0; self.cout * p];
        for c in 0..self.cout {
            let s = 1.0 + t.scale_shift[c];
            let (mut gs, mut gt) = (0.0, 0.0);
            for k in c * p..(c + 1) * p {
                let g = g_a4[k] * silu_grad(t.a2[k]);
                gs += g * t.a1[k];
                gt += g;
                g_a1[k] = g * s;
            }
            g_ss[c] = gs;
            g_ss[self.cout + c] = gt;
        }
        let ge = self.emb.backward(params, emb, &g_ss, grad);
        for (a, b) in g_emb.iter_mut().zip(&ge) {
            *a += b;
        }
        let g_a0 = self.conv1.backward(params, &t.a0, &g_a1, n, grad, true).unwrap();
        let mut g_in: Vec<f64> = g_a0
            .iter()
            .zip(&t.h_in)
            .map(|(g, &h)| g * silu_grad(h))
            .collect();
        match &self.skip {
            Some(s) => {
                let gs = s.backward(params, &t.h_in, g_out, n, grad, true).unwrap();
                for (a, b) in g_in.iter_mut().zip(&gs) {
                    *a += b;
                }
            }
            None => {
                for (a, b) in g_in.iter_mut().zip(g_out) {
                    *a += b;
                }
            }
        }
        debug_assert_eq!(g_in.len(), self.cin * p);
        g_in
    }

    fn init(&self, params: &mut [f64], rng: &mut Rng) {
        self.conv1.init(params, rng, false);
        self.emb.init(params, rng);
        // Zero the modulation so blocks start unmodulated.
        params[self.emb.w..self.emb.b].fill(0.0);
        self.conv2.init(params, rng, true);
        if let Some(s) = &self.skip {
            s.init(params, rng, false);
        }
    }
}

struct UNetLayout {
    freqs: usize,
    emb: Linear,
    conv_in: Conv,
    down: Vec<Block>,
    up: Vec<Block>,
    conv_out: Conv,
    total: usize,
}

pub struct UNetTape {
    feats: Vec<f64>,
    e_pre: Vec<f64>,
    emb: Vec<f64>,
    input: Vec<f64>,
    down: Vec<BlockTape>,
    /// Per up block, indexed like `UNetLayout::up`.
    up: Vec<BlockTape>,
    h_final: Vec<f64>,
    act_final: Vec<f64>,
    n: usize,
}

impl UNetLayout {
    fn new(c: &UNetConfig) -> Self {
        let mut off = 0;
        let emb = Linear::at(&mut off, 1 + 2 * c.freqs, c.emb_dim);
        let widths: Vec<usize> = c.mults.iter().map(|m| m * c.base_width).collect();
        let conv_in = Conv::at(&mut off, 2, c.base_width, 3);
        let mut down = Vec::new();
        let mut prev = c.base_width;
        for &w in &widths {
            down.push(Block::at(&mut off, prev, w, c.emb_dim));
            prev = w;
        }
        // up[l] produces level l from level l+1, for l = L-2 down to 0.
        let mut up = Vec::new();
        for l in (0..widths.len() - 1).rev() {
            up.push(Block::at(&mut off, prev + widths[l], widths[l], c.emb_dim));
            prev = widths[l];
        }
        let conv_out = Conv::at(&mut off, prev, 1, 3);
        UNetLayout {
            freqs: c.freqs,
            emb,
            conv_in,
            down,
            up,
            conv_out,
            total: off,
        }
    }

    fn init(&self, rng: &mut Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.total];
        self.emb.init(&mut p, rng);
        self.conv_in.init(&mut p, rng, false);
        for b in self.down.iter().chain(&self.up) {
            b.init(&mut p, rng);
        }
        self.conv_out.init(&mut p, rng, true);
        p
    }

    fn features(&self, c_noise: f64) -> Vec<f64> {
        let mut f = vec![c_noise];
        for k in 0..self.freqs {
            let w = (1u64 << k) as f64;
            f.push((w * c_noise).sin());
            f.push((w * c_noise).cos());
        }
        f
    }

    fn forward(&self, params: &[f64], input: &NetInput, mut dropout: Option<Dropout>) -> (Vec<f64>, UNetTape) {
        let n0 = input.n;
        let feats = self.features(input.c_noise);
        let e_pre = self.emb.forward(params, &feats);
        let emb: Vec<f64> = e_pre.iter().map(|&v| silu(v)).collect();
        let mut stacked = input.x.to_vec();
        stacked.extend_from_slice(input.y);
        let mut h = self.conv_in.forward(params, &stacked, n0);
        let levels = self.down.len();
        let mut n = n0;
        let mut down_tapes = Vec::with_capacity(levels);
        let mut skips = Vec::with_capacity(levels);
        for (l, block) in self.down.iter().enumerate() {
            let (out, tape) = block.forward(params, h, &emb, n, &mut dropout);
            down_tapes.push(tape);
            if l + 1 < levels {
                skips.push(out.clone());
                h = avg_pool(&out, block.cout, n);
                n /= 2;
            } else {
                h = out;
            }
        }
        let mut up_tapes = Vec::with_capacity(self.up.len());
        for (j, block) in self.up.iter().enumerate() {
            let l = levels - 2 - j;
            let ch = block.cin - self.down[l].cout;
            let mut cat = upsample(&h, ch, n);
            n *= 2;
            cat.extend_from_slice(&skips[l]);
            let (out, tape) = block.forward(params, cat, &emb, n, &mut dropout);
            up_tapes.push(tape);
            h = out;
        }
        let act_final: Vec<f64> = h.iter().map(|&v| silu(v)).collect();
        let out = self.conv_out.forward(params, &act_final, n0);
        let tape = UNetTape {
            feats,
            e_pre,
            emb,
            input: stacked,
            down: down_tapes,
            up: up_tapes,
            h_final: h,
            act_final,
            n: n0,
        };
        (out, tape)
    }

    fn backward(&self, params: &[f64], t: &UNetTape, grad_out: &[f64], grad: &mut [f64]) {
        let levels = self.down.len();
        let mut g_emb = vec![0.0; t.emb.len()];
        let g_act = self
            .conv_out
            .backward(params, &t.act_final, grad_out, t.n, grad, true)
            .unwrap();
        let mut g: Vec<f64> = g_act
            .iter()
            .zip(&t.h_final)
            .map(|(g, &h)| g * silu_grad(h))
            .collect();
        let mut skip_grads: Vec<Option<Vec<f64>>> = vec![None; levels];
        for (j, block) in self.up.iter().enumerate().rev() {
            let l = levels - 2 - j;
            let tape = &t.up[j];
            let g_cat = block.backward(params, tape, &g, &t.emb, &mut g_emb, grad);
            let ch = block.cin - self.down[l].cout;
            let p = tape.n * tape.n;
            skip_grads[l] = Some(g_cat[ch * p..].to_vec());
            g = upsample_backward(&g_cat[..ch * p], ch, tape.n / 2);
        }
        for l in (0..levels).rev() {
            let block = &self.down[l];
            let tape = &t.down[l];
            if let Some(sg) = &skip_grads[l] {
                for (a, b) in g.iter_mut().zip(sg) {
                    *a += b;
                }
            }
            let g_in = block.backward(params, tape, &g, &t.emb, &mut g_emb, grad);
            if l > 0 {
                g = avg_pool_backward(&g_in, block.cin, tape.n * 2);
            } else {
                self.conv_in.backward(params, &t.input, &g_in, t.n, grad, false);
            }
        }
        let g_pre: Vec<f64> = g_emb
            .iter()
            .zip(&t.e_pre)
            .map(|(g, &e)| g * silu_grad(e))
            .collect();
        self.emb.backward(params, &t.feats, &g_pre, grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn loss(arch: &Arch, p: &[f64], input: &NetInput, target: &[f64]) -> f64 {
        let (out, _) = arch.forward(p, input, None);
        out.iter().zip(target).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum()
    }

    fn check_gradients(arch: &Arch, n: usize, probes: usize) {
        let mut rng = rng_from_seed(21);
        let normal = Normal::new(0.0, 0.3).unwrap();
        // Randomize everything, including zero-initialized layers.
        let p: Vec<f64> = arch.init(&mut rng).iter().map(|v| v + normal.sample(&mut rng)).collect();
        let x: Vec<f64> = (0..n * n).map(|_| normal.sample(&mut rng)).collect();
        let y: Vec<f64> = (0..n * n).map(|_| normal.sample(&mut rng)).collect();
        let target: Vec<f64> = (0..n * n).map(|_| normal.sample(&mut rng)).collect();
        let input = NetInput { n, x: &x, y: &y, c_noise: 0.3 };
        let (out, tape) = arch.forward(&p, &input, None);
        let g_out: Vec<f64> = out.iter().zip(&target).map(|(a, b)| a - b).collect();
        let mut grad = vec![0.0; p.len()];
        arch.backward(&p, &tape, &g_out, &mut grad);
        let stride = (p.len() / probes).max(1);
        let mut worst: f64 = 0.0;
        for k in (0..p.len()).step_by(stride) {
            let h = 1e-5;
            let mut pp = p.clone();
            pp[k] += h;
            let up = loss(arch, &pp, &input, &target);
            pp[k] -= 2.0 * h;
            let down = loss(arch, &pp, &input, &target);
            let fd = (up - down) / (2.0 * h);
            let err = (fd - grad[k]).abs() / (fd.abs() + grad[k].abs()).max(1e-6);
            worst = worst.max(err);
        }
        assert!(worst < 1e-5, "worst relative gradient error {worst}");
    }

    #[test]
    fn unet_gradients_match_finite_differences() {
        let arch = Arch::UNet(UNetConfig {
            base_width: 3,
            mults: vec![1, 2, 2],
            emb_dim: 4,
            freqs: 2,
        });
        check_gradients(&arch, 8, 400);
    }

    #[test]
    fn single_level_unet_gradients() {
        let arch = Arch::UNet(UNetConfig {
            base_width: 2,
            mults: vec![1],
            emb_dim: 3,
            freqs: 1,
        });
        check_gradients(&arch, 8, 200);
    }

    #[test]
    fn pixel_gradients_match_finite_differences() {
        check_gradients(&Arch::Pixel { hidden: 2 }, 8, 10);
    }

    #[test]
    fn fresh_unet_outputs_zero() {
        let arch = Arch::UNet(UNetConfig::default());
        let p = arch.init(&mut rng_from_seed(1));
        let x = vec![0.3; 256];
        let (out, _) = arch.forward(&p, &NetInput { n: 16, x: &x, y: &x, c_noise: 0.1 }, None);
        assert!(out.iter().all(|&v| v == 0.0));
        assert_eq!(arch.num_params(), p.len());
    }

    #[test]
    fn dropout_changes_training_output_only() {
        let arch = Arch::UNet(UNetConfig {
            base_width: 4,
            mults: vec![1, 2],
            emb_dim: 4,
            freqs: 1,
        });
        let mut rng = rng_from_seed(2);
        let normal = Normal::new(0.0, 0.3).unwrap();
        let p: Vec<f64> = arch.init(&mut rng).iter().map(|v| v + normal.sample(&mut rng)).collect();
        let x: Vec<f64> = (0..64).map(|k| (k as f64).sin()).collect();
        let input = NetInput { n: 8, x: &x, y: &x, c_noise: 0.0 };
        let (a, _) = arch.forward(&p, &input, None);
        let (b, _) = arch.forward(&p, &input, None);
        assert_eq!(a, b);
        let mut drng = rng_from_seed(3);
        let (c, _) = arch.forward(&p, &input, Some(Dropout { rate: 0.5, rng: &mut drng }));
        assert_ne!(a, c);
    }
}
