use super::{gemm, Float, Layout, Tensor};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Index into the parameter slice a [`Graph`] was built over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op<F> {
    Input,
    Conv2d {
        x: NodeId,
        w: ParamId,
        bias: ParamId,
        k: usize,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        groups: usize,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Silu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddBroadcast {
        x: NodeId,
        v: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    Upsample2x {
        x: NodeId,
    },
    Attention {
        qkv: NodeId,
        probs: Vec<F>,
    },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records a forward pass over borrowed parameters so it can be replayed
/// backwards.
pub struct Graph<'p, F: Float> {
    params: &'p [Vec<F>],
    nodes: Vec<Node<F>>,
}

impl<'p, F: Float> Graph<'p, F> {
    pub fn new(params: &'p [Vec<F>]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> NodeId {
        let requires_grad = !matches!(op, Op::Input);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn into_value(mut self, id: NodeId) -> Tensor<F> {
        std::mem::replace(&mut self.nodes[id.0].value, Tensor::zeros(0, 0, 0, 0))
    }

    pub fn input(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t, Op::Input)
    }

    fn param(&self, id: ParamId) -> &'p [F] {
        &self.params[id.0]
    }

    /// 2-D convolution, weights `[cout, cin, k, k]`, bias `[cout]`.
    pub fn conv2d(&mut self, x: NodeId, w: ParamId, bias: ParamId, k: usize, stride: usize, pad: usize) -> NodeId {
        let xv = self.value(x);
        let cin = xv.c;
        let weights = self.param(w);
        let bvals = self.param(bias);
        let cout = bvals.len();
        let kk = cin * k * k;
        assert_eq!(weights.len(), cout * kk, "conv weight shape");
        let ho = (xv.h + 2 * pad - k) / stride + 1;
        let wo = (xv.w + 2 * pad - k) / stride + 1;
        let mut out = if is_same_conv(k, stride, pad) {
            same_conv_forward(xv, weights, cout, k)
        } else {
            let mut out = Tensor::zeros(cout, xv.b, ho, wo);
            let ncols = out.cols();
            let cols_owned;
            let cols: &[F] = if k == 1 && stride == 1 && pad == 0 {
                &xv.data
            } else {
                cols_owned = im2col(xv, k, stride, pad, ho, wo);
                &cols_owned
            };
            gemm(
                cout,
                kk,
                ncols,
                F::one(),
                weights,
                Layout::row_major(kk),
                cols,
                Layout::row_major(ncols),
                F::zero(),
                &mut out.data,
                Layout::row_major(ncols),
            );
            out
        };
        let ncols = out.cols();
        for (row, &bv) in out.data.chunks_exact_mut(ncols).zip(bvals) {
            row.iter_mut().for_each(|v| *v += bv);
        }
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                bias,
                k,
                stride,
                pad,
            },
        )
    }

    pub fn group_norm(&mut self, x: NodeId, gamma: ParamId, beta: ParamId, groups: usize) -> NodeId {
        let xv = self.value(x);
        let (c, b, hw) = (xv.c, xv.b, xv.plane());
        assert!(c % groups == 0, "channels {c} not divisible by {groups} groups");
        let cpg = c / groups;
        let m = F::of((cpg * hw) as f64);
        let gam = self.param(gamma);
        let bet = self.param(beta);
        let mut out = Tensor::zeros(c, b, xv.h, xv.w);
        let mut mean = vec![F::zero(); b * groups];
        let mut rstd = vec![F::zero(); b * groups];
        for bi in 0..b {
            for g in 0..groups {
                let chans = g * cpg..(g + 1) * cpg;
                let plane = |ch: usize| &xv.data[(ch * b + bi) * hw..(ch * b + bi + 1) * hw];
                let mu = chans.clone().map(|ch| plane(ch).iter().copied().sum::<F>()).sum::<F>() / m;
                let var = chans
                    .clone()
                    .map(|ch| plane(ch).iter().map(|&v| (v - mu) * (v - mu)).sum::<F>())
                    .sum::<F>()
                    / m;
                let rs = F::one() / (var + F::of(NORM_EPS)).sqrt();
                for ch in chans {
                    let (gc, bc) = (gam[ch], bet[ch]);
                    let dst = &mut out.data[(ch * b + bi) * hw..(ch * b + bi + 1) * hw];
                    for (o, &v) in dst.iter_mut().zip(plane(ch)) {
                        *o = (v - mu) * rs * gc + bc;
                    }
                }
                mean[bi * groups + g] = mu;
                rstd[bi * groups + g] = rs;
            }
        }
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
        )
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v / (F::one() + (-v).exp()));
        self.push(out, Op::Silu { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape");
        out.add_assign(self.value(b));
        self.push(out, Op::Add { a, b })
    }

    /// `x[c, b, :, :] + v[c, b]` for `v` of shape `[C, B, 1, 1]`.
    pub fn add_broadcast(&mut self, x: NodeId, v: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        let vv = self.value(v);
        assert_eq!((vv.c, vv.b, vv.h, vv.w), (out.c, out.b, 1, 1), "broadcast shape");
        let hw = out.plane();
        for (chunk, &add) in out.data.chunks_exact_mut(hw).zip(&vv.data) {
            chunk.iter_mut().for_each(|o| *o += add);
        }
        self.push(out, Op::AddBroadcast { x, v })
    }

    /// Channel concatenation `[a; b]`.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((av.b, av.h, av.w), (bv.b, bv.h, bv.w), "concat shape");
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(&av.data);
        data.extend_from_slice(&bv.data);
        let out = Tensor::from_vec(av.c + bv.c, av.b, av.h, av.w, data);
        self.push(out, Op::Concat { a, b })
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (h, w) = (xv.h, xv.w);
        let mut out = Tensor::zeros(xv.c, xv.b, 2 * h, 2 * w);
        for (dst, src) in out.data.chunks_exact_mut(4 * h * w).zip(xv.data.chunks_exact(h * w)) {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        self.push(out, Op::Upsample2x { x })
    }

    /// Single-head spatial self-attention on a packed `[q; k; v]` tensor of
    /// `3C` channels; returns the `C`-channel attended values.
    pub fn attention(&mut self, qkv: NodeId) -> NodeId {
        let xv = self.value(qkv);
        assert_eq!(xv.c % 3, 0, "attention expects 3C channels");
        let c = xv.c / 3;
        let (b, n) = (xv.b, xv.plane());
        let bn = b * n;
        let scale = F::one() / F::of(c as f64).sqrt();
        let mut probs = vec![F::zero(); b * n * n];
        let mut out = Tensor::zeros(c, b, xv.h, xv.w);
        for bi in 0..b {
            let kl = Layout { offset: c * bn + bi * n, rs: bn, cs: 1 };
            let v = Layout { offset: 2 * c * bn + bi * n, rs: bn, cs: 1 };
            let p = &mut probs[bi * n * n..(bi + 1) * n * n];
            // scores[i, j] = q_i · k_j
            gemm(
                n,
                c,
                n,
                scale,
                &xv.data,
                Layout { offset: bi * n, rs: 1, cs: bn },
                &xv.data,
                kl,
                F::zero(),
                p,
                Layout::row_major(n),
            );
            for row in p.chunks_exact_mut(n) {
                let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    total += *v;
                }
                row.iter_mut().for_each(|v| *v = *v / total);
            }
            // out[c, i] = sum_j v[c, j] p[i, j]
            gemm(
                c,
                n,
                n,
                F::one(),
                &xv.data,
                v,
                p,
                Layout::col_major(n),
                F::zero(),
                &mut out.data,
                Layout { offset: bi * n, rs: bn, cs: 1 },
            );
        }
        self.push(out, Op::Attention { qkv, probs })
    }

    /// Back-propagates `grad` from `out`, returning one gradient per parameter.
    pub fn backward(&self, out: NodeId, grad: Tensor<F>) -> Vec<Vec<F>> {
        let mut pgrads: Vec<Vec<F>> = self.params.iter().map(|p| vec![F::zero(); p.len()]).collect();
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(grad.shape(), self.value(out).shape(), "seed gradient shape");
        grads[out.0] = Some(grad);

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Conv2d {
                    x,
                    w,
                    bias,
                    k,
                    stride,
                    pad,
                } => self.conv_backward(&g, *x, *w, *bias, *k, *stride, *pad, &mut grads, &mut pgrads),
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    mean,
                    rstd,
                } => {
                    let xv = self.value(*x);
                    let (c, b, hw) = (xv.c, xv.b, xv.plane());
                    let cpg = c / groups;
                    let m = F::of((cpg * hw) as f64);
                    let gam = self.param(*gamma);
                    let need_x = self.nodes[x.0].requires_grad;
                    let mut dx = if need_x { Some(Tensor::zeros(c, b, xv.h, xv.w)) } else { None };
                    for bi in 0..b {
                        for gi in 0..*groups {
                            let (mu, rs) = (mean[bi * groups + gi], rstd[bi * groups + gi]);
                            let mut s1 = F::zero();
                            let mut s2 = F::zero();
                            for ch in gi * cpg..(gi + 1) * cpg {
                                let range = (ch * b + bi) * hw..(ch * b + bi + 1) * hw;
                                let (mut db, mut dg) = (F::zero(), F::zero());
                                for (&gv, &xvv) in g.data[range.clone()].iter().zip(&xv.data[range]) {
                                    let xhat = (xvv - mu) * rs;
                                    db += gv;
                                    dg += gv * xhat;
                                    let dxh = gv * gam[ch];
                                    s1 += dxh;
                                    s2 += dxh * xhat;
                                }
                                pgrads[beta.0][ch] += db;
                                pgrads[gamma.0][ch] += dg;
                            }
                            if let Some(dx) = dx.as_mut() {
                                let (s1, s2) = (s1 / m, s2 / m);
                                for ch in gi * cpg..(gi + 1) * cpg {
                                    let range = (ch * b + bi) * hw..(ch * b + bi + 1) * hw;
                                    for ((d, &gv), &xvv) in dx.data[range.clone()]
                                        .iter_mut()
                                        .zip(&g.data[range.clone()])
                                        .zip(&xv.data[range])
                                    {
                                        let xhat = (xvv - mu) * rs;
                                        *d = rs * (gv * gam[ch] - s1 - xhat * s2);
                                    }
                                }
                            }
                        }
                    }
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Silu { x } => {
                    if self.nodes[x.0].requires_grad {
                        let xv = self.value(*x);
                        let mut dx = g;
                        for (d, &v) in dx.data.iter_mut().zip(&xv.data) {
                            let s = F::one() / (F::one() + (-v).exp());
                            *d *= s * (F::one() + v * (F::one() - s));
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Add { a, b } => {
                    if self.nodes[b.0].requires_grad {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.nodes[a.0].requires_grad {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddBroadcast { x, v } => {
                    if self.nodes[v.0].requires_grad {
                        let vv = self.value(*v);
                        let hw = g.plane();
                        let dv: Vec<F> = g.data.chunks_exact(hw).map(|ch| ch.iter().copied().sum()).collect();
                        accumulate(&mut grads, *v, Tensor::from_vec(vv.c, vv.b, 1, 1, dv));
                    }
                    if self.nodes[x.0].requires_grad {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Concat { a, b } => {
                    let av = self.value(*a);
                    let split = av.len();
                    if self.nodes[a.0].requires_grad {
                        let da = Tensor::from_vec(av.c, av.b, av.h, av.w, g.data[..split].to_vec());
                        accumulate(&mut grads, *a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let bv = self.value(*b);
                        let db = Tensor::from_vec(bv.c, bv.b, bv.h, bv.w, g.data[split..].to_vec());
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Upsample2x { x } => {
                    if self.nodes[x.0].requires_grad {
                        let xv = self.value(*x);
                        let (h, w) = (xv.h, xv.w);
                        let mut dx = Tensor::zeros(xv.c, xv.b, h, w);
                        for (dst, src) in dx.data.chunks_exact_mut(h * w).zip(g.data.chunks_exact(4 * h * w)) {
                            for y in 0..2 * h {
                                for xx in 0..2 * w {
                                    dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                                }
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Attention { qkv, probs } => {
                    if self.nodes[qkv.0].requires_grad {
                        let dqkv = attention_backward(self.value(*qkv), probs, &g);
                        accumulate(&mut grads, *qkv, dqkv);
                    }
                }
            }
        }
        pgrads
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        g: &Tensor<F>,
        x: NodeId,
        w: ParamId,
        bias: ParamId,
        k: usize,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Tensor<F>>],
        pgrads: &mut [Vec<F>],
    ) {
        let xv = self.value(x);
        let cout = g.c;
        let kk = xv.c * k * k;
        let ncols = g.cols();
        for (row, db) in g.data.chunks_exact(ncols).zip(pgrads[bias.0].iter_mut()) {
            *db += row.iter().copied().sum::<F>();
        }
        if is_same_conv(k, stride, pad) {
            let dx = same_conv_backward(xv, g, self.param(w), &mut pgrads[w.0], k, self.nodes[x.0].requires_grad);
            if let Some(dx) = dx {
                accumulate(grads, x, dx);
            }
            return;
        }
        let pointwise = k == 1 && stride == 1 && pad == 0;
        let cols_owned;
        let cols: &[F] = if pointwise {
            &xv.data
        } else {
            cols_owned = im2col(xv, k, stride, pad, g.h, g.w);
            &cols_owned
        };
        gemm(
            cout,
            ncols,
            kk,
            F::one(),
            &g.data,
            Layout::row_major(ncols),
            cols,
            Layout::col_major(ncols),
            F::one(),
            &mut pgrads[w.0],
            Layout::row_major(kk),
        );
        if !self.nodes[x.0].requires_grad {
            return;
        }
        let weights = self.param(w);
        let mut dcols = vec![F::zero(); kk * ncols];
        gemm(
            kk,
            cout,
            ncols,
            F::one(),
            weights,
            Layout::col_major(kk),
            &g.data,
            Layout::row_major(ncols),
            F::zero(),
            &mut dcols,
            Layout::row_major(ncols),
        );
        let dx = if pointwise {
            Tensor::from_vec(xv.c, xv.b, xv.h, xv.w, dcols)
        } else {
            col2im(&dcols, xv, k, stride, pad, g.h, g.w)
        };
        accumulate(grads, x, dx);
    }
}

fn accumulate<F: Float>(grads: &mut [Option<Tensor<F>>], id: NodeId, g: Tensor<F>) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Odd kernel, unit stride, "same" padding: handled without im2col.
fn is_same_conv(k: usize, stride: usize, pad: usize) -> bool {
    k > 1 && k % 2 == 1 && stride == 1 && pad == k / 2
}

/// Planes zero-padded by `p` on every side, each channel one flat row of
/// `B·(H+2p)·(W+2p)` values. A spatial shift `(dy, dx)` is then a constant
/// offset `dy·(W+2p) + dx` along the row, so a same-padded convolution is a
/// sum of `k²` shifted GEMMs.
struct Padded<F> {
    data: Vec<F>,
    row: usize,
    hp: usize,
    wp: usize,
    p: usize,
}

impl<F: Float> Padded<F> {
    fn new(t: &Tensor<F>, p: usize) -> Self {
        let (hp, wp) = (t.h + 2 * p, t.w + 2 * p);
        let row = t.b * hp * wp;
        let mut data = vec![F::zero(); t.c * row];
        for (dst, src) in data.chunks_exact_mut(hp * wp).zip(t.data.chunks_exact(t.h * t.w)) {
            for (y, srow) in src.chunks_exact(t.w).enumerate() {
                let start = (y + p) * wp + p;
                dst[start..start + t.w].copy_from_slice(srow);
            }
        }
        Self { data, row, hp, wp, p }
    }

    fn zeros(c: usize, b: usize, h: usize, w: usize, p: usize) -> Self {
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        Self {
            data: vec![F::zero(); c * b * hp * wp],
            row: b * hp * wp,
            hp,
            wp,
            p,
        }
    }

    /// First and one-past-last flat positions whose full neighbourhood is in bounds.
    fn margin(&self) -> usize {
        self.p * self.wp + self.p
    }

    fn shift(&self, ky: usize, kx: usize) -> usize {
        ky * self.wp + kx
    }

    fn crop(&self, c: usize, b: usize) -> Tensor<F> {
        let (h, w) = (self.hp - 2 * self.p, self.wp - 2 * self.p);
        let mut out = Tensor::zeros(c, b, h, w);
        for (dst, src) in out.data.chunks_exact_mut(h * w).zip(self.data.chunks_exact(self.hp * self.wp)) {
            for (y, drow) in dst.chunks_exact_mut(w).enumerate() {
                let start = (y + self.p) * self.wp + self.p;
                drow.copy_from_slice(&src[start..start + w]);
            }
        }
        out
    }
}

fn same_conv_forward<F: Float>(x: &Tensor<F>, weights: &[F], cout: usize, k: usize) -> Tensor<F> {
    let cin = x.c;
    let xp = Padded::new(x, k / 2);
    let mut outp = Padded::zeros(cout, x.b, x.h, x.w, k / 2);
    let m0 = xp.margin();
    let n = xp.row - 2 * m0;
    for ky in 0..k {
        for kx in 0..k {
            // out[q] += W[:, :, ky, kx] · x[q + shift − margin]
            gemm(
                cout,
                cin,
                n,
                F::one(),
                weights,
                Layout { offset: ky * k + kx, rs: cin * k * k, cs: k * k },
                &xp.data,
                Layout { offset: xp.shift(ky, kx), rs: xp.row, cs: 1 },
                F::one(),
                &mut outp.data,
                Layout { offset: m0, rs: outp.row, cs: 1 },
            );
        }
    }
    outp.crop(cout, x.b)
}

fn same_conv_backward<F: Float>(
    x: &Tensor<F>,
    g: &Tensor<F>,
    weights: &[F],
    dw: &mut [F],
    k: usize,
    need_dx: bool,
) -> Option<Tensor<F>> {
    let (cin, cout) = (x.c, g.c);
    let xp = Padded::new(x, k / 2);
    let gp = Padded::new(g, k / 2);
    let m0 = xp.margin();
    let n = xp.row - 2 * m0;
    let mut dxp = need_dx.then(|| Padded::zeros(cin, x.b, x.h, x.w, k / 2));
    for ky in 0..k {
        for kx in 0..k {
            let wl = Layout { offset: ky * k + kx, rs: cin * k * k, cs: k * k };
            let shift = xp.shift(ky, kx);
            // dW[:, :, ky, kx] += g[q] · x[q + shift − margin]ᵀ
            gemm(
                cout,
                n,
                cin,
                F::one(),
                &gp.data,
                Layout { offset: m0, rs: gp.row, cs: 1 },
                &xp.data,
                Layout { offset: shift, rs: 1, cs: xp.row },
                F::one(),
                dw,
                wl,
            );
            if let Some(dxp) = dxp.as_mut() {
                // dx[q + shift − margin] += W[:, :, ky, kx]ᵀ · g[q]
                gemm(
                    cin,
                    cout,
                    n,
                    F::one(),
                    weights,
                    Layout { offset: wl.offset, rs: wl.cs, cs: wl.rs },
                    &gp.data,
                    Layout { offset: m0, rs: gp.row, cs: 1 },
                    F::one(),
                    &mut dxp.data,
                    Layout { offset: shift, rs: dxp.row, cs: 1 },
                );
            }
        }
    }
    dxp.map(|d| d.crop(cin, x.b))
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad` lies inside `0..w`.
fn valid_cols(w: usize, wo: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).div_ceil(stride);
    let hi = if w + pad > kx { ((w + pad - kx - 1) / stride + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<F: Float>(x: &Tensor<F>, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<F> {
    let (cin, b, h, w) = (x.c, x.b, x.h, x.w);
    let ncols = b * ho * wo;
    let mut cols = vec![F::zero(); cin * k * k * ncols];
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_cols(w, wo, kx, stride, pad);
                for bi in 0..b {
                    let src = &x.data[(ci * b + bi) * h * w..(ci * b + bi + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize || lo >= hi {
                            continue;
                        }
                        let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[(bi * ho + oy) * wo..(bi * ho + oy + 1) * wo];
                        let start = lo * stride + kx - pad;
                        if stride == 1 {
                            drow[lo..hi].copy_from_slice(&srow[start..start + hi - lo]);
                        } else {
                            for (d, s) in drow[lo..hi].iter_mut().zip(srow[start..].iter().step_by(stride)) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<F: Float>(
    dcols: &[F],
    x: &Tensor<F>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Tensor<F> {
    let (cin, b, h, w) = (x.c, x.b, x.h, x.w);
    let ncols = b * ho * wo;
    let mut dx = Tensor::zeros(cin, b, h, w);
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &dcols[row * ncols..(row + 1) * ncols];
                let (lo, hi) = valid_cols(w, wo, kx, stride, pad);
                for bi in 0..b {
                    let dst = &mut dx.data[(ci * b + bi) * h * w..(ci * b + bi + 1) * h * w];
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize || lo >= hi {
                            continue;
                        }
                        let srow = &src[(bi * ho + oy) * wo + lo..(bi * ho + oy) * wo + hi];
                        let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let start = lo * stride + kx - pad;
                        for (d, &s) in drow[start..].iter_mut().step_by(stride).zip(srow) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn attention_backward<F: Float>(qkv: &Tensor<F>, probs: &[F], g: &Tensor<F>) -> Tensor<F> {
    let c = qkv.c / 3;
    let (b, n) = (qkv.b, qkv.plane());
    let bn = b * n;
    let scale = F::one() / F::of(c as f64).sqrt();
    let mut d = Tensor::zeros(qkv.c, b, qkv.h, qkv.w);
    let mut dp = vec![F::zero(); n * n];
    for bi in 0..b {
        let p = &probs[bi * n * n..(bi + 1) * n * n];
        let gl = Layout { offset: bi * n, rs: bn, cs: 1 };
        let q = Layout { offset: bi * n, rs: bn, cs: 1 };
        let kl = Layout { offset: c * bn + bi * n, rs: bn, cs: 1 };
        let v = Layout { offset: 2 * c * bn + bi * n, rs: bn, cs: 1 };
        // dV = dOut · P
        gemm(c, n, n, F::one(), &g.data, gl, p, Layout::row_major(n), F::zero(), &mut d.data, v);
        // dP[i, j] = sum_c dOut[c, i] V[c, j]
        gemm(
            n,
            c,
            n,
            F::one(),
            &g.data,
            Layout { offset: bi * n, rs: 1, cs: bn },
            &qkv.data,
            v,
            F::zero(),
            &mut dp,
            Layout::row_major(n),
        );
        for (prow, drow) in p.chunks_exact(n).zip(dp.chunks_exact_mut(n)) {
            let dot: F = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
            for (dv, &pv) in drow.iter_mut().zip(prow) {
                *dv = pv * (*dv - dot) * scale;
            }
        }
        // dQ = K · dSᵀ, dK = Q · dS
        gemm(c, n, n, F::one(), &qkv.data, kl, &dp, Layout::col_major(n), F::zero(), &mut d.data, q);
        gemm(c, n, n, F::one(), &qkv.data, q, &dp, Layout::row_major(n), F::zero(), &mut d.data, kl);
    }
    d
}
