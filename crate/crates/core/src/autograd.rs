//! A small reverse-mode tape over `ndarray` 4-d tensors.
//!
//! Every forward pass builds a fresh tape; parameters live outside it in a
//! [`ParamStore`] and enter as leaf nodes, so the graph can differ step to
//! step (head variants, fusion wiring) while parameter state persists.
//! Everything runs in f64: finite-difference checks against the analytic
//! gradients are part of the test surface and need the headroom.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, Axis};

use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Array4<f64>,
    pub grad: Array4<f64>,
    pub momentum: Array4<f64>,
    /// Buffers (e.g. normalization running statistics) are not trainable:
    /// the optimizer skips them and backward never writes their grad.
    pub trainable: bool,
}

/// Persistent parameter state shared across tapes.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array4<f64>) -> ParamId {
        self.add_inner(name, value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Array4<f64>) -> ParamId {
        self.add_inner(name, value, false)
    }

    fn add_inner(&mut self, name: impl Into<String>, value: Array4<f64>, trainable: bool) -> ParamId {
        let dim = value.raw_dim();
        self.params.push(Param {
            name: name.into(),
            value,
            grad: Array4::zeros(dim.clone()),
            momentum: Array4::zeros(dim),
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Number of scalar parameters, trainable only.
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Number of scalar parameters including buffers.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }
}

/// How out-of-raster taps are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PadMode {
    #[default]
    Zero,
    /// Clamp to the nearest edge pixel; keeps constant fields constant all
    /// the way to the border.
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvCfg {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub pad_mode: PadMode,
}

impl Default for ConvCfg {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
            pad_mode: PadMode::Zero,
        }
    }
}

pub fn conv_out_len(len: usize, kernel: usize, cfg: &ConvCfg) -> usize {
    (len + 2 * cfg.padding - cfg.dilation * (kernel - 1) - 1) / cfg.stride + 1
}

enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        cfg: ConvCfg,
        kernel: (usize, usize),
        cols: Vec<Array2<f64>>,
    },
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mean: Array1<f64>,
        invstd: Array1<f64>,
        batch_stats: bool,
    },
    Relu {
        x: VarId,
    },
    MaxPool2 {
        x: VarId,
        argmax: Vec<u32>,
    },
    Bilinear {
        x: VarId,
    },
    ConcatC {
        xs: Vec<VarId>,
    },
    SliceC {
        x: VarId,
        start: usize,
    },
    SlicedConcat {
        binaries: Vec<VarId>,
        semantic: VarId,
    },
    GroupSum {
        x: VarId,
        group_size: usize,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    /// Weighted sum of same-shape nodes.
    AddN {
        terms: Vec<(f64, VarId)>,
    },
    SoftmaxCe {
        logits: VarId,
        labels: Array3<i64>,
        ignore: i64,
        n_valid: usize,
    },
    BalancedBce {
        logits: VarId,
        targets: Array4<f64>,
        valid: Array3<bool>,
        /// Per (sample, channel) positive/negative weights and the sample's
        /// valid entry count.
        weights: Vec<(f64, f64)>,
        per_image_valid: Vec<usize>,
    },
}

/// One forward pass worth of computation graph.
pub struct Tape {
    values: Vec<Array4<f64>>,
    ops: Vec<Op>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, value: Array4<f64>, op: Op) -> VarId {
        self.values.push(value);
        self.ops.push(op);
        VarId(self.values.len() - 1)
    }

    pub fn value(&self, id: VarId) -> &Array4<f64> {
        &self.values[id.0]
    }

    pub fn scalar(&self, id: VarId) -> f64 {
        self.values[id.0][(0, 0, 0, 0)]
    }

    pub fn shape(&self, id: VarId) -> (usize, usize, usize, usize) {
        let d = self.values[id.0].dim();
        (d.0, d.1, d.2, d.3)
    }

    pub fn input(&mut self, x: Array4<f64>) -> VarId {
        self.push(x, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, pid: ParamId) -> VarId {
        self.push(store.get(pid).value.clone(), Op::Param(pid))
    }

    pub fn conv2d(&mut self, x: VarId, w: VarId, b: Option<VarId>, cfg: ConvCfg) -> VarId {
        let (n, cin, h, wdt) = self.shape(x);
        let (cout, cin_g, kh, kw) = self.shape(w);
        assert_eq!(
            cin,
            cin_g * cfg.groups,
            "conv input channels {cin} do not match weight {cin_g}x{} groups",
            cfg.groups
        );
        assert_eq!(cout % cfg.groups, 0);
        let oh = conv_out_len(h, kh, &cfg);
        let ow = conv_out_len(wdt, kw, &cfg);
        let mut out = Array4::<f64>::zeros((n, cout, oh, ow));
        let mut cols = Vec::with_capacity(n);
        let cout_g = cout / cfg.groups;
        let wmat = self.values[w.0]
            .view()
            .into_shape_with_order((cout, cin_g * kh * kw))
            .unwrap()
            .to_owned();
        for ni in 0..n {
            let col = im2col(
                &self.values[x.0].index_axis(Axis(0), ni),
                (kh, kw),
                &cfg,
                (oh, ow),
            );
            for g in 0..cfg.groups {
                let wg = wmat.slice(s![g * cout_g..(g + 1) * cout_g, ..]);
                let colg = col.slice(s![g * cin_g * kh * kw..(g + 1) * cin_g * kh * kw, ..]);
                let og = wg.dot(&colg);
                out.slice_mut(s![ni, g * cout_g..(g + 1) * cout_g, .., ..])
                    .assign(
                        &og.into_shape_with_order((cout_g, oh, ow)).unwrap(),
                    );
            }
            cols.push(col);
        }
        if let Some(b) = b {
            let bias = self.values[b.0].clone();
            for c in 0..cout {
                out.slice_mut(s![.., c, .., ..])
                    .mapv_inplace(|v| v + bias[(0, c, 0, 0)]);
            }
        }
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                cfg,
                kernel: (kh, kw),
                cols,
            },
        )
    }

    /// Batch normalization. With `batch_stats` the statistics come from the
    /// minibatch (training); otherwise the provided running statistics are
    /// used. Running-stat updates are the caller's concern so the tape stays
    /// a pure function of its inputs.
    pub fn batch_norm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running: Option<(&Array1<f64>, &Array1<f64>)>,
        eps: f64,
    ) -> (VarId, Array1<f64>, Array1<f64>) {
        let (n, c, h, w) = self.shape(x);
        let count = (n * h * w) as f64;
        let (mean, var, batch_stats) = match running {
            None => {
                let mut mean = Array1::<f64>::zeros(c);
                let mut var = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let xc = self.values[x.0].slice(s![.., ci, .., ..]);
                    let m = xc.sum() / count;
                    mean[ci] = m;
                    var[ci] = xc.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / count;
                }
                (mean, var, true)
            }
            Some((rm, rv)) => (rm.clone(), rv.clone(), false),
        };
        let invstd = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mut out = Array4::<f64>::zeros((n, c, h, w));
        let gv = &self.values[gamma.0];
        let bv = &self.values[beta.0];
        for ci in 0..c {
            let g = gv[(0, ci, 0, 0)];
            let b = bv[(0, ci, 0, 0)];
            let m = mean[ci];
            let is = invstd[ci];
            let xc = self.values[x.0].slice(s![.., ci, .., ..]);
            out.slice_mut(s![.., ci, .., ..])
                .assign(&xc.mapv(|v| (v - m) * is * g + b));
        }
        let id = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                invstd,
                batch_stats,
            },
        );
        (id, mean, var)
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        // Written to propagate NaN (f64::max would swallow it), so the
        // trainer's divergence guard sees poisoned activations.
        let out = self.values[x.0].mapv(|v| if v < 0.0 { 0.0 } else { v });
        self.push(out, Op::Relu { x })
    }

    pub fn max_pool2(&mut self, x: VarId) -> VarId {
        let (n, c, h, w) = self.shape(x);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array4::<f64>::zeros((n, c, oh, ow));
        let mut argmax = vec![0u32; n * c * oh * ow];
        let xv = &self.values[x.0];
        let mut k = 0;
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (y0, x0) = (oy * 2, ox * 2);
                        let mut best = f64::NEG_INFINITY;
                        let mut bidx = 0u32;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let v = xv[(ni, ci, y0 + dy, x0 + dx)];
                                if v > best {
                                    best = v;
                                    bidx = ((y0 + dy) * w + x0 + dx) as u32;
                                }
                            }
                        }
                        out[(ni, ci, oy, ox)] = best;
                        argmax[k] = bidx;
                        k += 1;
                    }
                }
            }
        }
        self.push(out, Op::MaxPool2 { x, argmax })
    }

    /// Bilinear resize to `(oh, ow)`, half-pixel aligned. Constant inputs map
    /// to constant outputs because the interpolation weights sum to one.
    pub fn resize_bilinear(&mut self, x: VarId, oh: usize, ow: usize) -> VarId {
        let (n, c, h, w) = self.shape(x);
        if (h, w) == (oh, ow) {
            let out = self.values[x.0].clone();
            return self.push(out, Op::AddN {
                terms: vec![(1.0, x)],
            });
        }
        let ytaps = bilinear_taps(h, oh);
        let xtaps = bilinear_taps(w, ow);
        let xv = &self.values[x.0];
        let mut out = Array4::<f64>::zeros((n, c, oh, ow));
        for ni in 0..n {
            for ci in 0..c {
                for (oy, &(y0, y1, wy0, wy1)) in ytaps.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in xtaps.iter().enumerate() {
                        out[(ni, ci, oy, ox)] = wy0 * wx0 * xv[(ni, ci, y0, x0)]
                            + wy0 * wx1 * xv[(ni, ci, y0, x1)]
                            + wy1 * wx0 * xv[(ni, ci, y1, x0)]
                            + wy1 * wx1 * xv[(ni, ci, y1, x1)];
                    }
                }
            }
        }
        self.push(out, Op::Bilinear { x })
    }

    pub fn concat_c(&mut self, xs: &[VarId]) -> VarId {
        let (n, _, h, w) = self.shape(xs[0]);
        let ctot: usize = xs.iter().map(|&x| self.shape(x).1).sum();
        let mut out = Array4::<f64>::zeros((n, ctot, h, w));
        let mut at = 0;
        for &x in xs {
            let c = self.shape(x).1;
            out.slice_mut(s![.., at..at + c, .., ..])
                .assign(&self.values[x.0]);
            at += c;
        }
        self.push(out, Op::ConcatC { xs: xs.to_vec() })
    }

    pub fn slice_c(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let out = self.values[x.0].slice(s![.., start..start + len, .., ..]).to_owned();
        self.push(out, Op::SliceC { x, start })
    }

    /// Category-sliced concatenation: with K-1 single-channel maps and an
    /// N-channel map, category `c`'s block is `[b_1, .., b_{K-1}, sem_c]`,
    /// giving `K * N` channels. The binary maps repeat in every block.
    pub fn sliced_concat(&mut self, binaries: &[VarId], semantic: VarId) -> VarId {
        let (n, ncat, h, w) = self.shape(semantic);
        for &b in binaries {
            assert_eq!(self.shape(b), (n, 1, h, w), "sliced concat shape mismatch");
        }
        let k = binaries.len() + 1;
        let mut out = Array4::<f64>::zeros((n, k * ncat, h, w));
        for c in 0..ncat {
            for (j, &b) in binaries.iter().enumerate() {
                out.slice_mut(s![.., c * k + j, .., ..])
                    .assign(&self.values[b.0].index_axis(Axis(1), 0));
            }
            out.slice_mut(s![.., c * k + k - 1, .., ..])
                .assign(&self.values[semantic.0].index_axis(Axis(1), c));
        }
        self.push(
            out,
            Op::SlicedConcat {
                binaries: binaries.to_vec(),
                semantic,
            },
        )
    }

    /// Sums each consecutive block of `group_size` channels.
    pub fn group_sum_c(&mut self, x: VarId, group_size: usize) -> VarId {
        let (n, c, h, w) = self.shape(x);
        assert_eq!(c % group_size, 0);
        let groups = c / group_size;
        let mut out = Array4::<f64>::zeros((n, groups, h, w));
        for g in 0..groups {
            for j in 0..group_size {
                let src = self.values[x.0].index_axis(Axis(1), g * group_size + j);
                let mut dst = out.index_axis_mut(Axis(1), g);
                dst += &src;
            }
        }
        self.push(out, Op::GroupSum { x, group_size })
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let out = &self.values[a.0] * &self.values[b.0];
        self.push(out, Op::Mul { a, b })
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        self.add_n(&[(1.0, a), (1.0, b)])
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        self.add_n(&[(c, x)])
    }

    pub fn add_n(&mut self, terms: &[(f64, VarId)]) -> VarId {
        let mut out = Array4::<f64>::zeros(self.values[terms[0].1 .0].raw_dim());
        for &(c, x) in terms {
            out.scaled_add(c, &self.values[x.0]);
        }
        self.push(
            out,
            Op::AddN {
                terms: terms.to_vec(),
            },
        )
    }

    /// Mean cross entropy over non-ignored pixels. Returns the loss node and
    /// a degenerate flag set when every pixel is ignored (loss defined as 0).
    pub fn softmax_cross_entropy(
        &mut self,
        logits: VarId,
        labels: &Array3<i64>,
        ignore: i64,
    ) -> (VarId, bool) {
        let (n, c, h, w) = self.shape(logits);
        assert_eq!(labels.dim(), (n, h, w), "label raster shape mismatch");
        let lv = &self.values[logits.0];
        let mut n_valid = 0usize;
        let mut total = 0.0;
        for ni in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let lab = labels[(ni, y, x)];
                    if lab == ignore {
                        continue;
                    }
                    n_valid += 1;
                    let mut maxv = f64::NEG_INFINITY;
                    for ci in 0..c {
                        maxv = maxv.max(lv[(ni, ci, y, x)]);
                    }
                    let mut lse = 0.0;
                    for ci in 0..c {
                        lse += (lv[(ni, ci, y, x)] - maxv).exp();
                    }
                    let lse = maxv + lse.ln();
                    total += lse - lv[(ni, lab as usize, y, x)];
                }
            }
        }
        let degenerate = n_valid == 0;
        let loss = if degenerate { 0.0 } else { total / n_valid as f64 };
        let id = self.push(
            Array4::from_elem((1, 1, 1, 1), loss),
            Op::SoftmaxCe {
                logits,
                labels: labels.clone(),
                ignore,
                n_valid,
            },
        );
        (id, degenerate)
    }

    /// Class-balanced binary cross entropy over a multi-label boundary
    /// target. Positive entries weigh `1 - rho`, negatives `rho`, with `rho`
    /// the positive fraction of the sample's valid entries (whole tensor, or
    /// per channel with `per_channel_rho`). Degenerate samples
    /// (`rho` of 0 or 1) fall back to unweighted BCE and set the flag.
    pub fn balanced_bce(
        &mut self,
        logits: VarId,
        targets: &Array4<f64>,
        valid: &Array3<bool>,
        per_channel_rho: bool,
    ) -> (VarId, bool) {
        let (n, c, h, w) = self.shape(logits);
        assert_eq!(targets.dim(), (n, c, h, w), "bce target shape mismatch");
        assert_eq!(valid.dim(), (n, h, w), "bce valid mask shape mismatch");
        let lv = &self.values[logits.0];
        let mut weights = vec![(1.0, 1.0); n * c];
        let mut per_image_valid = vec![0usize; n];
        let mut fallback = false;

        for ni in 0..n {
            let valid_px: usize = (0..h)
                .map(|y| (0..w).filter(|&x| valid[(ni, y, x)]).count())
                .sum();
            per_image_valid[ni] = valid_px * c;
            let rho_of = |pos: f64, total: f64| -> Option<(f64, f64)> {
                if total == 0.0 {
                    return None;
                }
                let rho = pos / total;
                if rho == 0.0 || rho == 1.0 {
                    None
                } else {
                    Some((1.0 - rho, rho))
                }
            };
            if per_channel_rho {
                for ci in 0..c {
                    let mut pos = 0.0;
                    for y in 0..h {
                        for x in 0..w {
                            if valid[(ni, y, x)] {
                                pos += targets[(ni, ci, y, x)];
                            }
                        }
                    }
                    match rho_of(pos, valid_px as f64) {
                        Some(wp) => weights[ni * c + ci] = wp,
                        None => fallback = true,
                    }
                }
            } else {
                let mut pos = 0.0;
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            if valid[(ni, y, x)] {
                                pos += targets[(ni, ci, y, x)];
                            }
                        }
                    }
                }
                match rho_of(pos, (valid_px * c) as f64) {
                    Some(wp) => {
                        for ci in 0..c {
                            weights[ni * c + ci] = wp;
                        }
                    }
                    None => fallback = true,
                }
            }
        }

        let mut total = 0.0;
        let mut batch_n = 0usize;
        for ni in 0..n {
            if per_image_valid[ni] == 0 {
                continue;
            }
            batch_n += 1;
            let mut acc = 0.0;
            for ci in 0..c {
                let (wp, wn) = weights[ni * c + ci];
                for y in 0..h {
                    for x in 0..w {
                        if !valid[(ni, y, x)] {
                            continue;
                        }
                        let z = lv[(ni, ci, y, x)];
                        let t = targets[(ni, ci, y, x)];
                        // max(z,0) - z*t + ln(1 + exp(-|z|)), weighted.
                        let bce = z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
                        acc += (wp * t + wn * (1.0 - t)) * bce;
                    }
                }
            }
            total += acc / per_image_valid[ni] as f64;
        }
        let loss = if batch_n == 0 { 0.0 } else { total / batch_n as f64 };
        let id = self.push(
            Array4::from_elem((1, 1, 1, 1), loss),
            Op::BalancedBce {
                logits,
                targets: targets.clone(),
                valid: valid.clone(),
                weights,
                per_image_valid,
            },
        );
        (id, fallback)
    }

    /// Reverse sweep from `root` (seeded with 1), accumulating parameter
    /// gradients into `store`.
    pub fn backward(&self, root: VarId, store: &mut ParamStore) {
        let mut grads: Vec<Option<Array4<f64>>> = vec![None; self.values.len()];
        grads[root.0] = Some(Array4::ones(self.values[root.0].raw_dim()));

        for i in (0..self.values.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Input => {}
                Op::Param(pid) => {
                    let p = store.get_mut(*pid);
                    if p.trainable {
                        p.grad += &g;
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    cfg,
                    kernel,
                    cols,
                } => {
                    let (n, cin, h, wdt) = dim4(&self.values[x.0]);
                    let (cout, cin_g, kh, kw) = dim4(&self.values[w.0]);
                    let (_, _, oh, ow) = dim4(&self.values[i]);
                    debug_assert_eq!((kh, kw), *kernel);
                    let cout_g = cout / cfg.groups;
                    let wmat = self.values[w.0]
                        .view()
                        .into_shape_with_order((cout, cin_g * kh * kw))
                        .unwrap()
                        .to_owned();
                    let mut dw = Array2::<f64>::zeros((cout, cin_g * kh * kw));
                    let mut dx = Array4::<f64>::zeros((n, cin, h, wdt));
                    for ni in 0..n {
                        let dout = g
                            .index_axis(Axis(0), ni)
                            .into_shape_with_order((cout, oh * ow))
                            .unwrap()
                            .to_owned();
                        let col = &cols[ni];
                        let mut dcol =
                            Array2::<f64>::zeros((cin_g * kh * kw * cfg.groups, oh * ow));
                        for gi in 0..cfg.groups {
                            let rows = gi * cin_g * kh * kw..(gi + 1) * cin_g * kh * kw;
                            let orows = gi * cout_g..(gi + 1) * cout_g;
                            let dg = dout.slice(s![orows.clone(), ..]);
                            let cg = col.slice(s![rows.clone(), ..]);
                            dw.slice_mut(s![orows.clone(), ..])
                                .scaled_add(1.0, &dg.dot(&cg.t()));
                            let wg = wmat.slice(s![orows, ..]);
                            dcol.slice_mut(s![rows, ..]).assign(&wg.t().dot(&dg));
                        }
                        col2im_acc(
                            &dcol,
                            &mut dx.index_axis_mut(Axis(0), ni),
                            (kh, kw),
                            cfg,
                            (oh, ow),
                        );
                    }
                    acc(&mut grads[w.0], &dw.into_shape_with_order((cout, cin_g, kh, kw)).unwrap().into_dyn().into_dimensionality().unwrap());
                    acc(&mut grads[x.0], &dx);
                    if let Some(b) = b {
                        let mut db = Array4::<f64>::zeros((1, cout, 1, 1));
                        for c in 0..cout {
                            db[(0, c, 0, 0)] = g.slice(s![.., c, .., ..]).sum();
                        }
                        acc(&mut grads[b.0], &db);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    invstd,
                    batch_stats,
                } => {
                    let (n, c, h, w) = dim4(&self.values[x.0]);
                    let count = (n * h * w) as f64;
                    let gv = &self.values[gamma.0];
                    let mut dgamma = Array4::<f64>::zeros((1, c, 1, 1));
                    let mut dbeta = Array4::<f64>::zeros((1, c, 1, 1));
                    let mut dx = Array4::<f64>::zeros((n, c, h, w));
                    for ci in 0..c {
                        let m = mean[ci];
                        let is = invstd[ci];
                        let gam = gv[(0, ci, 0, 0)];
                        let xc = self.values[x.0].slice(s![.., ci, .., ..]);
                        let gc = g.slice(s![.., ci, .., ..]);
                        let xhat = xc.mapv(|v| (v - m) * is);
                        let sum_g = gc.sum();
                        let sum_gx = (&gc * &xhat).sum();
                        dbeta[(0, ci, 0, 0)] = sum_g;
                        dgamma[(0, ci, 0, 0)] = sum_gx;
                        let mut dxc = dx.slice_mut(s![.., ci, .., ..]);
                        if *batch_stats {
                            let mg = sum_g / count;
                            let mgx = sum_gx / count;
                            dxc.assign(
                                &ndarray::Zip::from(&gc)
                                    .and(&xhat)
                                    .map_collect(|&gi, &xh| gam * is * (gi - mg - xh * mgx)),
                            );
                        } else {
                            dxc.assign(&gc.mapv(|gi| gam * is * gi));
                        }
                    }
                    acc(&mut grads[gamma.0], &dgamma);
                    acc(&mut grads[beta.0], &dbeta);
                    acc(&mut grads[x.0], &dx);
                }
                Op::Relu { x } => {
                    let mask = self.values[i].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut grads[x.0], &(&g * &mask));
                }
                Op::MaxPool2 { x, argmax } => {
                    let (n, c, h, w) = dim4(&self.values[x.0]);
                    let (_, _, oh, ow) = dim4(&self.values[i]);
                    let mut dx = Array4::<f64>::zeros((n, c, h, w));
                    let mut k = 0;
                    for ni in 0..n {
                        for ci in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let flat = argmax[k] as usize;
                                    dx[(ni, ci, flat / w, flat % w)] += g[(ni, ci, oy, ox)];
                                    k += 1;
                                }
                            }
                        }
                    }
                    acc(&mut grads[x.0], &dx);
                }
                Op::Bilinear { x } => {
                    let (n, c, h, w) = dim4(&self.values[x.0]);
                    let (_, _, oh, ow) = dim4(&self.values[i]);
                    let ytaps = bilinear_taps(h, oh);
                    let xtaps = bilinear_taps(w, ow);
                    let mut dx = Array4::<f64>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for ci in 0..c {
                            for (oy, &(y0, y1, wy0, wy1)) in ytaps.iter().enumerate() {
                                for (ox, &(x0, x1, wx0, wx1)) in xtaps.iter().enumerate() {
                                    let gv = g[(ni, ci, oy, ox)];
                                    dx[(ni, ci, y0, x0)] += wy0 * wx0 * gv;
                                    dx[(ni, ci, y0, x1)] += wy0 * wx1 * gv;
                                    dx[(ni, ci, y1, x0)] += wy1 * wx0 * gv;
                                    dx[(ni, ci, y1, x1)] += wy1 * wx1 * gv;
                                }
                            }
                        }
                    }
                    acc(&mut grads[x.0], &dx);
                }
                Op::ConcatC { xs } => {
                    let mut at = 0;
                    for &x in xs {
                        let c = dim4(&self.values[x.0]).1;
                        let gx = g.slice(s![.., at..at + c, .., ..]).to_owned();
                        acc(&mut grads[x.0], &gx);
                        at += c;
                    }
                }
                Op::SliceC { x, start } => {
                    let (n, c, h, w) = dim4(&self.values[x.0]);
                    let len = dim4(&self.values[i]).1;
                    let mut dx = Array4::<f64>::zeros((n, c, h, w));
                    dx.slice_mut(s![.., *start..start + len, .., ..]).assign(&g);
                    acc(&mut grads[x.0], &dx);
                }
                Op::SlicedConcat { binaries, semantic } => {
                    let (n, ncat, h, w) = dim4(&self.values[semantic.0]);
                    let k = binaries.len() + 1;
                    for (j, &b) in binaries.iter().enumerate() {
                        let mut db = Array4::<f64>::zeros((n, 1, h, w));
                        for c in 0..ncat {
                            let src = g.slice(s![.., c * k + j, .., ..]);
                            let mut dst = db.index_axis_mut(Axis(1), 0);
                            dst += &src;
                        }
                        acc(&mut grads[b.0], &db);
                    }
                    let mut ds = Array4::<f64>::zeros((n, ncat, h, w));
                    for c in 0..ncat {
                        ds.index_axis_mut(Axis(1), c)
                            .assign(&g.index_axis(Axis(1), c * k + k - 1));
                    }
                    acc(&mut grads[semantic.0], &ds);
                }
                Op::GroupSum { x, group_size } => {
                    let (n, c, h, w) = dim4(&self.values[x.0]);
                    let mut dx = Array4::<f64>::zeros((n, c, h, w));
                    for ci in 0..c {
                        dx.index_axis_mut(Axis(1), ci)
                            .assign(&g.index_axis(Axis(1), ci / group_size));
                    }
                    acc(&mut grads[x.0], &dx);
                }
                Op::Mul { a, b } => {
                    let da = &g * &self.values[b.0];
                    let db = &g * &self.values[a.0];
                    acc(&mut grads[a.0], &da);
                    acc(&mut grads[b.0], &db);
                }
                Op::AddN { terms } => {
                    for &(cf, x) in terms {
                        let mut gx = g.clone();
                        gx.mapv_inplace(|v| v * cf);
                        acc(&mut grads[x.0], &gx);
                    }
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    ignore,
                    n_valid,
                } => {
                    if *n_valid == 0 {
                        continue;
                    }
                    let gscalar = g[(0, 0, 0, 0)] / *n_valid as f64;
                    let (n, c, h, w) = dim4(&self.values[logits.0]);
                    let lv = &self.values[logits.0];
                    let mut dl = Array4::<f64>::zeros((n, c, h, w));
                    for ni in 0..n {
                        for y in 0..h {
                            for x in 0..w {
                                let lab = labels[(ni, y, x)];
                                if lab == *ignore {
                                    continue;
                                }
                                let mut maxv = f64::NEG_INFINITY;
                                for ci in 0..c {
                                    maxv = maxv.max(lv[(ni, ci, y, x)]);
                                }
                                let mut denom = 0.0;
                                for ci in 0..c {
                                    denom += (lv[(ni, ci, y, x)] - maxv).exp();
                                }
                                for ci in 0..c {
                                    let p = (lv[(ni, ci, y, x)] - maxv).exp() / denom;
                                    let t = if ci as i64 == lab { 1.0 } else { 0.0 };
                                    dl[(ni, ci, y, x)] = gscalar * (p - t);
                                }
                            }
                        }
                    }
                    acc(&mut grads[logits.0], &dl);
                }
                Op::BalancedBce {
                    logits,
                    targets,
                    valid,
                    weights,
                    per_image_valid,
                } => {
                    let batch_n = per_image_valid.iter().filter(|&&v| v > 0).count();
                    if batch_n == 0 {
                        continue;
                    }
                    let gscalar = g[(0, 0, 0, 0)] / batch_n as f64;
                    let (n, c, h, w) = dim4(&self.values[logits.0]);
                    let lv = &self.values[logits.0];
                    let mut dl = Array4::<f64>::zeros((n, c, h, w));
                    for ni in 0..n {
                        if per_image_valid[ni] == 0 {
                            continue;
                        }
                        let inv = 1.0 / per_image_valid[ni] as f64;
                        for ci in 0..c {
                            let (wp, wn) = weights[ni * c + ci];
                            for y in 0..h {
                                for x in 0..w {
                                    if !valid[(ni, y, x)] {
                                        continue;
                                    }
                                    let z = lv[(ni, ci, y, x)];
                                    let t = targets[(ni, ci, y, x)];
                                    let sig = 1.0 / (1.0 + (-z).exp());
                                    let wgt = wp * t + wn * (1.0 - t);
                                    dl[(ni, ci, y, x)] = gscalar * inv * wgt * (sig - t);
                                }
                            }
                        }
                    }
                    acc(&mut grads[logits.0], &dl);
                }
            }
        }
    }
}

fn dim4(a: &Array4<f64>) -> (usize, usize, usize, usize) {
    a.dim()
}

fn acc(slot: &mut Option<Array4<f64>>, g: &Array4<f64>) {
    match slot {
        Some(existing) => *existing += g,
        None => *slot = Some(g.clone()),
    }
}

/// Source taps for half-pixel-aligned bilinear interpolation.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            let w1 = src - i0 as f64;
            (i0, i1, 1.0 - w1, w1)
        })
        .collect()
}

/// Resolves a padded tap coordinate to a source index, or `None` for a zero
/// tap.
#[inline]
fn tap(raw: i64, len: usize, mode: PadMode) -> Option<usize> {
    if raw >= 0 && raw < len as i64 {
        Some(raw as usize)
    } else {
        match mode {
            PadMode::Zero => None,
            PadMode::Replicate => Some(raw.clamp(0, len as i64 - 1) as usize),
        }
    }
}

fn im2col(
    x: &ArrayView3<f64>,
    (kh, kw): (usize, usize),
    cfg: &ConvCfg,
    (oh, ow): (usize, usize),
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut col = Array2::<f64>::zeros((cin * kh * kw, oh * ow));
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let mut crow = col.row_mut(row);
                for oy in 0..oh {
                    let raw_y = (oy * cfg.stride + ky * cfg.dilation) as i64 - cfg.padding as i64;
                    let Some(iy) = tap(raw_y, h, cfg.pad_mode) else { continue };
                    for ox in 0..ow {
                        let raw_x =
                            (ox * cfg.stride + kx * cfg.dilation) as i64 - cfg.padding as i64;
                        if let Some(ix) = tap(raw_x, w, cfg.pad_mode) {
                            crow[oy * ow + ox] = x[(c, iy, ix)];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im_acc(
    dcol: &Array2<f64>,
    dx: &mut ndarray::ArrayViewMut3<f64>,
    (kh, kw): (usize, usize),
    cfg: &ConvCfg,
    (oh, ow): (usize, usize),
) {
    let (cin, h, w) = dx.dim();
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let drow = dcol.row(row);
                for oy in 0..oh {
                    let raw_y = (oy * cfg.stride + ky * cfg.dilation) as i64 - cfg.padding as i64;
                    let Some(iy) = tap(raw_y, h, cfg.pad_mode) else { continue };
                    for ox in 0..ow {
                        let raw_x =
                            (ox * cfg.stride + kx * cfg.dilation) as i64 - cfg.padding as i64;
                        if let Some(ix) = tap(raw_x, w, cfg.pad_mode) {
                            dx[(c, iy, ix)] += drow[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Central finite difference of `f` w.r.t. one scalar of one parameter.
/// Probes run against clones, so the store is untouched.
pub fn finite_diff(
    store: &ParamStore,
    pid: ParamId,
    flat_index: usize,
    eps: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let mut plus = store.clone();
    plus.get_mut(pid).value.as_slice_mut().unwrap()[flat_index] += eps;
    let mut minus = store.clone();
    minus.get_mut(pid).value.as_slice_mut().unwrap()[flat_index] -= eps;
    (f(&plus) - f(&minus)) / (2.0 * eps)
}

/// Relative error helper used by the gradient-check tests.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / denom
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tape({} nodes)", self.values.len())
    }
}

/// Validates a shape pair, for call sites that surface [`Error`] instead of
/// panicking.
pub fn expect_shape(expected: (usize, usize, usize, usize), got: (usize, usize, usize, usize)) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch {
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        });
    }
    Ok(())
}
