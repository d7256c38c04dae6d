//! Layers over the tape: convolution, batch norm, and initialization.

use ndarray::{Array1, Array4};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{ConvCfg, ParamId, ParamStore, Tape, VarId};

/// Forward mode. Training uses minibatch normalization statistics and
/// updates the running buffers; evaluation reads the running buffers and is
/// reentrant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub type InitRng = rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cfg: ConvCfg,
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    /// Kaiming-normal weights; zero bias when present.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut InitRng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        cfg: ConvCfg,
        bias: bool,
    ) -> Self {
        let cin_g = in_channels / cfg.groups;
        let fan_in = (cin_g * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = Array4::from_shape_fn((out_channels, cin_g, kernel, kernel), |_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        });
        let w = store.add(format!("{name}.weight"), w);
        let b = bias.then(|| store.add(format!("{name}.bias"), Array4::zeros((1, out_channels, 1, 1))));
        Self {
            w,
            b,
            cfg,
            kernel,
            in_channels,
            out_channels,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: VarId) -> VarId {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.cfg)
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        let mut n = store.get(self.w).value.len();
        if let Some(b) = self.b {
            n += store.get(b).value.len();
        }
        n
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Array4::ones((1, channels, 1, 1)));
        let beta = store.add(format!("{name}.beta"), Array4::zeros((1, channels, 1, 1)));
        let running_mean =
            store.add_buffer(format!("{name}.running_mean"), Array4::zeros((1, channels, 1, 1)));
        let running_var =
            store.add_buffer(format!("{name}.running_var"), Array4::ones((1, channels, 1, 1)));
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: VarId, mode: Mode) -> VarId {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (out, mean, var) = tape.batch_norm(x, gamma, beta, None, self.eps);
                let (n, _, h, w) = tape.shape(x);
                let count = (n * h * w) as f64;
                // Running variance keeps the unbiased estimate.
                let unbiased = if count > 1.0 {
                    var.mapv(|v| v * count / (count - 1.0))
                } else {
                    var.clone()
                };
                let m = self.momentum;
                for (c, (&mu, &uv)) in mean.iter().zip(unbiased.iter()).enumerate() {
                    let rm = &mut store.get_mut(self.running_mean).value[(0, c, 0, 0)];
                    *rm = (1.0 - m) * *rm + m * mu;
                    let rv = &mut store.get_mut(self.running_var).value[(0, c, 0, 0)];
                    *rv = (1.0 - m) * *rv + m * uv;
                }
                out
            }
            Mode::Eval => {
                let rm = buffer_to_1d(store, self.running_mean);
                let rv = buffer_to_1d(store, self.running_var);
                let (out, _, _) = tape.batch_norm(x, gamma, beta, Some((&rm, &rv)), self.eps);
                out
            }
        }
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        store.get(self.gamma).value.len() + store.get(self.beta).value.len()
    }
}

fn buffer_to_1d(store: &ParamStore, pid: ParamId) -> Array1<f64> {
    let v = &store.get(pid).value;
    Array1::from_iter(v.iter().copied())
}

/// Conv + BN + ReLU, the standard block used throughout the toy nets.
#[derive(Debug, Clone)]
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: BatchNorm2d,
}

impl ConvNormAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut InitRng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        let cfg = ConvCfg {
            stride,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            groups: 1,
            pad_mode: crate::autograd::PadMode::Zero,
        };
        let conv = Conv2d::new(
            store,
            rng,
            &format!("{name}.conv"),
            in_channels,
            out_channels,
            kernel,
            cfg,
            false,
        );
        let norm = BatchNorm2d::new(store, &format!("{name}.bn"), out_channels);
        Self { conv, norm }
    }

    pub fn forward(&self, tape: &mut Tape, store: &mut ParamStore, x: VarId, mode: Mode) -> VarId {
        let x = self.conv.forward(tape, store, x);
        let x = self.norm.forward(tape, store, x, mode);
        tape.relu(x)
    }

    pub fn num_params(&self, store: &ParamStore) -> usize {
        self.conv.num_params(store) + self.norm.num_params(store)
    }
}

/// Derives an independent init stream so that optional modules (auxiliary
/// heads, fusion blocks) can be added without disturbing the main stream.
pub fn derived_rng(seed: u64, salt: &str) -> InitRng {
    use rand::SeedableRng;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in salt.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    InitRng::seed_from_u64(seed ^ h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{finite_diff, rel_err};
    use ndarray::{Array3, Array4};
    use rand::SeedableRng;

    fn rand_input(rng: &mut InitRng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
    }

    /// Scalar loss for gradient checking: balanced BCE of a small net's
    /// output against a fixed target, exercising most op backward paths.
    fn toy_loss(store: &ParamStore, input: &Array4<f64>, train: bool) -> (f64, ParamStore) {
        let mut store = store.clone();
        let mut tape = Tape::new();
        let x = tape.input(input.clone());
        let conv = Conv2d {
            w: crate::autograd::ParamId(0),
            b: Some(crate::autograd::ParamId(1)),
            cfg: ConvCfg {
                stride: 1,
                padding: 1,
                dilation: 1,
                groups: 1,
                pad_mode: crate::autograd::PadMode::Zero,
            },
            kernel: 3,
            in_channels: 2,
            out_channels: 3,
        };
        let bn = BatchNorm2d {
            gamma: crate::autograd::ParamId(2),
            beta: crate::autograd::ParamId(3),
            running_mean: crate::autograd::ParamId(4),
            running_var: crate::autograd::ParamId(5),
            channels: 3,
            eps: 1e-5,
            momentum: 0.1,
        };
        let h = conv.forward(&mut tape, &store, x);
        let h = bn.forward(
            &mut tape,
            &mut store,
            h,
            if train { Mode::Train } else { Mode::Eval },
        );
        let h = tape.relu(h);
        let h = tape.resize_bilinear(h, 8, 8);
        let targets = Array4::from_shape_fn((1, 3, 8, 8), |(_, c, y, x)| {
            ((c + y + x) % 2) as f64
        });
        let valid = Array3::from_elem((1, 8, 8), true);
        let (loss, _) = tape.balanced_bce(h, &targets, &valid, false);
        tape.backward(loss, &mut store);
        (tape.scalar(loss), store)
    }

    #[test]
    fn conv_bn_resize_bce_gradients_match_finite_differences() {
        let mut rng = InitRng::seed_from_u64(42);
        let mut store = ParamStore::new();
        let _conv = Conv2d::new(
            &mut store,
            &mut rng,
            "c",
            2,
            3,
            3,
            ConvCfg {
                stride: 1,
                padding: 1,
                dilation: 1,
                groups: 1,
                pad_mode: crate::autograd::PadMode::Zero,
            },
            true,
        );
        let _bn = BatchNorm2d::new(&mut store, "bn", 3);
        let input = rand_input(&mut rng, (1, 2, 4, 4));

        let (_, graded) = toy_loss(&store, &input, true);
        for pid in store.ids().take(4) {
            let n = store.get(pid).value.len();
            for idx in [0, n / 2, n - 1] {
                let analytic = graded.get(pid).grad.as_slice().unwrap()[idx];
                let fd = finite_diff(&store, pid, idx, 1e-5, |s| toy_loss(s, &input, true).0);
                assert!(
                    rel_err(analytic, fd) < 1e-5 || (analytic.abs() < 1e-10 && fd.abs() < 1e-6),
                    "param {pid:?}[{idx}]: analytic {analytic} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn grouped_strided_dilated_conv_matches_finite_differences() {
        let mut rng = InitRng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(
            &mut store,
            &mut rng,
            "g",
            4,
            6,
            3,
            ConvCfg {
                stride: 2,
                padding: 2,
                dilation: 2,
                groups: 2,
                pad_mode: crate::autograd::PadMode::Zero,
            },
            true,
        );
        let input = rand_input(&mut rng, (2, 4, 7, 9));
        let run = |s: &ParamStore| -> (f64, ParamStore) {
            let mut s = s.clone();
            let mut tape = Tape::new();
            let x = tape.input(input.clone());
            let y = conv.forward(&mut tape, &s, x);
            let sq = tape.mul(y, y);
            let (n, c, h, w) = tape.shape(sq);
            // Mean-square pseudo-loss; backward seeds every element with the
            // coefficient, which sums to the right scalar gradient.
            let total = tape.add_n(&[(1.0 / (n * c * h * w) as f64, sq)]);
            tape.backward(total, &mut s);
            (tape.value(total).sum(), s)
        };
        let (_, graded) = run(&store);
        for (pid, idx) in [(conv.w, 0), (conv.w, 10), (conv.b.unwrap(), 1)] {
            let analytic = graded.get(pid).grad.as_slice().unwrap()[idx];
            let fd = finite_diff(&store, pid, idx, 1e-5, |s| run(s).0);
            assert!(
                rel_err(analytic, fd) < 1e-5,
                "{pid:?}[{idx}]: {analytic} vs {fd}"
            );
        }
    }

    #[test]
    fn softmax_ce_uniform_logits_is_ln_ncat() {
        let mut tape = Tape::new();
        let logits = tape.input(Array4::zeros((1, 4, 3, 3)));
        let labels = Array3::from_elem((1, 3, 3), 2i64);
        let (loss, degenerate) = tape.softmax_cross_entropy(logits, &labels, 255);
        assert!(!degenerate);
        assert!((tape.scalar(loss) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_ignores_everything_flags_degenerate() {
        let mut tape = Tape::new();
        let logits = tape.input(Array4::zeros((1, 4, 2, 2)));
        let labels = Array3::from_elem((1, 2, 2), 255i64);
        let (loss, degenerate) = tape.softmax_cross_entropy(logits, &labels, 255);
        assert!(degenerate);
        assert_eq!(tape.scalar(loss), 0.0);
    }

    #[test]
    fn softmax_ce_perfect_prediction_approaches_zero() {
        let mut tape = Tape::new();
        let logits = tape.input(Array4::from_shape_fn((1, 3, 2, 2), |(_, c, _, _)| {
            if c == 1 {
                50.0
            } else {
                0.0
            }
        }));
        let labels = Array3::from_elem((1, 2, 2), 1i64);
        let (loss, _) = tape.softmax_cross_entropy(logits, &labels, 255);
        assert!(tape.scalar(loss) < 1e-12);
    }

    #[test]
    fn balanced_bce_zero_logits_closed_form() {
        // With zero logits every entry costs ln 2; weighting by (1-rho) on
        // the rho-fraction positives and rho on the rest gives
        // 2 * rho * (1 - rho) * ln 2 per entry.
        let mut tape = Tape::new();
        let logits = tape.input(Array4::zeros((1, 2, 4, 4)));
        let targets = Array4::from_shape_fn((1, 2, 4, 4), |(_, c, y, _)| {
            if c == 0 && y == 0 {
                1.0
            } else {
                0.0
            }
        });
        let valid = Array3::from_elem((1, 4, 4), true);
        let (loss, fallback) = tape.balanced_bce(logits, &targets, &valid, false);
        assert!(!fallback);
        let rho = 4.0 / 32.0;
        let expected = 2.0 * rho * (1.0 - rho) * 2.0f64.ln();
        assert!((tape.scalar(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn balanced_bce_all_negative_falls_back_unweighted() {
        let mut tape = Tape::new();
        let logits = tape.input(Array4::from_elem((1, 1, 3, 3), -30.0));
        let targets = Array4::zeros((1, 1, 3, 3));
        let valid = Array3::from_elem((1, 3, 3), true);
        let (loss, fallback) = tape.balanced_bce(logits, &targets, &valid, false);
        assert!(fallback);
        assert!(tape.scalar(loss) < 1e-12);
    }

    #[test]
    fn sliced_concat_layout_and_gradients() {
        let mut tape = Tape::new();
        let b1 = tape.input(Array4::from_elem((1, 1, 2, 2), 1.0));
        let b2 = tape.input(Array4::from_elem((1, 1, 2, 2), 2.0));
        let sem = tape.input(Array4::from_shape_fn((1, 3, 2, 2), |(_, c, _, _)| {
            10.0 + c as f64
        }));
        let out = tape.sliced_concat(&[b1, b2], sem);
        assert_eq!(tape.shape(out), (1, 9, 2, 2));
        let v = tape.value(out);
        // Category blocks: [b1, b2, sem_c].
        for c in 0..3 {
            assert_eq!(v[(0, c * 3, 0, 0)], 1.0);
            assert_eq!(v[(0, c * 3 + 1, 0, 0)], 2.0);
            assert_eq!(v[(0, c * 3 + 2, 0, 0)], 10.0 + c as f64);
        }
    }

    #[test]
    fn group_sum_means_slices() {
        let mut tape = Tape::new();
        let x = tape.input(Array4::from_shape_fn((1, 6, 1, 1), |(_, c, _, _)| c as f64));
        let out = tape.group_sum_c(x, 3);
        assert_eq!(tape.shape(out), (1, 2, 1, 1));
        assert_eq!(tape.value(out)[(0, 0, 0, 0)], 3.0);
        assert_eq!(tape.value(out)[(0, 1, 0, 0)], 12.0);
    }

    #[test]
    fn resize_preserves_constants() {
        let mut tape = Tape::new();
        let x = tape.input(Array4::from_elem((1, 2, 5, 7), 3.5));
        let y = tape.resize_bilinear(x, 16, 16);
        assert!(tape.value(y).iter().all(|&v| (v - 3.5).abs() < 1e-12));
        let z = tape.resize_bilinear(x, 3, 4);
        assert!(tape.value(z).iter().all(|&v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut store = ParamStore::new();
        let pid = store.add(
            "x",
            Array4::from_shape_fn((1, 1, 2, 2), |(_, _, y, x)| (y * 2 + x) as f64),
        );
        let mut tape = Tape::new();
        let x = tape.param(&store, pid);
        let y = tape.max_pool2(x);
        assert_eq!(tape.value(y)[(0, 0, 0, 0)], 3.0);
        tape.backward(y, &mut store);
        let g = &store.get(pid).grad;
        assert_eq!(g[(0, 0, 1, 1)], 1.0);
        assert_eq!(g.sum(), 1.0);
    }

    #[test]
    fn derived_rng_streams_are_independent_and_stable() {
        let a1 = derived_rng(5, "head");
        let a2 = derived_rng(5, "head");
        let b = derived_rng(5, "fusion");
        let mut a1 = a1;
        let mut a2 = a2;
        let mut b = b;
        let x1: f64 = a1.sample(StandardNormal);
        let x2: f64 = a2.sample(StandardNormal);
        let y: f64 = b.sample(StandardNormal);
        assert_eq!(x1, x2);
        assert_ne!(x1, y);
    }
}
