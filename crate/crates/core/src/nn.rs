//! Dense tanh networks with hand-written backpropagation.
//!
//! Parameters of a network live in one flat vector laid out layer by layer as
//! `W_0, b_0, W_1, b_1, ...` with each `W_l` stored row-major as
//! `out_l x in_l`. Batches are row-major `batch x features`.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Floating-point scalar the networks are generic over.
pub trait Real:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;

    /// `C = alpha A B + beta C` for strided matrices (`A` is m x k, `B` is k x n).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn zero() -> Self {
        Self::default()
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn max(self, other: Self) -> Self {
        if self >= other { self } else { other }
    }

    fn min(self, other: Self) -> Self {
        if self <= other { self } else { other }
    }

    /// `ln(1 + e^x)` without overflow.
    fn softplus(self) -> Self {
        let z = Self::zero();
        self.max(z) + (-self.abs()).exp().ln_1p()
    }
}

/// Panics unless the strided extents of a gemm operand fit in its slice.
fn check_extent<T>(buf: &[T], rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not used");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < buf.len(), "gemm operand out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $tanh:path) => {
        impl Real for $t {
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn tanh(self) -> Self {
                $tanh(self)
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn ln_1p(self) -> Self {
                <$t>::ln_1p(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                check_extent(a, m, k, rsa, csa);
                check_extent(b, k, n, rsb, csb);
                check_extent(c, m, n, rsc, csc);
                // SAFETY: every index the kernel touches was bounds-checked above.
                unsafe {
                    $gemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc)
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, tanh_f32);
impl_real!(f64, matrixmultiply::dgemm, f64::tanh);

/// Rational approximation of tanh, within 4e-7 of the exact value and far
/// cheaper than `f32::tanh`, which dominates update time otherwise.
pub fn tanh_f32(x: f32) -> f32 {
    let x = x.clamp(-7.905_311, 7.905_311);
    let x2 = x * x;
    let mut p = -2.760_768_5e-16f32;
    p = p * x2 + 2.000_187_9e-13;
    p = p * x2 - 8.604_671_5e-11;
    p = p * x2 + 5.122_297e-8;
    p = p * x2 + 1.485_722_4e-5;
    p = p * x2 + 6.372_619_3e-4;
    p = p * x2 + 4.893_524_6e-3;
    let mut q = 1.198_258_4e-6f32;
    q = q * x2 + 1.185_347_1e-4;
    q = q * x2 + 2.268_434_6e-3;
    q = q * x2 + 4.893_525e-3;
    (x * p / q).clamp(-1.0, 1.0)
}

/// Fully connected network: tanh on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<R> {
    sizes: Vec<usize>,
    pub params: Vec<R>,
}

/// Layer activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape<R> {
    batch: usize,
    /// `acts[l]` is the input to layer `l`; the last entry is the output.
    acts: Vec<Vec<R>>,
}

impl<R> Tape<R> {
    pub fn output(&self) -> &[R] {
        self.acts.last().expect("tape has output")
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl<R: Real> Mlp<R> {
    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0), "invalid layer sizes {sizes:?}");
        let mut params = Vec::with_capacity(param_count(sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] + w[1] {
                params.push(R::from_f64(rng.random_range(-bound..bound)));
            }
        }
        Self { sizes: sizes.to_vec(), params }
    }

    pub fn from_params(sizes: &[usize], params: Vec<R>) -> Option<Self> {
        (sizes.len() >= 2 && params.len() == param_count(sizes)).then(|| Self { sizes: sizes.to_vec(), params })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Offsets of (weights, biases) of layer `l` in the flat parameter vector.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let start: usize = self.sizes.windows(2).take(l).map(|w| w[0] * w[1] + w[1]).sum();
        (start, start + self.sizes[l] * self.sizes[l + 1])
    }

    /// Scales the final layer's weights and biases, e.g. by 0 for a zero-output start.
    pub fn scale_output_layer(&mut self, factor: R) {
        let l = self.sizes.len() - 2;
        let (w, _) = self.layer_offsets(l);
        self.params[w..].iter_mut().for_each(|p| *p *= factor);
    }

    pub fn forward(&self, x: &[R], batch: usize) -> Tape<R> {
        assert_eq!(x.len(), batch * self.input_dim(), "input shape");
        let layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(x.to_vec());
        for l in 0..layers {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let (wo, bo) = self.layer_offsets(l);
            let w = &self.params[wo..bo];
            let b = &self.params[bo..bo + fan_out];
            let mut y: Vec<R> = Vec::with_capacity(batch * fan_out);
            for _ in 0..batch {
                y.extend_from_slice(b);
            }
            // y += x W^T
            R::gemm(
                batch,
                fan_in,
                fan_out,
                R::one(),
                &acts[l],
                fan_in as isize,
                1,
                w,
                1,
                fan_in as isize,
                R::one(),
                &mut y,
                fan_out as isize,
                1,
            );
            if l + 1 < layers {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(y);
        }
        Tape { batch, acts }
    }

    /// Output only.
    pub fn predict(&self, x: &[R], batch: usize) -> Vec<R> {
        self.forward(x, batch).acts.pop().unwrap()
    }

    /// Accumulates `dL/dparams` into `grad` given `dy = dL/doutput`. Returns
    /// `dL/dinput` when `want_dx` is set.
    pub fn backward(&self, tape: &Tape<R>, dy: &[R], grad: &mut [R], want_dx: bool) -> Option<Vec<R>> {
        let batch = tape.batch;
        let layers = self.sizes.len() - 1;
        assert_eq!(dy.len(), batch * self.output_dim(), "output gradient shape");
        assert_eq!(grad.len(), self.params.len(), "gradient buffer size");
        let mut delta = dy.to_vec();
        for l in (0..layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 < layers {
                // through tanh: d/dz = (1 - a^2)
                for (d, &a) in delta.iter_mut().zip(&tape.acts[l + 1]) {
                    *d *= R::one() - a * a;
                }
            }
            let (wo, bo) = self.layer_offsets(l);
            // dW += delta^T x
            R::gemm(
                fan_out,
                batch,
                fan_in,
                R::one(),
                &delta,
                1,
                fan_out as isize,
                &tape.acts[l],
                fan_in as isize,
                1,
                R::one(),
                &mut grad[wo..bo],
                fan_in as isize,
                1,
            );
            let gb = &mut grad[bo..bo + fan_out];
            for row in delta.chunks_exact(fan_out) {
                for (g, &d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            if l == 0 && !want_dx {
                return None;
            }
            // dx = delta W
            let mut dx = vec![R::zero(); batch * fan_in];
            R::gemm(
                batch,
                fan_out,
                fan_in,
                R::one(),
                &delta,
                fan_out as isize,
                1,
                &self.params[wo..bo],
                fan_in as isize,
                1,
                R::zero(),
                &mut dx,
                fan_in as isize,
                1,
            );
            delta = dx;
        }
        Some(delta)
    }

    pub fn cast<S: Real>(&self) -> Mlp<S> {
        Mlp { sizes: self.sizes.clone(), params: self.params.iter().map(|p| S::from_f64(p.to_f64())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// `self <- tau * source + (1 - tau) * self`.
    pub fn soft_update_from(&mut self, source: &Mlp<R>, tau: R) {
        assert_eq!(self.params.len(), source.params.len());
        if tau == R::one() {
            self.params.copy_from_slice(&source.params);
            return;
        }
        let keep = R::one() - tau;
        for (t, &s) in self.params.iter_mut().zip(&source.params) {
            *t = tau * s + keep * *t;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `p <- p - lr (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize, config: AdamConfig) -> Self {
        Self { config, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// A zero learning rate leaves `params` bit-unchanged (moments still advance).
    pub fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let (b1, b2) = (beta1 as f32, beta2 as f32);
        let c1 = 1.0 - beta1.powf(self.t as f64);
        let c2 = 1.0 - beta2.powf(self.t as f64);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            if lr != 0.0 {
                let mhat = self.m[i] as f64 / c1;
                let vhat = self.v[i] as f64 / c2;
                params[i] -= (lr * mhat / (vhat.sqrt() + eps)) as f32;
            }
        }
    }
}

/// Result of comparing analytic and finite-difference gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter index with the largest relative error.
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

/// Components where both gradients are below this are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central differences of `loss` around `params`.
/// Relative error per component is `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn grad_check(
    params: &[f64],
    analytic: &[f64],
    mut loss: impl FnMut(&[f64]) -> f64,
    eps: f64,
    tolerance: f64,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len());
    let mut p = params.to_vec();
    let mut report =
        GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, worst_index: 0, checked: params.len(), passed: true };
    for i in 0..params.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let up = loss(&p);
        p[i] = orig - eps;
        let down = loss(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let abs = (analytic[i] - numeric).abs();
        let rel = abs / analytic[i].abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if !rel.is_finite() || rel > report.max_rel_error {
            report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
            report.worst_index = i;
        }
        report.max_abs_error = report.max_abs_error.max(abs);
    }
    report.passed = report.max_rel_error <= tolerance;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sum_sq_loss(net: &Mlp<f64>, x: &[f64], batch: usize) -> (f64, Vec<f64>) {
        let tape = net.forward(x, batch);
        let y = tape.output();
        let loss = 0.5 * y.iter().map(|v| v * v).sum::<f64>();
        let mut grad = vec![0.0; net.num_params()];
        net.backward(&tape, y, &mut grad, false);
        (loss, grad)
    }

    #[test]
    fn fast_tanh_is_accurate_and_odd() {
        let mut worst = 0.0f64;
        for i in -200_000..=200_000 {
            let x = i as f32 * 1e-4;
            worst = worst.max((tanh_f32(x) as f64 - (x as f64).tanh()).abs());
            assert_eq!(tanh_f32(-x), -tanh_f32(x));
        }
        assert!(worst < 4e-7, "{worst}");
        assert_eq!(tanh_f32(0.0), 0.0);
        assert_eq!(tanh_f32(1e30), 1.0);
        assert_eq!(tanh_f32(f32::NEG_INFINITY), -1.0);
        assert!(tanh_f32(f32::NAN).is_nan());
    }

    #[test]
    fn forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net: Mlp<f64> = Mlp::new(&[3, 4, 2], &mut rng);
        let x = [0.5, -1.0, 2.0, 0.1, 0.2, -0.3];
        let y = net.predict(&x, 2);
        let p = &net.params;
        for b in 0..2 {
            let xi = &x[b * 3..b * 3 + 3];
            let h: Vec<f64> =
                (0..4).map(|o| (p[12 + o] + (0..3).map(|i| p[o * 3 + i] * xi[i]).sum::<f64>()).tanh()).collect();
            for o in 0..2 {
                let v = p[16 + 8 + o] + (0..4).map(|i| p[16 + o * 4 + i] * h[i]).sum::<f64>();
                assert!((y[b * 2 + o] - v).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn linear_net_quadratic_loss_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net: Mlp<f64> = Mlp::new(&[3, 2], &mut rng);
        let x = [0.3, -0.7, 1.1];
        let (_, grad) = sum_sq_loss(&net, &x, 1);
        let sizes = net.sizes().to_vec();
        let r = grad_check(&net.params, &grad, |p| sum_sq_loss(&Mlp::from_params(&sizes, p.to_vec()).unwrap(), &x, 1).0, 1e-5, 1e-9);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn tanh_net_gradients_and_input_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net: Mlp<f64> = Mlp::new(&[4, 5, 5, 3], &mut rng);
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, grad) = sum_sq_loss(&net, &x, 3);
        let sizes = net.sizes().to_vec();
        let r = grad_check(&net.params, &grad, |p| sum_sq_loss(&Mlp::from_params(&sizes, p.to_vec()).unwrap(), &x, 3).0, 1e-5, 1e-4);
        assert!(r.passed, "{r:?}");

        let tape = net.forward(&x, 3);
        let mut scratch = vec![0.0; net.num_params()];
        let dx = net.backward(&tape, tape.output(), &mut scratch, true).unwrap();
        let r = grad_check(&x, &dx, |xi| sum_sq_loss(&net, xi, 3).0, 1e-5, 1e-4);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let r = grad_check(&[0.1, 0.2], &[0.0, 0.0], |_| 3.0, 1e-5, 1e-12);
        assert!(r.passed && r.max_abs_error == 0.0);
    }

    #[test]
    fn f32_and_f64_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net: Mlp<f64> = Mlp::new(&[5, 16, 16, 2], &mut rng);
        let x: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y64 = net.predict(&x, 8);
        let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let y32 = net.cast::<f32>().predict(&xf, 8);
        for (a, b) in y64.iter().zip(&y32) {
            assert!((a - *b as f64).abs() < 1e-5);
        }
    }

    #[test]
    fn adam_zero_lr_and_soft_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net: Mlp<f32> = Mlp::new(&[2, 3, 1], &mut rng);
        let before = net.params.clone();
        let mut adam = Adam::new(net.num_params(), AdamConfig::default());
        adam.step(&mut net.params, &vec![1.0; before.len()], 0.0);
        assert_eq!(net.params, before);

        let other: Mlp<f32> = Mlp::new(&[2, 3, 1], &mut rng);
        let mut target = net.clone();
        target.soft_update_from(&other, 1.0);
        assert_eq!(target, other);
        let mut half = net.clone();
        half.soft_update_from(&other, 0.5);
        assert!((half.params[0] - 0.5 * (net.params[0] + other.params[0])).abs() < 1e-7);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = vec![1.0f32, -1.0];
        let mut adam = Adam::new(2, AdamConfig::default());
        adam.step(&mut p, &[0.5, -2.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((1000.0f64.softplus() - 1000.0).abs() < 1e-12);
        assert!((-1000.0f64).softplus() >= 0.0);
        assert!((0.0f64.softplus() - 2f64.ln()).abs() < 1e-15);
    }
}
