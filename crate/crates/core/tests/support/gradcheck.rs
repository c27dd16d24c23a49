//! Central finite-difference checks in f64. Each check builds a random
//! scalar objective `L = <f(inputs), g>` and returns the worst relative
//! error between analytic and numeric partial derivatives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use steganalysis_core::nn::layers::{BatchNorm, Mode};
use steganalysis_core::nn::ops::{self, Window};
use steganalysis_core::nn::{NetConfig, SResNet, Tensor4};
use steganalysis_core::FilterBank;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-5)
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_vec(shape, random_vec(shape.iter().product(), rng)).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst error of `analytic` against central differences of `f` in `v`.
fn compare(v: &mut [f64], analytic: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..v.len() {
        let orig = v[i];
        v[i] = orig + STEP;
        let up = f(v);
        v[i] = orig - STEP;
        let down = f(v);
        v[i] = orig;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * STEP)));
    }
    worst
}

pub fn conv(seed: u64, win: Window) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, c_out) = (3, 4);
    let mut x = random([2, c, 6, 5], &mut rng);
    let mut w = random_vec(c_out * c * win.kernel * win.kernel, &mut rng);
    let y = ops::conv2d_forward(&x, &w, c_out, win).unwrap();
    let g = random_vec(y.data().len(), &mut rng);
    let gt = Tensor4::from_vec(y.shape(), g.clone()).unwrap();
    let mut dw = vec![0.0; w.len()];
    let dx = ops::conv2d_backward(&x, &w, &gt, win, &mut dw, true).unwrap();
    let shape = x.shape();
    let w0 = w.clone();
    let ex = compare(x.data_mut(), dx.data(), |xv| {
        let t = Tensor4::from_vec(shape, xv.to_vec()).unwrap();
        dot(ops::conv2d_forward(&t, &w0, c_out, win).unwrap().data(), &g)
    });
    let ew = compare(&mut w, &dw, |wv| {
        dot(ops::conv2d_forward(&x, wv, c_out, win).unwrap().data(), &g)
    });
    ex.max(ew)
}

pub fn batch_norm(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = random([3, 2, 4, 3], &mut rng);
    let mut bn = BatchNorm::<f64>::new(2);
    bn.gamma.value = random_vec(2, &mut rng);
    bn.beta.value = random_vec(2, &mut rng);
    let y = bn.forward(&x, Mode::Train);
    let g = random_vec(y.data().len(), &mut rng);
    let dx = bn.backward(&Tensor4::from_vec(y.shape(), g.clone()).unwrap());
    let shape = x.shape();
    let template = bn.clone();
    let eval = |t: &Tensor4<f64>, gamma: &[f64], beta: &[f64]| {
        let mut b = template.clone();
        b.gamma.value = gamma.to_vec();
        b.beta.value = beta.to_vec();
        dot(b.forward(t, Mode::Train).data(), &g)
    };
    let (gamma, beta) = (bn.gamma.value.clone(), bn.beta.value.clone());
    let ex = compare(x.data_mut(), dx.data(), |xv| {
        eval(&Tensor4::from_vec(shape, xv.to_vec()).unwrap(), &gamma, &beta)
    });
    let mut gv = gamma.clone();
    let eg = compare(&mut gv, &bn.gamma.grad, |gm| eval(&x, gm, &beta));
    let mut bv = beta.clone();
    let eb = compare(&mut bv, &bn.beta.grad, |bt| eval(&x, &gamma, bt));
    ex.max(eg).max(eb)
}

pub fn relu(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = random([2, 2, 3, 3], &mut rng);
    // keep inputs away from the kink
    x.data_mut().iter_mut().for_each(|v| {
        if v.abs() < 1e-3 {
            *v = 0.5;
        }
    });
    let y = ops::relu(&x);
    let g = random_vec(y.data().len(), &mut rng);
    let dx = ops::relu_backward(&y, &Tensor4::from_vec(y.shape(), g.clone()).unwrap());
    let shape = x.shape();
    compare(x.data_mut(), dx.data(), |xv| {
        dot(ops::relu(&Tensor4::from_vec(shape, xv.to_vec()).unwrap()).data(), &g)
    })
}

pub fn avg_pool(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = random([2, 2, 7, 6], &mut rng);
    let y = ops::avg_pool_3x3_s2(&x);
    let g = random_vec(y.data().len(), &mut rng);
    let dx = ops::avg_pool_3x3_s2_backward(x.shape(), &Tensor4::from_vec(y.shape(), g.clone()).unwrap());
    let shape = x.shape();
    compare(x.data_mut(), dx.data(), |xv| {
        dot(ops::avg_pool_3x3_s2(&Tensor4::from_vec(shape, xv.to_vec()).unwrap()).data(), &g)
    })
}

pub fn global_pool(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = random([2, 3, 4, 5], &mut rng);
    let g = random_vec(6, &mut rng);
    let dx = ops::global_avg_pool_backward(x.shape(), &g);
    let shape = x.shape();
    compare(x.data_mut(), dx.data(), |xv| {
        dot(&ops::global_avg_pool(&Tensor4::from_vec(shape, xv.to_vec()).unwrap()), &g)
    })
}

pub fn linear(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (batch, d_in, d_out) = (3, 5, 4);
    let mut x = random_vec(batch * d_in, &mut rng);
    let mut w = random_vec(d_in * d_out, &mut rng);
    let mut b = random_vec(d_out, &mut rng);
    let g = random_vec(batch * d_out, &mut rng);
    let (mut dw, mut db) = (vec![0.0; w.len()], vec![0.0; d_out]);
    let dx = ops::linear_backward(&x, batch, &w, &g, &mut dw, &mut db);
    let (x0, w0, b0) = (x.clone(), w.clone(), b.clone());
    let ex = compare(&mut x, &dx, |xv| dot(&ops::linear(xv, batch, &w0, &b0), &g));
    let ew = compare(&mut w, &dw, |wv| dot(&ops::linear(&x0, batch, wv, &b0), &g));
    let eb = compare(&mut b, &db, |bv| dot(&ops::linear(&x0, batch, &w0, bv), &g));
    ex.max(ew).max(eb)
}

pub fn softmax_cross_entropy(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = [0, 1, 1, 0];
    let mut z: Vec<f64> = random_vec(8, &mut rng).iter().map(|v| 3.0 * v).collect();
    let (_, dz) = ops::softmax_cross_entropy(&z, &labels, 2);
    compare(&mut z, &dz, |zv| ops::softmax_cross_entropy(zv, &labels, 2).0)
}

/// Index of a parameter entry within the network's visit order.
#[derive(Debug, Clone, Copy)]
struct Entry {
    tensor: usize,
    index: usize,
}

fn perturb(net: &mut SResNet<f64>, e: Entry, delta: f64) {
    let mut t = 0;
    net.visit_params(&mut |p| {
        if t == e.tensor {
            p.value[e.index] += delta;
        }
        t += 1;
    });
}

fn tiny_net(seed: u64) -> (SResNet<f64>, Tensor4<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = SResNet::<f64>::new(NetConfig::reduced(), FilterBank::fixed(), seed).unwrap();
    net.set_weight_decay(2e-4);
    // non-trivial affine BN parameters
    net.visit_bn(&mut |bn| {
        bn.gamma.value.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
        bn.beta.value.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
    });
    let x = random([4, 4, 8, 8], &mut rng);
    (net, x, vec![0, 1, 0, 1])
}

/// Full reduced network on 8x8 inputs with weight decay. Every parameter
/// tensor is probed at up to `per_tensor` random entries.
pub fn tiny_network(seed: u64, per_tensor: usize) -> (f64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let (mut net, x, labels) = tiny_net(seed);
    net.loss_and_grads(&x, &labels).unwrap();
    let mut grads = Vec::new();
    net.visit_params(&mut |p| grads.push(p.grad.clone()));
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (t, g) in grads.iter().enumerate() {
        let picks: Vec<usize> = if g.len() <= per_tensor {
            (0..g.len()).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..g.len())).collect()
        };
        for index in picks {
            let e = Entry { tensor: t, index };
            perturb(&mut net, e, STEP);
            let up = net.loss(&x, &labels).unwrap();
            perturb(&mut net, e, -2.0 * STEP);
            let down = net.loss(&x, &labels).unwrap();
            perturb(&mut net, e, STEP);
            worst = worst.max(rel_err(g[index], (up - down) / (2.0 * STEP)));
            checked += 1;
        }
    }
    (worst, checked)
}

/// One residual unit (identity shortcut, or the downsampling unit with its
/// projection) checked against the input and all of its parameters.
pub fn residual_unit(seed: u64, downsampling: bool) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut net, _, _) = tiny_net(seed);
    let (group, c_in) = if downsampling { (1, 10) } else { (0, 10) };
    let mut unit = net.groups_mut()[group][0].clone();
    assert_eq!(unit.has_projection(), downsampling);
    let mut x = random([2, c_in, 6, 7], &mut rng);
    let y = unit.forward(&x, Mode::Train).unwrap();
    let g = random_vec(y.data().len(), &mut rng);
    unit.visit_params(&mut |p| p.zero_grad());
    let dx = unit.backward(&Tensor4::from_vec(y.shape(), g.clone()).unwrap());
    let template = unit.clone();
    let shape = x.shape();
    let mut worst = compare(x.data_mut(), dx.data(), |xv| {
        let mut u = template.clone();
        let t = Tensor4::from_vec(shape, xv.to_vec()).unwrap();
        dot(u.forward(&t, Mode::Train).unwrap().data(), &g)
    });
    let mut grads = Vec::new();
    unit.visit_params(&mut |p| grads.push(p.grad.clone()));
    for (t, grad) in grads.iter().enumerate() {
        for index in 0..grad.len().min(40) {
            let eval = |delta: f64| {
                let mut u = template.clone();
                let mut k = 0;
                u.visit_params(&mut |p| {
                    if k == t {
                        p.value[index] += delta;
                    }
                    k += 1;
                });
                dot(u.forward(&x, Mode::Train).unwrap().data(), &g)
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            worst = worst.max(rel_err(grad[index], numeric));
        }
    }
    worst
}

/// Every check with a name, for reporting.
pub fn all_checks() -> Vec<(&'static str, f64)> {
    vec![
        ("conv 3x3 stride 1", conv(1, Window::same(3, 1))),
        ("conv 3x3 stride 2", conv(2, Window::same(3, 2))),
        ("conv 1x1 stride 2", conv(3, Window::same(1, 2))),
        ("batch norm", batch_norm(4)),
        ("relu", relu(5)),
        ("avg pool 3x3/2", avg_pool(6)),
        ("global avg pool", global_pool(7)),
        ("linear", linear(8)),
        ("softmax cross-entropy", softmax_cross_entropy(9)),
        ("identity residual unit", residual_unit(10, false)),
        ("projection residual unit", residual_unit(11, true)),
        ("tiny network", tiny_network(12, 12).0),
    ]
}
