//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use auxcl::seed::Rng;
use auxcl::{Graph, Result, Tensor, Var};
use rand::{Rng as _, SeedableRng};

pub const FD_STEP: f64 = 1e-3;
pub const FD_RTOL: f64 = 1e-4;

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

/// Uniform values kept at least `gap` away from zero, so ReLU kinks are
/// never crossed by a finite-difference step.
pub fn away_from_zero(shape: &[usize], gap: f64, r: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.gen_range(gap..1.0);
            if r.gen_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// A shuffled grid of distinct values spaced `gap` apart, so no max-pool
/// window has a near tie.
pub fn distinct(shape: &[usize], gap: f64, r: &mut Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    data.shuffle(r);
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds `loss = <w, op(inputs)>` for a fixed random `w` of the op's output
/// shape, so every output element contributes with its own weight.
pub struct Probe<F> {
    pub build: F,
    pub inputs: Vec<Tensor>,
    weights: Option<Tensor>,
    seed: u64,
}

impl<F: Fn(&mut Graph, &[Var]) -> Result<Var>> Probe<F> {
    pub fn new(build: F, inputs: Vec<Tensor>, seed: u64) -> Self {
        Self { build, inputs, weights: None, seed }
    }

    fn loss(&mut self, g: &mut Graph, vars: &[Var]) -> Var {
        let out = (self.build)(g, vars).expect("op builds");
        let shape = g.value(out).shape().to_vec();
        if g.value(out).len() == 1 {
            return out;
        }
        let w = self
            .weights
            .get_or_insert_with(|| uniform(&shape, -1.0, 1.0, &mut rng(self.seed)))
            .clone();
        let n = w.len();
        let flat = g.reshape(out, &[1, n]).unwrap();
        let wv = g.constant(w.reshape(&[n, 1]).unwrap());
        g.matmul(flat, wv).unwrap()
    }

    fn value_at(&mut self, inputs: &[Tensor]) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let l = self.loss(&mut g, &vars);
        g.value(l).item()
    }

    /// Largest relative disagreement between the tape gradient and central
    /// differences, over every element of every input.
    pub fn max_rel_error(&mut self) -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.inputs.iter().map(|t| g.param(t.clone())).collect();
        let l = self.loss(&mut g, &vars);
        let grads = g.backward(l).unwrap();
        let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v).expect("input gradient")).collect();
        let mut worst: f64 = 0.0;
        for (k, a) in analytic.iter().enumerate() {
            for i in 0..a.len() {
                let mut plus = self.inputs.clone();
                plus[k].data_mut()[i] += FD_STEP;
                let mut minus = self.inputs.clone();
                minus[k].data_mut()[i] -= FD_STEP;
                let numeric = (self.value_at(&plus) - self.value_at(&minus)) / (2.0 * FD_STEP);
                worst = worst.max(rel_error(a.data()[i], numeric));
            }
        }
        worst
    }
}

/// `|a - b| / max(|a|, |b|)`, with exact agreement below 1e-10 in both.
pub fn rel_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        return 0.0;
    }
    (a - b).abs() / scale
}

pub struct OpCase {
    pub name: String,
    pub error: f64,
}

/// Randomized gradient checks over every differentiable op: `per_op`
/// shapes each.
pub fn gradient_suite(per_op: usize, seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut push = |name: String, error: f64| out.push(OpCase { name, error });
    for case in 0..per_op {
        let s = seed.wrapping_mul(1000) + case as u64;
        let (m, k, n) = (r.gen_range(1..6), r.gen_range(1..6), r.gen_range(1..6));
        let mut p = Probe::new(
            |g, v| g.matmul(v[0], v[1]),
            vec![uniform(&[m, k], -1.0, 1.0, &mut r), uniform(&[k, n], -1.0, 1.0, &mut r)],
            s,
        );
        push(format!("matmul {m}x{k} * {k}x{n}"), p.max_rel_error());

        let (b, c) = (r.gen_range(1..5), r.gen_range(1..6));
        let mut p = Probe::new(
            |g, v| g.add_bias(v[0], v[1]),
            vec![uniform(&[b, c], -1.0, 1.0, &mut r), uniform(&[c], -1.0, 1.0, &mut r)],
            s,
        );
        push(format!("add_bias {b}x{c}"), p.max_rel_error());
        let (h, w) = (r.gen_range(1..4), r.gen_range(1..4));
        let mut p = Probe::new(
            |g, v| g.add_bias(v[0], v[1]),
            vec![uniform(&[b, c, h, w], -1.0, 1.0, &mut r), uniform(&[c], -1.0, 1.0, &mut r)],
            s,
        );
        push(format!("add_bias {b}x{c}x{h}x{w}"), p.max_rel_error());

        let shape = [r.gen_range(1..5), r.gen_range(1..7)];
        let mut p = Probe::new(|g, v| Ok(g.relu(v[0])), vec![away_from_zero(&shape, 0.01, &mut r)], s);
        push(format!("relu {shape:?}"), p.max_rel_error());

        let (n_, c_, o_) = (r.gen_range(1..3), r.gen_range(1..3), r.gen_range(1..4));
        let (kh, kw) = (r.gen_range(1..4), r.gen_range(1..4));
        let (stride, pad) = (r.gen_range(1..3), r.gen_range(0..2));
        let (h, w) = (r.gen_range(kh..kh + 4), r.gen_range(kw..kw + 4));
        let mut p = Probe::new(
            move |g, v| g.conv2d(v[0], v[1], stride, pad),
            vec![uniform(&[n_, c_, h, w], -1.0, 1.0, &mut r), uniform(&[o_, c_, kh, kw], -1.0, 1.0, &mut r)],
            s,
        );
        push(
            format!("conv2d x[{n_},{c_},{h},{w}] k[{o_},{c_},{kh},{kw}] s{stride} p{pad}"),
            p.max_rel_error(),
        );

        let size = r.gen_range(1..3);
        let shape = [r.gen_range(1..3), r.gen_range(1..3), size * r.gen_range(1..4), size * r.gen_range(1..4)];
        let mut p = Probe::new(move |g, v| g.max_pool2d(v[0], size), vec![distinct(&shape, 0.01, &mut r)], s);
        push(format!("max_pool2d {shape:?} /{size}"), p.max_rel_error());

        let (a, bb) = (r.gen_range(1..4), r.gen_range(1..4));
        let mut p = Probe::new(
            move |g, v| g.reshape(v[0], &[bb, a]),
            vec![uniform(&[a, bb], -1.0, 1.0, &mut r)],
            s,
        );
        push(format!("reshape {a}x{bb}"), p.max_rel_error());
        let mut p = Probe::new(|g, v| g.flatten(v[0]), vec![uniform(&[2, a, bb], -1.0, 1.0, &mut r)], s);
        push(format!("flatten 2x{a}x{bb}"), p.max_rel_error());

        let (rows, heads) = (r.gen_range(1..6), r.gen_range(2..8));
        let labels: Vec<usize> = (0..rows).map(|_| r.gen_range(0..heads)).collect();
        let mut p = Probe::new(
            move |g, v| g.softmax_cross_entropy(v[0], &labels),
            vec![uniform(&[rows, heads], -3.0, 3.0, &mut r)],
            s,
        );
        push(format!("softmax_cross_entropy {rows}x{heads}"), p.max_rel_error());

        let mut p = Probe::new(
            |g, v| g.mse(v[0], v[1]),
            vec![uniform(&[rows, heads], -2.0, 2.0, &mut r), uniform(&[rows, heads], -2.0, 2.0, &mut r)],
            s,
        );
        push(format!("mse {rows}x{heads}"), p.max_rel_error());

        let mut p = Probe::new(
            |g, v| g.add(v[0], v[1]),
            vec![uniform(&[rows, heads], -1.0, 1.0, &mut r), uniform(&[rows, heads], -1.0, 1.0, &mut r)],
            s,
        );
        push(format!("add {rows}x{heads}"), p.max_rel_error());

        let factor = r.gen_range(-2.0..2.0);
        let mut p = Probe::new(move |g, v| Ok(g.scale(v[0], factor)), vec![uniform(&[rows, heads], -1.0, 1.0, &mut r)], s);
        push(format!("scale {rows}x{heads} by {factor:.3}"), p.max_rel_error());
    }
    out
}

/// Reference greedy matching: repeatedly take the best remaining
/// `(class, head)` cell, breaking exact ties by lower head then lower class.
pub fn greedy_oracle(scores: &[Vec<f64>], heads: &[usize], classes: &[u32]) -> Vec<usize> {
    let mut choice = vec![usize::MAX; scores.len()];
    let mut used = vec![false; heads.len()];
    for _ in 0..scores.len() {
        let mut best: Option<(usize, usize)> = None;
        for r in (0..scores.len()).filter(|&r| choice[r] == usize::MAX) {
            for c in (0..heads.len()).filter(|&c| !used[c]) {
                let better = match best {
                    None => true,
                    Some((br, bc)) => {
                        let (v, bv) = (scores[r][c], scores[br][bc]);
                        v > bv || (v == bv && (heads[c], classes[r]) < (heads[bc], classes[br]))
                    }
                };
                if better {
                    best = Some((r, c));
                }
            }
        }
        let (r, c) = best.expect("enough heads");
        choice[r] = c;
        used[c] = true;
    }
    choice
}

/// Upper 1% point of chi-square with 99 degrees of freedom.
pub const CHI2_99_P01: f64 = 134.642;

/// Reservoir inclusion test: items of a `stream`-long stream are grouped
/// into 100 equal bins by position; returns the chi-square statistic of the
/// bin counts pooled over `trials` independent reservoirs.
pub fn reservoir_chi_square(capacity: usize, stream: usize, trials: usize, seed: u64) -> f64 {
    use auxcl::{BufferEntry, Reservoir};
    assert_eq!(stream % 100, 0);
    let per_bin = stream / 100;
    let mut counts = [0usize; 100];
    for t in 0..trials {
        let mut r = auxcl::seed::rng(seed.wrapping_add(t as u64), auxcl::seed::Stream::Reservoir);
        let mut buf = Reservoir::new(capacity);
        for i in 0..stream {
            let e = BufferEntry { input: vec![], label: 0, stored_logits: vec![], insertion_step: i };
            buf.insert(e, &mut r);
        }
        assert_eq!(buf.len(), capacity);
        for e in buf.entries() {
            counts[e.insertion_step / per_bin] += 1;
        }
    }
    let expected = (trials * capacity) as f64 / 100.0;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

/// Three two-class tasks of separable synthetic data, a four-class
/// auxiliary pool from an independent generator, and a small MLP.
pub struct Fixture {
    pub backbone: auxcl::BackboneConfig,
    pub sequence: auxcl::TaskSequence,
    pub pool: auxcl::AuxiliaryPool,
}

pub fn fixture(seed: u64) -> Fixture {
    use auxcl::data::{build_aux_pool, build_sequence, make_synthetic, MeanLayout, SyntheticSpec};
    let spec = SyntheticSpec {
        num_classes: 6,
        train_per_class: 40,
        test_per_class: 20,
        sample_shape: vec![8],
        separation: 4.0,
        noise: 1.0,
        latent_dim: None,
        means: MeanLayout::Spread,
    };
    let data = make_synthetic(&spec, seed);
    let sequence = build_sequence(&data, &(0..6).collect::<Vec<_>>(), 2, 3, seed).unwrap();
    let aux = make_synthetic(&SyntheticSpec { num_classes: 4, ..spec }, seed + 1);
    let pool = build_aux_pool(aux.train, &[0, 1, 2, 3], &sequence, false, seed).unwrap();
    let mut backbone = auxcl::BackboneConfig::mlp(8, 6);
    backbone.hidden = vec![16];
    Fixture { backbone, sequence, pool }
}

pub fn method(use_aux: bool, use_mah: bool) -> auxcl::MethodConfig {
    auxcl::MethodConfig {
        use_aux,
        use_mah,
        epochs_per_task: 2,
        task_batch: 8,
        aux_batch: 8,
        replay_batch: 8,
        buffer_size: 30,
        lr: 0.05,
        seed: 3,
        ..Default::default()
    }
}

/// Class-coloured noisy images in the CIFAR binary record layout: a label
/// prefix of `label_bytes` copies of the class id, then 3072 pixel bytes.
fn cifar_records(classes: u8, per_class: usize, label_bytes: usize, seed: u64) -> Vec<u8> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for i in 0..per_class * classes as usize {
        let c = (i % classes as usize) as u8;
        out.extend(std::iter::repeat(c).take(label_bytes));
        for ch in 0..3u32 {
            let base = 40.0 + 170.0 * (((c as u32 * 7 + ch * 3) % 11) as f64 / 10.0);
            for _ in 0..1024 {
                out.push((base + r.gen_range(-30.0..30.0)).clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Writes a CIFAR-10 style directory (five train batches and a test batch).
pub fn write_cifar10(dir: &std::path::Path, train_per_class: usize, test_per_class: usize) {
    for (k, name) in auxcl::data::CIFAR10_TRAIN_FILES.iter().enumerate() {
        let per = train_per_class / 5 + usize::from(k < train_per_class % 5);
        std::fs::write(dir.join(name), cifar_records(10, per, 1, k as u64)).unwrap();
    }
    std::fs::write(dir.join(auxcl::data::CIFAR10_TEST_FILE), cifar_records(10, test_per_class, 1, 9)).unwrap();
}

/// Writes a CIFAR-100 style directory whose coarse and fine ids both run
/// over `0..classes`.
pub fn write_cifar100(dir: &std::path::Path, classes: u8, per_class: usize) {
    std::fs::write(dir.join("train.bin"), cifar_records(classes, per_class, 2, 20)).unwrap();
    std::fs::write(dir.join("test.bin"), cifar_records(classes, 1, 2, 21)).unwrap();
}
