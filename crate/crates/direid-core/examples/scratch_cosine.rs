//! Scratch probe: init-time pooled-feature cosine for conv stacks with
//! and without instance normalization (deleted before release).

use direid_core::autodiff::{Tape, Var};
use direid_core::data::load_manifest;
use direid_core::degrade::{apply_degradation, sample_degradation_param, Degradation, DegradationKind};
use direid_core::image::ImageTensor;
use direid_core::rng::derive_rng;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

struct Stack {
    weights: Vec<(ArrayD<f64>, ArrayD<f64>)>, // (w, b) per conv
    out: (ArrayD<f64>, ArrayD<f64>),
    use_in: bool,
    final_relu: bool,
    bias0: f64,
}

fn he(rng: &mut impl Rng, shape: &[usize], gain: f64) -> ArrayD<f64> {
    let fan_in: usize = shape[1..].iter().product();
    let std = (gain / fan_in as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        // Box-Muller
        let u1: f64 = rng.random_range(1e-12..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
    })
}

impl Stack {
    fn new(seed: u64, use_in: bool, final_relu: bool, bias0: f64) -> Self {
        let mut rng = derive_rng(seed, "probe.stack", &[]);
        let widths = [32usize, 64, 128];
        let mut weights = Vec::new();
        let mut c_in = 3;
        for &w in &widths {
            weights.push((
                he(&mut rng, &[w, c_in, 3, 3], 2.0),
                ArrayD::zeros(IxDyn(&[w])),
            ));
            c_in = w;
        }
        let out = (
            he(&mut rng, &[128, c_in, 1, 1], 1.0),
            ArrayD::zeros(IxDyn(&[128])),
        );
        Stack {
            weights,
            out,
            use_in,
            final_relu,
            bias0,
        }
    }

    fn pooled(&self, img: &ImageTensor) -> Vec<f64> {
        let mut tape = Tape::new();
        let d = img.data();
        let (c, hh, ww) = d.dim();
        let arr = d
            .clone()
            .into_shape_with_order((1, c, hh, ww))
            .expect("batch reshape");
        let mut h: Var = tape.constant(arr.into_dyn());
        for (w, b) in &self.weights {
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            h = tape.conv2d(h, wv, bv, 2, 1);
            if self.use_in {
                h = tape.instance_norm(h, 1e-5);
            }
            if self.bias0 != 0.0 {
                h = tape.add_const(h, self.bias0);
            }
            h = tape.relu(h);
        }
        let wv = tape.constant(self.out.0.clone());
        let bv = tape.constant(self.out.1.clone());
        h = tape.conv2d(h, wv, bv, 1, 0);
        if self.final_relu {
            h = tape.relu(h);
        }
        let p = tape.global_avg_pool(h);
        tape.value(p).iter().copied().collect()
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn main() {
    let dir = std::env::temp_dir().join("direid-bench-corpus");
    let data = load_manifest(&dir.join("manifest.csv")).unwrap();
    let deg_i = Degradation::with_default_range(DegradationKind::Illumination);
    let deg_r = Degradation::with_default_range(DegradationKind::Resolution);

    for (label, use_in, final_relu, bias0) in [
        ("IN relu  b  0.0", true, true, 0.0),
        ("IN relu  b -0.5", true, true, -0.5),
        ("IN relu  b -1.0", true, true, -1.0),
        ("IN relu  b -1.5", true, true, -1.5),
        ("IN lin   b -1.0", true, false, -1.0),
        ("IN lin   b -1.5", true, false, -1.5),
    ] {
        let stack = Stack::new(3, use_in, final_relu, bias0);
        let mut rng = derive_rng(11, "probe.deg", &[]);
        let (mut ci, mut cr, mut cx) = (0.0, 0.0, 0.0);
        let n = 24;
        for idx in 0..n {
            let clean = data.load_image(idx).unwrap();
            let other = data.load_image(idx + 50).unwrap();
            let gi = apply_degradation(
                deg_i.kind,
                &clean,
                sample_degradation_param(&deg_i, &mut rng),
            )
            .unwrap();
            let gr = apply_degradation(
                deg_r.kind,
                &clean,
                sample_degradation_param(&deg_r, &mut rng),
            )
            .unwrap();
            let f = stack.pooled(&clean);
            ci += cosine(&f, &stack.pooled(&gi));
            cr += cosine(&f, &stack.pooled(&gr));
            cx += cosine(&f, &stack.pooled(&other));
        }
        println!(
            "{label} illum {:.4}  resol {:.4}  cross-image {:.4}",
            ci / n as f64,
            cr / n as f64,
            cx / n as f64
        );
    }
}
