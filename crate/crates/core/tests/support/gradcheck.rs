//! Backprop against central finite differences on a reduced VAE in f64.

use candle_core::{DType, Tensor, Var};
use rand::Rng;
use sketchfill::codec::{FrameSequence, HOLD, REST};
use sketchfill::nn::{normal_noise, scalar, seeded_rng, ParamStore};
use sketchfill::vae::{elbo_loss, SketchVae, VaeConfig};

pub struct GradReport {
    pub checked: usize,
    pub sampled: usize,
    pub worst: f64,
    /// First entry above the tolerance, if any.
    pub failure: Option<String>,
}

fn measures() -> Vec<FrameSequence> {
    let mut a = [HOLD; 24];
    a[0] = 60;
    a[6] = 62;
    a[12] = 64;
    a[18..].fill(REST);
    let mut b = [REST; 24];
    b[3] = 67;
    b[4] = HOLD;
    b[9] = 65;
    let mut c = [HOLD; 24];
    c[0] = 72;
    c[8] = 71;
    c[16] = 69;
    [a, b, c].map(|f| FrameSequence::new(f).unwrap()).to_vec()
}

/// Compares `wanted` parameter entries with a measurable gradient; entries of
/// unused embedding rows are sampled but not counted.
pub fn check_vae_gradients(wanted: usize, tolerance: f64) -> GradReport {
    let cfg = VaeConfig {
        embed_dim: 4,
        encoder_hidden: 5,
        beat_hidden: 6,
        tick_hidden: 6,
    };
    let mut store = ParamStore::random(DType::F64, 11);
    let vae = SketchVae::new(&cfg, &mut store).unwrap();
    let data = measures();
    let targets = vae.frame_tensor(&data).unwrap();
    let eps_p = normal_noise(&mut seeded_rng(1), &[3, 128], DType::F64, vae.device()).unwrap();
    let eps_r = normal_noise(&mut seeded_rng(2), &[3, 128], DType::F64, vae.device()).unwrap();

    let loss = || -> Tensor {
        let (p, r) = vae.posteriors(&data).unwrap();
        let zp = (&p.mean + (p.stddev().unwrap() * &eps_p).unwrap()).unwrap();
        let zr = (&r.mean + (r.stddev().unwrap() * &eps_r).unwrap()).unwrap();
        let z = Tensor::cat(&[zp, zr], 1).unwrap();
        let decoded = vae.decode(&z, Some(&targets)).unwrap();
        elbo_loss(&decoded.logits, &targets, &[&p, &r], 0.1).unwrap().total
    };

    let grads = loss().backward().unwrap();
    let names: Vec<String> = store.named_tensors().into_keys().collect();
    let vars: Vec<Var> = store.vars();
    assert_eq!(names.len(), vars.len());

    let mut rng = seeded_rng(5);
    let h = 1e-4;
    let mut report = GradReport {
        checked: 0,
        sampled: 0,
        worst: 0.0,
        failure: None,
    };
    while report.checked < wanted && report.sampled < 100 * wanted {
        report.sampled += 1;
        let k = rng.random_range(0..vars.len());
        let var = &vars[k];
        let i = rng.random_range(0..var.elem_count());
        let original = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let analytic = grads
            .get(var.as_tensor())
            .map_or(0.0, |g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[i]);
        let shifted = |delta: f64| {
            let mut v = original.clone();
            v[i] += delta;
            var.set(&Tensor::from_vec(v, var.shape(), var.device()).unwrap()).unwrap();
            let l = scalar(&loss()).unwrap();
            var.set(&Tensor::from_vec(original.clone(), var.shape(), var.device()).unwrap()).unwrap();
            l
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5);
        if rel >= tolerance && report.failure.is_none() {
            report.failure = Some(format!("{}[{i}]: analytic {analytic:e} numeric {numeric:e}", names[k]));
        }
        if analytic.abs().max(numeric.abs()) > 1e-6 {
            report.worst = report.worst.max(rel);
            report.checked += 1;
        }
    }
    report
}
