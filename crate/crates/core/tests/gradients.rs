//! Analytic gradients of the training objectives against central differences.

use mvmark_core::attacks::{distill_batch_loss, DistillTerms};
use mvmark_core::model::{FeatureBank, KlDirection, ModelSpec};
use mvmark_core::watermark::{watermark_loss, RegMode, RegTerm, TriggerBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn check(params: &[f64], analytic: &[f64], loss: impl Fn(&[f64]) -> f64, what: &str) {
    let h = 1e-6;
    for j in 0..params.len() {
        let mut p = params.to_vec();
        p[j] += h;
        let up = loss(&p);
        p[j] -= 2.0 * h;
        let fd = (up - loss(&p)) / (2.0 * h);
        assert!(
            (fd - analytic[j]).abs() < 1e-6 * (1.0 + fd.abs()),
            "{what}: param {j} fd {fd} analytic {}",
            analytic[j]
        );
    }
}

fn specs() -> Vec<ModelSpec> {
    vec![
        ModelSpec::mlp(3, 4, [5, 3]).unwrap(),
        ModelSpec::conv_net(3, [1, 4, 4], [2, 2, 3, 3]).unwrap(),
    ]
}

#[test]
fn watermark_loss_gradient_all_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for spec in specs() {
        let params = uniform(spec.parameter_count(), &mut rng);
        let clean = uniform(spec.input_len() * 4, &mut rng);
        let clean_y = [0, 1, 2, 1];
        let trig = uniform(spec.input_len() * 3, &mut rng);
        let (assigned, original) = ([1, 2, 0], [0, 0, 2]);
        let dim = spec.feature_dim();
        let rows: Vec<Vec<f32>> = (0..3).map(|_| uniform(dim, &mut rng).iter().map(|&v| v as f32).collect()).collect();
        let bank = FeatureBank::from_features(rows.iter().map(|r| r.as_slice()), &[0, 1, 2], 3, dim, 0);
        for mode in [RegMode::None, RegMode::Attract, RegMode::Repel] {
            let reg = RegTerm { mode, alpha: 0.7, bank: &bank, cap: None };
            let batch = TriggerBatch { inputs: &trig, assigned: &assigned, original: &original };
            let loss = |p: &[f64]| watermark_loss(&spec, p, &clean, &clean_y, batch, Some(reg), None).unwrap().total;
            let mut grad = vec![0.0; params.len()];
            watermark_loss(&spec, &params, &clean, &clean_y, batch, Some(reg), Some(&mut grad)).unwrap();
            check(&params, &grad, loss, &format!("{mode:?}"));
        }
    }
}

#[test]
fn distill_loss_gradient_both_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for spec in specs() {
        let params = uniform(spec.parameter_count(), &mut rng);
        let x = uniform(spec.input_len() * 4, &mut rng);
        let labels = [2, 0, 1, 1];
        let mut teacher = Vec::new();
        for _ in 0..4 {
            let z = uniform(3, &mut rng).iter().map(|v| 4.0 * v).collect::<Vec<_>>();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            teacher.extend(z.iter().map(|v| v - lse));
        }
        for direction in [KlDirection::SurrogateFirst, KlDirection::SourceFirst] {
            for (alpha, temperature) in [(1.0, 1.0), (0.4, 2.5), (0.0, 1.0)] {
                let terms = DistillTerms { alpha, direction, temperature };
                let loss = |p: &[f64]| distill_batch_loss(&spec, p, &x, &teacher, &labels, terms, None).unwrap();
                let mut grad = vec![0.0; params.len()];
                distill_batch_loss(&spec, &params, &x, &teacher, &labels, terms, Some(&mut grad)).unwrap();
                check(&params, &grad, loss, &format!("{direction:?} a={alpha} T={temperature}"));
            }
        }
    }
}
