use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::labels::Gender;

const PROBE_L2: f64 = 1e-2;
const PROBE_LR: f64 = 0.5;
const PROBE_ITERS: usize = 500;

/// Held-out accuracy of an L2-regularized logistic regression predicting
/// gender from frozen scan embeddings. Samples are shuffled with `seed` and
/// split in half; features are standardized with training-half statistics.
pub fn gender_probe(embeddings: &[Vec<f64>], genders: &[Gender], seed: u64) -> Result<f64> {
    let s = embeddings.len();
    if s != genders.len() {
        return Err(Error::Invalid(format!(
            "{s} embeddings vs {} genders",
            genders.len()
        )));
    }
    if s < 10 {
        return Err(Error::Invalid(format!("gender probe needs >= 10 samples, got {s}")));
    }
    if !Gender::ALL.iter().all(|g| genders.contains(g)) {
        return Err(Error::Invalid("gender probe needs both genders".into()));
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::Invalid("embeddings have inconsistent widths".into()));
    }

    let mut order: Vec<usize> = (0..s).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, test) = order.split_at(s / 2);

    let mut mean = vec![0.0; d];
    for &i in train {
        for (m, x) in mean.iter_mut().zip(&embeddings[i]) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut std = vec![0.0; d];
    for &i in train {
        for ((v, x), m) in std.iter_mut().zip(&embeddings[i]).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    for v in &mut std {
        *v = (*v / train.len() as f64).sqrt();
    }
    let standardize = |i: usize| -> Vec<f64> {
        embeddings[i]
            .iter()
            .zip(&mean)
            .zip(&std)
            .map(|((x, m), sd)| if *sd > 1e-12 { (x - m) / sd } else { 0.0 })
            .collect()
    };
    let xs: Vec<Vec<f64>> = train.iter().map(|&i| standardize(i)).collect();
    let ys: Vec<f64> = train.iter().map(|&i| genders[i].index() as f64).collect();

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let n = xs.len() as f64;
    for _ in 0..PROBE_ITERS {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            let z = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let err = sigmoid(z) - y;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += err * xi;
            }
            gb += err;
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= PROBE_LR * (g / n + PROBE_L2 * *wi);
        }
        b -= PROBE_LR * gb / n;
    }

    let correct = test
        .iter()
        .filter(|&&i| {
            let x = standardize(i);
            let z = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let pred = usize::from(z >= 0.0);
            pred == genders[i].index()
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}
