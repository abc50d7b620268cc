//! Central finite-difference check of the combined loss gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rptm_core::learn::{combined_loss, loss_and_gradient, EmbeddingModel, LossWeights};
use rptm_core::mining::{Batch, Triplet};

pub const STEP: f64 = 1e-5;
/// Points whose hinge or relu inputs sit this close to a kink are redrawn.
pub const KINK_CLEARANCE: f64 = 1e-3;

pub struct Problem {
    pub model: EmbeddingModel,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub batch: Batch,
    pub triplets: Vec<Triplet>,
    pub weights: LossWeights,
}

fn draw(rng: &mut ChaCha8Rng) -> Problem {
    let (i, h, d, c) = (6, 5, 4, 3);
    let n = 9;
    let model = EmbeddingModel::init(i, h, d, c, rng.random());
    let inputs: Vec<Vec<f64>> = (0..n).map(|_| (0..i).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let labels: Vec<usize> = (0..n).map(|k| k % c).collect();
    let indices: Vec<usize> = (0..6).collect();
    let batch = Batch {
        labels: indices.iter().map(|&k| labels[k]).collect(),
        indices,
        embeddings: None,
    };
    // every anchor gets a same-class positive from anywhere in the set and a
    // different-class negative; margin is drawn large enough to keep most
    // hinges active
    let triplets = (0..6)
        .map(|a| Triplet {
            anchor: a,
            positive: (a + 3 * rng.random_range(1..3usize)) % n,
            negative: (a + 1 + rng.random_range(0..2usize)) % n,
        })
        .collect();
    Problem {
        model,
        inputs,
        labels,
        batch,
        triplets,
        weights: LossWeights {
            margin: rng.random_range(0.2..1.5),
            lambda_tri: rng.random_range(0.5..2.5),
            lambda_ent: rng.random_range(0.2..1.0),
        },
    }
}

fn clear_of_kinks(p: &Problem) -> bool {
    let acts: Vec<_> = p.inputs.iter().map(|x| p.model.activations(x).unwrap()).collect();
    if acts.iter().flat_map(|a| &a.pre_hidden).any(|v| v.abs() < KINK_CLEARANCE) {
        return false;
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    p.triplets.iter().all(|t| {
        let e = |k: usize| &acts[k].embedding;
        let arg = dist(e(t.anchor), e(t.positive)) - dist(e(t.anchor), e(t.negative)) + p.weights.margin;
        arg.abs() >= KINK_CLEARANCE
    })
}

/// A random problem clear of every kink, plus the number of redraws.
pub fn problem(seed: u64) -> (Problem, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for redraws in 0.. {
        let p = draw(&mut rng);
        if clear_of_kinks(&p) {
            return (p, redraws);
        }
    }
    unreachable!()
}

fn total(p: &Problem, m: &EmbeddingModel) -> f64 {
    combined_loss(m, &p.inputs, &p.labels, &p.batch, &p.triplets, &p.weights).unwrap().total
}

/// Largest elementwise relative error over every parameter.
pub fn max_relative_error(p: &Problem) -> f64 {
    let (_, grads) = loss_and_gradient(&p.model, &p.inputs, &p.labels, &p.batch, &p.triplets, &p.weights).unwrap();
    let analytic: Vec<Vec<f64>> = grads.params().iter().map(|s| s.to_vec()).collect();
    let mut worst = 0.0f64;
    for (slot, an) in analytic.iter().enumerate() {
        for (k, &a) in an.iter().enumerate() {
            let mut plus = p.model.clone();
            plus.params_mut()[slot][k] += STEP;
            let mut minus = p.model.clone();
            minus.params_mut()[slot][k] -= STEP;
            let numeric = (total(p, &plus) - total(p, &minus)) / (2.0 * STEP);
            let scale = a.abs().max(numeric.abs());
            if scale > 0.0 {
                worst = worst.max((a - numeric).abs() / scale.max(1e-8));
            }
        }
    }
    worst
}
