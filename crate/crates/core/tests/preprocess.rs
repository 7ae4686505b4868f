use dxf_core::data_model::{SubjectHistory, N_FEATURES};
use dxf_core::ingest::{generate_synthetic, SynthConfig};
use dxf_core::preprocess::{bootstrap_fill, clean, model_fill, Filler, FillerConfig, NormStats};
use dxf_core::train_eval::standard_stats;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn normalized_cohort() -> Vec<SubjectHistory> {
    let cfg = SynthConfig {
        n_subjects: 300,
        rng_seed: 3,
        ..SynthConfig::default()
    };
    let (cleaned, _) = clean(&generate_synthetic(&cfg).unwrap());
    NormStats::fit_histories(&cleaned).apply_histories(&cleaned)
}

/// Hide a share of observed cells; returns the masked cohort and the hidden
/// `(subject, visit, feature, value)` cells.
fn hide(
    h: &[SubjectHistory],
    share: f64,
    seed: u64,
) -> (Vec<SubjectHistory>, Vec<(usize, usize, usize, f64)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = h.to_vec();
    let mut hidden = Vec::new();
    for (s, subj) in masked.iter_mut().enumerate() {
        for (v, visit) in subj.visits.iter_mut().enumerate() {
            for j in 0..N_FEATURES {
                if let Some(x) = visit.feature(j) {
                    if rng.random_bool(share) {
                        hidden.push((s, v, j, x));
                        visit.set_feature(j, None);
                    }
                }
            }
        }
    }
    (masked, hidden)
}

fn rmse(filled: &[SubjectHistory], hidden: &[(usize, usize, usize, f64)]) -> f64 {
    let se: f64 = hidden
        .iter()
        .map(|&(s, v, j, x)| (filled[s].visits[v].feature(j).unwrap() - x).powi(2))
        .sum();
    (se / hidden.len() as f64).sqrt()
}

#[test]
fn model_fill_beats_mean_imputation_on_hidden_cells() {
    let full = normalized_cohort();
    let (masked, hidden) = hide(&full, 0.1, 4);
    assert!(hidden.len() > 1000);

    let mut filler = Filler::new(FillerConfig::default(), 5).unwrap();
    filler.train(&masked, &standard_stats(), 6).unwrap();
    let filled = model_fill(&masked, &filler, &standard_stats()).unwrap();
    let model = rmse(&filled, &hidden);

    let means = NormStats::fit_histories(&masked).mean;
    let mean_err = (hidden
        .iter()
        .map(|&(_, _, j, x)| (x - means[j]).powi(2))
        .sum::<f64>()
        / hidden.len() as f64)
        .sqrt();
    assert!(
        model <= mean_err,
        "model fill RMSE {model:.4} vs mean {mean_err:.4}"
    );
}

#[test]
fn bootstrap_fill_carries_values_and_leaves_observed_cells() {
    let full = normalized_cohort();
    let (masked, _) = hide(&full, 0.2, 7);
    let filled = bootstrap_fill(&masked, &standard_stats());
    for (a, b) in masked.iter().zip(&filled) {
        for (va, vb) in a.visits.iter().zip(&b.visits) {
            for j in 0..N_FEATURES {
                let y = vb.feature(j).expect("every cell filled");
                if let Some(x) = va.feature(j) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}
