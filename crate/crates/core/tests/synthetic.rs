use editnet_core::data::{apply_prenorm, denormalize};
use editnet_core::baselines::compute_stats;
use editnet_core::eval::evaluate_pipeline;
use editnet_core::synth::generate_synthetic;
use editnet_core::transfer::Identity;
use editnet_core::{DomainShift, SynthSpec};

#[test]
fn identity_shift_is_indistinguishable() {
    let spec = SynthSpec {
        shift: DomainShift::Identity,
        ..SynthSpec::default()
    };
    let data = generate_synthetic(&spec).unwrap();
    let (a, b) = (&data.src_train.embeddings, &data.tar_train.embeddings);
    let (sa, sb) = (compute_stats(a).unwrap(), compute_stats(b).unwrap());
    // Speaker centres make rows within a speaker correlated, so the
    // standard error uses speakers as the independent units.
    let units = spec.n_speakers as f64;
    let mut outside = 0;
    for c in 0..spec.dim {
        let se = (sa.std[c].powi(2) / units + sb.std[c].powi(2) / units).sqrt();
        if (sa.mean[c] - sb.mean[c]).abs() > 4.0 * se {
            outside += 1;
        }
    }
    assert_eq!(outside, 0);
}

#[test]
fn default_shift_hurts_verification() {
    let spec = SynthSpec::default();
    let shifted = generate_synthetic(&spec).unwrap();
    let clean = generate_synthetic(&SynthSpec {
        shift: DomainShift::Identity,
        ..spec
    })
    .unwrap();
    assert_eq!(shifted.trials, clean.trials);
    let none = evaluate_pipeline(&Identity, &shifted.tar_eval, &shifted.trials).unwrap();
    let oracle = evaluate_pipeline(&Identity, &clean.tar_eval, &clean.trials).unwrap();
    assert!(none.eer > oracle.eer, "none {} oracle {}", none.eer, oracle.eer);
}

#[test]
fn prenorm_inverts_exactly() {
    let data = generate_synthetic(&SynthSpec::default()).unwrap();
    let set = &data.tar_train;
    let stats = compute_stats(&set.embeddings).unwrap();
    let normed = apply_prenorm(set, &stats).unwrap();
    let back = denormalize(&normed.embeddings, &stats).unwrap();
    let worst = back
        .data()
        .iter()
        .zip(set.embeddings.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-10, "{worst}");
}
