//! Train on a synthetic base split and compare augmentation schemes on the
//! novel split.
//!
//! `cargo run --release -p vfd-core --example synthetic_benchmark -- [epochs] [episodes]`

use std::time::Instant;

use vfd_core::classifier::ClassifierKind;
use vfd_core::covariance::estimate_pooled_covariance;
use vfd_core::eval::{run_benchmark, AugmentationScheme, EvalConfig, EvalData, SchemeKind};
use vfd_core::model::{ModelConfig, VfdModel};
use vfd_core::synth::{make_task_spec, sample_dataset, SynthConfig};
use vfd_core::train::{train, TrainConfig};
use vfd_core::Split;

fn main() -> vfd_core::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let epochs = args.first().copied().unwrap_or(100);
    let episodes = args.get(1).copied().unwrap_or(200);

    let spec = make_task_spec(&SynthConfig::default())?;
    let base = sample_dataset(&spec, 100, Split::BaseTrain, 1)?;
    let novel = sample_dataset(&spec, 60, Split::Novel, 2)?;

    let mut rng = vfd_core::rng::stream(0, "model-init", 0);
    let mut model = VfdModel::new(&ModelConfig::default(), spec.feature_shape, base.n_classes(), &mut rng)?;
    let tc = TrainConfig {
        epochs,
        decay_epochs: vec![epochs * 2 / 5, epochs * 4 / 5],
        ..Default::default()
    };
    let t0 = Instant::now();
    let state = train(&mut model, &base, &tc)?;
    let last = state.history.last().unwrap();
    println!("trained {epochs} epochs in {:.1}s, final {:?}", t0.elapsed().as_secs_f64(), last.loss);

    let base_inputs: Vec<_> = base.items.iter().map(|i| &i.input).collect();
    let base_emb = model.embed_all(&base_inputs)?;
    let z_i: Vec<Vec<f64>> = base_emb.iter().map(|e| e.z_i.clone()).collect();
    let labels: Vec<usize> = base.items.iter().map(|i| i.label).collect();
    let cov = estimate_pooled_covariance(&z_i, &labels, 0.1)?;

    let data = EvalData::new(&model, &novel)?;
    let cfg = EvalConfig {
        n_episodes: episodes,
        ..Default::default()
    };
    let schemes = [
        AugmentationScheme::simple(SchemeKind::None, 0)?,
        AugmentationScheme::simple(SchemeKind::Posterior, 1)?,
        AugmentationScheme::simple(SchemeKind::Posterior, 5)?,
        AugmentationScheme::simple(SchemeKind::Prior, 5)?,
        AugmentationScheme::covariance_transfer(5, cov),
    ];
    for s in &schemes {
        let t = Instant::now();
        let r = run_benchmark(&data, s, ClassifierKind::Linear, &cfg, 11, 0)?;
        println!(
            "{:<22} n_aug={} {:6.2} ± {:4.2}  ({:.1}s)",
            r.scheme,
            r.n_aug,
            r.mean,
            r.ci95,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
