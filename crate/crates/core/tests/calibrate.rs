//! Scratch calibration harness (not part of the final suite).

use trajgen_core::config::Config;
use trajgen_core::data::{self, preset, synth_scene};
use trajgen_core::generation::{sample_set, LoadedSamples};
use trajgen_core::metrics;
use trajgen_core::model::GeneratorModel;
use trajgen_core::training::train;

#[test]
#[ignore]
fn calibrate_two_goal() {
    for seed in [42u64, 7, 123] {
        let mut cfg = Config::default();
        cfg.train_epochs = 150;
        cfg.train_batch_size = 64;

        let scene = synth_scene(&preset("two-goal").unwrap(), seed).unwrap();
        let windows = data::windows_for_scenes(&[scene.clone()], cfg.data_h, cfg.data_f, cfg.encoder_radius, false);
        let raw = data::raw_windows_for_scenes(&[scene], cfg.data_h, cfg.data_f, false);

        for (label, lambda2) in [("reg", 1.0f64), ("noreg", 0.0)] {
            let mut cfg_run = cfg.clone();
            cfg_run.train_lambda2 = lambda2;
            let mut model = GeneratorModel::new(&cfg_run, seed);
            let _ = train(&mut model, &windows, seed, |_, _| {}).unwrap();
            let loaded: Vec<LoadedSamples> = windows
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let set = sample_set(&model, w, i, 20, seed).unwrap();
                    LoadedSamples {
                        window_idx: i,
                        agent_ids: w.agent_ids.clone(),
                        trajectories: set.samples.iter().map(|s| s.trajectories.clone()).collect(),
                    }
                })
                .collect();
            let report = metrics::evaluate(&raw, &loaded, &cfg_run, seed, false);
            println!(
                "seed={seed} [{label}] ade={:.4} fde={:.4} asd={:.6}",
                report.ade_best, report.fde_best, report.asd
            );
        }
    }
}
