//! Dataset parsing, windowing, splits, and synthetic scenes.

pub mod scene;
pub mod split;
pub mod synth;
pub mod window;

pub use scene::{load_dataset_dir, parse_dataset_file, parse_dataset_text, DataError, Scene};
pub use split::{leave_one_out, SplitPlan};
pub use synth::{preset, synth_scene, Route, SynthSpec};
pub use window::{build_windows, normalize_window, NormalizedWindow, TrajectoryWindow};

use crate::exec::maybe_par_map;

/// Build and normalize windows for a set of scenes. Parallel across
/// scenes; output order follows scene order.
pub fn windows_for_scenes(
    scenes: &[Scene],
    h: usize,
    f: usize,
    radius: f64,
    parallel: bool,
) -> Vec<NormalizedWindow> {
    maybe_par_map(scenes, parallel, |scene| {
        build_windows(scene, h, f)
            .iter()
            .map(|w| normalize_window(w, radius))
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// World-frame windows for a set of scenes, in the same enumeration
/// order as [`windows_for_scenes`], so generated-sample indices line up.
pub fn raw_windows_for_scenes(
    scenes: &[Scene],
    h: usize,
    f: usize,
    parallel: bool,
) -> Vec<TrajectoryWindow> {
    maybe_par_map(scenes, parallel, |scene| build_windows(scene, h, f))
        .into_iter()
        .flatten()
        .collect()
}
