//! The generator model: parameter layout, batch assembly, and the
//! forward pieces (history encoder, mixture heads, residual rollout)
//! shared by training and generation.

use std::path::Path;

use crate::autodiff::cells::{GruVars, LstmVars};
use crate::autodiff::checkpoint::{self, CheckpointError, LoadedCheckpoint};
use crate::autodiff::params::{ParamId, ParamSet};
use crate::autodiff::tape::{GradError, Tape, Var};
use crate::config::Config;
use crate::data::NormalizedWindow;
use crate::decoder::{self, RolloutVars};
use crate::destination::{self, MixtureVars};
use crate::encoder;
use crate::rng::{rng_for, STREAM_INIT};

#[derive(Clone, Copy)]
pub struct HeadIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy)]
pub struct LstmIds {
    pub w_xi: ParamId,
    pub w_hi: ParamId,
    pub b_i: ParamId,
    pub w_xf: ParamId,
    pub w_hf: ParamId,
    pub b_f: ParamId,
    pub w_xg: ParamId,
    pub w_hg: ParamId,
    pub b_g: ParamId,
    pub w_xo: ParamId,
    pub w_ho: ParamId,
    pub b_o: ParamId,
}

#[derive(Clone, Copy)]
pub struct GruIds {
    pub w_xz: ParamId,
    pub w_hz: ParamId,
    pub b_z: ParamId,
    pub w_xr: ParamId,
    pub w_hr: ParamId,
    pub b_r: ParamId,
    pub w_xn: ParamId,
    pub w_hn: ParamId,
    pub b_n: ParamId,
}

#[derive(Clone, Copy)]
pub struct ModelIds {
    pub node: LstmIds,
    pub edge: LstmIds,
    pub g1: HeadIds,
    pub g2: HeadIds,
    pub g3: HeadIds,
    pub g4: HeadIds,
    pub dec_init: HeadIds,
    pub gru: GruIds,
    pub residual: HeadIds,
}

/// Parameters bound onto a tape for one forward pass.
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn v(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn head(&self, ids: HeadIds) -> (Var, Var) {
        (self.v(ids.w), self.v(ids.b))
    }

    pub fn lstm(&self, ids: LstmIds) -> LstmVars {
        LstmVars {
            w_xi: self.v(ids.w_xi),
            w_hi: self.v(ids.w_hi),
            b_i: self.v(ids.b_i),
            w_xf: self.v(ids.w_xf),
            w_hf: self.v(ids.w_hf),
            b_f: self.v(ids.b_f),
            w_xg: self.v(ids.w_xg),
            w_hg: self.v(ids.w_hg),
            b_g: self.v(ids.b_g),
            w_xo: self.v(ids.w_xo),
            w_ho: self.v(ids.w_ho),
            b_o: self.v(ids.b_o),
        }
    }

    pub fn gru(&self, ids: GruIds) -> GruVars {
        GruVars {
            w_xz: self.v(ids.w_xz),
            w_hz: self.v(ids.w_hz),
            b_z: self.v(ids.b_z),
            w_xr: self.v(ids.w_xr),
            w_hr: self.v(ids.w_hr),
            b_r: self.v(ids.b_r),
            w_xn: self.v(ids.w_xn),
            w_hn: self.v(ids.w_hn),
            b_n: self.v(ids.b_n),
        }
    }
}

/// Windows flattened into step-major matrices: all agents of the batch
/// stacked as rows, so the recurrent passes run once per step over the
/// whole batch.
pub struct BatchFeatures {
    pub n: usize,
    pub h: usize,
    pub f: usize,
    /// H matrices of shape N x 4.
    pub node_steps: Vec<Vec<f32>>,
    /// H matrices of shape N x 4.
    pub edge_steps: Vec<Vec<f32>>,
    /// N x 2 ground-truth destinations (normalized frame).
    pub dest: Vec<f32>,
    /// F matrices of shape N x 2: ground-truth future positions.
    pub future_steps: Vec<Vec<f32>>,
}

impl BatchFeatures {
    pub fn from_windows(windows: &[&NormalizedWindow]) -> Self {
        let h = windows.first().map(|w| w.horizon()).unwrap_or(0);
        let f = windows.first().map(|w| w.future_len()).unwrap_or(0);
        let n: usize = windows.iter().map(|w| w.n_agents()).sum();
        let mut node_steps = vec![Vec::with_capacity(n * 4); h];
        let mut edge_steps = vec![Vec::with_capacity(n * 4); h];
        let mut future_steps = vec![Vec::with_capacity(n * 2); f];
        let mut dest = Vec::with_capacity(n * 2);
        for w in windows {
            debug_assert_eq!(w.horizon(), h);
            debug_assert_eq!(w.future_len(), f);
            for a in 0..w.n_agents() {
                for (step, row) in node_steps.iter_mut().enumerate() {
                    row.extend_from_slice(&w.node_feats[a][step]);
                }
                for (step, row) in edge_steps.iter_mut().enumerate() {
                    row.extend_from_slice(&w.edge_feats[a][step]);
                }
                for (step, row) in future_steps.iter_mut().enumerate() {
                    row.extend_from_slice(&w.future_rel[a][step]);
                }
                dest.extend_from_slice(&w.dest[a]);
            }
        }
        BatchFeatures {
            n,
            h,
            f,
            node_steps,
            edge_steps,
            dest,
            future_steps,
        }
    }
}

pub struct GeneratorModel {
    pub config: Config,
    pub params: ParamSet,
    pub ids: ModelIds,
}

fn add_lstm(params: &mut ParamSet, prefix: &str, input: usize, hidden: usize, rng: &mut rand_chacha::ChaCha8Rng) -> LstmIds {
    let mut w = |name: &str, rows: usize| params.add_weight(&format!("{prefix}.{name}"), rows, hidden, rng);
    let w_xi = w("w_xi", input);
    let w_hi = w("w_hi", hidden);
    let w_xf = w("w_xf", input);
    let w_hf = w("w_hf", hidden);
    let w_xg = w("w_xg", input);
    let w_hg = w("w_hg", hidden);
    let w_xo = w("w_xo", input);
    let w_ho = w("w_ho", hidden);
    let b_i = params.add_bias(&format!("{prefix}.b_i"), hidden);
    let b_f = params.add_bias(&format!("{prefix}.b_f"), hidden);
    let b_g = params.add_bias(&format!("{prefix}.b_g"), hidden);
    let b_o = params.add_bias(&format!("{prefix}.b_o"), hidden);
    LstmIds {
        w_xi, w_hi, b_i,
        w_xf, w_hf, b_f,
        w_xg, w_hg, b_g,
        w_xo, w_ho, b_o,
    }
}

fn add_gru(params: &mut ParamSet, prefix: &str, input: usize, hidden: usize, rng: &mut rand_chacha::ChaCha8Rng) -> GruIds {
    let mut w = |name: &str, rows: usize| params.add_weight(&format!("{prefix}.{name}"), rows, hidden, rng);
    let w_xz = w("w_xz", input);
    let w_hz = w("w_hz", hidden);
    let w_xr = w("w_xr", input);
    let w_hr = w("w_hr", hidden);
    let w_xn = w("w_xn", input);
    let w_hn = w("w_hn", hidden);
    let b_z = params.add_bias(&format!("{prefix}.b_z"), hidden);
    let b_r = params.add_bias(&format!("{prefix}.b_r"), hidden);
    let b_n = params.add_bias(&format!("{prefix}.b_n"), hidden);
    GruIds {
        w_xz, w_hz, b_z,
        w_xr, w_hr, b_r,
        w_xn, w_hn, b_n,
    }
}

fn add_head(params: &mut ParamSet, prefix: &str, input: usize, output: usize, rng: &mut rand_chacha::ChaCha8Rng) -> HeadIds {
    HeadIds {
        w: params.add_weight(&format!("{prefix}.w"), input, output, rng),
        b: params.add_bias(&format!("{prefix}.b"), output),
    }
}

impl GeneratorModel {
    /// Fresh model with seeded initialization. Weights are uniform in
    /// +-1/sqrt(fan_in), biases zero, drawn in declaration order.
    pub fn new(config: &Config, seed: u64) -> Self {
        let mut rng = rng_for(seed, STREAM_INIT);
        let mut params = ParamSet::new();
        let de = config.context_dim();
        let k = config.gmm_k;
        let node = add_lstm(&mut params, "encoder.node", 4, config.encoder_node_hidden, &mut rng);
        let edge = add_lstm(&mut params, "encoder.edge", 4, config.encoder_edge_hidden, &mut rng);
        let g1 = add_head(&mut params, "dest.g1", de, k, &mut rng);
        let g2 = add_head(&mut params, "dest.g2", de, 2 * k, &mut rng);
        let g3 = add_head(&mut params, "dest.g3", de, 2 * k, &mut rng);
        let g4 = add_head(&mut params, "dest.g4", de, k, &mut rng);
        let dec_init = add_head(&mut params, "decoder.init", de, config.decoder_hidden, &mut rng);
        let gru = add_gru(&mut params, "decoder.gru", de + 4, config.decoder_hidden, &mut rng);
        let residual = add_head(&mut params, "decoder.residual", config.decoder_hidden, 2, &mut rng);
        GeneratorModel {
            config: config.clone(),
            params,
            ids: ModelIds {
                node,
                edge,
                g1,
                g2,
                g3,
                g4,
                dec_init,
                gru,
                residual,
            },
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<Bound, GradError> {
        Ok(Bound {
            vars: self.params.bind(tape)?,
        })
    }

    /// Per-agent context vectors: node and edge history encodings
    /// concatenated, `N x (node_hidden + edge_hidden)`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        feats: &BatchFeatures,
    ) -> Result<Var, GradError> {
        let node_lstm = bound.lstm(self.ids.node);
        let edge_lstm = bound.lstm(self.ids.edge);
        let node_h = encoder::run_lstm(
            tape,
            &node_lstm,
            &feats.node_steps,
            feats.n,
            4,
            self.config.encoder_node_hidden,
        )?;
        let edge_h = encoder::run_lstm(
            tape,
            &edge_lstm,
            &feats.edge_steps,
            feats.n,
            4,
            self.config.encoder_edge_hidden,
        )?;
        tape.concat_cols(&[node_h, edge_h])
    }

    /// Mixture parameters for every agent in the batch.
    pub fn mixture(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        e: Var,
    ) -> Result<MixtureVars, GradError> {
        destination::predict_mixture(
            tape,
            bound.head(self.ids.g1),
            bound.head(self.ids.g2),
            bound.head(self.ids.g3),
            bound.head(self.ids.g4),
            e,
            self.config.gmm_k,
        )
    }

    /// Autoregressive residual rollout conditioned on `dest` (either the
    /// ground-truth destination during training or a sampled one).
    pub fn rollout(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        e: Var,
        dest: Var,
    ) -> Result<RolloutVars, GradError> {
        let gru = bound.gru(self.ids.gru);
        let init = if self.config.decoder_init_from_context {
            Some(bound.head(self.ids.dec_init))
        } else {
            None
        };
        decoder::rollout(
            tape,
            &gru,
            init,
            bound.head(self.ids.residual),
            e,
            dest,
            self.config.data_f,
        )
    }

    pub fn save_checkpoint(&self, path: &Path, seed: u64) -> Result<(), CheckpointError> {
        checkpoint::save(path, &self.params, seed, &self.config.to_lines())
    }

    /// Rebuild a model from a checkpoint: the embedded config defines the
    /// architecture, the payload restores the weights.
    pub fn from_checkpoint(path: &Path) -> Result<(Self, u64), CheckpointError> {
        let loaded: LoadedCheckpoint = checkpoint::load(path)?;
        let mut text = String::new();
        for line in &loaded.meta.config {
            text.push_str(line);
            text.push('\n');
        }
        let config = Config::from_str_contents(&text)
            .map_err(|e| CheckpointError::Malformed(format!("embedded config: {e}")))?;
        let mut model = GeneratorModel::new(&config, loaded.meta.seed);
        checkpoint::restore_into(&mut model.params, &loaded)?;
        Ok((model, loaded.meta.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_windows, normalize_window, preset, synth_scene};

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.encoder_node_hidden = 8;
        cfg.encoder_edge_hidden = 8;
        cfg.decoder_hidden = 8;
        cfg.gmm_k = 2;
        cfg
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_config();
        let a = GeneratorModel::new(&cfg, 5);
        let b = GeneratorModel::new(&cfg, 5);
        for (x, y) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.values, y.values, "{}", x.name);
        }
        let c = GeneratorModel::new(&cfg, 6);
        assert!(a.params.iter().zip(c.params.iter()).any(|(x, y)| x.values != y.values));
    }

    #[test]
    fn checkpoint_round_trip_restores_weights() {
        let cfg = tiny_config();
        let model = GeneratorModel::new(&cfg, 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save_checkpoint(&path, 11).unwrap();
        let (restored, seed) = GeneratorModel::from_checkpoint(&path).unwrap();
        assert_eq!(seed, 11);
        assert_eq!(restored.config, model.config);
        for (a, b) in model.params.iter().zip(restored.params.iter()) {
            assert_eq!(a.values, b.values, "{}", a.name);
        }
        let path2 = dir.path().join("m2.ckpt");
        restored.save_checkpoint(&path2, 11).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn encode_produces_context_of_configured_width() {
        let cfg = tiny_config();
        let model = GeneratorModel::new(&cfg, 0);
        let scene = synth_scene(&preset("crossing").unwrap(), 1).unwrap();
        let windows = build_windows(&scene, cfg.data_h, cfg.data_f);
        let norm = normalize_window(&windows[0], cfg.encoder_radius);
        let feats = BatchFeatures::from_windows(&[&norm]);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let e = model.encode(&mut tape, &bound, &feats).unwrap();
        assert_eq!(e.rows, 2);
        assert_eq!(e.cols, cfg.context_dim());
    }
}
