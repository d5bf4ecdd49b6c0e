//! Named trainable parameters and their bridge onto a tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::{GradError, Tape, Var};

#[derive(Clone)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
    pub grad: Vec<f32>,
}

/// Index of a parameter within its [`ParamSet`]; stable for the lifetime
/// of the model.
#[derive(Clone, Copy, Debug)]
pub struct ParamId(pub usize);

/// Ordered collection of model parameters. Declaration order fixes both
/// the checkpoint layout and the initialization stream.
#[derive(Clone, Default)]
pub struct ParamSet {
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    /// Weight matrix initialized uniformly in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    pub fn add_weight(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = 1.0 / (rows as f64).sqrt();
        let values = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound) as f32)
            .collect();
        self.add_raw(name, rows, cols, values)
    }

    /// Zero-initialized bias row.
    pub fn add_bias(&mut self, name: &str, cols: usize) -> ParamId {
        self.add_raw(name, 1, cols, vec![0.0; cols])
    }

    pub fn add_raw(&mut self, name: &str, rows: usize, cols: usize, values: Vec<f32>) -> ParamId {
        assert_eq!(values.len(), rows * cols);
        let id = ParamId(self.entries.len());
        self.entries.push(Param {
            name: name.to_string(),
            rows,
            cols,
            values,
            grad: vec![0.0; rows * cols],
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|p| p.values.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.entries.iter_mut()
    }

    /// Insert every parameter as a requires-grad leaf; the returned vars
    /// are indexed by [`ParamId`].
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>, GradError> {
        self.entries
            .iter()
            .map(|p| tape.leaf_from_f32(&p.values, p.rows, p.cols))
            .collect()
    }

    /// Pull leaf gradients accumulated on a tape back into the set (`+=`).
    pub fn absorb_grads(&mut self, tape: &Tape, vars: &[Var]) {
        for (p, v) in self.entries.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(*v) {
                for (dst, &src) in p.grad.iter_mut().zip(g) {
                    *dst += src as f32;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Global L2 norm of all gradients, accumulated in f64.
    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_deterministic_given_seed() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut p = ParamSet::new();
            p.add_weight("w", 4, 3, &mut rng);
            p.add_bias("b", 3);
            p
        };
        let a = build();
        let b = build();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.values, y.values);
        }
    }

    #[test]
    fn weight_init_respects_fan_in_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        let id = p.add_weight("w", 16, 8, &mut rng);
        let bound = 1.0 / 4.0;
        assert!(p.get(id).values.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn absorb_grads_accumulates() {
        let mut p = ParamSet::new();
        let id = p.add_raw("w", 1, 2, vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let vars = p.bind(&mut tape).unwrap();
        let y = tape.mul(vars[0], vars[0]).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        p.absorb_grads(&tape, &vars);
        assert_eq!(p.get(id).grad, vec![2.0, 4.0]);
        p.absorb_grads(&tape, &vars);
        assert_eq!(p.get(id).grad, vec![4.0, 8.0]);
    }
}
