//! Seeded parameter initialisation. Values are rounded to `f32` so that a
//! freshly initialised model survives a checkpoint round trip bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::learning::{Params, Tensor};

pub struct Initializer {
    rng: ChaCha8Rng,
    params: Params,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Params::new(),
        }
    }

    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64) {
        let mut t = Tensor::uniform(shape, bound, &mut self.rng);
        t.round_to_f32();
        self.params.insert(name, t);
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.params.insert(name, Tensor::zeros(shape));
    }

    pub fn tensor(&mut self, name: impl Into<String>, mut value: Tensor) {
        value.round_to_f32();
        self.params.insert(name, value);
    }

    /// `{prefix}.weight [din, dout]` uniform in `±1/√din`, zero `{prefix}.bias`.
    pub fn linear(&mut self, prefix: &str, din: usize, dout: usize) {
        self.uniform(format!("{prefix}.weight"), &[din, dout], 1.0 / (din as f64).sqrt());
        self.zeros(format!("{prefix}.bias"), &[dout]);
    }

    /// Linear layer with weight and bias exactly zero.
    pub fn linear_zero(&mut self, prefix: &str, din: usize, dout: usize) {
        self.zeros(format!("{prefix}.weight"), &[din, dout]);
        self.zeros(format!("{prefix}.bias"), &[dout]);
    }

    /// `{prefix}.weight [cout, cin, k, k]` uniform in `±1/√(cin·k·k)`, zero bias.
    pub fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) {
        let fan_in = (cin * k * k) as f64;
        self.uniform(format!("{prefix}.weight"), &[cout, cin, k, k], 1.0 / fan_in.sqrt());
        self.zeros(format!("{prefix}.bias"), &[cout]);
    }

    pub fn conv_zero(&mut self, prefix: &str, cin: usize, cout: usize, k: usize) {
        self.zeros(format!("{prefix}.weight"), &[cout, cin, k, k]);
        self.zeros(format!("{prefix}.bias"), &[cout]);
    }

    pub fn finish(self) -> Params {
        self.params
    }
}
