use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{Parameter, Scalar, Tensor};

use super::config::ModelConfig;

pub const INIT_STD: f64 = 0.02;

/// Weights of one pre-norm block: attention followed by a SiLU-gated FFN.
/// Matrices are stored `[in × out]` so activations multiply on the left.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T = f32> {
    pub attn_norm: Parameter<T>,
    pub wq: Parameter<T>,
    pub wk: Parameter<T>,
    pub wv: Parameter<T>,
    pub wo: Parameter<T>,
    pub ffn_norm: Parameter<T>,
    pub w_gate: Parameter<T>,
    pub w_up: Parameter<T>,
    pub w_down: Parameter<T>,
}

impl<T: Scalar> LayerParams<T> {
    const NAMES: [&'static str; 9] = [
        "attn_norm",
        "wq",
        "wk",
        "wv",
        "wo",
        "ffn_norm",
        "w_gate",
        "w_up",
        "w_down",
    ];

    fn parts(&self) -> [&Parameter<T>; 9] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn parts_mut(&mut self) -> [&mut Parameter<T>; 9] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// All model weights. `final_norm` and `lm_head` form the single exit head
/// shared by every layer; the embedding table is a separate parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    pub token_embedding: Parameter<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Parameter<T>,
    pub lm_head: Parameter<T>,
}

fn normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Parameter<T> {
    let dist = Normal::new(0.0f64, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect();
    Parameter::new(Tensor::from_vec(shape, data).expect("shape matches"))
}

fn ones<T: Scalar>(n: usize) -> Parameter<T> {
    Parameter::new(Tensor::from_vec(&[n], vec![T::one(); n]).expect("shape matches"))
}

impl<T: Scalar> ModelParams<T> {
    /// Seeded initialization: N(0, 0.02) everywhere, with the two residual
    /// output projections scaled down by `1/sqrt(2L)`; norm gains start at 1.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, v) = (config.dim, config.ffn_hidden, config.vocab);
        let out_std = INIT_STD / ((2 * config.n_layers) as f64).sqrt();
        let token_embedding = normal(&mut rng, &[v, d], INIT_STD);
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: ones(d),
                wq: normal(&mut rng, &[d, d], INIT_STD),
                wk: normal(&mut rng, &[d, d], INIT_STD),
                wv: normal(&mut rng, &[d, d], INIT_STD),
                wo: normal(&mut rng, &[d, d], out_std),
                ffn_norm: ones(d),
                w_gate: normal(&mut rng, &[d, h], INIT_STD),
                w_up: normal(&mut rng, &[d, h], INIT_STD),
                w_down: normal(&mut rng, &[h, d], out_std),
            })
            .collect();
        let final_norm = ones(d);
        let lm_head = normal(&mut rng, &[d, v], INIT_STD);
        Ok(ModelParams {
            config,
            token_embedding,
            layers,
            final_norm,
            lm_head,
        })
    }

    /// Parameters in canonical order with their manifest names.
    pub fn named(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out = vec![("token_embedding".to_string(), &self.token_embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, p) in LayerParams::<T>::NAMES.iter().zip(layer.parts()) {
                out.push((format!("layers.{i}.{name}"), p));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = vec![&mut self.token_embedding];
        for layer in self.layers.iter_mut() {
            out.extend(layer.parts_mut());
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, p)| p.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            token_embedding: self.token_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    ffn_norm: l.ffn_norm.cast(),
                    w_gate: l.w_gate.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.cast(),
        }
    }

    /// All parameter values concatenated in canonical order.
    pub fn flat_values(&self) -> Vec<T> {
        self.named()
            .iter()
            .flat_map(|(_, p)| p.value.data().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<T> {
        self.named()
            .iter()
            .flat_map(|(_, p)| p.grad.data().iter().copied())
            .collect()
    }

    pub fn set_flat_values(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "expected {} values, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut offset = 0;
        for p in self.params_mut() {
            let n = p.numel();
            p.value
                .data_mut()
                .copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, p)| p.value.is_finite())
    }
}
