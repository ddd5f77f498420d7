//! Model assembly: parameter initialization and dimension bookkeeping.

use rand::Rng;

use crate::embedding::{EmbedSettings, EmbeddingVariant};
use crate::graph::SamplingPolicy;
use crate::memory::{TimeMode, UpdaterKind};
use crate::params::{glorot_matrix, ModelParams};
use crate::tensor::Tensor;

/// Everything that determines parameter shapes and forward behavior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub d_mem: usize,
    pub d_node: usize,
    pub d_time: usize,
    /// Edge-feature dimensionality, taken from the dataset.
    pub d_e: usize,
    pub updater: UpdaterKind,
    pub variant: EmbeddingVariant,
    pub time_mode: TimeMode,
    pub heads: usize,
    pub layers: usize,
    pub n_nbr: usize,
    pub policy: SamplingPolicy,
}

impl ModelSpec {
    /// Message dimensionality: `s_i || s_j || time block || edge features`.
    pub fn d_msg(&self) -> usize {
        let time_block = match self.time_mode {
            TimeMode::Encode => self.d_time,
            TimeMode::Raw => 1,
        };
        2 * self.d_mem + time_block + self.d_e
    }

    /// Per-head width; heads concatenate back to at least `d_node`.
    pub fn d_head(&self) -> usize {
        self.d_node.div_ceil(self.heads)
    }

    pub fn embed_settings(&self) -> EmbedSettings {
        EmbedSettings {
            variant: self.variant,
            heads: self.heads,
            layers: self.layers,
            n_nbr: self.n_nbr,
            d_node: self.d_node,
            d_head: self.d_head(),
            policy: self.policy,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TgnModel {
    pub spec: ModelSpec,
    pub params: ModelParams,
}

impl TgnModel {
    /// Initialize parameters for the configured updater and embedding
    /// variant: Glorot-uniform matrices, zero biases, and a geometric
    /// frequency ladder for the time encoder (1 down to 1e-9) so deltas
    /// across many time scales produce distinct encodings from the start.
    pub fn new<R: Rng>(spec: ModelSpec, rng: &mut R) -> Self {
        let mut params = ModelParams::new();
        let omega: Vec<f64> = (0..spec.d_time)
            .map(|i| {
                if spec.d_time == 1 {
                    1.0
                } else {
                    10f64.powf(-9.0 * i as f64 / (spec.d_time - 1) as f64)
                }
            })
            .collect();
        params.insert("time.omega", Tensor::vector(omega));
        params.insert("time.phase", Tensor::zeros(vec![spec.d_time]));

        let d_msg = spec.d_msg();
        match spec.updater {
            UpdaterKind::Gru => {
                for gate in ["z", "r", "h"] {
                    params.insert(format!("mem.gru.w{gate}"), glorot_matrix(d_msg, spec.d_mem, rng));
                    params.insert(
                        format!("mem.gru.u{gate}"),
                        glorot_matrix(spec.d_mem, spec.d_mem, rng),
                    );
                    params.insert(format!("mem.gru.b{gate}"), Tensor::zeros(vec![spec.d_mem]));
                }
            }
            UpdaterKind::Rnn => {
                params.insert("mem.rnn.w", glorot_matrix(d_msg, spec.d_mem, rng));
                params.insert("mem.rnn.u", glorot_matrix(spec.d_mem, spec.d_mem, rng));
                params.insert("mem.rnn.b", Tensor::zeros(vec![spec.d_mem]));
            }
        }

        let d_kin = spec.d_mem + spec.d_e + spec.d_time;
        match spec.variant {
            EmbeddingVariant::Attention => {
                let d_qin = spec.d_mem + spec.d_time;
                let d_head = spec.d_head();
                for h in 0..spec.heads {
                    params.insert(format!("embed.attn.h{h}.wq"), glorot_matrix(d_qin, d_head, rng));
                    params.insert(format!("embed.attn.h{h}.wk"), glorot_matrix(d_kin, d_head, rng));
                    params.insert(format!("embed.attn.h{h}.wv"), glorot_matrix(d_kin, d_head, rng));
                }
                params.insert(
                    "embed.attn.wo",
                    glorot_matrix(spec.heads * d_head, spec.d_node, rng),
                );
                params.insert(
                    "embed.attn.ff1.w",
                    glorot_matrix(spec.d_mem + spec.d_node, spec.d_node, rng),
                );
                params.insert("embed.attn.ff1.b", Tensor::zeros(vec![spec.d_node]));
                params.insert("embed.attn.ff2.w", glorot_matrix(spec.d_node, spec.d_node, rng));
                params.insert("embed.attn.ff2.b", Tensor::zeros(vec![spec.d_node]));
            }
            EmbeddingVariant::Sum => {
                params.insert("embed.sum.w1", glorot_matrix(d_kin, spec.d_node, rng));
                params.insert(
                    "embed.sum.w2",
                    glorot_matrix(spec.d_mem + spec.d_node, spec.d_node, rng),
                );
            }
            EmbeddingVariant::Gcn => {
                params.insert("embed.gcn.w", glorot_matrix(spec.d_mem, spec.d_node, rng));
                params.insert("embed.gcn.b", Tensor::zeros(vec![spec.d_node]));
            }
        }
        TgnModel { spec, params }
    }
}
