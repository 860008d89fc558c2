use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError, PromptMode};
use crate::data::stream_seed;
use crate::numcore::{Scalar, Tensor};

/// Named parameter groups, the unit of freezing and checkpointing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    ItemEmb,
    PosEmb,
    PromptAgnostic,
    PromptSpecific,
    PromptAttn,
    Encoder,
    OutBias,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::ItemEmb,
        Group::PosEmb,
        Group::PromptAgnostic,
        Group::PromptSpecific,
        Group::PromptAttn,
        Group::Encoder,
        Group::OutBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::ItemEmb => "item_emb",
            Group::PosEmb => "pos_emb",
            Group::PromptAgnostic => "prompt_agnostic",
            Group::PromptSpecific => "prompt_specific",
            Group::PromptAttn => "prompt_attn",
            Group::Encoder => "encoder",
            Group::OutBias => "out_bias",
        }
    }

    pub fn from_name(name: &str) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.name() == name)
    }

    pub fn is_prompt(self) -> bool {
        matches!(
            self,
            Group::PromptAgnostic | Group::PromptSpecific | Group::PromptAttn
        )
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    /// `group.local`, e.g. `encoder.wq`.
    pub name: String,
    pub group: Group,
    pub tensor: Tensor<T>,
}

/// All parameters in a fixed canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T = f32> {
    params: Vec<Param<T>>,
}

/// Canonical `(group, local name, shape)` list for a config.
pub fn layout(cfg: &ModelConfig) -> Vec<(Group, &'static str, Vec<usize>)> {
    let (v, d, f, lp) = (cfg.vocab_size, cfg.d, cfg.d_ff, cfg.l_p);
    let mut out = vec![
        (Group::ItemEmb, "table", vec![v, d]),
        (Group::PosEmb, "table", vec![cfg.max_len, d]),
    ];
    if cfg.prompt != PromptMode::Off {
        out.push((Group::PromptAgnostic, "bank", vec![lp, d]));
        out.push((Group::PromptSpecific, "bank", vec![lp, d]));
        out.push((Group::PromptAttn, "w1", vec![2 * d, d]));
        if cfg.prompt == PromptMode::Attention {
            out.push((Group::PromptAttn, "wq", vec![d, d]));
            out.push((Group::PromptAttn, "wk", vec![d, d]));
        }
    }
    out.extend([
        (Group::Encoder, "wq", vec![d, d]),
        (Group::Encoder, "wk", vec![d, d]),
        (Group::Encoder, "wv", vec![d, d]),
        (Group::Encoder, "w2", vec![d, f]),
        (Group::Encoder, "b1", vec![f]),
        (Group::Encoder, "w3", vec![f, d]),
        (Group::Encoder, "b2", vec![d]),
        (Group::OutBias, "b3", vec![v]),
    ]);
    out
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a; keeps each tensor's init stream independent of which others exist
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

impl<T: Scalar> ParamSet<T> {
    /// Xavier-normal matrices, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let params = layout(cfg)
            .into_iter()
            .map(|(group, local, shape)| {
                let name = format!("{}.{local}", group.name());
                let len: usize = shape.iter().product();
                let values = if shape.len() == 2 {
                    let std = (2.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, name_hash(&name)));
                    (0..len).map(|_| T::lit(normal.sample(&mut rng))).collect()
                } else {
                    vec![T::zero(); len]
                };
                Param {
                    name,
                    group,
                    tensor: Tensor::new(shape, values).expect("layout shape"),
                }
            })
            .collect();
        Self { params }
    }

    pub fn from_params(params: Vec<Param<T>>) -> Self {
        Self { params }
    }

    /// Fails unless names, order and shapes equal the config layout.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let want = layout(cfg);
        if want.len() != self.params.len() {
            return Err(ModelError::Params(format!(
                "expected {} tensors, found {}",
                want.len(),
                self.params.len()
            )));
        }
        for ((group, local, shape), p) in want.iter().zip(&self.params) {
            let name = format!("{}.{local}", group.name());
            if p.name != name || p.tensor.shape() != shape.as_slice() {
                return Err(ModelError::Params(format!(
                    "expected {name} {shape:?}, found {} {:?}",
                    p.name,
                    p.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn has_group(&self, g: Group) -> bool {
        self.params.iter().any(|p| p.group == g)
    }

    pub fn group(&self, g: Group) -> impl Iterator<Item = &Param<T>> {
        self.params.iter().filter(move |p| p.group == g)
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }
}
