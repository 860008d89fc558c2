use std::ops::Range;

use super::{Group, Model, ModelError, NormKind, PoolKind, PromptMode};
use crate::data::{PaddedBatch, PAD};
use crate::numcore::{kernels, Scalar, Tape, Tensor, Var};

/// Candidate set of a prediction head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Head {
    /// Every item of every domain (ids `1..vocab_size`).
    All,
    /// A contiguous id range, normally the target domain.
    Range(Range<u32>),
}

impl Head {
    pub fn range(&self, vocab_size: usize) -> Range<u32> {
        match self {
            Head::All => 1..vocab_size as u32,
            Head::Range(r) => r.clone(),
        }
    }
}

/// Row-major `rows × len` id matrix.
#[derive(Clone, Copy, Debug)]
pub struct SeqInput<'a> {
    pub ids: &'a [u32],
    pub rows: usize,
    pub len: usize,
}

impl<'a> SeqInput<'a> {
    pub fn from_batch(b: &'a PaddedBatch) -> Self {
        Self {
            ids: &b.ids,
            rows: b.rows,
            len: b.len,
        }
    }
}

/// Tape handles for every parameter, in `ParamSet` order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
    names: Vec<String>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"));
        self.vars[i]
    }
}

/// Σ_i |⟨P^C_i, P^S_i⟩|, evaluated eagerly.
pub fn orthogonal_loss<T: Scalar>(pc: &Tensor<T>, ps: &Tensor<T>) -> f64 {
    let d = pc.cols();
    pc.values()
        .chunks_exact(d)
        .zip(ps.values().chunks_exact(d))
        .map(|(a, b)| kernels::dot(a, b).as_f64().abs())
        .sum()
}

impl<T: Scalar> Model<T> {
    /// Places every parameter on the tape; gradients are tracked for groups
    /// where `trainable` holds.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(Group) -> bool) -> Bound {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut names = Vec::with_capacity(self.params.len());
        for p in self.params.iter() {
            vars.push(tape.leaf(p.tensor.clone().with_grad(trainable(p.group))));
            names.push(p.name.clone());
        }
        Bound { vars, names }
    }

    fn check_input(&self, input: &SeqInput) -> Result<(), ModelError> {
        if input.len == 0 || input.len > self.cfg.max_len {
            return Err(ModelError::Config(format!(
                "row length {} outside 1..={}",
                input.len, self.cfg.max_len
            )));
        }
        if input.ids.len() != input.rows * input.len {
            return Err(ModelError::Config("id matrix does not match rows × len".into()));
        }
        Ok(())
    }

    /// Item plus position embeddings, `[rows·len, d]`.
    pub fn embed(&self, tape: &mut Tape<T>, b: &Bound, input: &SeqInput) -> Result<Var, ModelError> {
        self.check_input(input)?;
        let ids: Vec<usize> = input.ids.iter().map(|&i| i as usize).collect();
        let pos: Vec<usize> = (0..input.rows).flat_map(|_| 0..input.len).collect();
        let items = tape.gather_rows(b.var("item_emb.table"), &ids)?;
        let positions = tape.gather_rows(b.var("pos_emb.table"), &pos)?;
        Ok(tape.add(items, positions)?)
    }

    /// Prompt-enhanced representation of each row of `m` (`[n, d]`).
    pub fn enhance(&self, tape: &mut Tape<T>, b: &Bound, m: Var) -> Result<Var, ModelError> {
        if self.cfg.prompt == PromptMode::Off {
            return Ok(m);
        }
        let d = self.cfg.d;
        let n = tape.value(m).rows();
        let k = 2 * self.cfg.l_p;

        // (m ∥ p)·W1 = m·W1[..d] + p·W1[d..]
        let w1 = b.var("prompt_attn.w1");
        let w1_item = tape.slice_rows(w1, 0, d)?;
        let w1_prompt = tape.slice_rows(w1, d, 2 * d)?;
        let bank = tape.concat_rows(b.var("prompt_agnostic.bank"), b.var("prompt_specific.bank"))?;
        let item_part = tape.matmul(m, w1_item)?;
        let prompt_part = tape.matmul(bank, w1_prompt)?;
        let rep: Vec<usize> = (0..n).flat_map(|t| std::iter::repeat_n(t, k)).collect();
        let tile: Vec<usize> = (0..n).flat_map(|_| 0..k).collect();
        let item_rep = tape.gather_rows(item_part, &rep)?;
        let prompt_tile = tape.gather_rows(prompt_part, &tile)?;
        let pre = tape.add(item_rep, prompt_tile)?;
        let dn = match self.cfg.norm {
            NormKind::L2 => tape.l2_normalize_rows(pre),
            NormKind::Layer => tape.layer_normalize_rows(pre),
        };
        let d3 = tape.reshape(dn, vec![n, k, d])?;
        if self.cfg.prompt == PromptMode::MeanPool {
            return Ok(tape.mean_axis1(d3)?);
        }

        let q = tape.matmul(dn, b.var("prompt_attn.wq"))?;
        let kk = tape.matmul(dn, b.var("prompt_attn.wk"))?;
        let q = tape.reshape(q, vec![n, k, d])?;
        let kk = tape.reshape(kk, vec![n, k, d])?;
        let scores = tape.batch_matmul(q, kk, true)?;
        let scores = tape.scale(scores, T::lit(1.0 / (d as f64).sqrt()));
        let beta = tape.softmax(scores, None)?;
        let z = tape.batch_matmul(beta, d3, false)?;
        Ok(match self.cfg.pool {
            PoolKind::Mean => tape.mean_axis1(z)?,
            PoolKind::Last => {
                let flat = tape.reshape(z, vec![n * k, d])?;
                let last: Vec<usize> = (0..n).map(|t| t * k + k - 1).collect();
                tape.gather_rows(flat, &last)?
            }
        })
    }

    /// Causal single-head self-attention and feed-forward over `o`
    /// (`[rows·len, d]`); PAD keys are masked out.
    pub fn encode(&self, tape: &mut Tape<T>, b: &Bound, o: Var, input: &SeqInput) -> Result<Var, ModelError> {
        self.check_input(input)?;
        let (rows, len, d) = (input.rows, input.len, self.cfg.d);
        let q = tape.matmul(o, b.var("encoder.wq"))?;
        let k = tape.matmul(o, b.var("encoder.wk"))?;
        let v = tape.matmul(o, b.var("encoder.wv"))?;
        let q = tape.reshape(q, vec![rows, len, d])?;
        let k = tape.reshape(k, vec![rows, len, d])?;
        let v = tape.reshape(v, vec![rows, len, d])?;
        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, T::lit(1.0 / (d as f64).sqrt()));
        let mut keep = vec![false; rows * len * len];
        for r in 0..rows {
            let ids = &input.ids[r * len..(r + 1) * len];
            for i in 0..len {
                for j in 0..=i {
                    keep[(r * len + i) * len + j] = ids[j] != PAD;
                }
            }
        }
        let beta = tape.softmax(scores, Some(&keep))?;
        let u = tape.batch_matmul(beta, v, false)?;
        let mut u = tape.reshape(u, vec![rows * len, d])?;
        if self.cfg.residual {
            u = tape.add(u, o)?;
        }
        let h = tape.matmul(u, b.var("encoder.w2"))?;
        let h = tape.add_row(h, b.var("encoder.b1"))?;
        let h = tape.relu(h);
        let h = tape.matmul(h, b.var("encoder.w3"))?;
        let mut h = tape.add_row(h, b.var("encoder.b2"))?;
        if self.cfg.residual {
            h = tape.add(h, u)?;
        }
        Ok(h)
    }

    /// Per-position sequence states `[rows·len, d]`.
    pub fn hidden(&self, tape: &mut Tape<T>, b: &Bound, input: &SeqInput) -> Result<Var, ModelError> {
        let m = self.embed(tape, b, input)?;
        let o = self.enhance(tape, b, m)?;
        self.encode(tape, b, o, input)
    }

    /// Logits of the selected state rows against the head's candidates.
    pub fn logits(&self, tape: &mut Tape<T>, b: &Bound, h: Var, rows: &[usize], head: &Head) -> Result<Var, ModelError> {
        let r = head.range(self.cfg.vocab_size);
        if r.start == 0 || r.end as usize > self.cfg.vocab_size || r.start >= r.end {
            return Err(ModelError::Config(format!("head range {r:?} is invalid")));
        }
        let sel = tape.gather_rows(h, rows)?;
        let items = tape.slice_rows(b.var("item_emb.table"), r.start as usize, r.end as usize)?;
        let items_t = tape.transpose(items)?;
        let bias = tape.slice_rows(b.var("out_bias.b3"), r.start as usize, r.end as usize)?;
        let z = tape.matmul(sel, items_t)?;
        Ok(tape.add_row(z, bias)?)
    }

    /// Per-token mean next-item cross-entropy over non-ignored targets.
    pub fn task_loss(&self, tape: &mut Tape<T>, b: &Bound, batch: &PaddedBatch, head: &Head) -> Result<Var, ModelError> {
        let input = SeqInput::from_batch(batch);
        let h = self.hidden(tape, b, &input)?;
        let r = head.range(self.cfg.vocab_size);
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for (p, &t) in batch.targets.iter().enumerate() {
            if t == PAD {
                continue;
            }
            if !r.contains(&t) {
                return Err(ModelError::Config(format!("target {t} outside head range {r:?}")));
            }
            rows.push(p);
            targets.push((t - r.start) as usize);
        }
        let sel = tape.gather_rows(h, &rows)?;
        let items = tape.slice_rows(b.var("item_emb.table"), r.start as usize, r.end as usize)?;
        let bias = tape.slice_rows(b.var("out_bias.b3"), r.start as usize, r.end as usize)?;
        Ok(tape.linear_cross_entropy(sel, items, bias, &targets)?)
    }

    /// Σ_i |⟨P^C_i, P^S_i⟩| on the tape; `None` without prompt banks.
    pub fn orth_loss(&self, tape: &mut Tape<T>, b: &Bound) -> Option<Var> {
        if self.cfg.prompt == PromptMode::Off {
            return None;
        }
        let prod = tape
            .mul(b.var("prompt_agnostic.bank"), b.var("prompt_specific.bank"))
            .expect("banks share a shape");
        let dots = tape.sum_last(prod).expect("matrix");
        let abs = tape.abs(dots);
        Some(tape.sum_all(abs))
    }

    /// Eager version of the orthogonality penalty; 0 without prompts.
    pub fn orthogonal_loss(&self) -> f64 {
        match (
            self.params.get("prompt_agnostic.bank"),
            self.params.get("prompt_specific.bank"),
        ) {
            (Some(pc), Some(ps)) => orthogonal_loss(pc, ps),
            _ => 0.0,
        }
    }

    /// Logits at the final position of each row, `[rows, |head|]`.
    pub fn final_logits(&self, input: &SeqInput, head: &Head) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let h = self.hidden(&mut tape, &b, input)?;
        let last: Vec<usize> = (0..input.rows).map(|r| r * input.len + input.len - 1).collect();
        let z = self.logits(&mut tape, &b, h, &last, head)?;
        Ok(tape.value(z).clone())
    }

    fn probabilities(&self, input: &SeqInput, head: &Head) -> Result<Vec<Vec<T>>, ModelError> {
        let z = self.final_logits(input, head)?;
        let r = head.range(self.cfg.vocab_size);
        Ok((0..input.rows)
            .map(|i| {
                // normalize in f64 so f32 output still sums to 1 within 1e-6
                let mut row: Vec<f64> = z.row(i).iter().map(|v| v.as_f64()).collect();
                kernels::softmax_in_place(&mut row, None);
                let mut full = vec![T::zero(); self.cfg.vocab_size];
                for (dst, &p) in full[r.start as usize..r.end as usize].iter_mut().zip(&row) {
                    *dst = T::lit(p);
                }
                full
            })
            .collect())
    }

    /// Next-item distribution over every item (index = global id; PAD is 0).
    pub fn predict_all(&self, input: &SeqInput) -> Result<Vec<Vec<T>>, ModelError> {
        self.probabilities(input, &Head::All)
    }

    /// Next-item distribution restricted to `target`; all other ids are 0.
    pub fn predict_target(&self, input: &SeqInput, target: Range<u32>) -> Result<Vec<Vec<T>>, ModelError> {
        self.probabilities(input, &Head::Range(target))
    }

    /// Prompt enhancement of one embedding vector.
    pub fn enhance_item(&self, m: &[T]) -> Result<Vec<T>, ModelError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let mv = tape.constant(Tensor::new(vec![1, m.len()], m.to_vec())?);
        let o = self.enhance(&mut tape, &b, mv)?;
        Ok(tape.value(o).values().to_vec())
    }

    /// Encoder states for one row of already-enhanced items `o` (`[len, d]`).
    pub fn encode_row(&self, o: &Tensor<T>, ids: &[u32]) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, |_| false);
        let ov = tape.constant(o.clone());
        let input = SeqInput {
            ids,
            rows: 1,
            len: ids.len(),
        };
        let h = self.encode(&mut tape, &b, ov, &input)?;
        Ok(tape.value(h).clone())
    }
}
