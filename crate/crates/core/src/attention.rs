//! Multi-head self-attention encoders and the modality-sharing cross-attention
//! decoder with learnable query tokens.
//!
//! The encoder is exactly one multi-head self-attention block plus a residual
//! connection (an optional pre-norm sits behind a config flag and defaults
//! off). The decoder projects learnable tokens to queries and the encoded
//! features to keys/values; its parameters and the token set are shared by
//! the image and text paths, which is what aligns coarse embeddings across
//! modalities without alignment labels.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::Tensor;

/// Per-head projection weights plus the output projection.
///
/// `w_q[i]`, `w_k[i]`, `w_v[i]` are `(d, d_h)`; `w_o` is `(n * d_h, d)`,
/// with `d_h = d / n` exactly.
#[derive(Clone, Debug)]
pub struct AttentionParameters {
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    pub w_v: Vec<Tensor>,
    pub w_o: Tensor,
}

impl AttentionParameters {
    /// Normal(0, 0.02) init; `d` must be divisible by `n_heads`.
    pub fn init<R: Rng>(d: usize, n_heads: usize, rng: &mut R) -> Result<Self> {
        if n_heads == 0 || !d.is_multiple_of(n_heads) {
            return Err(Error::NotDivisible {
                value: d,
                divisor: n_heads.max(1),
                context: "feature dim over head count".to_string(),
            });
        }
        let dh = d / n_heads;
        let mk = |rng: &mut R| Tensor::randn(vec![d, dh], 0.02, rng);
        Ok(AttentionParameters {
            w_q: (0..n_heads).map(|_| mk(rng)).collect(),
            w_k: (0..n_heads).map(|_| mk(rng)).collect(),
            w_v: (0..n_heads).map(|_| mk(rng)).collect(),
            w_o: Tensor::randn(vec![n_heads * dh, d], 0.02, rng),
        })
    }

    pub fn n_heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn head_dim(&self) -> usize {
        self.w_q[0].cols()
    }

    pub fn model_dim(&self) -> usize {
        self.w_q[0].rows()
    }

    /// Insert the parameters as constants on a tape (inference/testing path).
    pub fn as_vars(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            w_q: self.w_q.iter().map(|t| tape.leaf(t.clone())).collect(),
            w_k: self.w_k.iter().map(|t| tape.leaf(t.clone())).collect(),
            w_v: self.w_v.iter().map(|t| tape.leaf(t.clone())).collect(),
            w_o: tape.leaf(self.w_o.clone()),
            head_dim: self.head_dim(),
        }
    }

    /// Scaled pre-softmax attention logits for one head, for diagnostics:
    /// queries from `queries_in`, keys from `keys_in`.
    pub fn attention_logits(
        &self,
        head: usize,
        queries_in: &Tensor,
        keys_in: &Tensor,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let q_in = tape.leaf(queries_in.clone());
        let k_in = tape.leaf(keys_in.clone());
        let wq = tape.leaf(self.w_q[head].clone());
        let wk = tape.leaf(self.w_k[head].clone());
        let q = tape.matmul(q_in, wq)?;
        let k = tape.matmul(k_in, wk)?;
        let kt = tape.transpose(k);
        let qk = tape.matmul(q, kt)?;
        let scaled = tape.scale(qk, 1.0 / (self.head_dim() as f64).sqrt());
        Ok(tape.value(scaled).clone())
    }

    /// Value-level multi-head self-attention.
    pub fn mhsa(&self, features: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(features.clone());
        let vars = self.as_vars(&mut tape);
        let out = mhsa_graph(&mut tape, x, mask, &vars)?;
        Ok(tape.value(out).clone())
    }

    /// Value-level encoder: features + MHSA(features).
    pub fn encode(&self, features: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(features.clone());
        let vars = self.as_vars(&mut tape);
        let out = encode_graph(&mut tape, x, mask, &vars, false)?;
        Ok(tape.value(out).clone())
    }

    /// Value-level decoder pass returning outputs plus attention weights.
    pub fn decode(
        &self,
        tokens: &Tensor,
        memory: &Tensor,
        mask: Option<&[bool]>,
    ) -> Result<CrossAttentionRecord> {
        let mut tape = Tape::new();
        let tok = tape.leaf(tokens.clone());
        let mem = tape.leaf(memory.clone());
        let vars = self.as_vars(&mut tape);
        let out = decode_graph(&mut tape, tok, mem, mask, &vars)?;
        Ok(out.record(&tape))
    }
}

/// Graph-side handles to one attention block's parameters.
#[derive(Clone)]
pub struct AttentionVars {
    pub w_q: Vec<Var>,
    pub w_k: Vec<Var>,
    pub w_v: Vec<Var>,
    pub w_o: Var,
    pub head_dim: usize,
}

/// Decoder outputs on a tape: embeddings plus per-head attention weights.
pub struct DecodeOut {
    /// (num_tokens, d)
    pub output: Var,
    /// One `(num_tokens, seq)` row-stochastic matrix per head.
    pub attn: Vec<Var>,
}

impl DecodeOut {
    /// Materialize into a value-level [`CrossAttentionRecord`].
    pub fn record(&self, tape: &Tape) -> CrossAttentionRecord {
        let n = self.attn.len();
        let (q, s) = {
            let a0 = tape.value(self.attn[0]);
            (a0.rows(), a0.cols())
        };
        let mut weights = Tensor::zeros(vec![n, q, s]);
        for (h, &a) in self.attn.iter().enumerate() {
            let av = tape.value(a);
            let dst = &mut weights.data_mut()[h * q * s..(h + 1) * q * s];
            dst.copy_from_slice(av.data());
        }
        CrossAttentionRecord {
            weights,
            outputs: tape.value(self.output).clone(),
        }
    }
}

/// Cross-attention weights `(n_heads, num_queries, seq)` and decoder
/// outputs `(num_queries, d)` from one decoder pass.
#[derive(Clone, Debug)]
pub struct CrossAttentionRecord {
    pub weights: Tensor,
    pub outputs: Tensor,
}

impl CrossAttentionRecord {
    pub fn n_heads(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn num_queries(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn seq_len(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn weight(&self, head: usize, query: usize, pos: usize) -> f64 {
        let (q, s) = (self.num_queries(), self.seq_len());
        self.weights.data()[(head * q + query) * s + pos]
    }

    /// Mean attention over heads and queries: one weight per sequence
    /// position. Rows are stochastic, so entries average 1/seq.
    pub fn mean_attention(&self) -> Vec<f64> {
        let (n, q, s) = (self.n_heads(), self.num_queries(), self.seq_len());
        let mut avg = vec![0.0; s];
        for h in 0..n {
            for t in 0..q {
                for p in 0..s {
                    avg[p] += self.weight(h, t, p);
                }
            }
        }
        let denom = (n * q) as f64;
        for v in &mut avg {
            *v /= denom;
        }
        avg
    }
}

fn check_input(tape: &Tape, x: Var, vars: &AttentionVars, what: &str) -> Result<()> {
    let t = tape.value(x);
    if t.rank() != 2 || t.rows() == 0 {
        return Err(Error::ShapeMismatch {
            context: format!("{what}: expected non-empty (seq, d)"),
            expected: vec![1, 0],
            got: t.shape().to_vec(),
        });
    }
    let d = tape.value(vars.w_q[0]).rows();
    if t.cols() != d {
        return Err(Error::ShapeMismatch {
            context: format!("{what}: feature dim"),
            expected: vec![d],
            got: vec![t.cols()],
        });
    }
    Ok(())
}

/// Multi-head self-attention on a tape. `mask` marks valid key positions.
pub fn mhsa_graph(
    tape: &mut Tape,
    x: Var,
    mask: Option<&[bool]>,
    vars: &AttentionVars,
) -> Result<Var> {
    check_input(tape, x, vars, "mhsa")?;
    let heads = attention_heads(tape, x, x, mask, vars)?;
    let cat = tape.concat_cols(&heads.outputs)?;
    tape.matmul(cat, vars.w_o)
}

/// Encoder: x + MHSA(x), with an optional pre-norm on the MHSA branch.
pub fn encode_graph(
    tape: &mut Tape,
    x: Var,
    mask: Option<&[bool]>,
    vars: &AttentionVars,
    pre_norm: bool,
) -> Result<Var> {
    let branch_in = if pre_norm {
        tape.layer_norm_rows(x, 1e-5)
    } else {
        x
    };
    let attended = mhsa_graph(tape, branch_in, mask, vars)?;
    tape.add(x, attended)
}

/// Cross-attention decoder: tokens are queries, memory provides keys and
/// values. No residual around the tokens.
pub fn decode_graph(
    tape: &mut Tape,
    tokens: Var,
    memory: Var,
    mask: Option<&[bool]>,
    vars: &AttentionVars,
) -> Result<DecodeOut> {
    check_input(tape, tokens, vars, "decode tokens")?;
    check_input(tape, memory, vars, "decode memory")?;
    let heads = attention_heads(tape, tokens, memory, mask, vars)?;
    let cat = tape.concat_cols(&heads.outputs)?;
    let output = tape.matmul(cat, vars.w_o)?;
    Ok(DecodeOut {
        output,
        attn: heads.attn,
    })
}

struct Heads {
    outputs: Vec<Var>,
    attn: Vec<Var>,
}

fn attention_heads(
    tape: &mut Tape,
    query_in: Var,
    key_in: Var,
    mask: Option<&[bool]>,
    vars: &AttentionVars,
) -> Result<Heads> {
    if let Some(mk) = mask {
        let seq = tape.value(key_in).rows();
        if mk.len() != seq {
            return Err(Error::ShapeMismatch {
                context: "attention mask".to_string(),
                expected: vec![seq],
                got: vec![mk.len()],
            });
        }
        if !mk.iter().any(|&b| b) {
            return Err(Error::AllMasked("attention keys".to_string()));
        }
    }
    let scale = 1.0 / (vars.head_dim as f64).sqrt();
    let mut outputs = Vec::with_capacity(vars.w_q.len());
    let mut attn = Vec::with_capacity(vars.w_q.len());
    for h in 0..vars.w_q.len() {
        let q = tape.matmul(query_in, vars.w_q[h])?;
        let k = tape.matmul(key_in, vars.w_k[h])?;
        let v = tape.matmul(key_in, vars.w_v[h])?;
        let kt = tape.transpose(k);
        let logits = tape.matmul(q, kt)?;
        let scaled = tape.scale(logits, scale);
        let weights = tape.softmax_rows(scaled, mask)?;
        let out = tape.matmul(weights, v)?;
        outputs.push(out);
        attn.push(weights);
    }
    Ok(Heads { outputs, attn })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    // Straight-line float64 oracle for one multi-head attention pass,
    // independent of the tape: plain nested loops over Vec<Vec<f64>>.
    fn oracle_attention(
        queries_in: &[Vec<f64>],
        keys_in: &[Vec<f64>],
        mask: Option<&[bool]>,
        p: &AttentionParameters,
    ) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
        let n = p.n_heads();
        let dh = p.head_dim();
        let d = p.model_dim();
        let nq = queries_in.len();
        let s = keys_in.len();
        let proj = |x: &[Vec<f64>], w: &Tensor| -> Vec<Vec<f64>> {
            x.iter()
                .map(|row| {
                    (0..w.cols())
                        .map(|j| (0..d).map(|i| row[i] * w.at2(i, j)).sum())
                        .collect()
                })
                .collect()
        };
        let mut head_outs: Vec<Vec<Vec<f64>>> = Vec::new();
        let mut attn_all: Vec<Vec<Vec<f64>>> = Vec::new();
        for h in 0..n {
            let q = proj(queries_in, &p.w_q[h]);
            let k = proj(keys_in, &p.w_k[h]);
            let v = proj(keys_in, &p.w_v[h]);
            let mut attn = vec![vec![0.0; s]; nq];
            for i in 0..nq {
                let mut logits = vec![f64::NEG_INFINITY; s];
                for j in 0..s {
                    if mask.is_none_or(|m| m[j]) {
                        let dot: f64 = (0..dh).map(|t| q[i][t] * k[j][t]).sum();
                        logits[j] = dot / (dh as f64).sqrt();
                    }
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                let mut exps = vec![0.0; s];
                for j in 0..s {
                    if logits[j].is_finite() {
                        exps[j] = (logits[j] - max).exp();
                        sum += exps[j];
                    }
                }
                for j in 0..s {
                    attn[i][j] = exps[j] / sum;
                }
            }
            let mut out = vec![vec![0.0; dh]; nq];
            for i in 0..nq {
                for t in 0..dh {
                    out[i][t] = (0..s).map(|j| attn[i][j] * v[j][t]).sum();
                }
            }
            head_outs.push(out);
            attn_all.push(attn);
        }
        // concat then project through w_o
        let mut result = vec![vec![0.0; d]; nq];
        for i in 0..nq {
            let mut cat = Vec::with_capacity(n * dh);
            for h in 0..n {
                cat.extend_from_slice(&head_outs[h][i]);
            }
            for j in 0..d {
                result[i][j] = (0..n * dh).map(|t| cat[t] * p.w_o.at2(t, j)).sum();
            }
        }
        (result, attn_all)
    }

    fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    #[test]
    fn single_position_attention_is_one() {
        let mut rng = seeded_rng(42);
        let p = AttentionParameters::init(4, 2, &mut rng).unwrap();
        let x = Tensor::randn(vec![1, 4], 1.0, &mut rng);
        let rec = p.decode(&x, &x, None).unwrap();
        for h in 0..2 {
            assert_eq!(rec.weight(h, 0, 0), 1.0);
        }
        // Output equals the value projection concatenated through w_o.
        let (expect, _) = oracle_attention(&rows_of(&x), &rows_of(&x), None, &p);
        for j in 0..4 {
            assert!((rec.outputs.at2(0, j) - expect[0][j]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_give_uniform_attention() {
        let mut rng = seeded_rng(43);
        let p = AttentionParameters::init(4, 2, &mut rng).unwrap();
        let row: Vec<f64> = (0..4).map(|i| i as f64 * 0.3 - 0.5).collect();
        let x = Tensor::from_rows(&[row.clone(), row.clone(), row]);
        let rec = p.decode(&x, &x, None).unwrap();
        for h in 0..2 {
            for q in 0..3 {
                for j in 0..3 {
                    assert!((rec.weight(h, q, j) - 1.0 / 3.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mhsa_matches_straight_line_oracle() {
        let mut rng = seeded_rng(44);
        let p = AttentionParameters::init(4, 2, &mut rng).unwrap();
        let x = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let got = p.mhsa(&x, None).unwrap();
        let (expect, _) = oracle_attention(&rows_of(&x), &rows_of(&x), None, &p);
        for i in 0..3 {
            for j in 0..4 {
                assert!(
                    (got.at2(i, j) - expect[i][j]).abs() < 1e-10,
                    "mismatch at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn decode_matches_straight_line_oracle() {
        let mut rng = seeded_rng(45);
        let p = AttentionParameters::init(4, 2, &mut rng).unwrap();
        let tokens = Tensor::randn(vec![2, 4], 1.0, &mut rng);
        let memory = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let rec = p.decode(&tokens, &memory, None).unwrap();
        let (expect, attn) = oracle_attention(&rows_of(&tokens), &rows_of(&memory), None, &p);
        for i in 0..2 {
            for j in 0..4 {
                assert!((rec.outputs.at2(i, j) - expect[i][j]).abs() < 1e-10);
            }
        }
        for h in 0..2 {
            for i in 0..2 {
                for j in 0..3 {
                    assert!((rec.weight(h, i, j) - attn[h][i][j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn encode_residual_with_zero_output_projection_is_identity() {
        let mut rng = seeded_rng(46);
        let mut p = AttentionParameters::init(4, 2, &mut rng).unwrap();
        p.w_o = Tensor::zeros(vec![4, 4]);
        let x = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let enc = p.encode(&x, None).unwrap();
        assert_eq!(enc, x);
    }

    #[test]
    fn encode_minus_input_equals_mhsa() {
        let mut rng = seeded_rng(47);
        let p = AttentionParameters::init(6, 3, &mut rng).unwrap();
        let x = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        let enc = p.encode(&x, None).unwrap();
        let att = p.mhsa(&x, None).unwrap();
        for i in 0..x.len() {
            assert!((enc.data()[i] - x.data()[i] - att.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_decoder_is_the_same_function_for_both_paths() {
        let mut rng = seeded_rng(48);
        let p = AttentionParameters::init(8, 4, &mut rng).unwrap();
        let tokens = Tensor::randn(vec![4, 8], 0.02, &mut rng);
        let memory = Tensor::randn(vec![5, 8], 1.0, &mut rng);
        // "image path" and "text path" are the same call with shared params
        let a = p.decode(&tokens, &memory, None).unwrap();
        let b = p.decode(&tokens, &memory, None).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.outputs, b.outputs);
    }

    #[test]
    fn rows_are_stochastic_and_masked_keys_get_zero() {
        let mut rng = seeded_rng(49);
        let p = AttentionParameters::init(4, 2, &mut rng).unwrap();
        let tokens = Tensor::randn(vec![3, 4], 0.02, &mut rng);
        let memory = Tensor::randn(vec![6, 4], 1.0, &mut rng);
        let mask = vec![true, false, true, true, false, true];
        let rec = p.decode(&tokens, &memory, Some(&mask)).unwrap();
        for h in 0..2 {
            for q in 0..3 {
                let mut sum = 0.0;
                for j in 0..6 {
                    let w = rec.weight(h, q, j);
                    if !mask[j] {
                        assert_eq!(w, 0.0);
                    }
                    sum += w;
                }
                assert!((sum - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn key_input_scaling_scales_logits_linearly() {
        let mut rng = seeded_rng(50);
        let p = AttentionParameters::init(4, 2, &mut rng).unwrap();
        let q_in = Tensor::randn(vec![2, 4], 1.0, &mut rng);
        let k_in = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let mut k_scaled = k_in.clone();
        for v in k_scaled.data_mut() {
            *v *= 2.5;
        }
        let l1 = p.attention_logits(0, &q_in, &k_in).unwrap();
        let l2 = p.attention_logits(0, &q_in, &k_scaled).unwrap();
        for i in 0..l1.len() {
            assert!((l2.data()[i] - 2.5 * l1.data()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn all_masked_memory_errors() {
        let mut rng = seeded_rng(51);
        let p = AttentionParameters::init(4, 2, &mut rng).unwrap();
        let tokens = Tensor::randn(vec![2, 4], 0.02, &mut rng);
        let memory = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let err = p.decode(&tokens, &memory, Some(&[false, false, false]));
        assert!(matches!(err, Err(Error::AllMasked(_))));
    }

    #[test]
    fn dimension_mismatch_errors() {
        let mut rng = seeded_rng(52);
        let p = AttentionParameters::init(4, 2, &mut rng).unwrap();
        let x = Tensor::randn(vec![3, 6], 1.0, &mut rng);
        assert!(p.mhsa(&x, None).is_err());
    }

    #[test]
    fn head_count_must_divide_dim() {
        let mut rng = seeded_rng(53);
        assert!(AttentionParameters::init(5, 2, &mut rng).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded_rng(54);
        let p = AttentionParameters::init(4, 2, &mut rng).unwrap();
        let x0 = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let coef = Tensor::randn(vec![3, 4], 1.0, &mut rng);

        let eval = |x: &Tensor, grad: bool| -> (f64, Option<Tensor>) {
            let mut tape = Tape::new();
            let xv = tape.free_param(x.clone());
            let vars = p.as_vars(&mut tape);
            let out = mhsa_graph(&mut tape, xv, None, &vars).unwrap();
            let c = tape.leaf(coef.clone());
            let prod = tape.mul(out, c).unwrap();
            let s = tape.sum_all(prod);
            let val = tape.value(s).item();
            if grad {
                let grads = tape.backward(s);
                (val, grads[xv.id()].clone())
            } else {
                (val, None)
            }
        };

        let (_, analytic) = eval(&x0, true);
        let analytic = analytic.unwrap();
        let eps = 1e-5;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= eps;
            let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * eps);
            let an = analytic.data()[i];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!(
                ((an - fd) / denom).abs() < 1e-4,
                "mhsa grad mismatch at {i}: {an} vs {fd}"
            );
        }
    }

    #[test]
    fn decode_gradients_match_finite_differences() {
        let mut rng = seeded_rng(55);
        let p = AttentionParameters::init(4, 2, &mut rng).unwrap();
        let tokens0 = Tensor::randn(vec![2, 4], 0.5, &mut rng);
        let memory0 = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let coef = Tensor::randn(vec![2, 4], 1.0, &mut rng);

        let eval = |tok: &Tensor, mem: &Tensor, grad: bool| -> (f64, Option<(Tensor, Tensor)>) {
            let mut tape = Tape::new();
            let tv = tape.free_param(tok.clone());
            let mv = tape.free_param(mem.clone());
            let vars = p.as_vars(&mut tape);
            let out = decode_graph(&mut tape, tv, mv, None, &vars).unwrap();
            let c = tape.leaf(coef.clone());
            let prod = tape.mul(out.output, c).unwrap();
            let s = tape.sum_all(prod);
            let val = tape.value(s).item();
            if grad {
                let grads = tape.backward(s);
                (
                    val,
                    Some((
                        grads[tv.id()].clone().unwrap(),
                        grads[mv.id()].clone().unwrap(),
                    )),
                )
            } else {
                (val, None)
            }
        };

        let (_, analytic) = eval(&tokens0, &memory0, true);
        let (dtok, dmem) = analytic.unwrap();
        let eps = 1e-5;
        for i in 0..tokens0.len() {
            let mut plus = tokens0.clone();
            plus.data_mut()[i] += eps;
            let mut minus = tokens0.clone();
            minus.data_mut()[i] -= eps;
            let fd = (eval(&plus, &memory0, false).0 - eval(&minus, &memory0, false).0)
                / (2.0 * eps);
            let an = dtok.data()[i];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!(((an - fd) / denom).abs() < 1e-4, "token grad {i}: {an} vs {fd}");
        }
        for i in 0..memory0.len() {
            let mut plus = memory0.clone();
            plus.data_mut()[i] += eps;
            let mut minus = memory0.clone();
            minus.data_mut()[i] -= eps;
            let fd = (eval(&tokens0, &plus, false).0 - eval(&tokens0, &minus, false).0)
                / (2.0 * eps);
            let an = dmem.data()[i];
            let denom = an.abs().max(fd.abs()).max(1e-8);
            assert!(((an - fd) / denom).abs() < 1e-4, "memory grad {i}: {an} vs {fd}");
        }
    }
}
